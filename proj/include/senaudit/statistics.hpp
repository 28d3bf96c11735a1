#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "senaudit/beta.hpp"
#include "senaudit/digest.hpp"
#include "senaudit/error.hpp"
#include "senaudit/sampling.hpp"

namespace senaudit {

/// Error counts from one stage of the audit. `per_ballot` (discrepancies per
/// inspected ballot) and `ballot_ids` are optional detail: the first enables
/// the bootstrap interval, the second lets pooling check disjointness.
struct ErrorSample {
  std::int64_t ballots_inspected = 0;
  std::int64_t ballots_with_error = 0;
  std::int64_t total_rank_discrepancies = 0;
  int stage = 1;
  std::vector<std::int64_t> per_ballot;
  std::vector<std::string> ballot_ids;

  void validate() const {
    if (ballots_inspected < 0 || ballots_with_error < 0 ||
        ballots_with_error > ballots_inspected) {
      throw Error(ErrorCode::domain, "need 0 <= ballots_with_error <= ballots_inspected");
    }
    if ((total_rank_discrepancies == 0) != (ballots_with_error == 0) ||
        total_rank_discrepancies < 0) {
      throw Error(ErrorCode::domain,
                  "rank discrepancies must be zero exactly when no ballot has an error");
    }
    if (stage != 1 && stage != 2) throw Error(ErrorCode::domain, "stage must be 1 or 2");
    if (!per_ballot.empty() &&
        static_cast<std::int64_t>(per_ballot.size()) != ballots_inspected) {
      throw Error(ErrorCode::domain, "per-ballot detail does not match ballots_inspected");
    }
  }

  double error_rate() const {
    return ballots_inspected ? static_cast<double>(ballots_with_error) / ballots_inspected : 0.0;
  }

  /// Builds a sample from per-ballot discrepancy counts.
  static ErrorSample from_counts(std::vector<std::int64_t> counts, int stage = 1) {
    ErrorSample s;
    s.stage = stage;
    s.ballots_inspected = static_cast<std::int64_t>(counts.size());
    for (auto c : counts) {
      if (c < 0) throw Error(ErrorCode::domain, "negative discrepancy count");
      s.total_rank_discrepancies += c;
      s.ballots_with_error += c > 0;
    }
    s.per_ballot = std::move(counts);
    return s;
  }
};

enum class IntervalMethod { clopper_pearson, bonferroni_two_stage };

struct ConfidenceInterval {
  double lower = 0.0;
  double upper = 1.0;
  double point = 0.0;
  double level = 0.95;  // nominal coverage of the whole procedure
  IntervalMethod method = IntervalMethod::clopper_pearson;
};

inline void check_level(double level) {
  if (!(level > 0.0 && level < 1.0)) {
    throw Error(ErrorCode::domain, "confidence level must lie strictly between 0 and 1");
  }
}

/// Exact binomial interval for k errors in n ballots:
/// lower = BetaInv(alpha/2; k, n-k+1), upper = BetaInv(1-alpha/2; k+1, n-k).
inline ConfidenceInterval clopper_pearson(std::int64_t k, std::int64_t n, double level) {
  if (n <= 0) throw Error(ErrorCode::undefined_sample, "no ballots inspected");
  if (k < 0 || k > n) throw Error(ErrorCode::domain, "need 0 <= errors <= sample size");
  check_level(level);
  const double alpha = 1.0 - level;
  const auto kd = static_cast<double>(k);
  const auto nd = static_cast<double>(n);
  ConfidenceInterval ci;
  ci.level = level;
  ci.point = kd / nd;
  ci.lower = k == 0 ? 0.0 : numeric::inverse_incomplete_beta(alpha / 2.0, kd, nd - kd + 1.0);
  ci.upper = k == n ? 1.0 : numeric::inverse_incomplete_beta(1.0 - alpha / 2.0, kd + 1.0, nd - kd);
  return ci;
}

/// Per-stage level when two stages share the error budget (Bonferroni).
inline double bonferroni_stage_level(double overall_level) {
  check_level(overall_level);
  return 1.0 - (1.0 - overall_level) / 2.0;
}

struct TwoStageBreakdown {
  ConfidenceInterval stage1;
  std::optional<ConfidenceInterval> stage2;
  ConfidenceInterval combined;
};

inline void check_poolable(const ErrorSample& first, const ErrorSample& second) {
  first.validate();
  second.validate();
  if (first.stage == second.stage) {
    throw Error(ErrorCode::invalid_pooling, "both samples claim the same stage");
  }
  if (!first.ballot_ids.empty() && !second.ballot_ids.empty()) {
    std::set<std::string> seen(first.ballot_ids.begin(), first.ballot_ids.end());
    for (const auto& id : second.ballot_ids) {
      if (seen.count(id)) {
        throw Error(ErrorCode::invalid_pooling, "ballot " + id + " appears in both stages");
      }
    }
  }
}

/// Two-stage interval: every stage is evaluated at the Bonferroni-adjusted
/// level, and the reported interval is Clopper-Pearson on the pooled counts
/// at that adjusted level. An empty second stage reduces to stage one alone.
inline TwoStageBreakdown two_stage_breakdown(const ErrorSample& stage1, const ErrorSample& stage2,
                                             double overall_level) {
  check_poolable(stage1, stage2);
  const double adjusted = bonferroni_stage_level(overall_level);
  TwoStageBreakdown out;
  out.stage1 = clopper_pearson(stage1.ballots_with_error, stage1.ballots_inspected, adjusted);
  if (stage2.ballots_inspected > 0) {
    out.stage2 = clopper_pearson(stage2.ballots_with_error, stage2.ballots_inspected, adjusted);
  }
  out.combined = clopper_pearson(stage1.ballots_with_error + stage2.ballots_with_error,
                                 stage1.ballots_inspected + stage2.ballots_inspected, adjusted);
  out.combined.level = overall_level;
  out.combined.method = IntervalMethod::bonferroni_two_stage;
  return out;
}

inline ConfidenceInterval two_stage_interval(const ErrorSample& stage1, const ErrorSample& stage2,
                                             double overall_level) {
  return two_stage_breakdown(stage1, stage2, overall_level).combined;
}

/// A confidence interval for the number of ballots with errors.
struct CountInterval {
  std::int64_t lower = 0;
  std::int64_t upper = 0;

  bool operator==(const CountInterval&) const = default;
};

/// Scales a rate interval by the number of cast ballots, rounding both ends up.
inline CountInterval scale_to_counts(const ConfidenceInterval& ci, std::int64_t cast_ballots) {
  if (cast_ballots < 1) throw Error(ErrorCode::domain, "cast ballots must be positive");
  const auto n = static_cast<double>(cast_ballots);
  return {static_cast<std::int64_t>(std::ceil(ci.lower * n)),
          static_cast<std::int64_t>(std::ceil(ci.upper * n))};
}

struct MeanErrorEstimate {
  double mean = 0.0;
  std::optional<std::pair<double, double>> interval;
  int resamples = 0;
};

/// Default stream seed for bootstrap resampling: SHA-256 of a fixed label.
inline Digest default_bootstrap_seed() { return sha256("senaudit bootstrap"); }

inline constexpr int kMinBootstrapResamples = 10'000;

/// Mean rank discrepancies per inspected ballot, with a nonparametric
/// percentile bootstrap interval when per-ballot counts are available.
///
/// Resample r is driven by a Mersenne Twister seeded with draw r of the
/// SHA-256 selection stream (scope "bootstrap"), so every resample is
/// reproducible on its own index.
inline MeanErrorEstimate mean_errors_per_ballot(const ErrorSample& sample, double level = 0.95,
                                                int resamples = kMinBootstrapResamples,
                                                const Digest& seed = default_bootstrap_seed()) {
  sample.validate();
  check_level(level);
  if (sample.ballots_inspected < 1) throw Error(ErrorCode::undefined_sample, "no ballots inspected");
  if (resamples < kMinBootstrapResamples) {
    throw Error(ErrorCode::domain, "bootstrap needs at least 10000 resamples");
  }
  MeanErrorEstimate est;
  est.mean = static_cast<double>(sample.total_rank_discrepancies) /
             static_cast<double>(sample.ballots_inspected);
  if (sample.per_ballot.empty()) return est;

  const auto& counts = sample.per_ballot;
  const auto n = static_cast<std::uint64_t>(counts.size());
  SelectionStream stream(seed, "bootstrap");
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (auto& m : means) {
    std::mt19937_64 rng(stream.next_word());
    std::int64_t total = 0;
    for (std::uint64_t i = 0; i < n; ++i) {
      auto idx = static_cast<std::uint64_t>((static_cast<unsigned __int128>(rng()) * n) >> 64);
      total += counts[idx];
    }
    m = static_cast<double>(total) / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  const double alpha = 1.0 - level;
  const double last = static_cast<double>(resamples - 1);
  auto lo = static_cast<std::size_t>(std::floor(alpha / 2.0 * last));
  auto hi = static_cast<std::size_t>(std::ceil((1.0 - alpha / 2.0) * last));
  est.interval = std::make_pair(means[lo], means[hi]);
  est.resamples = resamples;
  return est;
}

}  // namespace senaudit
