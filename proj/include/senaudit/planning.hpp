#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "senaudit/beta.hpp"
#include "senaudit/csv.hpp"
#include "senaudit/error.hpp"
#include "senaudit/preference.hpp"

namespace senaudit {

struct SamplingPlan {
  std::string contest_id;
  std::string jurisdiction;
  std::int64_t population = 0;  // ballots cast, or enrolment as a proxy
  std::int64_t target = 0;
  double assurance = 0.999;
  double p = 0.0;
  double expected_sample = 0.0;
};

inline constexpr double kSelectionTolerance = 1e-12;

/// Smallest p with Pr(Binomial(n, p) >= t) >= assurance, to within 1e-12.
///
/// The tail is I_p(t, n - t + 1), increasing in p, so bisection applies. The
/// starting bracket [t/n * 1e-3, min(1, 10 t/n)] is widened until it
/// straddles the assurance level.
inline double min_selection_probability(std::int64_t n, std::int64_t t, double assurance) {
  if (!(assurance > 0.0 && assurance < 1.0)) {
    throw Error(ErrorCode::domain, "assurance must lie strictly between 0 and 1");
  }
  if (t < 0 || n < 0) throw Error(ErrorCode::domain, "sample sizes must be nonnegative");
  if (t == 0) return 0.0;
  if (t > n) {
    throw Error(ErrorCode::infeasible, "target " + std::to_string(t) + " exceeds population " +
                                           std::to_string(n));
  }
  auto tail = [&](double p) { return numeric::binomial_upper_tail(n, t, p); };

  const double ratio = static_cast<double>(t) / static_cast<double>(n);
  double lo = ratio * 1e-3;
  double hi = std::min(1.0, 10.0 * ratio);
  while (lo > 0.0 && tail(lo) >= assurance) lo /= 10.0;
  while (hi < 1.0 && tail(hi) < assurance) hi = std::min(1.0, hi * 2.0);

  while (hi - lo > kSelectionTolerance) {
    const double mid = lo + (hi - lo) / 2.0;
    if (mid <= lo || mid >= hi) break;
    if (tail(mid) >= assurance) hi = mid;
    else lo = mid;
  }
  return hi;
}

enum class AllocationStrategy { equal_split, single_contest, custom_weights };

inline SamplingPlan make_plan(const Contest& contest, std::int64_t population, std::int64_t target,
                              double assurance) {
  SamplingPlan plan;
  plan.contest_id = contest.contest_id;
  plan.jurisdiction = contest.jurisdiction_name;
  plan.population = population;
  plan.target = target;
  plan.assurance = assurance;
  plan.p = min_selection_probability(population, target, assurance);
  plan.expected_sample = static_cast<double>(population) * plan.p;
  return plan;
}

/// Splits an overall sample floor across contests. Targets always sum to at
/// least the floor. `population` overrides a contest's enrolment when the
/// actual number of ballots cast is known.
inline std::vector<SamplingPlan> allocate_targets(
    std::span<const Contest> contests, std::int64_t overall_floor, AllocationStrategy strategy,
    std::span<const double> weights = {}, double assurance = 0.999,
    const std::map<std::string, std::int64_t>& population = {}) {
  if (contests.empty()) throw Error(ErrorCode::domain, "no contests to plan");
  if (overall_floor < 1) throw Error(ErrorCode::domain, "overall floor must be at least 1");

  const auto k = static_cast<std::int64_t>(contests.size());
  std::vector<std::int64_t> targets(contests.size());
  switch (strategy) {
    case AllocationStrategy::equal_split:
      std::fill(targets.begin(), targets.end(), (overall_floor + k - 1) / k);
      break;
    case AllocationStrategy::single_contest:
      if (k != 1) throw Error(ErrorCode::domain, "single_contest strategy needs exactly one contest");
      targets[0] = overall_floor;
      break;
    case AllocationStrategy::custom_weights: {
      if (weights.size() != contests.size()) {
        throw Error(ErrorCode::domain, "need one weight per contest");
      }
      double total = 0.0;
      for (double w : weights) {
        if (!(w > 0.0) || !std::isfinite(w)) throw Error(ErrorCode::domain, "weights must be positive");
        total += w;
      }
      for (std::size_t i = 0; i < targets.size(); ++i) {
        targets[i] = static_cast<std::int64_t>(
            std::ceil(static_cast<double>(overall_floor) * weights[i] / total));
      }
      // ceil() already covers the floor up to rounding noise in the division.
      std::int64_t sum = 0;
      for (auto t : targets) sum += t;
      for (std::size_t i = 0; sum < overall_floor; i = (i + 1) % targets.size(), ++sum) ++targets[i];
      break;
    }
  }

  std::vector<SamplingPlan> plans;
  plans.reserve(contests.size());
  for (std::size_t i = 0; i < contests.size(); ++i) {
    const auto& c = contests[i];
    auto it = population.find(c.contest_id);
    std::int64_t n = it != population.end() ? it->second : c.enrolled_voters;
    plans.push_back(make_plan(c, n, targets[i], assurance));
  }
  return plans;
}

/// Extra ballots to draw uniformly from all cast ballots when the Bernoulli
/// sample fell short of its target.
inline std::int64_t top_up_draw(const SamplingPlan& plan, std::int64_t achieved) {
  return achieved >= plan.target ? 0 : plan.target - achieved;
}

inline std::string format_fixed(double value, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, value);
  return buf;
}

/// One row per contest; p at nine decimals.
inline std::string format_plan_csv(std::span<const SamplingPlan> plans) {
  std::string out = csv::format_record(
      {"jurisdiction", "contest_id", "population", "target", "assurance", "p", "expected_sample"});
  for (const auto& plan : plans) {
    out += csv::format_record({plan.jurisdiction, plan.contest_id, std::to_string(plan.population),
                               std::to_string(plan.target), format_fixed(plan.assurance, 6),
                               format_fixed(plan.p, 9), format_fixed(plan.expected_sample, 1)});
  }
  return out;
}

}  // namespace senaudit
