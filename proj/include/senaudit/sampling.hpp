#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "senaudit/csv.hpp"
#include "senaudit/digest.hpp"
#include "senaudit/error.hpp"
#include "senaudit/preference.hpp"
#include "senaudit/timestamp.hpp"

namespace senaudit {

/// Public entropy from the seed ceremony and its canonical 32-byte form.
struct Seed {
  std::string raw_entropy;
  Digest canonical_seed{};
  std::optional<Timestamp> drawn_at;
};

/// Canonical seed = SHA-256 of the transcript's UTF-8 bytes. An empty
/// transcript is rejected: it would make every selection predictable.
inline Seed seed_from_ceremony(std::string_view transcript,
                               std::optional<Timestamp> drawn_at = std::nullopt) {
  if (transcript.empty()) throw Error(ErrorCode::domain, "seed transcript is empty");
  return Seed{std::string(transcript), sha256(transcript), drawn_at};
}

/// SHA-256 in counter mode. Draw i of scope s is the first eight bytes,
/// big-endian, of SHA-256(canonical_seed || s || be64(i)). One stream per
/// (seed, scope); a batch is the default scope.
class SelectionStream {
 public:
  SelectionStream(const Seed& seed, std::string scope)
      : seed_(seed.canonical_seed), scope_(std::move(scope)) {}
  SelectionStream(const Digest& canonical_seed, std::string scope)
      : seed_(canonical_seed), scope_(std::move(scope)) {}

  const std::string& scope() const { return scope_; }
  std::uint64_t draw_counter() const { return counter_; }

  /// The raw 64-bit draw.
  std::uint64_t next_word() {
    if (counter_ == std::numeric_limits<std::uint64_t>::max()) {
      throw Error(ErrorCode::domain, "selection stream exhausted");
    }
    std::uint8_t ctr[8];
    for (int i = 0; i < 8; ++i) ctr[i] = static_cast<std::uint8_t>(counter_ >> (56 - 8 * i));
    Sha256 h;
    h.update(seed_).update(scope_).update(ctr);
    auto d = h.finish();
    ++counter_;
    std::uint64_t w = 0;
    for (int i = 0; i < 8; ++i) w = w << 8 | d[i];
    return w;
  }

  /// u = w / 2^64 truncated to the 53-bit double grid, so u is exactly
  /// floor(w / 2^11) * 2^-53 and always < 1.
  double next_uniform() { return static_cast<double>(next_word() >> 11) * 0x1p-53; }

 private:
  Digest seed_;
  std::string scope_;
  std::uint64_t counter_ = 0;
};

inline void check_probability(double p) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw Error(ErrorCode::domain, "selection probability must lie in [0, 1]");
  }
}

/// Smallest positive draw; u = 0 is remapped here before taking a log.
inline constexpr double kSmallestDraw = 0x1p-53;

/// Gap to the next selected ballot: 1 + floor(ln u / ln(1 - p)).
/// Returns nullopt when the gap exceeds `limit` (nothing more is selected).
inline std::optional<std::uint64_t> geometric_gap(double u, double p, std::uint64_t limit) {
  if (p >= 1.0) return 1;
  if (u <= 0.0) u = kSmallestDraw;
  double steps = std::floor(std::log(u) / std::log1p(-p));
  if (!(steps < static_cast<double>(limit))) return std::nullopt;
  return static_cast<std::uint64_t>(steps) + 1;
}

/// Bernoulli(p) selection of indices 0..n-1 by geometric skipping: from
/// position -1, advance by geometric_gap(next_uniform) and select each index
/// landed on while it is below n. Output is strictly increasing.
inline std::vector<std::uint64_t> geometric_skip(SelectionStream& stream, double p,
                                                 std::uint64_t batch_size) {
  check_probability(p);
  std::vector<std::uint64_t> selected;
  if (p == 0.0 || batch_size == 0) return selected;
  std::uint64_t next = 0;  // first index after the last selection
  for (;;) {
    auto gap = geometric_gap(stream.next_uniform(), p, batch_size - next);
    if (!gap) break;
    std::uint64_t index = next + *gap - 1;
    if (index >= batch_size) break;
    selected.push_back(index);
    next = index + 1;
    if (next >= batch_size) break;
  }
  return selected;
}

/// Per-ballot Bernoulli selection on the integer path: one draw per ballot,
/// selected iff the 64-bit draw is below p * 2^64.
inline std::vector<std::uint64_t> bernoulli_select(SelectionStream& stream, double p,
                                                   std::uint64_t batch_size) {
  check_probability(p);
  std::vector<std::uint64_t> selected;
  if (p == 0.0) return selected;
  const bool all = p >= 1.0;
  const long double scaled = std::ldexp(static_cast<long double>(p), 64);
  const std::uint64_t threshold = all ? 0 : static_cast<std::uint64_t>(std::ceil(scaled));
  for (std::uint64_t i = 0; i < batch_size; ++i) {
    std::uint64_t w = stream.next_word();
    if (all || w < threshold) selected.push_back(i);
  }
  return selected;
}

/// Selection for one batch under the default per-batch scoping.
inline std::vector<std::uint64_t> select_from_batch(const Seed& seed, double p, const Batch& batch,
                                                    std::optional<std::string> scope = {}) {
  SelectionStream stream(seed, scope.value_or(batch.batch_id()));
  return geometric_skip(stream, p, batch.size());
}

/// Where a claimed selection first departs from the recomputed one.
struct SelectionDiff {
  std::vector<std::uint64_t> missing;     // recomputed but not claimed
  std::vector<std::uint64_t> unexpected;  // claimed but not recomputed
  bool duplicates = false;

  bool empty() const { return missing.empty() && unexpected.empty() && !duplicates; }
};

inline SelectionDiff diff_selection(std::vector<std::uint64_t> expected,
                                    std::vector<std::uint64_t> claimed) {
  SelectionDiff d;
  std::sort(expected.begin(), expected.end());
  std::sort(claimed.begin(), claimed.end());
  d.duplicates = std::adjacent_find(claimed.begin(), claimed.end()) != claimed.end();
  claimed.erase(std::unique(claimed.begin(), claimed.end()), claimed.end());
  std::set_difference(expected.begin(), expected.end(), claimed.begin(), claimed.end(),
                      std::back_inserter(d.missing));
  std::set_difference(claimed.begin(), claimed.end(), expected.begin(), expected.end(),
                      std::back_inserter(d.unexpected));
  return d;
}

/// Throws `ordering_violation` unless the batch was committed strictly
/// before the seed was drawn.
inline void check_commit_precedes_seed(const Batch& batch, const Seed& seed) {
  if (!batch.commitment()) {
    throw Error(ErrorCode::ordering_violation,
                "batch " + batch.batch_id() + " was not committed before the seed");
  }
  if (seed.drawn_at && !(batch.commitment()->at < *seed.drawn_at)) {
    throw Error(ErrorCode::ordering_violation,
                "batch " + batch.batch_id() + " committed at " + batch.commitment()->at.iso8601() +
                    ", not before the seed drawn at " + seed.drawn_at->iso8601() +
                    " (selection was predictable)");
  }
}

/// Scrutineer check: recomputes the selection and compares it with the
/// claimed indices as sets (order is canonicalised ascending).
inline bool verify_selection(const Seed& seed, double p, const Batch& batch,
                             std::span<const std::uint64_t> claimed,
                             std::optional<std::string> scope = {}) {
  check_commit_precedes_seed(batch, seed);
  auto expected = select_from_batch(seed, p, batch, std::move(scope));
  return diff_selection(std::move(expected), {claimed.begin(), claimed.end()}).empty();
}

/// One line of the published selection file:
/// `batch_id,p,seed_digest,index,index,...`.
struct PublishedSelection {
  std::string batch_id;
  double p = 0.0;
  Digest seed_digest{};
  std::vector<std::uint64_t> indices;

  bool operator==(const PublishedSelection&) const = default;
};

inline std::string format_probability(double p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", p);
  return buf;
}

inline std::string format_selection_line(const PublishedSelection& s) {
  csv::Record fields{s.batch_id, format_probability(s.p), to_hex(s.seed_digest)};
  for (auto i : s.indices) fields.push_back(std::to_string(i));
  return csv::format_record(fields);
}

inline std::vector<PublishedSelection> parse_selection_file(std::string_view text) {
  std::vector<PublishedSelection> out;
  for (const auto& rec : csv::parse(text)) {
    if (rec.size() < 3) throw Error(ErrorCode::format, "selection line needs batch_id,p,seed");
    PublishedSelection s;
    s.batch_id = rec[0];
    try {
      std::size_t used = 0;
      s.p = std::stod(rec[1], &used);
      if (used != rec[1].size()) throw std::invalid_argument("trailing");
      for (std::size_t i = 3; i < rec.size(); ++i) {
        if (rec[i].empty() || rec[i].find_first_not_of("0123456789") != std::string::npos) {
          throw std::invalid_argument("index");
        }
        s.indices.push_back(std::stoull(rec[i]));
      }
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::format, "malformed selection line for batch " + s.batch_id);
    }
    s.seed_digest = digest_from_hex(rec[2]);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace senaudit
