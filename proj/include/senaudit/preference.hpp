#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "senaudit/csv.hpp"
#include "senaudit/digest.hpp"
#include "senaudit/error.hpp"
#include "senaudit/timestamp.hpp"

namespace senaudit {

/// One jurisdiction's Senate contest.
struct Contest {
  std::string contest_id;
  std::string jurisdiction_name;
  std::vector<std::string> candidates;  // ballot-paper order
  int seats = 1;
  std::int64_t enrolled_voters = 0;

  void validate() const {
    std::set<std::string> seen;
    for (const auto& c : candidates) {
      if (c.empty()) throw Error(ErrorCode::schema, "empty candidate identifier");
      if (!seen.insert(c).second) throw Error(ErrorCode::schema, "duplicate candidate " + c);
    }
    if (seats < 1 || static_cast<std::size_t>(seats) >= candidates.size()) {
      throw Error(ErrorCode::schema, "contest " + contest_id +
                                         " needs 1 <= seats < number of candidates");
    }
    if (enrolled_voters < 0) throw Error(ErrorCode::schema, "negative enrolment");
  }

  std::optional<std::size_t> index_of(std::string_view candidate) const {
    auto it = std::find(candidates.begin(), candidates.end(), candidate);
    if (it == candidates.end()) return std::nullopt;
    return static_cast<std::size_t>(it - candidates.begin());
  }
};

inline void to_json(nlohmann::json& j, const Contest& c) {
  j = {{"contest_id", c.contest_id},
       {"jurisdiction", c.jurisdiction_name},
       {"candidates", c.candidates},
       {"seats", c.seats},
       {"enrolled_voters", c.enrolled_voters}};
}

inline void from_json(const nlohmann::json& j, Contest& c) {
  c.contest_id = j.at("contest_id").get<std::string>();
  c.jurisdiction_name = j.value("jurisdiction", std::string{});
  c.candidates = j.at("candidates").get<std::vector<std::string>>();
  c.seats = j.at("seats").get<int>();
  c.enrolled_voters = j.value("enrolled_voters", std::int64_t{0});
  c.validate();
}

enum class Source { digitised, human_read };

/// Parses a rank cell. Only plain positive decimal integers are ranks;
/// anything else is an unusable mark.
inline std::optional<int> parse_rank(std::string_view cell) {
  if (cell.empty() || cell.size() > 6) return std::nullopt;
  int value = 0;
  for (char c : cell) {
    if (c < '0' || c > '9') return std::nullopt;
    value = value * 10 + (c - '0');
  }
  if (value == 0) return std::nullopt;
  return value;
}

/// A ballot's marks, one cell per contest candidate in ballot-paper order.
/// Cells are kept verbatim (including malformed marks); the counted part of
/// the ballot is its maximal valid prefix: rank 1, 2, 3, ... each held by
/// exactly one candidate, stopping at the first missing or duplicated rank.
class PreferenceSequence {
 public:
  PreferenceSequence() = default;
  explicit PreferenceSequence(std::vector<std::string> cells, Source source = Source::digitised)
      : cells_(std::move(cells)), source_(source) {}

  /// Builds a sequence from a candidate -> rank map. Throws `schema` for a
  /// candidate outside the contest.
  static PreferenceSequence from_ranks(const Contest& contest,
                                       const std::map<std::string, int>& ranks,
                                       Source source = Source::human_read) {
    std::vector<std::string> cells(contest.candidates.size());
    for (const auto& [candidate, rank] : ranks) {
      auto idx = contest.index_of(candidate);
      if (!idx) throw Error(ErrorCode::schema, "unknown candidate " + candidate);
      cells[*idx] = std::to_string(rank);
    }
    return PreferenceSequence(std::move(cells), source);
  }

  const std::vector<std::string>& cells() const { return cells_; }
  Source source() const { return source_; }
  std::size_t size() const { return cells_.size(); }

  std::optional<int> rank_at(std::size_t candidate) const {
    return candidate < cells_.size() ? parse_rank(cells_[candidate]) : std::nullopt;
  }

  /// Candidate -> rank for every cell holding a valid rank.
  std::map<std::string, int> rankings(const Contest& contest) const {
    std::map<std::string, int> out;
    for (std::size_t i = 0; i < cells_.size() && i < contest.candidates.size(); ++i) {
      if (auto r = rank_at(i)) out[contest.candidates[i]] = *r;
    }
    return out;
  }

  /// Candidate indices in preference order along the maximal valid prefix.
  std::vector<std::size_t> usable_prefix() const {
    std::map<int, std::vector<std::size_t>> by_rank;
    for (std::size_t i = 0; i < cells_.size(); ++i) {
      if (auto r = rank_at(i)) by_rank[*r].push_back(i);
    }
    std::vector<std::size_t> prefix;
    for (int rank = 1;; ++rank) {
      auto it = by_rank.find(rank);
      if (it == by_rank.end() || it->second.size() != 1) break;
      prefix.push_back(it->second.front());
    }
    return prefix;
  }

  /// The sequence reduced to its usable prefix.
  PreferenceSequence truncated() const {
    std::vector<std::string> cells(cells_.size());
    auto prefix = usable_prefix();
    for (std::size_t r = 0; r < prefix.size(); ++r) cells[prefix[r]] = std::to_string(r + 1);
    return PreferenceSequence(std::move(cells), source_);
  }

  /// Same marks, regardless of who produced them.
  bool same_marks(const PreferenceSequence& other) const { return cells_ == other.cells_; }

  bool operator==(const PreferenceSequence&) const = default;

 private:
  std::vector<std::string> cells_;
  Source source_ = Source::digitised;
};

struct IndexedBallot {
  std::int64_t ballot_index = 0;
  PreferenceSequence preferences;
  std::string origin_label;

  bool operator==(const IndexedBallot&) const = default;
};

struct Commitment {
  Digest digest{};
  Timestamp at;
};

class Batch;
std::string canonical_serialization(const Batch& batch);

/// An ordered, contiguously indexed set of digitised ballots. The ballot
/// list cannot change after construction; a commitment may be attached once.
class Batch {
 public:
  Batch() = default;
  Batch(std::string batch_id, std::string contest_id, std::vector<IndexedBallot> ballots)
      : batch_id_(std::move(batch_id)), contest_id_(std::move(contest_id)),
        ballots_(std::move(ballots)) {
    for (std::size_t i = 0; i < ballots_.size(); ++i) {
      if (ballots_[i].ballot_index != static_cast<std::int64_t>(i)) {
        throw Error(ErrorCode::format, "batch " + batch_id_ + ": ballot_index " +
                                           std::to_string(ballots_[i].ballot_index) +
                                           " at position " + std::to_string(i) +
                                           " (indices must be contiguous from 0)");
      }
    }
  }

  const std::string& batch_id() const { return batch_id_; }
  const std::string& contest_id() const { return contest_id_; }
  const std::vector<IndexedBallot>& ballots() const { return ballots_; }
  std::size_t size() const { return ballots_.size(); }
  const std::optional<Commitment>& commitment() const { return commitment_; }

  /// Attaches the commitment digest; recommitting an already committed batch
  /// returns the stored commitment.
  const Commitment& commit(Timestamp at = Timestamp::now()) {
    if (!commitment_) commitment_ = Commitment{sha256(canonical_serialization(*this)), at};
    return *commitment_;
  }

  /// Reattaches a commitment read back from disk after checking it.
  void restore_commitment(const Commitment& c) {
    if (sha256(canonical_serialization(*this)) != c.digest) {
      throw Error(ErrorCode::integrity, "batch " + batch_id_ + " does not match its commitment");
    }
    commitment_ = c;
  }

 private:
  std::string batch_id_;
  std::string contest_id_;
  std::vector<IndexedBallot> ballots_;
  std::optional<Commitment> commitment_;
};

/// `ballot_index,origin_label,cell_1,...,cell_m` per ballot, LF-terminated,
/// no header. This is the byte string the commitment digest covers.
inline std::string canonical_serialization(const Batch& batch) {
  std::string out;
  csv::Record fields;
  for (const auto& b : batch.ballots()) {
    fields.clear();
    fields.push_back(std::to_string(b.ballot_index));
    fields.push_back(b.origin_label);
    for (const auto& cell : b.preferences.cells()) fields.push_back(cell);
    out += csv::format_record(fields);
  }
  return out;
}

inline Digest commit_batch(Batch& batch, Timestamp at = Timestamp::now()) {
  return batch.commit(at).digest;
}

inline std::string preference_header(const Contest& contest) {
  csv::Record header{"ballot_index", "origin"};
  header.insert(header.end(), contest.candidates.begin(), contest.candidates.end());
  return csv::format_record(header);
}

/// Header plus canonical ballot lines: the preference CSV as it is published.
inline std::string to_preference_csv(const Batch& batch, const Contest& contest) {
  return preference_header(contest) + canonical_serialization(batch);
}

/// Reads a preference CSV (`ballot_index,origin,<candidate>...`). Candidate
/// columns may appear in any order; cells are stored in contest order.
inline Batch parse_preference_file(std::string_view bytes, const Contest& contest,
                                   std::string batch_id = "batch") {
  if (bytes.find_first_not_of(" \t\r\n") == std::string_view::npos) {
    throw Error(ErrorCode::empty_batch, "preference file is empty");
  }
  if (bytes.size() >= 3 && static_cast<unsigned char>(bytes[0]) == 0xEF &&
      static_cast<unsigned char>(bytes[1]) == 0xBB && static_cast<unsigned char>(bytes[2]) == 0xBF) {
    bytes.remove_prefix(3);
  }
  auto records = csv::parse(bytes);
  if (records.empty()) throw Error(ErrorCode::empty_batch, "preference file is empty");

  const auto& header = records.front();
  std::optional<std::size_t> index_col, origin_col;
  std::vector<std::optional<std::size_t>> column_candidate(header.size());
  std::vector<bool> candidate_seen(contest.candidates.size(), false);
  for (std::size_t col = 0; col < header.size(); ++col) {
    const auto& name = header[col];
    if (name == "ballot_index") {
      if (index_col) throw Error(ErrorCode::format, "duplicate column 'ballot_index'");
      index_col = col;
    } else if (name == "origin") {
      if (origin_col) throw Error(ErrorCode::format, "duplicate column 'origin'");
      origin_col = col;
    } else {
      auto idx = contest.index_of(name);
      if (!idx) throw Error(ErrorCode::schema, "unknown candidate column '" + name + "'");
      if (candidate_seen[*idx]) throw Error(ErrorCode::format, "duplicate column '" + name + "'");
      candidate_seen[*idx] = true;
      column_candidate[col] = idx;
    }
  }
  if (!index_col) throw Error(ErrorCode::format, "missing column 'ballot_index'");
  if (!origin_col) throw Error(ErrorCode::format, "missing column 'origin'");
  for (std::size_t i = 0; i < contest.candidates.size(); ++i) {
    if (!candidate_seen[i]) {
      throw Error(ErrorCode::format, "missing column '" + contest.candidates[i] + "'");
    }
  }

  std::vector<IndexedBallot> ballots;
  ballots.reserve(records.size() - 1);
  for (std::size_t row = 1; row < records.size(); ++row) {
    const auto& rec = records[row];
    if (rec.size() != header.size()) {
      throw Error(ErrorCode::format, "row " + std::to_string(row) + " has " +
                                         std::to_string(rec.size()) + " fields, expected " +
                                         std::to_string(header.size()));
    }
    IndexedBallot ballot;
    const auto& idx_text = rec[*index_col];
    if (idx_text.empty() || idx_text.find_first_not_of("0123456789") != std::string::npos) {
      throw Error(ErrorCode::format, "row " + std::to_string(row) + ": bad ballot_index '" +
                                         idx_text + "'");
    }
    ballot.ballot_index = std::stoll(idx_text);
    ballot.origin_label = rec[*origin_col];
    std::vector<std::string> cells(contest.candidates.size());
    for (std::size_t col = 0; col < rec.size(); ++col) {
      if (column_candidate[col]) cells[*column_candidate[col]] = rec[col];
    }
    ballot.preferences = PreferenceSequence(std::move(cells), Source::digitised);
    ballots.push_back(std::move(ballot));
  }
  return Batch(std::move(batch_id), contest.contest_id, std::move(ballots));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
}

/// `<batch_id>.commit`: two `key=value` lines, digest then timestamp.
inline std::string format_commit_file(const Commitment& c) {
  return "digest=" + to_hex(c.digest) + "\ntimestamp=" + c.at.iso8601() + "\n";
}

inline Commitment parse_commit_file(std::string_view text) {
  std::optional<Digest> digest;
  std::optional<Timestamp> at;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto key = line.substr(0, eq);
    auto value = line.substr(eq + 1);
    if (key == "digest") digest = digest_from_hex(value);
    else if (key == "timestamp") at = Timestamp::parse(value);
  }
  if (!digest || !at) throw Error(ErrorCode::format, "commit file needs digest and timestamp");
  return {*digest, *at};
}

}  // namespace senaudit
