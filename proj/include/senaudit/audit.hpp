#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "senaudit/digest.hpp"
#include "senaudit/error.hpp"
#include "senaudit/planning.hpp"
#include "senaudit/preference.hpp"
#include "senaudit/sampling.hpp"
#include "senaudit/statistics.hpp"
#include "senaudit/stv.hpp"
#include "senaudit/timestamp.hpp"

namespace senaudit {

using json = nlohmann::json;

enum class Phase { setup, batch_processing, analysis, second_pass, concluded };
enum class Scenario { low_enough, too_high, inconclusive };

inline const char* to_string(Phase p) {
  switch (p) {
    case Phase::setup: return "setup";
    case Phase::batch_processing: return "batch_processing";
    case Phase::analysis: return "analysis";
    case Phase::second_pass: return "second_pass";
    case Phase::concluded: return "concluded";
  }
  return "?";
}

inline const char* to_string(Scenario s) {
  switch (s) {
    case Scenario::low_enough: return "low_enough";
    case Scenario::too_high: return "too_high";
    case Scenario::inconclusive: return "inconclusive";
  }
  return "?";
}

inline Scenario scenario_from_string(std::string_view s) {
  if (s == "low_enough") return Scenario::low_enough;
  if (s == "too_high") return Scenario::too_high;
  if (s == "inconclusive") return Scenario::inconclusive;
  throw Error(ErrorCode::format, "unknown scenario " + std::string(s));
}

inline constexpr std::string_view kSecondPassScope = "second-pass";
inline constexpr std::string_view kSecondPassBatch = "@second-pass";

/// A ballot within a committed batch, written `batch_id:index`.
struct BallotRef {
  std::string batch_id;
  std::int64_t index = 0;

  auto operator<=>(const BallotRef&) const = default;

  std::string str() const { return batch_id + ":" + std::to_string(index); }

  static BallotRef parse(std::string_view text) {
    auto colon = text.rfind(':');
    if (colon == std::string_view::npos || colon == 0 || colon + 1 == text.size()) {
      throw Error(ErrorCode::format, "ballot reference must look like batch:index");
    }
    auto idx = text.substr(colon + 1);
    if (idx.find_first_not_of("0123456789") != std::string_view::npos) {
      throw Error(ErrorCode::format, "bad ballot index in " + std::string(text));
    }
    return {std::string(text.substr(0, colon)), std::stoll(std::string(idx))};
  }
};

inline void check_batch_id(std::string_view id) {
  if (id.empty() || id.front() == '.' || id.front() == '@' ||
      id.find_first_not_of("ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789_.-") !=
          std::string_view::npos) {
    throw Error(ErrorCode::format, "batch id '" + std::string(id) +
                                       "' must use letters, digits, '_', '-', '.'");
  }
}

struct RankDiff {
  std::string candidate;
  std::string digitised;
  std::string human_read;

  bool operator==(const RankDiff&) const = default;
};

/// Every candidate whose mark differs between the two readings.
inline std::vector<RankDiff> rank_diffs(const Contest& contest, const PreferenceSequence& digitised,
                                        const PreferenceSequence& human) {
  std::vector<RankDiff> out;
  for (std::size_t i = 0; i < contest.candidates.size(); ++i) {
    const std::string d = i < digitised.size() ? digitised.cells()[i] : std::string{};
    const std::string h = i < human.size() ? human.cells()[i] : std::string{};
    const auto rd = parse_rank(d);
    const auto rh = parse_rank(h);
    const bool same = (rd || rh) ? rd == rh : d == h;
    if (!same) out.push_back({contest.candidates[i], d, h});
  }
  return out;
}

struct Discrepancy {
  BallotRef ballot;
  PreferenceSequence digitised;
  PreferenceSequence human_read;
  std::vector<RankDiff> diffs;
  std::string entered_by;
  Timestamp at;
};

struct Reading {
  PreferenceSequence human;
  std::string operator_id;
  Timestamp at;
  bool correction = false;
  std::int64_t seq = 0;
};

struct MarginRecord {
  std::int64_t vote_changes = 0;
  std::string kind;    // last_round, quota_raise, none, external
  std::string source;  // computed or external
  std::string effect;
};

struct AuditConclusion {
  ConfidenceInterval ci;
  CountInterval ci_counts;
  std::int64_t margin = 0;
  Scenario scenario = Scenario::inconclusive;
  std::string recommendation;
  std::vector<std::string> checklist;
  int stage = 1;
};

/// Exactly one of: upper < margin, lower > margin, or neither.
inline Scenario classify(const CountInterval& ci, std::int64_t margin) {
  if (ci.lower > ci.upper) throw Error(ErrorCode::domain, "interval lower end exceeds upper end");
  if (ci.upper < margin) return Scenario::low_enough;
  if (ci.lower > margin) return Scenario::too_high;
  return Scenario::inconclusive;
}

inline AuditConclusion conclude(const ConfidenceInterval& ci, std::int64_t margin,
                                std::int64_t cast_ballots) {
  AuditConclusion out;
  out.ci = ci;
  out.ci_counts = scale_to_counts(ci, cast_ballots);
  out.margin = margin;
  out.scenario = classify(out.ci_counts, margin);
  switch (out.scenario) {
    case Scenario::low_enough:
      out.recommendation =
          "Conclude the audit and publish the report. The apparent margin is an upper bound, so a "
          "smaller true margin cannot be ruled out.";
      break;
    case Scenario::too_high:
      out.recommendation = "Investigate before certifying the result.";
      out.checklist = {"Characterise the discrepancies found (kind, rank position, candidates)",
                       "Trace which batches, scanners or stages introduced them",
                       "Decide on procedural follow-up such as a recount of affected batches"};
      break;
    case Scenario::inconclusive:
      out.recommendation =
          "Escalate to a second pass that samples uniformly from every ballot cast in the contest.";
      break;
  }
  return out;
}

struct Event {
  std::int64_t seq = 0;
  std::string prev;
  std::string type;
  Timestamp at;
  std::string actor;
  std::optional<std::string> idempotency_key;
  json data = json::object();
  std::string digest;

  json body() const {
    return json{{"seq", seq},
                {"prev", prev},
                {"type", type},
                {"at", at.iso8601()},
                {"actor", actor},
                {"idempotency_key", idempotency_key ? json(*idempotency_key) : json(nullptr)},
                {"data", data}};
  }

  std::string compute_digest() const { return to_hex(sha256(prev + "\n" + body().dump())); }

  json to_json() const {
    auto j = body();
    j["digest"] = digest;
    return j;
  }

  static Event from_json(const json& j) {
    Event e;
    try {
      e.seq = j.at("seq").get<std::int64_t>();
      e.prev = j.at("prev").get<std::string>();
      e.type = j.at("type").get<std::string>();
      e.at = Timestamp::parse(j.at("at").get<std::string>());
      e.actor = j.at("actor").get<std::string>();
      if (!j.at("idempotency_key").is_null()) e.idempotency_key = j["idempotency_key"].get<std::string>();
      e.data = j.at("data");
      e.digest = j.at("digest").get<std::string>();
    } catch (const json::exception& ex) {
      throw Error(ErrorCode::format, std::string("malformed event: ") + ex.what());
    }
    return e;
  }
};

inline const std::string kGenesisDigest(64, '0');

/// Wall clock forced to strictly increase by at least 1 ms per reading.
class MonotonicClock {
 public:
  Timestamp operator()() {
    auto now = Timestamp::now();
    if (now <= last_) now = Timestamp{last_.unix_ms + 1};
    last_ = now;
    return now;
  }

 private:
  Timestamp last_{};
};

using Clock = std::function<Timestamp()>;

struct ReconcileItem {
  std::string severity;  // info, warning, error
  std::string kind;
  std::string subject;
  std::int64_t expected = 0;
  std::int64_t actual = 0;
  std::string message;
};

struct ReconcileReport {
  std::vector<ReconcileItem> items;
  bool clean() const { return items.empty(); }
};

struct LiveStats {
  Phase phase = Phase::setup;
  std::int64_t cast_ballots = 0;
  std::int64_t selected = 0;
  std::int64_t read = 0;
  ErrorSample stage1;
  std::optional<ErrorSample> stage2;
  std::optional<ConfidenceInterval> ci;
  std::optional<CountInterval> ci_counts;
  std::optional<MarginRecord> margin;
  std::optional<Scenario> scenario;
  std::string log_head;
};

struct SessionConfig {
  std::string session_id;
  Contest contest;
  std::int64_t target = 0;
  double assurance = 0.999;
  double level = 0.95;
  std::optional<std::int64_t> population;
};

/// Event-sourced audit session. Every mutation is validated, appended to a
/// hash-chained log and only then applied; replaying the log from scratch
/// rebuilds the same state.
class Session {
 public:
  static Session create(const SessionConfig& cfg, Clock clock, const std::string& actor,
                        std::optional<std::string> idem = {}) {
    Session s(std::move(clock));
    json data{{"session_id", cfg.session_id},
              {"contest", cfg.contest},
              {"target", cfg.target},
              {"assurance", cfg.assurance},
              {"level", cfg.level},
              {"population", cfg.population ? json(*cfg.population) : json(nullptr)}};
    s.append("session_created", std::move(data), actor, std::move(idem));
    return s;
  }

  /// Rebuilds a session from its JSONL log, checking the hash chain and
  /// re-deriving every selection and conclusion.
  static Session replay(std::string_view jsonl, Clock clock = MonotonicClock{}) {
    Session s(std::move(clock));
    std::istringstream in{std::string(jsonl)};
    std::string line;
    std::string prev = kGenesisDigest;
    std::int64_t expect = 0;
    while (std::getline(in, line)) {
      if (line.empty() || line == "\r") continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& ex) {
        throw Error(ErrorCode::format, "event " + std::to_string(expect) + " is not JSON: " + ex.what());
      }
      Event e = Event::from_json(j);
      if (e.seq != expect) {
        throw Error(ErrorCode::integrity, "event sequence gap at " + std::to_string(expect));
      }
      if (e.prev != prev) {
        throw Error(ErrorCode::integrity, "event " + std::to_string(e.seq) + " does not chain to its predecessor");
      }
      if (e.compute_digest() != e.digest) {
        throw Error(ErrorCode::integrity, "event " + std::to_string(e.seq) + " digest mismatch");
      }
      s.apply(e);
      if (e.idempotency_key) s.idem_[*e.idempotency_key] = e.seq;
      prev = e.digest;
      s.events_.push_back(std::move(e));
      ++expect;
    }
    if (s.events_.empty()) throw Error(ErrorCode::format, "event log is empty");
    return s;
  }

  /// Called with each newly appended event (the service persists through it).
  void on_append(std::function<void(const Event&)> sink) { sink_ = std::move(sink); }

  // ---- mutations ---------------------------------------------------------

  const Event& record_turnout(const std::string& place, std::int64_t count, const std::string& actor,
                              std::optional<std::string> idem = {}) {
    return append("turnout_recorded", {{"place", place}, {"count", count}}, actor, std::move(idem));
  }

  const Event& commit_batch(const Batch& batch, std::optional<std::int64_t> first_serial,
                            const std::string& actor, std::optional<std::string> idem = {}) {
    Batch copy = batch;
    json data{{"batch_id", batch.batch_id()},
              {"ballots_csv", to_preference_csv(batch, contest_)},
              {"digest", to_hex(sha256(canonical_serialization(copy)))},
              {"first_serial", first_serial ? json(*first_serial) : json(nullptr)}};
    return append("batch_committed", std::move(data), actor, std::move(idem));
  }

  /// Registers seed-ceremony entropy and selects from every committed batch
  /// not yet sampled (or the listed ones), one stream per batch.
  const Event& register_seed(const std::string& transcript,
                             std::optional<std::vector<std::string>> batches,
                             const std::string& actor, std::optional<std::string> idem = {}) {
    if (auto hit = replayed(idem, "seed_registered")) return *hit;
    if (transcript.empty()) throw Error(ErrorCode::domain, "seed transcript is empty");
    std::vector<std::string> ids;
    if (batches) {
      ids = *batches;
    } else {
      for (const auto& id : batch_order_) {
        if (!selections_.count(id)) ids.push_back(id);
      }
    }
    if (ids.empty()) {
      throw Error(ErrorCode::ordering_violation,
                  "seed registered before any batch was committed (commitment must precede seed)");
    }
    const Seed seed = seed_from_ceremony(transcript);
    json sel = json::array();
    for (const auto& id : ids) {
      auto it = batches_.find(id);
      if (it == batches_.end()) {
        throw Error(ErrorCode::ordering_violation,
                    "batch " + id + " is not committed; commitment must precede the seed");
      }
      sel.push_back({{"batch_id", id},
                     {"indices", select_from_batch(seed, plan_.p, it->second, id)}});
    }
    json data{{"transcript", transcript},
              {"seed_digest", to_hex(seed.canonical_seed)},
              {"p", plan_.p},
              {"selections", sel}};
    return append("seed_registered", std::move(data), actor, std::move(idem));
  }

  /// Records a human reading of a selected ballot. Returns the discrepancy
  /// when the reading differs from the digitised marks.
  std::optional<Discrepancy> submit_reading(const BallotRef& ref, const PreferenceSequence& human,
                                            const std::string& operator_id, bool correction = false,
                                            std::optional<std::string> idem = {}) {
    if (replayed(idem, "reading_submitted")) return discrepancy_for(ref);
    check_reading(ref, human, correction);
    auto it = readings_.find(ref);
    if (it != readings_.end() && it->second.back().human.same_marks(human)) {
      return discrepancy_for(ref);  // identical resubmission
    }
    json data{{"batch_id", ref.batch_id},
              {"ballot_index", ref.index},
              {"cells", human.cells()},
              {"operator", operator_id},
              {"correction", correction}};
    append("reading_submitted", std::move(data), operator_id, std::move(idem));
    return discrepancy_for(ref);
  }

  const Event& set_margin(const MarginRecord& m, const std::string& actor,
                          std::optional<std::string> idem = {}) {
    json data{{"vote_changes", m.vote_changes},
              {"kind", m.kind},
              {"source", m.source},
              {"effect", m.effect}};
    return append("margin_recorded", std::move(data), actor, std::move(idem));
  }

  /// Counts every committed ballot and records the apparent margin.
  MarginRecord compute_margin(const std::string& actor, std::optional<std::string> idem = {},
                              const stv::MarginOptions& opt = {}) {
    if (replayed(idem, "margin_recorded")) return *margin_;
    std::vector<PreferenceSequence> all;
    for (const auto& id : batch_order_) {
      for (const auto& b : batches_.at(id).ballots()) all.push_back(b.preferences);
    }
    auto state = stv::count(contest_, all);
    auto est = stv::apparent_margin(state, opt);
    MarginRecord m{est.vote_changes, stv::to_string(est.kind), "computed", est.effect};
    set_margin(m, actor, std::move(idem));
    return m;
  }

  const Event& begin_analysis(const std::string& actor, std::optional<std::string> idem = {}) {
    return append("analysis_started", json::object(), actor, std::move(idem));
  }

  AuditConclusion conclude(const std::string& actor, std::optional<std::string> idem = {}) {
    if (replayed(idem, "conclusion_reached")) return *conclusion_;
    auto c = evaluate_conclusion();
    json data{{"scenario", to_string(c.scenario)},
              {"lower", c.ci_counts.lower},
              {"upper", c.ci_counts.upper},
              {"margin", c.margin},
              {"stage", c.stage}};
    append("conclusion_reached", std::move(data), actor, std::move(idem));
    return *conclusion_;
  }

  /// Plans a second pass over every cast ballot not already inspected.
  SamplingPlan escalate_second_pass(std::int64_t target, const std::string& actor,
                                    std::optional<std::string> idem = {}) {
    if (replayed(idem, "second_pass_planned")) return *second_plan_;
    append("second_pass_planned", {{"target", target}}, actor, std::move(idem));
    return *second_plan_;
  }

  const Event& register_second_pass_seed(const std::string& transcript, const std::string& actor,
                                         std::optional<std::string> idem = {}) {
    if (auto hit = replayed(idem, "second_pass_seeded")) return *hit;
    if (!second_plan_) throw Error(ErrorCode::invalid_state, "no second pass planned");
    if (second_selection_) throw Error(ErrorCode::invalid_state, "second pass already seeded");
    const Seed seed = seed_from_ceremony(transcript);
    json data{{"transcript", transcript},
              {"seed_digest", to_hex(seed.canonical_seed)},
              {"p", second_plan_->p},
              {"indices", second_pass_indices(seed, second_plan_->p)}};
    return append("second_pass_seeded", std::move(data), actor, std::move(idem));
  }

  // ---- queries -------------------------------------------------------------

  const std::string& id() const { return session_id_; }
  const Contest& contest() const { return contest_; }
  Phase phase() const { return phase_; }
  double level() const { return level_; }
  const SamplingPlan& plan() const { return plan_; }
  const std::optional<SamplingPlan>& second_plan() const { return second_plan_; }
  const std::vector<Event>& events() const { return events_; }
  const std::string& head() const { return events_.empty() ? kGenesisDigest : events_.back().digest; }
  const std::vector<std::string>& batch_ids() const { return batch_order_; }
  const Batch& batch(const std::string& id) const {
    auto it = batches_.find(id);
    if (it == batches_.end()) throw Error(ErrorCode::not_found, "no batch " + id);
    return it->second;
  }
  const std::map<std::string, std::vector<std::uint64_t>>& selections() const { return selections_; }
  const std::map<std::string, std::string>& seed_transcripts() const { return transcripts_; }
  const std::map<std::string, std::int64_t>& turnout() const { return turnout_; }
  const std::optional<MarginRecord>& margin() const { return margin_; }
  const std::optional<AuditConclusion>& conclusion() const { return conclusion_; }
  const std::map<BallotRef, std::vector<Reading>>& readings() const { return readings_; }

  std::int64_t cast_ballots() const {
    std::int64_t n = 0;
    for (const auto& [id, b] : batches_) n += static_cast<std::int64_t>(b.size());
    return n;
  }

  /// Selected ballots in retrieval order: stage one by batch, then the second pass.
  std::vector<BallotRef> selected_ballots() const {
    std::vector<BallotRef> out;
    for (const auto& id : batch_order_) {
      auto it = selections_.find(id);
      if (it == selections_.end()) continue;
      for (auto i : it->second) out.push_back({id, static_cast<std::int64_t>(i)});
    }
    if (second_selection_) out.insert(out.end(), second_selection_->begin(), second_selection_->end());
    return out;
  }

  std::vector<BallotRef> pending_ballots() const {
    std::vector<BallotRef> out;
    for (auto& r : selected_ballots()) {
      if (!readings_.count(r)) out.push_back(r);
    }
    return out;
  }

  const PreferenceSequence& digitised(const BallotRef& ref) const {
    const auto& b = batch(ref.batch_id);
    if (ref.index < 0 || ref.index >= static_cast<std::int64_t>(b.size())) {
      throw Error(ErrorCode::not_found, "no ballot " + ref.str());
    }
    return b.ballots()[static_cast<std::size_t>(ref.index)].preferences;
  }

  /// Discrepancy from the latest reading, if any.
  std::optional<Discrepancy> discrepancy_for(const BallotRef& ref) const {
    auto it = readings_.find(ref);
    if (it == readings_.end()) return std::nullopt;
    const auto& r = it->second.back();
    auto diffs = rank_diffs(contest_, digitised(ref), r.human);
    if (diffs.empty()) return std::nullopt;
    return Discrepancy{ref, digitised(ref), r.human, std::move(diffs), r.operator_id, r.at};
  }

  std::vector<Discrepancy> discrepancies() const {
    std::vector<Discrepancy> out;
    for (const auto& [ref, _] : readings_) {
      if (auto d = discrepancy_for(ref)) out.push_back(std::move(*d));
    }
    return out;
  }

  int stage_of(const BallotRef& ref) const {
    if (second_set_.count(ref)) return 2;
    auto it = selections_.find(ref.batch_id);
    if (it != selections_.end() &&
        std::binary_search(it->second.begin(), it->second.end(), static_cast<std::uint64_t>(ref.index))) {
      return 1;
    }
    return 0;
  }

  ErrorSample error_sample(int stage) const {
    std::vector<std::int64_t> counts;
    std::vector<std::string> ids;
    for (const auto& [ref, rs] : readings_) {
      if (stage_of(ref) != stage) continue;
      counts.push_back(static_cast<std::int64_t>(rank_diffs(contest_, digitised(ref), rs.back().human).size()));
      ids.push_back(ref.str());
    }
    auto s = ErrorSample::from_counts(std::move(counts), stage);
    s.ballot_ids = std::move(ids);
    return s;
  }

  /// Interval for the current evidence: Clopper-Pearson on stage one, or the
  /// Bonferroni two-stage interval once a second pass is armed.
  std::optional<ConfidenceInterval> current_interval() const {
    auto s1 = error_sample(1);
    if (second_plan_) {
      auto s2 = error_sample(2);
      if (s1.ballots_inspected + s2.ballots_inspected == 0) return std::nullopt;
      if (s1.ballots_inspected == 0) {
        return clopper_pearson(s2.ballots_with_error, s2.ballots_inspected,
                               bonferroni_stage_level(level_));
      }
      return two_stage_interval(s1, s2, level_);
    }
    if (s1.ballots_inspected == 0) return std::nullopt;
    return clopper_pearson(s1.ballots_with_error, s1.ballots_inspected, level_);
  }

  LiveStats stats() const {
    LiveStats st;
    st.phase = phase_;
    st.cast_ballots = cast_ballots();
    st.selected = static_cast<std::int64_t>(selected_ballots().size());
    st.read = static_cast<std::int64_t>(readings_.size());
    st.stage1 = error_sample(1);
    if (second_plan_) st.stage2 = error_sample(2);
    st.ci = current_interval();
    if (st.ci && st.cast_ballots > 0) st.ci_counts = scale_to_counts(*st.ci, st.cast_ballots);
    st.margin = margin_;
    if (st.ci_counts && margin_) st.scenario = classify(*st.ci_counts, margin_->vote_changes);
    st.log_head = head();
    return st;
  }

  ReconcileReport reconcile() const {
    ReconcileReport rep;
    std::map<std::string, std::int64_t> ingested;
    for (const auto& [id, b] : batches_) {
      for (const auto& ballot : b.ballots()) ++ingested[ballot.origin_label];
    }
    for (const auto& [place, expected] : turnout_) {
      auto it = ingested.find(place);
      const std::int64_t got = it == ingested.end() ? 0 : it->second;
      if (got == 0) {
        rep.items.push_back({"error", "missing_batch", place, expected, 0,
                             "no ballots ingested for " + place + "; expected " + std::to_string(expected)});
      } else if (got < expected) {
        rep.items.push_back({"warning", "unaccounted_ballots", place, expected, got,
                             std::to_string(expected - got) + " ballots missing from " + place});
      } else if (got > expected) {
        rep.items.push_back({"error", "excess_ballots", place, expected, got,
                             std::to_string(got - expected) + " more ballots than turnout at " + place});
      }
    }
    for (const auto& [place, got] : ingested) {
      if (!turnout_.count(place)) {
        rep.items.push_back({"warning", "no_turnout", place, 0, got,
                             "no turnout recorded for " + place});
      }
    }
    for (const auto& id : batch_order_) {
      if (!selections_.count(id)) {
        rep.items.push_back({"warning", "never_sampled", id, 0,
                             static_cast<std::int64_t>(batches_.at(id).size()),
                             "batch " + id + " was never eligible for sampling"});
      }
    }
    // serial ranges per origin box
    std::map<std::string, std::vector<std::pair<std::int64_t, std::string>>> serials;
    for (const auto& id : batch_order_) {
      auto fs = first_serial_.find(id);
      if (fs == first_serial_.end()) continue;
      for (const auto& ballot : batches_.at(id).ballots()) {
        serials[ballot.origin_label].emplace_back(fs->second + ballot.ballot_index, id);
      }
    }
    for (auto& [origin, list] : serials) {
      std::sort(list.begin(), list.end());
      for (std::size_t i = 1; i < list.size(); ++i) {
        if (list[i].first == list[i - 1].first) {
          rep.items.push_back({"error", "duplicate_ballot", origin, 1, 2,
                               "serial " + std::to_string(list[i].first) + " in box " + origin +
                                   " appears in batches " + list[i - 1].second + " and " + list[i].second});
        }
      }
    }
    return rep;
  }

  std::string log_jsonl() const {
    std::string out;
    for (const auto& e : events_) out += e.to_json().dump() + "\n";
    return out;
  }

  /// Selection lines for every batch plus the second pass (if seeded).
  std::string selection_file() const {
    std::string out;
    for (const auto& id : batch_order_) {
      auto it = selections_.find(id);
      if (it == selections_.end()) continue;
      out += format_selection_line({id, plan_.p, seed_of_.at(id), it->second});
    }
    if (second_selection_) {
      out += format_selection_line({std::string(kSecondPassBatch), second_plan_->p, second_seed_,
                                    second_indices_});
    }
    return out;
  }

  std::string discrepancy_csv() const {
    std::string out = csv::format_record(
        {"ballot", "stage", "candidate", "digitised", "human_read", "entered_by", "at"});
    for (const auto& d : discrepancies()) {
      for (const auto& r : d.diffs) {
        out += csv::format_record({d.ballot.str(), std::to_string(stage_of(d.ballot)), r.candidate,
                                   r.digitised, r.human_read, d.entered_by, d.at.iso8601()});
      }
    }
    return out;
  }

  /// Writes the scrutineer bundle: everything needed to recompute selections
  /// and tallies independently.
  void export_bundle(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    write_file(dir / "contest.json", json(contest_).dump(2) + "\n");
    for (const auto& id : batch_order_) {
      const auto& b = batches_.at(id);
      write_file(dir / (id + ".csv"), to_preference_csv(b, contest_));
      write_file(dir / (id + ".commit"), format_commit_file(*b.commitment()));
    }
    std::string seeds = csv::format_record({"seed_digest", "drawn_at", "file"});
    int k = 0;
    for (const auto& [digest, transcript] : transcripts_) {
      std::string name = "seed-" + std::to_string(k++) + ".txt";
      write_file(dir / name, transcript);
      seeds += csv::format_record({digest, seed_time_.at(digest).iso8601(), name});
    }
    write_file(dir / "seeds.csv", seeds);
    write_file(dir / "selections.csv", selection_file());
    write_file(dir / "discrepancies.csv", discrepancy_csv());
    write_file(dir / "events.jsonl", log_jsonl());
  }

  /// Ballots eligible for the second pass: all committed ballots in commit
  /// order, minus those selected in stage one.
  std::vector<BallotRef> second_pass_population() const {
    std::vector<BallotRef> out;
    for (const auto& id : batch_order_) {
      const auto& b = batches_.at(id);
      for (std::size_t i = 0; i < b.size(); ++i) {
        BallotRef r{id, static_cast<std::int64_t>(i)};
        if (stage_of(r) != 1) out.push_back(std::move(r));
      }
    }
    return out;
  }

 private:
  explicit Session(Clock clock) : clock_(std::move(clock)) {
    if (!clock_) clock_ = MonotonicClock{};
  }

  const Event* replayed(const std::optional<std::string>& idem, std::string_view type) const {
    if (!idem) return nullptr;
    auto it = idem_.find(*idem);
    if (it == idem_.end()) return nullptr;
    const Event& hit = events_[static_cast<std::size_t>(it->second)];
    if (hit.type != type) {
      throw Error(ErrorCode::conflicting_reading,
                  "idempotency key reused for a different operation (" + hit.type + ")");
    }
    return &hit;
  }

  const Event& append(std::string type, json data, const std::string& actor,
                      std::optional<std::string> idem) {
    if (auto hit = replayed(idem, type)) return *hit;
    Event e;
    e.seq = static_cast<std::int64_t>(events_.size());
    e.prev = head();
    e.type = std::move(type);
    e.at = clock_();
    if (!events_.empty() && e.at <= events_.back().at) e.at = Timestamp{events_.back().at.unix_ms + 1};
    e.actor = actor;
    e.idempotency_key = std::move(idem);
    e.data = std::move(data);
    e.digest = e.compute_digest();
    apply(e);
    if (e.idempotency_key) idem_[*e.idempotency_key] = e.seq;
    events_.push_back(std::move(e));
    if (sink_) sink_(events_.back());
    return events_.back();
  }

  void require_phase(std::initializer_list<Phase> allowed, const std::string& what) const {
    for (auto p : allowed) {
      if (phase_ == p) return;
    }
    throw Error(ErrorCode::invalid_state, what + " is not allowed in phase " + to_string(phase_));
  }

  void check_reading(const BallotRef& ref, const PreferenceSequence& human, bool correction) const {
    require_phase({Phase::batch_processing, Phase::second_pass}, "submitting a reading");
    if (stage_of(ref) == 0) {
      throw Error(ErrorCode::not_selected, "ballot " + ref.str() + " was not selected");
    }
    if (human.size() != contest_.candidates.size()) {
      throw Error(ErrorCode::schema, "reading must have one cell per candidate");
    }
    auto it = readings_.find(ref);
    if (it != readings_.end() && !it->second.back().human.same_marks(human) && !correction) {
      throw Error(ErrorCode::conflicting_reading,
                  "ballot " + ref.str() + " already has a different reading; submit a correction");
    }
  }

  std::vector<std::uint64_t> second_pass_indices(const Seed& seed, double p) const {
    SelectionStream stream(seed, std::string(kSecondPassScope));
    return geometric_skip(stream, p, second_pass_population().size());
  }

  AuditConclusion evaluate_conclusion() const {
    require_phase({Phase::analysis, Phase::second_pass}, "concluding");
    if (!margin_) throw Error(ErrorCode::missing_margin, "no margin recorded; conclusion blocked");
    auto ci = current_interval();
    if (!ci) throw Error(ErrorCode::undefined_sample, "no ballots have been read");
    auto c = senaudit::conclude(*ci, margin_->vote_changes, cast_ballots());
    c.stage = second_plan_ ? 2 : 1;
    return c;
  }

  void apply(const Event& e) {
    const auto& d = e.data;
    try {
      if (e.type == "session_created") return apply_created(d);
      if (events_.empty()) throw Error(ErrorCode::integrity, "log must start with session_created");
      if (e.type == "turnout_recorded") return apply_turnout(d);
      if (e.type == "batch_committed") return apply_commit(e);
      if (e.type == "seed_registered") return apply_seed(e);
      if (e.type == "reading_submitted") return apply_reading(e);
      if (e.type == "margin_recorded") return apply_margin(d);
      if (e.type == "analysis_started") return apply_analysis();
      if (e.type == "conclusion_reached") return apply_conclusion(d);
      if (e.type == "second_pass_planned") return apply_second_plan(d);
      if (e.type == "second_pass_seeded") return apply_second_seed(e);
    } catch (const json::exception& ex) {
      throw Error(ErrorCode::format, "event " + e.type + ": " + ex.what());
    }
    throw Error(ErrorCode::format, "unknown event type " + e.type);
  }

  void apply_created(const json& d) {
    if (!events_.empty()) throw Error(ErrorCode::integrity, "session_created must be the first event");
    Contest contest = d.at("contest").get<Contest>();
    const auto target = d.at("target").get<std::int64_t>();
    const auto assurance = d.at("assurance").get<double>();
    const auto level = d.at("level").get<double>();
    check_level(level);
    std::int64_t population = d.at("population").is_null() ? contest.enrolled_voters
                                                           : d["population"].get<std::int64_t>();
    auto plan = make_plan(contest, population, target, assurance);
    session_id_ = d.at("session_id").get<std::string>();
    contest_ = std::move(contest);
    level_ = level;
    plan_ = std::move(plan);
  }

  void apply_turnout(const json& d) {
    require_phase({Phase::setup, Phase::batch_processing}, "recording turnout");
    const auto place = d.at("place").get<std::string>();
    const auto count = d.at("count").get<std::int64_t>();
    if (place.empty()) throw Error(ErrorCode::domain, "polling place is empty");
    if (count < 0) throw Error(ErrorCode::domain, "turnout must be nonnegative");
    if (turnout_.count(place)) throw Error(ErrorCode::invalid_state, "turnout for " + place + " is already locked");
    for (const auto& [id, b] : batches_) {
      for (const auto& ballot : b.ballots()) {
        if (ballot.origin_label == place) {
          throw Error(ErrorCode::ordering_violation,
                      "ballots from " + place + " were ingested before its turnout was recorded");
        }
      }
    }
    turnout_[place] = count;
  }

  void apply_commit(const Event& e) {
    const auto& d = e.data;
    require_phase({Phase::setup, Phase::batch_processing}, "committing a batch");
    const auto id = d.at("batch_id").get<std::string>();
    check_batch_id(id);
    if (batches_.count(id)) throw Error(ErrorCode::invalid_state, "batch " + id + " is already committed");
    Batch b = parse_preference_file(d.at("ballots_csv").get<std::string>(), contest_, id);
    b.commit(e.at);
    if (to_hex(b.commitment()->digest) != d.at("digest").get<std::string>()) {
      throw Error(ErrorCode::integrity, "batch " + id + " does not match its recorded digest");
    }
    if (!d.at("first_serial").is_null()) first_serial_[id] = d["first_serial"].get<std::int64_t>();
    batches_.emplace(id, std::move(b));
    batch_order_.push_back(id);
    phase_ = Phase::batch_processing;
  }

  void apply_seed(const Event& e) {
    const auto& d = e.data;
    require_phase({Phase::batch_processing}, "registering a seed");
    const auto transcript = d.at("transcript").get<std::string>();
    Seed seed = seed_from_ceremony(transcript, e.at);
    const auto digest = to_hex(seed.canonical_seed);
    if (digest != d.at("seed_digest").get<std::string>()) {
      throw Error(ErrorCode::integrity, "seed digest does not match transcript");
    }
    std::map<std::string, std::vector<std::uint64_t>> fresh;
    for (const auto& s : d.at("selections")) {
      const auto id = s.at("batch_id").get<std::string>();
      auto it = batches_.find(id);
      if (it == batches_.end()) {
        throw Error(ErrorCode::ordering_violation, "batch " + id + " is not committed");
      }
      if (selections_.count(id) || fresh.count(id)) {
        throw Error(ErrorCode::invalid_state, "batch " + id + " already has a selection");
      }
      check_commit_precedes_seed(it->second, seed);
      auto expected = select_from_batch(seed, plan_.p, it->second, id);
      if (expected != s.at("indices").get<std::vector<std::uint64_t>>()) {
        throw Error(ErrorCode::integrity, "recorded selection for " + id + " does not match recomputation");
      }
      fresh[id] = std::move(expected);
    }
    if (fresh.empty()) throw Error(ErrorCode::ordering_violation, "seed covers no committed batch");
    for (auto& [id, sel] : fresh) {
      selections_[id] = std::move(sel);
      seed_of_[id] = seed.canonical_seed;
    }
    transcripts_[digest] = transcript;
    seed_time_[digest] = e.at;
  }

  void apply_reading(const Event& e) {
    const auto& d = e.data;
    BallotRef ref{d.at("batch_id").get<std::string>(), d.at("ballot_index").get<std::int64_t>()};
    PreferenceSequence human(d.at("cells").get<std::vector<std::string>>(), Source::human_read);
    const bool correction = d.at("correction").get<bool>();
    check_reading(ref, human, correction);
    readings_[ref].push_back(Reading{std::move(human), d.at("operator").get<std::string>(), e.at,
                                     correction, e.seq});
  }

  void apply_margin(const json& d) {
    require_phase({Phase::batch_processing, Phase::analysis, Phase::second_pass}, "recording a margin");
    MarginRecord m{d.at("vote_changes").get<std::int64_t>(), d.at("kind").get<std::string>(),
                   d.at("source").get<std::string>(), d.at("effect").get<std::string>()};
    if (m.vote_changes < 0) throw Error(ErrorCode::domain, "margin must be nonnegative");
    margin_ = std::move(m);
  }

  void apply_analysis() {
    require_phase({Phase::batch_processing}, "starting analysis");
    if (selections_.empty()) throw Error(ErrorCode::invalid_state, "no ballots have been selected");
    phase_ = Phase::analysis;
  }

  void apply_conclusion(const json& d) {
    auto c = evaluate_conclusion();
    if (to_string(c.scenario) != d.at("scenario").get<std::string>() ||
        c.ci_counts.lower != d.at("lower").get<std::int64_t>() ||
        c.ci_counts.upper != d.at("upper").get<std::int64_t>() ||
        c.margin != d.at("margin").get<std::int64_t>()) {
      throw Error(ErrorCode::integrity, "recorded conclusion does not match recomputation");
    }
    conclusion_ = std::move(c);
    if (conclusion_->scenario != Scenario::inconclusive || phase_ == Phase::second_pass) {
      phase_ = Phase::concluded;
    }
  }

  void apply_second_plan(const json& d) {
    require_phase({Phase::analysis}, "escalating to a second pass");
    if (!conclusion_ || conclusion_->scenario != Scenario::inconclusive) {
      throw Error(ErrorCode::invalid_state, "second pass needs an inconclusive result");
    }
    const auto target = d.at("target").get<std::int64_t>();
    auto population = static_cast<std::int64_t>(second_pass_population().size());
    second_plan_ = make_plan(contest_, population, target, plan_.assurance);
    phase_ = Phase::second_pass;
  }

  void apply_second_seed(const Event& e) {
    const auto& d = e.data;
    require_phase({Phase::second_pass}, "seeding the second pass");
    if (second_selection_) throw Error(ErrorCode::invalid_state, "second pass already seeded");
    const auto transcript = d.at("transcript").get<std::string>();
    Seed seed = seed_from_ceremony(transcript, e.at);
    const auto digest = to_hex(seed.canonical_seed);
    if (digest != d.at("seed_digest").get<std::string>()) {
      throw Error(ErrorCode::integrity, "seed digest does not match transcript");
    }
    for (const auto& id : batch_order_) check_commit_precedes_seed(batches_.at(id), seed);
    auto indices = second_pass_indices(seed, second_plan_->p);
    if (indices != d.at("indices").get<std::vector<std::uint64_t>>()) {
      throw Error(ErrorCode::integrity, "recorded second-pass selection does not match recomputation");
    }
    auto population = second_pass_population();
    std::vector<BallotRef> refs;
    for (auto i : indices) refs.push_back(population[static_cast<std::size_t>(i)]);
    second_selection_ = refs;
    second_set_.insert(refs.begin(), refs.end());
    second_indices_ = std::move(indices);
    second_seed_ = seed.canonical_seed;
    transcripts_[digest] = transcript;
    seed_time_[digest] = e.at;
  }

  Clock clock_;
  std::function<void(const Event&)> sink_;
  std::vector<Event> events_;
  std::map<std::string, std::int64_t> idem_;

  std::string session_id_;
  Contest contest_;
  double level_ = 0.95;
  SamplingPlan plan_;
  Phase phase_ = Phase::setup;
  std::map<std::string, std::int64_t> turnout_;
  std::map<std::string, Batch> batches_;
  std::vector<std::string> batch_order_;
  std::map<std::string, std::int64_t> first_serial_;
  std::map<std::string, std::vector<std::uint64_t>> selections_;
  std::map<std::string, Digest> seed_of_;
  std::map<std::string, std::string> transcripts_;
  std::map<std::string, Timestamp> seed_time_;
  std::map<BallotRef, std::vector<Reading>> readings_;
  std::optional<MarginRecord> margin_;
  std::optional<AuditConclusion> conclusion_;
  std::optional<SamplingPlan> second_plan_;
  std::optional<std::vector<BallotRef>> second_selection_;
  std::set<BallotRef> second_set_;
  std::vector<std::uint64_t> second_indices_;
  Digest second_seed_{};
};

// ---------------------------------------------------------------------------
// Scrutineer verification of an exported bundle

struct BundleCheck {
  std::vector<std::string> mismatches;
  bool ordering_violation = false;
  bool ok() const { return mismatches.empty() && !ordering_violation; }
};

/// Recomputes every selection line in a bundle from the committed batch
/// files and seed transcripts, and diffs against the published indices.
inline BundleCheck verify_bundle(const std::filesystem::path& dir) {
  BundleCheck out;
  Contest contest = json::parse(read_file(dir / "contest.json")).get<Contest>();

  std::map<std::string, std::pair<std::string, Timestamp>> seeds;  // digest -> (transcript, drawn_at)
  auto seed_rows = csv::parse(read_file(dir / "seeds.csv"));
  for (std::size_t i = 1; i < seed_rows.size(); ++i) {
    const auto& r = seed_rows[i];
    if (r.size() != 3) throw Error(ErrorCode::format, "seeds.csv needs seed_digest,drawn_at,file");
    auto transcript = read_file(dir / r[2]);
    if (to_hex(sha256(transcript)) != r[0]) {
      out.mismatches.push_back("seed file " + r[2] + " does not hash to " + r[0]);
      continue;
    }
    seeds[r[0]] = {transcript, Timestamp::parse(r[1])};
  }

  auto lines = parse_selection_file(read_file(dir / "selections.csv"));
  std::vector<std::string> order;
  std::map<std::string, Batch> batches;
  std::set<BallotRef> stage1;
  auto load = [&](const std::string& id) -> Batch& {
    auto it = batches.find(id);
    if (it != batches.end()) return it->second;
    Batch b = parse_preference_file(read_file(dir / (id + ".csv")), contest, id);
    b.restore_commitment(parse_commit_file(read_file(dir / (id + ".commit"))));
    order.push_back(id);
    return batches.emplace(id, std::move(b)).first->second;
  };

  auto report = [&](const std::string& what, const SelectionDiff& diff) {
    if (diff.empty()) return;
    std::string msg = what + ":";
    for (auto i : diff.missing) msg += " missing " + std::to_string(i);
    for (auto i : diff.unexpected) msg += " unexpected " + std::to_string(i);
    if (diff.duplicates) msg += " duplicate indices";
    out.mismatches.push_back(msg);
  };

  for (const auto& line : lines) {
    auto sd = seeds.find(to_hex(line.seed_digest));
    if (sd == seeds.end()) {
      out.mismatches.push_back(line.batch_id + ": no seed transcript for " + to_hex(line.seed_digest));
      continue;
    }
    Seed seed = seed_from_ceremony(sd->second.first, sd->second.second);
    if (line.batch_id == kSecondPassBatch) continue;
    Batch* b = nullptr;
    try {
      b = &load(line.batch_id);
      check_commit_precedes_seed(*b, seed);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::ordering_violation) {
        out.ordering_violation = true;
        out.mismatches.push_back(e.what());
        continue;
      }
      if (e.code() == ErrorCode::integrity) {
        out.mismatches.push_back(e.what());
        continue;
      }
      throw;
    }
    auto expected = select_from_batch(seed, line.p, *b, line.batch_id);
    report(line.batch_id, diff_selection(expected, line.indices));
    for (auto i : line.indices) stage1.insert({line.batch_id, static_cast<std::int64_t>(i)});
  }

  for (const auto& line : lines) {
    if (line.batch_id != kSecondPassBatch) continue;
    auto sd = seeds.find(to_hex(line.seed_digest));
    if (sd == seeds.end()) continue;
    const auto& [transcript, at] = sd->second;
    Seed seed = seed_from_ceremony(transcript, at);
    // population: every committed batch file in the bundle, in commit order
    std::vector<std::pair<Timestamp, std::string>> committed;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
      if (entry.path().extension() != ".commit") continue;
      const auto id = entry.path().stem().string();
      committed.emplace_back(load(id).commitment()->at, id);
    }
    std::sort(committed.begin(), committed.end());
    std::uint64_t population = 0;
    for (const auto& [at_c, id] : committed) {
      const auto& b = batches.at(id);
      if (!(b.commitment()->at < at)) {
        out.ordering_violation = true;
        out.mismatches.push_back("batch " + id + " committed after the second-pass seed");
      }
      for (std::size_t i = 0; i < b.size(); ++i) {
        if (!stage1.count({id, static_cast<std::int64_t>(i)})) ++population;
      }
    }
    SelectionStream stream(seed, std::string(kSecondPassScope));
    report(line.batch_id, diff_selection(geometric_skip(stream, line.p, population), line.indices));
  }
  return out;
}

}  // namespace senaudit
