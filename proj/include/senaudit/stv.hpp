#pragma once

#include <algorithm>
#include <cstdint>
#include <future>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "senaudit/csv.hpp"
#include "senaudit/error.hpp"
#include "senaudit/preference.hpp"

namespace senaudit::stv {

using Rational = boost::multiprecision::cpp_rational;

/// Candidate indices in preference order (a ballot's usable prefix).
using Order = std::vector<std::size_t>;

enum class Status { continuing, elected, excluded };

inline const char* to_string(Status s) {
  switch (s) {
    case Status::continuing: return "continuing";
    case Status::elected: return "elected";
    case Status::excluded: return "excluded";
  }
  return "?";
}

inline std::int64_t floor_int(const Rational& r) {
  using boost::multiprecision::cpp_int;
  cpp_int q = numerator(r) / denominator(r);
  if (r < 0 && q * denominator(r) != numerator(r)) --q;
  return q.convert_to<std::int64_t>();
}

struct RoundRecord {
  int round = 0;
  std::string event;  // first_preferences, surplus, exclusion, closeout
  std::optional<std::size_t> candidate;
  std::vector<std::size_t> elected;  // candidates elected at the end of this round
  std::vector<Rational> tallies;
  std::vector<Status> status;
  Rational exhausted;
  bool tie_break = false;
};

/// State just before the exclusion that left as many continuing candidates
/// as unfilled seats.
struct FinalExclusion {
  int round = 0;
  std::size_t excluded = 0;
  std::size_t lowest_survivor = 0;
  Rational excluded_tally;
  Rational survivor_tally;
  bool excluded_wins_ties = false;
  /// (ballot, weight) for every paper in the survivor's pile, heaviest first.
  std::vector<std::pair<std::size_t, Rational>> survivor_pile;
};

struct CountState {
  std::vector<std::string> candidates;
  int seats = 1;
  std::int64_t total_ballots = 0;
  std::int64_t formal_ballots = 0;
  std::int64_t quota = 1;
  std::vector<Order> ballots;
  std::vector<std::int64_t> first_preferences;
  std::vector<Status> status;
  std::vector<Rational> tallies;
  Rational exhausted;
  std::vector<std::size_t> elected;  // order of election
  std::vector<RoundRecord> rounds;
  std::optional<FinalExclusion> final_exclusion;
  bool degenerate = false;

  std::set<std::size_t> elected_set() const { return {elected.begin(), elected.end()}; }

  Rational rounding_loss() const {
    Rational sum = exhausted;
    for (const auto& t : tallies) sum += t;
    return Rational(formal_ballots) - sum;
  }
};

namespace detail {

struct Parcel {
  std::size_t type = 0;
  std::size_t pos = 0;  // position in the ballot type's order
  Rational weight;
  std::int64_t count = 0;
};

class Counter {
 public:
  Counter(std::vector<std::string> candidates, int seats, std::vector<Order> ballots) {
    st_.candidates = std::move(candidates);
    st_.seats = seats;
    st_.ballots = std::move(ballots);
    m_ = st_.candidates.size();
    if (seats < 1 || static_cast<std::size_t>(seats) >= m_) {
      throw Error(ErrorCode::schema, "need 1 <= seats < number of candidates");
    }
    st_.total_ballots = static_cast<std::int64_t>(st_.ballots.size());
    for (auto& b : st_.ballots) {
      std::set<std::size_t> seen;
      for (auto c : b) {
        if (c >= m_ || !seen.insert(c).second) throw Error(ErrorCode::domain, "malformed ballot order");
      }
    }
  }

  CountState run() {
    const std::size_t m = m_;
    st_.status.assign(m, Status::continuing);
    st_.tallies.assign(m, Rational(0));
    st_.first_preferences.assign(m, 0);
    piles_.assign(m, {});

    std::map<Order, std::size_t> type_of;
    std::vector<std::int64_t> type_count;
    for (const auto& b : st_.ballots) {
      if (b.empty()) continue;
      auto [it, fresh] = type_of.emplace(b, types_.size());
      if (fresh) {
        types_.push_back(b);
        type_count.push_back(0);
        type_ballots_.emplace_back();
      }
      ++type_count[it->second];
      type_ballots_[it->second].push_back(static_cast<std::size_t>(&b - st_.ballots.data()));
      ++st_.formal_ballots;
    }
    st_.quota = st_.formal_ballots / (st_.seats + 1) + 1;
    for (std::size_t t = 0; t < types_.size(); ++t) {
      const std::size_t first = types_[t].front();
      piles_[first].push_back(Parcel{t, 0, Rational(1), type_count[t]});
      st_.tallies[first] += type_count[t];
      st_.first_preferences[first] += type_count[t];
    }
    record("first_preferences", std::nullopt);

    for (;;) {
      if (filled() == st_.seats) break;
      auto cont = continuing();
      if (static_cast<int>(cont.size()) <= st_.seats - filled()) {
        close_out(cont);
        break;
      }
      if (!pending_.empty()) {
        transfer_surplus();
        continue;
      }
      exclude_lowest(cont);
    }
    return std::move(st_);
  }

 private:
  int filled() const { return static_cast<int>(st_.elected.size()); }

  std::vector<std::size_t> continuing() const {
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < m_; ++c) {
      if (st_.status[c] == Status::continuing) out.push_back(c);
    }
    return out;
  }

  // Narrows `tied` using tallies of earlier rounds, newest first. `lowest`
  // selects who is behind; the fallback puts later ballot positions behind.
  std::size_t break_tie(std::vector<std::size_t> tied, bool lowest) {
    tie_broken_ = true;
    for (auto r = st_.rounds.rbegin(); r != st_.rounds.rend() && tied.size() > 1; ++r) {
      Rational best = r->tallies[tied.front()];
      for (auto c : tied) best = lowest ? std::min(best, r->tallies[c]) : std::max(best, r->tallies[c]);
      std::vector<std::size_t> keep;
      for (auto c : tied) {
        if (r->tallies[c] == best) keep.push_back(c);
      }
      tied = std::move(keep);
    }
    return lowest ? *std::max_element(tied.begin(), tied.end())
                  : *std::min_element(tied.begin(), tied.end());
  }

  std::size_t pick(const std::vector<std::size_t>& among, bool lowest) {
    Rational best = st_.tallies[among.front()];
    for (auto c : among) {
      best = lowest ? std::min(best, st_.tallies[c]) : std::max(best, st_.tallies[c]);
    }
    std::vector<std::size_t> tied;
    for (auto c : among) {
      if (st_.tallies[c] == best) tied.push_back(c);
    }
    return tied.size() == 1 ? tied.front() : break_tie(std::move(tied), lowest);
  }

  void elect(std::size_t c) {
    st_.status[c] = Status::elected;
    st_.elected.push_back(c);
    elected_now_.push_back(c);
    if (st_.tallies[c] > st_.quota) pending_.push_back(c);
  }

  void elect_quota_holders() {
    std::vector<std::size_t> reached;
    for (auto c : continuing()) {
      if (st_.tallies[c] >= st_.quota) reached.push_back(c);
    }
    while (!reached.empty() && filled() < st_.seats) {
      auto c = pick(reached, false);
      elect(c);
      reached.erase(std::find(reached.begin(), reached.end(), c));
    }
  }

  void record(std::string event, std::optional<std::size_t> candidate) {
    elect_quota_holders();
    RoundRecord r;
    r.round = static_cast<int>(st_.rounds.size());
    r.event = std::move(event);
    r.candidate = candidate;
    r.elected = std::move(elected_now_);
    r.tallies = st_.tallies;
    r.status = st_.status;
    r.exhausted = st_.exhausted;
    r.tie_break = tie_broken_;
    st_.rounds.push_back(std::move(r));
    elected_now_.clear();
    tie_broken_ = false;
  }

  // Moves every parcel of `from` on to its next continuing preference,
  // scaling weights by `factor`.
  void move_pile(std::size_t from, const Rational& factor) {
    auto pile = std::move(piles_[from]);
    piles_[from].clear();
    for (auto& p : pile) {
      p.weight *= factor;
      const auto& order = types_[p.type];
      std::size_t pos = p.pos + 1;
      while (pos < order.size() && st_.status[order[pos]] != Status::continuing) ++pos;
      const Rational value = p.weight * p.count;
      if (pos == order.size()) {
        st_.exhausted += value;
        continue;
      }
      p.pos = pos;
      st_.tallies[order[pos]] += value;
      piles_[order[pos]].push_back(std::move(p));
    }
  }

  void transfer_surplus() {
    std::vector<std::size_t> among(pending_.begin(), pending_.end());
    auto c = pick(among, false);
    pending_.erase(std::find(pending_.begin(), pending_.end(), c));
    const Rational surplus = st_.tallies[c] - st_.quota;
    const Rational factor = surplus / st_.tallies[c];
    st_.tallies[c] = st_.quota;
    move_pile(c, factor);
    record("surplus", c);
  }

  void exclude_lowest(const std::vector<std::size_t>& cont) {
    auto c = pick(cont, true);
    const int unfilled = st_.seats - filled();
    if (static_cast<int>(cont.size()) == unfilled + 1) {
      FinalExclusion fx;
      fx.round = static_cast<int>(st_.rounds.size());
      fx.excluded = c;
      std::vector<std::size_t> rest;
      for (auto x : cont) {
        if (x != c) rest.push_back(x);
      }
      const bool tie_flag = tie_broken_;
      fx.lowest_survivor = pick(rest, true);
      tie_broken_ = tie_flag;
      fx.excluded_tally = st_.tallies[c];
      fx.survivor_tally = st_.tallies[fx.lowest_survivor];
      fx.excluded_wins_ties = tie_loser(c, fx.lowest_survivor) == fx.lowest_survivor;
      for (const auto& p : piles_[fx.lowest_survivor]) {
        for (auto b : type_ballots_[p.type]) fx.survivor_pile.emplace_back(b, p.weight);
      }
      std::stable_sort(fx.survivor_pile.begin(), fx.survivor_pile.end(),
                       [](const auto& a, const auto& b) {
                         return a.second != b.second ? a.second > b.second : a.first < b.first;
                       });
      st_.final_exclusion = std::move(fx);
    }
    st_.status[c] = Status::excluded;
    st_.tallies[c] = 0;
    move_pile(c, Rational(1));
    record("exclusion", c);
  }

  // Which of two candidates would be excluded if their tallies were equal.
  std::size_t tie_loser(std::size_t a, std::size_t b) {
    const bool flag = tie_broken_;
    auto loser = break_tie({a, b}, true);
    tie_broken_ = flag;
    return loser;
  }

  void close_out(const std::vector<std::size_t>& cont) {
    auto rest = cont;
    while (!rest.empty()) {
      auto c = pick(rest, false);
      elect(c);
      rest.erase(std::find(rest.begin(), rest.end(), c));
    }
    st_.degenerate = st_.formal_ballots == 0;
    record("closeout", std::nullopt);
  }

  CountState st_;
  std::size_t m_ = 0;
  std::vector<Order> types_;
  std::vector<std::vector<std::size_t>> type_ballots_;
  std::vector<std::vector<Parcel>> piles_;
  std::vector<std::size_t> pending_;
  std::vector<std::size_t> elected_now_;
  bool tie_broken_ = false;
};

}  // namespace detail

/// Counts ballots given as candidate orders (usable prefixes).
inline CountState count_orders(std::vector<std::string> candidates, int seats,
                               std::vector<Order> ballots) {
  return detail::Counter(std::move(candidates), seats, std::move(ballots)).run();
}

inline std::vector<Order> orders_of(std::span<const PreferenceSequence> ballots) {
  std::vector<Order> out;
  out.reserve(ballots.size());
  for (const auto& b : ballots) out.push_back(b.usable_prefix());
  return out;
}

inline CountState count(const Contest& contest, std::span<const PreferenceSequence> ballots) {
  contest.validate();
  for (const auto& b : ballots) {
    if (b.size() != contest.candidates.size()) {
      throw Error(ErrorCode::schema, "ballot has " + std::to_string(b.size()) + " cells, contest has " +
                                         std::to_string(contest.candidates.size()) + " candidates");
    }
  }
  return count_orders(contest.candidates, contest.seats, orders_of(ballots));
}

/// Counts several contests concurrently, one thread per contest.
inline std::vector<CountState> count_all(std::span<const Contest> contests,
                                         const std::vector<std::vector<PreferenceSequence>>& ballots) {
  if (contests.size() != ballots.size()) throw Error(ErrorCode::domain, "one ballot list per contest");
  std::vector<std::future<CountState>> jobs;
  for (std::size_t i = 0; i < contests.size(); ++i) {
    jobs.push_back(std::async(std::launch::async, [&, i] {
      return count(contests[i], std::span<const PreferenceSequence>(ballots[i]));
    }));
  }
  std::vector<CountState> out;
  for (auto& j : jobs) out.push_back(j.get());
  return out;
}

inline std::string format_rational(const Rational& r) {
  if (denominator(r) == 1) return numerator(r).str();
  return numerator(r).str() + "/" + denominator(r).str();
}

/// One row per candidate per round, plus an `(exhausted)` row.
inline std::string format_round_log_csv(const CountState& st) {
  std::string out = csv::format_record({"round", "event", "subject", "candidate", "tally",
                                        "tally_exact", "status"});
  for (const auto& r : st.rounds) {
    std::string subject = r.candidate ? st.candidates[*r.candidate] : "";
    std::string event = r.event + (r.tie_break ? "+tie_break" : "");
    for (std::size_t c = 0; c < st.candidates.size(); ++c) {
      std::string status = to_string(r.status[c]);
      if (std::find(r.elected.begin(), r.elected.end(), c) != r.elected.end()) status = "elected_now";
      out += csv::format_record({std::to_string(r.round), event, subject, st.candidates[c],
                                 std::to_string(floor_int(r.tallies[c])), format_rational(r.tallies[c]),
                                 status});
    }
    out += csv::format_record({std::to_string(r.round), event, subject, "(exhausted)",
                               std::to_string(floor_int(r.exhausted)), format_rational(r.exhausted), ""});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Margins

enum class MarginKind { last_round, quota_raise, none };

inline const char* to_string(MarginKind k) {
  switch (k) {
    case MarginKind::last_round: return "last_round";
    case MarginKind::quota_raise: return "quota_raise";
    case MarginKind::none: return "none";
  }
  return "?";
}

struct BallotChange {
  std::size_t ballot = 0;
  Order replacement;
};

struct MarginEstimate {
  MarginKind kind = MarginKind::none;
  std::int64_t vote_changes = 0;
  double pct = 0.0;
  std::string effect;
  std::optional<std::size_t> candidate_in;
  std::optional<std::size_t> candidate_out;
  bool already_tied = false;
  std::vector<BallotChange> changes;

  bool feasible() const { return kind != MarginKind::none; }
};

struct MarginOptions {
  /// Forbid changes to any ballot's first preference.
  bool first_preferences_frozen = false;
};

inline std::vector<Order> apply_changes(std::vector<Order> ballots,
                                        std::span<const BallotChange> changes) {
  for (const auto& ch : changes) {
    if (ch.ballot >= ballots.size()) throw Error(ErrorCode::domain, "change refers to a missing ballot");
    ballots[ch.ballot] = ch.replacement;
  }
  return ballots;
}

inline CountState recount(const CountState& st, std::span<const BallotChange> changes) {
  return count_orders(st.candidates, st.seats, apply_changes(st.ballots, changes));
}

inline bool changes_outcome(const CountState& st, std::span<const BallotChange> changes) {
  return recount(st, changes).elected_set() != st.elected_set();
}

struct ShiftResult {
  std::int64_t ballots = 0;
  bool already_tied = false;
};

/// Whole-ballot shifts from d to c needed for c to overtake d with unit
/// weights: c needs Tc + x > Td - x, or >= when c wins ties.
inline ShiftResult last_round_shift(std::int64_t tally_c, std::int64_t tally_d, bool c_wins_ties) {
  const std::int64_t gap = tally_d - tally_c;
  if (gap < 0) return {0, false};
  if (!c_wins_ties) return {gap / 2 + 1, false};
  const std::int64_t x = (gap + 1) / 2;
  return {x, x == 0};
}

inline double margin_pct(const CountState& st, std::int64_t changes) {
  return st.formal_ballots ? static_cast<double>(changes) / static_cast<double>(st.formal_ballots)
                           : 0.0;
}

/// Shifts whole ballots from the lowest surviving winner d to the last
/// excluded candidate c (c takes d's place on each ballot), heaviest papers
/// first, and confirms the result by recounting.
inline MarginEstimate last_round_margin(const CountState& st, const MarginOptions& opt = {}) {
  if (!st.final_exclusion) {
    throw Error(ErrorCode::not_applicable, "count did not end with a final exclusion");
  }
  const auto& fx = *st.final_exclusion;
  const std::size_t c = fx.excluded;
  const std::size_t d = fx.lowest_survivor;

  std::vector<BallotChange> pool;
  std::vector<Rational> weights;
  for (const auto& [b, w] : fx.survivor_pile) {
    const auto& order = st.ballots[b];
    if (opt.first_preferences_frozen && order.front() == d) continue;
    Order repl = order;
    auto dpos = std::find(repl.begin(), repl.end(), d);
    auto cpos = std::find(repl.begin(), repl.end(), c);
    if (cpos != repl.end()) std::iter_swap(dpos, cpos);
    else *dpos = c;
    pool.push_back({b, std::move(repl)});
    weights.push_back(w);
  }

  Rational tc = fx.excluded_tally;
  Rational td = fx.survivor_tally;
  std::size_t x = 0;
  auto ahead = [&] { return fx.excluded_wins_ties ? tc >= td : tc > td; };
  const bool tied = tc == td;
  while (!ahead() && x < pool.size()) {
    tc += weights[x];
    td -= weights[x];
    ++x;
  }
  for (x = std::max<std::size_t>(x, 1); x <= pool.size(); ++x) {
    std::span<const BallotChange> trial(pool.data(), x);
    if (changes_outcome(st, trial)) {
      MarginEstimate est;
      est.kind = MarginKind::last_round;
      est.vote_changes = static_cast<std::int64_t>(x);
      est.pct = margin_pct(st, est.vote_changes);
      est.candidate_in = c;
      est.candidate_out = d;
      est.already_tied = tied;
      est.effect = "shift " + std::to_string(x) + " ballots from " + st.candidates[d] + " to " +
                   st.candidates[c];
      if (tied) est.effect += " (tied before the shift)";
      est.changes.assign(trial.begin(), trial.end());
      return est;
    }
  }
  throw Error(ErrorCode::not_applicable, "no whole-ballot shift from " + st.candidates[d] + " to " +
                                             st.candidates[c] + " changes the outcome");
}

/// Gives a non-winner c enough new first preferences to reach a quota, taken
/// one at a time from whichever other candidate has the most first
/// preferences at that point.
inline MarginEstimate quota_raise_bound(const CountState& st, std::size_t c,
                                        const MarginOptions& opt = {}) {
  if (c >= st.candidates.size()) throw Error(ErrorCode::domain, "unknown candidate");
  if (st.status[c] == Status::elected) {
    throw Error(ErrorCode::already_elected, st.candidates[c] + " is already elected");
  }
  if (opt.first_preferences_frozen) {
    throw Error(ErrorCode::not_applicable, "quota raise needs first-preference changes");
  }
  if (st.formal_ballots == 0) throw Error(ErrorCode::not_applicable, "no formal ballots");
  const std::int64_t need = st.quota - st.first_preferences[c];

  std::vector<std::vector<std::size_t>> donors(st.candidates.size());
  for (std::size_t b = 0; b < st.ballots.size(); ++b) {
    const auto& o = st.ballots[b];
    if (!o.empty() && o.front() != c) donors[o.front()].push_back(b);
  }
  std::vector<BallotChange> changes;
  for (std::int64_t i = 0; i < need; ++i) {
    std::size_t from = st.candidates.size();
    for (std::size_t k = 0; k < donors.size(); ++k) {
      if (!donors[k].empty() && (from == st.candidates.size() || donors[k].size() > donors[from].size())) {
        from = k;
      }
    }
    if (from == st.candidates.size()) {
      throw Error(ErrorCode::not_applicable, "not enough ballots to give " + st.candidates[c] + " a quota");
    }
    const std::size_t b = donors[from].back();
    donors[from].pop_back();
    Order repl = st.ballots[b];
    repl.erase(std::remove(repl.begin(), repl.end(), c), repl.end());
    repl.insert(repl.begin(), c);
    changes.push_back({b, std::move(repl)});
  }
  if (!changes_outcome(st, changes)) {
    throw Error(ErrorCode::invalid_state, "quota raise for " + st.candidates[c] + " did not change the outcome");
  }
  MarginEstimate est;
  est.kind = MarginKind::quota_raise;
  est.vote_changes = need;
  est.pct = margin_pct(st, need);
  est.candidate_in = c;
  est.effect = "raise " + st.candidates[c] + " to a quota with " + std::to_string(need) +
               " new first preferences";
  est.changes = std::move(changes);
  return est;
}

/// Smallest of the last-round margin and every quota-raise bound. When no
/// bound applies, vote_changes is the total number of ballots.
inline MarginEstimate apparent_margin(const CountState& st, const MarginOptions& opt = {}) {
  std::optional<MarginEstimate> best;
  auto consider = [&](MarginEstimate e) {
    if (!best || e.vote_changes < best->vote_changes) best = std::move(e);
  };
  try {
    consider(last_round_margin(st, opt));
  } catch (const Error& e) {
    if (e.code() != ErrorCode::not_applicable) throw;
  }
  for (std::size_t c = 0; c < st.candidates.size(); ++c) {
    if (st.status[c] == Status::elected) continue;
    try {
      consider(quota_raise_bound(st, c, opt));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::not_applicable) throw;
    }
  }
  if (best) return *best;
  MarginEstimate none;
  none.vote_changes = st.total_ballots;
  none.pct = 1.0;
  none.effect = "no feasible change found";
  return none;
}

}  // namespace senaudit::stv
