// Acceptance runner: one PASS/FAIL line per criterion.
//   acceptance [--only <name>]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <boost/math/distributions/binomial.hpp>

#include "margin_oracle.hpp"
#include "sampling_oracle.hpp"
#include "senaudit/audit.hpp"
#include "senaudit/planning.hpp"
#include "senaudit/service.hpp"
#include "senaudit/stv.hpp"
#include "session_fixture.hpp"
#include "support.hpp"

using namespace senaudit;

namespace {

// Pinned tolerances and limits.
constexpr double kTable1Tolerance = 1e-9;
constexpr double kTable1Seconds = 1.0;
constexpr double kSamplingSeconds = 30.0;
constexpr double kMarginSeconds = 300.0;
constexpr int kVerificationSessions = 100;
constexpr int kMarginElections = 200;
constexpr long long kOracleRecountsPerElection = 150'000;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome table1() {
  struct Cell {
    const char* place;
    std::int64_t n;
    std::int64_t t;
    double published;
  };
  const std::vector<Cell> cells{
      {"NSW", 5427292, 1000, 0.000202852}, {"NSW", 5427292, 625, 0.000129934},
      {"VIC", 4305961, 1000, 0.000255677}, {"VIC", 4305961, 625, 0.000163770},
      {"QLD", 3450635, 1000, 0.000319053}, {"QLD", 3450635, 625, 0.000204365},
      {"WA", 1752273, 1000, 0.000628288},  {"WA", 1752273, 625, 0.000402441},
      {"SA", 1244611, 1000, 0.000884557},  {"SA", 1244611, 625, 0.000566591},
      {"TAS", 397279, 1000, 0.002771133},  {"TAS", 397279, 625, 0.001775011},
      {"ACT", 309521, 1000, 0.003556806},  {"ACT", 309521, 625, 0.002278264},
      {"NT", 145335, 1000, 0.007574710},   {"NT", 145335, 625, 0.004851881},
  };
  const auto t0 = Clock::now();
  int within = 0;
  double worst = 0.0;
  std::string worst_cell;
  std::ostringstream rows;
  for (const auto& c : cells) {
    const double p = min_selection_probability(c.n, c.t, 0.999);
    const double dev = std::abs(p - c.published);
    within += dev <= kTable1Tolerance;
    if (dev > worst) {
      worst = dev;
      worst_cell = std::string(c.place) + "/" + std::to_string(c.t);
    }
    rows << fmt("\n    %-4s t=%-5lld computed %.12f published %.9f |dp| %.3g", c.place,
                static_cast<long long>(c.t), p, c.published, dev);
  }
  const double secs = seconds_since(t0);
  return {within == static_cast<int>(cells.size()) && secs < kTable1Seconds,
          fmt("%d/16 cells within %.0e; max |dp| %.3g at %s; %.3f s", within, kTable1Tolerance, worst,
              worst_cell.c_str(), secs) +
              rows.str()};
}

// ---------------------------------------------------------------------------

Outcome ci_example() {
  auto ci = clopper_pearson(30, 5000, 0.95);
  const auto lo = format_fixed(ci.lower, 4);
  const auto hi = format_fixed(ci.upper, 4);
  return {lo == "0.0041" && hi == "0.0086",
          "(" + lo + ", " + hi + ") from " + fmt("(%.6f, %.6f)", ci.lower, ci.upper)};
}

// ---------------------------------------------------------------------------

// Two-sided exact binomial p-value: total probability of outcomes no more
// likely than the one observed.
struct BinomialTest {
  std::vector<double> pmf;
  BinomialTest(int trials, double p) : pmf(static_cast<std::size_t>(trials) + 1) {
    boost::math::binomial_distribution<double> dist(trials, p);
    for (int j = 0; j <= trials; ++j) pmf[static_cast<std::size_t>(j)] = boost::math::pdf(dist, j);
  }
  double p_value(int k) const {
    const double here = pmf[static_cast<std::size_t>(k)] * (1.0 + 1e-7);
    double total = 0.0;
    for (double q : pmf) {
      if (q <= here) total += q;
    }
    return std::min(1.0, total);
  }
};

Outcome sampling() {
  const auto t0 = Clock::now();
  std::vector<std::string> failures;

  // One large draw.
  const std::uint64_t big_n = 100'000;
  const double big_p = 0.01;
  SelectionStream big(sha256("acceptance sampling"), "fixed");
  const auto size = geometric_skip(big, big_p, big_n).size();
  const double mean = big_n * big_p;
  const double sigma = std::sqrt(big_n * big_p * (1 - big_p));
  if (std::abs(static_cast<double>(size) - mean) > 3 * sigma) {
    failures.push_back(fmt("sample size %zu outside %.0f +- %.1f", size, mean, 3 * sigma));
  }

  // Inclusion frequency per ballot across many seeds, checked against the
  // sequential oracle on the same stream.
  const int seeds = 1000;
  const std::uint64_t ballots = 1000;
  const double p = 0.02;
  std::vector<int> hits(ballots, 0);
  int oracle_mismatch = 0;
  for (int s = 0; s < seeds; ++s) {
    const auto seed = sha256("acceptance seed " + std::to_string(s));
    SelectionStream a(seed, "batch"), b(seed, "batch");
    auto sel = geometric_skip(a, p, ballots);
    oracle_mismatch += sel != oracle::survival_oracle(b, p, ballots);
    for (auto i : sel) ++hits[i];
  }
  BinomialTest test(seeds, p);
  const double family_alpha = 0.001 / static_cast<double>(ballots);
  int rejected = 0, outside_band = 0;
  double min_p = 1.0;
  for (auto h : hits) {
    const double pv = test.p_value(h);
    min_p = std::min(min_p, pv);
    rejected += pv < family_alpha;
    outside_band += pv < 0.001;
  }
  if (rejected) failures.push_back(fmt("%d ballots fail the family-wise binomial test", rejected));

  // Random (p, n) pairs against the oracle.
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 3000; ++trial) {
    const double q = std::ldexp(static_cast<double>(rng() >> 11), -53);
    const std::uint64_t n = rng() % 2000;
    const auto seed = sha256("acceptance pair " + std::to_string(trial));
    SelectionStream a(seed, "s"), b(seed, "s");
    oracle_mismatch += geometric_skip(a, q, n) != oracle::survival_oracle(b, q, n);
  }
  if (oracle_mismatch) failures.push_back(fmt("%d selections differ from the oracle", oracle_mismatch));

  const double secs = seconds_since(t0);
  if (secs >= kSamplingSeconds) failures.push_back(fmt("took %.1f s", secs));
  std::string detail = fmt(
      "size %zu (band %.0f +- %.1f); %d seeds x %llu ballots at p=%.2f: min p-value %.2g, %d below "
      "family-wise %.0e, %d outside the per-ballot 99.9%% band (about 1 expected); oracle "
      "mismatches %d over 4000 streams; %.1f s",
      size, mean, 3 * sigma, seeds, static_cast<unsigned long long>(ballots), p, min_p, rejected,
      family_alpha, outside_band, oracle_mismatch, secs);
  for (const auto& f : failures) detail += "\n    " + f;
  return {failures.empty(), detail};
}

// ---------------------------------------------------------------------------

std::string join_lines(const std::vector<PublishedSelection>& lines) {
  std::string out;
  for (const auto& l : lines) out += format_selection_line(l);
  return out;
}

Outcome verification() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(4242);
  int reproduced = 0, tampers = 0, detected = 0;
  std::vector<std::string> failures;
  for (int i = 0; i < kVerificationSessions; ++i) {
    fixture::Script sc;
    sc.batches = 1 + rng() % 4;
    sc.batch_size = 40 + rng() % 360;
    sc.target = 20 + static_cast<std::int64_t>(rng() % 40);
    sc.seed = 1000 + static_cast<std::uint64_t>(i);
    auto dir = testing_support::fresh_dir("acceptance-verify");
    try {
      auto session = fixture::scripted_session(sc);
      session.export_bundle(dir);
      if (verify_bundle(dir).ok()) ++reproduced;
      else failures.push_back(fmt("session %d: published selections do not reproduce", i));

      const auto original = read_file(dir / "selections.csv");
      auto lines = parse_selection_file(original);
      if (join_lines(lines) != original) failures.push_back(fmt("session %d: selection file not canonical", i));

      // Change one index, drop one, add one.
      for (int kind = 0; kind < 3; ++kind) {
        auto tampered = lines;
        auto& line = tampered[rng() % tampered.size()];
        const auto size = session.batch(line.batch_id).size();
        std::set<std::uint64_t> chosen(line.indices.begin(), line.indices.end());
        if (chosen.size() == size && kind != 1) continue;
        std::uint64_t fresh = rng() % size;
        while (chosen.count(fresh)) fresh = rng() % size;
        if (kind == 1 && line.indices.empty()) continue;
        const auto at = line.indices.empty() ? 0 : rng() % line.indices.size();
        if (kind == 0) {
          if (line.indices.empty()) continue;
          line.indices[at] = fresh;
          std::sort(line.indices.begin(), line.indices.end());
        } else if (kind == 1) {
          line.indices.erase(line.indices.begin() + static_cast<std::ptrdiff_t>(at));
        } else {
          line.indices.insert(std::upper_bound(line.indices.begin(), line.indices.end(), fresh), fresh);
        }
        write_file(dir / "selections.csv", join_lines(tampered));
        ++tampers;
        auto check = verify_bundle(dir);
        if (!check.ok() && !check.mismatches.empty()) ++detected;
        else failures.push_back(fmt("session %d: tampering kind %d not detected", i, kind));
        write_file(dir / "selections.csv", original);
      }
    } catch (const std::exception& e) {
      failures.push_back(fmt("session %d: %s", i, e.what()));
    }
    std::filesystem::remove_all(dir);
  }
  std::string detail = fmt("%d/%d sessions reproduce; %d/%d single-index tamperings detected; %.1f s",
                           reproduced, kVerificationSessions, detected, tampers, seconds_since(t0));
  for (std::size_t i = 0; i < failures.size() && i < 10; ++i) detail += "\n    " + failures[i];
  return {failures.empty() && reproduced == kVerificationSessions && tampers > 0, detail};
}

// ---------------------------------------------------------------------------

std::vector<std::string> letters(std::size_t m) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < m; ++i) out.push_back(std::string(1, static_cast<char>('A' + i)));
  return out;
}

stv::Order random_order(std::mt19937_64& rng, std::size_t m) {
  stv::Order o(m);
  std::iota(o.begin(), o.end(), 0);
  std::shuffle(o.begin(), o.end(), rng);
  o.resize(1 + rng() % m);
  return o;
}

// Half the ballots follow one of a few popular orders.
std::vector<stv::Order> random_election(std::mt19937_64& rng, std::size_t m, int n) {
  std::vector<stv::Order> popular;
  for (int k = 0; k < 3; ++k) popular.push_back(random_order(rng, m));
  std::vector<stv::Order> out;
  for (int i = 0; i < n; ++i) {
    out.push_back(rng() % 2 ? popular[rng() % popular.size()] : random_order(rng, m));
  }
  return out;
}

Outcome margin() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(5150);
  int estimates = 0, sound = 0, elections_checked = 0, exact_known = 0, exact_equal = 0;
  int bounded_only = 0, oracle_disagrees = 0;
  long long recounts = 0;
  std::vector<std::string> failures;

  for (int e = 0; e < kMarginElections; ++e) {
    const std::size_t m = 2 + rng() % 4;
    const int seats = 1 + static_cast<int>(rng() % std::min<std::size_t>(3, m - 1));
    const int n = static_cast<int>(rng() % 51);
    auto ballots = random_election(rng, m, n);
    auto st = stv::count_orders(letters(m), seats, ballots);
    const auto base = oracle::winners(m, seats, ballots);
    if (st.elected_set() != base) {
      ++oracle_disagrees;
      failures.push_back(fmt("election %d: engine and reference counts elect different sets", e));
      continue;
    }
    ++elections_checked;

    auto flips = [&](const stv::MarginEstimate& est, const char* what) {
      ++estimates;
      auto changed = stv::apply_changes(ballots, est.changes);
      const bool ok = static_cast<std::int64_t>(est.changes.size()) == est.vote_changes &&
                      oracle::winners(m, seats, changed) != base;
      sound += ok;
      if (!ok) failures.push_back(fmt("election %d: %s estimate of %lld does not change the outcome", e, what,
                                      static_cast<long long>(est.vote_changes)));
    };

    // Every estimate the engine can emit.
    for (bool frozen : {false, true}) {
      stv::MarginOptions opt;
      opt.first_preferences_frozen = frozen;
      try {
        flips(stv::last_round_margin(st, opt), "last_round");
      } catch (const Error& err) {
        if (err.code() != ErrorCode::not_applicable) throw;
      }
      for (std::size_t c = 0; c < m; ++c) {
        if (st.status[c] == stv::Status::elected) continue;
        try {
          flips(stv::quota_raise_bound(st, c, opt), "quota_raise");
        } catch (const Error& err) {
          if (err.code() != ErrorCode::not_applicable) throw;
        }
      }
    }
    auto apparent = stv::apparent_margin(st);
    if (!apparent.feasible()) continue;
    flips(apparent, "apparent");

    // Smallest modification up to size three, by enumeration.
    const int cap = static_cast<int>(std::min<std::int64_t>(3, apparent.vote_changes));
    auto found = oracle::smallest_flip(m, seats, ballots, cap, kOracleRecountsPerElection);
    recounts += found.recounts;
    if (found.complete && found.flip_size) {
      ++exact_known;
      exact_equal += *found.flip_size == apparent.vote_changes;
      if (*found.flip_size > apparent.vote_changes) {
        failures.push_back(fmt("election %d: apparent %lld below exact %d", e,
                               static_cast<long long>(apparent.vote_changes), *found.flip_size));
      }
    } else if (found.complete) {
      // Nothing up to size 3: the exact margin exceeds 3, and apparent > 3.
      ++exact_known;
      if (apparent.vote_changes <= 3) {
        failures.push_back(fmt("election %d: no modification up to %lld changes the outcome", e,
                               static_cast<long long>(apparent.vote_changes)));
      }
    } else {
      ++bounded_only;
    }
  }
  const double secs = seconds_since(t0);
  if (secs >= kMarginSeconds) failures.push_back(fmt("took %.1f s", secs));
  std::string detail = fmt(
      "%d elections; %d/%d emitted estimates change the elected set on recount; exact margin "
      "(capped at 3) enumerated for %d, equal to apparent in %d; %d over the %lld-recount "
      "enumeration budget, bounded by the recounted witness only; %lld recounts; %.1f s",
      elections_checked, sound, estimates, exact_known, exact_equal, bounded_only,
      kOracleRecountsPerElection, recounts, secs);
  for (std::size_t i = 0; i < failures.size() && i < 10; ++i) detail += "\n    " + failures[i];
  return {failures.empty() && oracle_disagrees == 0, detail};
}

// ---------------------------------------------------------------------------

Outcome trichotomy() {
  std::mt19937_64 rng(31337);
  long long pairs = 0, bad = 0;
  auto check = [&](std::int64_t lo, std::int64_t hi, std::int64_t margin) {
    ++pairs;
    const bool low = hi < margin;
    const bool high = lo > margin;
    const bool between = lo <= margin && margin <= hi;
    const int holding = low + high + between;
    const auto got = classify({lo, hi}, margin);
    const auto want = low ? Scenario::low_enough : high ? Scenario::too_high : Scenario::inconclusive;
    bad += holding != 1 || got != want;
  };
  // Every triple on a small grid, then random wide ones.
  for (std::int64_t lo = 0; lo <= 30; ++lo) {
    for (std::int64_t hi = lo; hi <= 30; ++hi) {
      for (std::int64_t m = 0; m <= 31; ++m) check(lo, hi, m);
    }
  }
  for (int i = 0; i < 1'000'000; ++i) {
    auto a = static_cast<std::int64_t>(rng() % 5'000'000), b = static_cast<std::int64_t>(rng() % 5'000'000);
    check(std::min(a, b), std::max(a, b), static_cast<std::int64_t>(rng() % 5'000'000));
  }
  // Through conclude(), from sampled intervals.
  long long via_conclude = 0;
  for (int i = 0; i < 2000; ++i) {
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng() % 5000);
    const std::int64_t k = static_cast<std::int64_t>(rng() % (n + 1)) / (1 + rng() % 20);
    const std::int64_t cast = n + static_cast<std::int64_t>(rng() % 1'000'000);
    auto ci = clopper_pearson(k, n, 0.95);
    const auto margin = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(cast));
    auto c = conclude(ci, margin, cast);
    ++via_conclude;
    check(c.ci_counts.lower, c.ci_counts.upper, margin);
    bad += c.scenario != classify(scale_to_counts(ci, cast), margin);
  }
  bool rejects_inverted = false;
  try {
    classify({5, 4}, 1);
  } catch (const Error&) {
    rejects_inverted = true;
  }
  // State-wide composite: a 0.6% error sample against a 9341-change margin.
  const std::int64_t cast = 3821539;
  auto vic = conclude(clopper_pearson(30, 5000, 0.95), 9341, cast);
  const bool vic_ok = vic.scenario == Scenario::too_high;
  return {bad == 0 && rejects_inverted && vic_ok,
          fmt("%lld (interval, margin) pairs (%lld via conclude), %lld violations; composite counts "
              "(%lld, %lld) vs margin 9341 -> %s",
              pairs, via_conclude, bad, static_cast<long long>(vic.ci_counts.lower),
              static_cast<long long>(vic.ci_counts.upper), to_string(vic.scenario))};
}

// ---------------------------------------------------------------------------

std::string round_log(const Session& s) {
  std::vector<PreferenceSequence> ballots;
  for (const auto& id : s.batch_ids()) {
    for (const auto& b : s.batch(id).ballots()) ballots.push_back(b.preferences);
  }
  return stv::format_round_log_csv(stv::count(s.contest(), ballots));
}

Outcome replay() {
  fixture::Script sc;
  sc.batches = 3;
  sc.batch_size = 400;
  sc.target = 80;
  sc.error_rate = 0.1;
  sc.seed = 7;
  auto original = fixture::scripted_session(sc);
  auto again = Session::replay(original.log_jsonl());
  std::vector<std::string> diffs;
  const auto disc = original.discrepancies().size();
  if (disc == 0) diffs.push_back("no discrepancies were injected");
  if (again.head() != original.head()) diffs.push_back("log head");
  if (service::to_json(again.stats()) != service::to_json(original.stats())) diffs.push_back("stats");
  if (round_log(again) != round_log(original)) diffs.push_back("STV tallies");
  if (!again.conclusion() || !original.conclusion() ||
      service::to_json(*again.conclusion()) != service::to_json(*original.conclusion())) {
    diffs.push_back("conclusion");
  }
  if (!again.margin() || service::to_json(*again.margin()) != service::to_json(*original.margin())) {
    diffs.push_back("margin");
  }
  if (again.discrepancy_csv() != original.discrepancy_csv()) diffs.push_back("discrepancies");
  if (again.selection_file() != original.selection_file()) diffs.push_back("selections");
  std::string detail = fmt("%zu events, %zu selected, %zu discrepancies; scenario %s", original.events().size(),
                           original.selected_ballots().size(), disc,
                           original.conclusion() ? to_string(original.conclusion()->scenario) : "none");
  for (const auto& d : diffs) detail += "\n    differs: " + d;
  return {diffs.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"table1", table1},         {"ci_example", ci_example}, {"sampling", sampling},
      {"verification", verification}, {"margin", margin},   {"trichotomy", trichotomy},
      {"replay", replay},
  };
  std::vector<std::string> names;
  for (const auto& c : criteria) names.push_back(c.first);

  CLI::App app{"acceptance criteria"};
  std::string only;
  app.add_option("--only", only, "Run one criterion")->check(CLI::IsMember(names));
  CLI11_PARSE(app, argc, argv);

  bool all = true;
  for (const auto& [name, run] : criteria) {
    if (!only.empty() && only != name) continue;
    Outcome out;
    try {
      out = run();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    all = all && out.pass;
    std::cout << (out.pass ? "PASS " : "FAIL ") << name << ": " << out.detail << std::endl;
  }
  return all ? 0 : 1;
}
