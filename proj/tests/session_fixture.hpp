#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "senaudit/audit.hpp"

namespace fixture {

using namespace senaudit;

// Deterministic clock: one second per reading.
inline Clock stepping_clock(std::int64_t start_ms = 1'700'000'000'000) {
  auto t = std::make_shared<std::int64_t>(start_ms);
  return [t] { return Timestamp{*t += 1000}; };
}

inline Contest small_contest(std::size_t candidates = 5, int seats = 2) {
  Contest c;
  c.contest_id = "SYN";
  c.jurisdiction_name = "Synthetic";
  for (std::size_t i = 0; i < candidates; ++i) c.candidates.push_back("C" + std::to_string(i));
  c.seats = seats;
  c.enrolled_voters = 5000;
  return c;
}

// A batch of random full or partial rankings.
inline Batch random_batch(const Contest& contest, const std::string& id, const std::string& origin,
                          std::size_t n, std::mt19937_64& rng) {
  std::vector<IndexedBallot> ballots;
  const std::size_t m = contest.candidates.size();
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> order(m);
    for (std::size_t k = 0; k < m; ++k) order[k] = k;
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t len = 1 + rng() % m;
    std::vector<std::string> cells(m);
    for (std::size_t r = 0; r < len; ++r) cells[order[r]] = std::to_string(r + 1);
    ballots.push_back({static_cast<std::int64_t>(i), PreferenceSequence(cells), origin});
  }
  return Batch(id, contest.contest_id, std::move(ballots));
}

// The digitised marks with two ranks swapped (or a rank added when only one
// cell is marked), so the reading always disagrees.
inline PreferenceSequence misread(const PreferenceSequence& digitised) {
  auto cells = digitised.cells();
  std::vector<std::size_t> marked;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (!cells[i].empty()) marked.push_back(i);
  }
  if (marked.size() >= 2) {
    std::swap(cells[marked[0]], cells[marked[1]]);
  } else {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (cells[i].empty()) {
        cells[i] = std::to_string(marked.size() + 1);
        break;
      }
    }
  }
  return PreferenceSequence(cells, Source::human_read);
}

inline PreferenceSequence faithful(const PreferenceSequence& digitised) {
  return PreferenceSequence(digitised.cells(), Source::human_read);
}

struct Script {
  std::size_t batches = 3;
  std::size_t batch_size = 400;
  std::int64_t target = 60;
  double error_rate = 0.05;
  std::uint64_t seed = 1;
};

// Runs a full stage-one audit: commit, seed, read every selected ballot with
// injected errors, compute the margin and conclude.
inline Session scripted_session(const Script& sc) {
  std::mt19937_64 rng(sc.seed);
  auto contest = small_contest();
  SessionConfig cfg;
  cfg.session_id = "s" + std::to_string(sc.seed);
  cfg.contest = contest;
  cfg.target = sc.target;
  cfg.population = static_cast<std::int64_t>(sc.batches * sc.batch_size);
  auto s = Session::create(cfg, stepping_clock(), "official");
  for (std::size_t b = 0; b < sc.batches; ++b) {
    const std::string place = "box" + std::to_string(b);
    s.record_turnout(place, static_cast<std::int64_t>(sc.batch_size), "official");
    s.commit_batch(random_batch(contest, "b" + std::to_string(b), place, sc.batch_size, rng),
                   std::int64_t{1}, "official");
  }
  s.register_seed("ceremony " + std::to_string(sc.seed), std::nullopt, "official");
  std::bernoulli_distribution wrong(sc.error_rate);
  for (const auto& ref : s.pending_ballots()) {
    const auto& d = s.digitised(ref);
    s.submit_reading(ref, wrong(rng) ? misread(d) : faithful(d), "op" + std::to_string(rng() % 3));
  }
  s.compute_margin("official");
  s.begin_analysis("official");
  s.conclude("official");
  return s;
}

}  // namespace fixture
