// senaudit: command-line front end for planning, sampling, verification,
// counting and the audit service.
//
// Exit codes: 0 ok, 1 verification mismatch or integrity failure,
// 2 bad input, 3 ordering violation, 4 internal error.

#include <csignal>
#include <cstdio>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "senaudit/audit.hpp"
#include "senaudit/planning.hpp"
#include "senaudit/sampling.hpp"
#include "senaudit/service.hpp"
#include "senaudit/statistics.hpp"
#include "senaudit/stv.hpp"

namespace {

using namespace senaudit;

enum Exit { kOk = 0, kMismatch = 1, kInput = 2, kOrdering = 3, kInternal = 4 };

int exit_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::ordering_violation: return kOrdering;
    case ErrorCode::integrity: return kMismatch;
    default: return kInput;
  }
}

Contest load_contest(const std::string& path) {
  try {
    return json::parse(read_file(path)).get<Contest>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::format, path + ": " + e.what());
  }
}

std::string batch_id_of(const std::string& path) {
  return std::filesystem::path(path).stem().string();
}

std::vector<PreferenceSequence> load_ballots(const Contest& contest, const std::vector<std::string>& files) {
  std::vector<PreferenceSequence> out;
  for (const auto& f : files) {
    auto b = parse_preference_file(read_file(f), contest, batch_id_of(f));
    for (const auto& ballot : b.ballots()) out.push_back(ballot.preferences);
  }
  return out;
}

std::string fmt4(double v) { return format_fixed(v, 4); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Senate ballot-level audit toolkit"};
  app.require_subcommand(1);

  // plan
  auto* plan = app.add_subcommand("plan", "Selection probabilities for a sample floor");
  std::vector<std::string> plan_contests;
  std::int64_t plan_floor = 0, plan_n = 0;
  double plan_assurance = 0.999;
  std::string plan_strategy = "equal_split";
  std::vector<double> plan_weights;
  std::vector<std::string> plan_population;
  plan->add_option("--contest", plan_contests, "Contest JSON file(s)");
  plan->add_option("--floor,-t", plan_floor, "Overall sample floor (target)")->required();
  plan->add_option("--n", plan_n, "Population size, without a contest file");
  plan->add_option("--assurance", plan_assurance, "Probability of meeting the floor");
  plan->add_option("--strategy", plan_strategy, "equal_split | single_contest | custom_weights");
  plan->add_option("--weights", plan_weights, "Weights for custom_weights");
  plan->add_option("--population", plan_population, "contest_id=ballots_cast overrides");

  // commit
  auto* commit = app.add_subcommand("commit", "Commit a preference file (writes <batch>.commit)");
  std::string commit_contest, commit_batch, commit_out;
  commit->add_option("--contest", commit_contest)->required();
  commit->add_option("--batch", commit_batch, "Preference CSV")->required();
  commit->add_option("--out", commit_out, "Commit file (default <batch>.commit)");

  // sample
  auto* sample = app.add_subcommand("sample", "Select ballots from a committed batch");
  std::string sample_contest, sample_batch, sample_commit, sample_seed, sample_drawn_at, sample_scope;
  double sample_p = 0.0;
  sample->add_option("--contest", sample_contest)->required();
  sample->add_option("--batch", sample_batch)->required();
  sample->add_option("--commit", sample_commit, "Commit file (default <batch>.commit)");
  sample->add_option("--seed-file", sample_seed, "Seed ceremony transcript")->required();
  sample->add_option("--drawn-at", sample_drawn_at, "Seed time, ISO 8601 UTC (default now)");
  sample->add_option("--p", sample_p, "Selection probability")->required();
  sample->add_option("--scope", sample_scope, "Stream scope (default batch id)");

  // verify
  auto* verify = app.add_subcommand("verify", "Recompute published selections from an export bundle");
  std::string verify_bundle_dir;
  verify->add_option("--bundle", verify_bundle_dir, "Export bundle directory")->required();

  // count
  auto* count = app.add_subcommand("count", "STV count");
  std::string count_contest, count_log;
  std::vector<std::string> count_files;
  count->add_option("--contest", count_contest)->required();
  count->add_option("--ballots", count_files, "Preference CSV file(s)")->required();
  count->add_option("--log", count_log, "Write the round log CSV here (default stdout)");

  // margin
  auto* margin = app.add_subcommand("margin", "Apparent margin of an STV count");
  std::string margin_contest;
  std::vector<std::string> margin_files;
  bool margin_frozen = false;
  margin->add_option("--contest", margin_contest)->required();
  margin->add_option("--ballots", margin_files)->required();
  margin->add_flag("--no-first-pref-changes", margin_frozen, "Forbid first-preference edits");

  // ci
  auto* ci = app.add_subcommand("ci", "Exact confidence interval for the error rate");
  std::int64_t ci_k = 0, ci_n = 0, ci_k2 = -1, ci_n2 = -1, ci_cast = 0;
  double ci_level = 0.95;
  ci->add_option("--errors", ci_k, "Ballots with an error")->required();
  ci->add_option("--n", ci_n, "Ballots inspected")->required();
  ci->add_option("--level", ci_level, "Confidence level");
  ci->add_option("--stage2-errors", ci_k2, "Second-pass ballots with an error");
  ci->add_option("--stage2-n", ci_n2, "Second-pass ballots inspected");
  ci->add_option("--cast", ci_cast, "Ballots cast; also print the interval as counts");

  // serve
  auto* serve = app.add_subcommand("serve", "Run the HTTP /v1 service");
  std::string serve_config;
  serve->add_option("--config", serve_config, "key = value config file")->required();

  // replay
  auto* replay = app.add_subcommand("replay", "Rebuild a session from its event log");
  std::string replay_log;
  replay->add_option("--log", replay_log, "events.jsonl")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kInput;
  }

  try {
    if (*plan) {
      std::vector<SamplingPlan> plans;
      if (plan_contests.empty()) {
        if (plan_n <= 0) throw Error(ErrorCode::domain, "give --contest or --n");
        Contest c;
        c.contest_id = "contest";
        plans.push_back(make_plan(c, plan_n, plan_floor, plan_assurance));
      } else {
        std::vector<Contest> contests;
        for (const auto& f : plan_contests) contests.push_back(load_contest(f));
        std::map<std::string, std::int64_t> population;
        for (const auto& kv : plan_population) {
          auto eq = kv.find('=');
          if (eq == std::string::npos) throw Error(ErrorCode::format, "--population needs id=count");
          population[kv.substr(0, eq)] = std::stoll(kv.substr(eq + 1));
        }
        AllocationStrategy strategy;
        if (plan_strategy == "equal_split") strategy = AllocationStrategy::equal_split;
        else if (plan_strategy == "single_contest") strategy = AllocationStrategy::single_contest;
        else if (plan_strategy == "custom_weights") strategy = AllocationStrategy::custom_weights;
        else throw Error(ErrorCode::domain, "unknown strategy " + plan_strategy);
        plans = allocate_targets(contests, plan_floor, strategy, plan_weights, plan_assurance, population);
      }
      std::cout << format_plan_csv(plans);
      return kOk;
    }

    if (*commit) {
      auto contest = load_contest(commit_contest);
      auto batch = parse_preference_file(read_file(commit_batch), contest, batch_id_of(commit_batch));
      const auto& c = batch.commit(Timestamp::now());
      auto out = commit_out.empty() ? std::filesystem::path(commit_batch).replace_extension(".commit").string()
                                    : commit_out;
      write_file(out, format_commit_file(c));
      std::cout << to_hex(c.digest) << " " << c.at.iso8601() << "\n";
      return kOk;
    }

    if (*sample) {
      auto contest = load_contest(sample_contest);
      auto batch = parse_preference_file(read_file(sample_batch), contest, batch_id_of(sample_batch));
      auto commit_path = sample_commit.empty()
                             ? std::filesystem::path(sample_batch).replace_extension(".commit").string()
                             : sample_commit;
      batch.restore_commitment(parse_commit_file(read_file(commit_path)));
      auto drawn = sample_drawn_at.empty() ? Timestamp::now() : Timestamp::parse(sample_drawn_at);
      auto seed = seed_from_ceremony(read_file(sample_seed), drawn);
      check_commit_precedes_seed(batch, seed);
      auto scope = sample_scope.empty() ? batch.batch_id() : sample_scope;
      auto indices = select_from_batch(seed, sample_p, batch, scope);
      std::cout << format_selection_line({batch.batch_id(), sample_p, seed.canonical_seed, indices});
      return kOk;
    }

    if (*verify) {
      auto check = verify_bundle(verify_bundle_dir);
      for (const auto& m : check.mismatches) std::cerr << "mismatch: " << m << "\n";
      if (check.ordering_violation) return kOrdering;
      if (!check.ok()) return kMismatch;
      std::cout << "ok: all selections reproduce\n";
      return kOk;
    }

    if (*count) {
      auto contest = load_contest(count_contest);
      auto st = stv::count(contest, load_ballots(contest, count_files));
      std::cerr << "quota " << st.quota << ", formal " << st.formal_ballots << "; elected:";
      for (auto c : st.elected) std::cerr << " " << st.candidates[c];
      std::cerr << "\n";
      auto log = stv::format_round_log_csv(st);
      if (count_log.empty()) std::cout << log;
      else write_file(count_log, log);
      return kOk;
    }

    if (*margin) {
      auto contest = load_contest(margin_contest);
      auto st = stv::count(contest, load_ballots(contest, margin_files));
      stv::MarginOptions opt{margin_frozen};
      auto m = stv::apparent_margin(st, opt);
      json out{{"kind", stv::to_string(m.kind)},
               {"vote_changes", m.vote_changes},
               {"pct", m.pct},
               {"effect", m.effect},
               {"already_tied", m.already_tied}};
      std::cout << out.dump(2) << "\n";
      return kOk;
    }

    if (*ci) {
      ConfidenceInterval interval;
      if (ci_n2 >= 0) {
        ErrorSample s1, s2;
        s1.ballots_inspected = ci_n;
        s1.ballots_with_error = ci_k;
        s1.total_rank_discrepancies = ci_k;
        s2.stage = 2;
        s2.ballots_inspected = ci_n2;
        s2.ballots_with_error = std::max<std::int64_t>(ci_k2, 0);
        s2.total_rank_discrepancies = s2.ballots_with_error;
        interval = two_stage_interval(s1, s2, ci_level);
      } else {
        interval = clopper_pearson(ci_k, ci_n, ci_level);
      }
      std::cout << "(" << fmt4(interval.lower) << ", " << fmt4(interval.upper) << ")\n";
      if (ci_cast > 0) {
        auto counts = scale_to_counts(interval, ci_cast);
        std::cout << "(" << counts.lower << ", " << counts.upper << ")\n";
      }
      return kOk;
    }

    if (*serve) {
      auto cfg = service::parse_config(read_file(serve_config));
      static service::Server* running = nullptr;
      service::Server server(cfg);
      running = &server;
      std::signal(SIGINT, [](int) { if (running) running->stop(); });
      std::signal(SIGTERM, [](int) { if (running) running->stop(); });
      int port = server.bind();
      std::cerr << "listening on " << cfg.host << ":" << port << "\n";
      server.listen();
      return kOk;
    }

    if (*replay) {
      auto s = Session::replay(read_file(replay_log));
      json out{{"session_id", s.id()},
               {"events", s.events().size()},
               {"log_head", s.head()},
               {"stats", service::to_json(s.stats())},
               {"conclusion", s.conclusion() ? service::to_json(*s.conclusion()) : json(nullptr)}};
      std::cout << out.dump(2) << "\n";
      return kOk;
    }
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.code()) << "): " << e.what() << "\n";
    return exit_for(e);
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kInternal;
}
