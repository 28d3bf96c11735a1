#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <utility>

#include <httplib.h>
#include <json.hpp>

#include "senaudit/audit.hpp"

namespace senaudit::service {

using json = nlohmann::json;

enum class Role { official, scrutineer };

struct Config {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path data_dir = "data";
  std::string official_token;
  std::string scrutineer_token;
};

inline std::string trim(std::string s) {
  const char* ws = " \t\r\n";
  s.erase(0, s.find_first_not_of(ws));
  s.erase(s.find_last_not_of(ws) + 1);
  return s;
}

/// `key = value` lines; `#` starts a comment; values may be double-quoted.
/// SENAUDIT_DATA_DIR overrides data_dir.
inline Config parse_config(std::string_view text, bool use_env = true) {
  Config cfg;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::format, "config line " + std::to_string(lineno) + ": expected key = value");
    }
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (key == "host") cfg.host = value;
    else if (key == "port") {
      try {
        cfg.port = std::stoi(value);
      } catch (const std::exception&) {
        throw Error(ErrorCode::format, "config: port must be an integer");
      }
    } else if (key == "data_dir" || key == "session_store") cfg.data_dir = value;
    else if (key == "official_token") cfg.official_token = value;
    else if (key == "scrutineer_token") cfg.scrutineer_token = value;
    else throw Error(ErrorCode::format, "config: unknown key '" + key + "'");
  }
  if (use_env) {
    if (const char* dir = std::getenv("SENAUDIT_DATA_DIR"); dir && *dir) cfg.data_dir = dir;
  }
  if (cfg.official_token.empty() || cfg.scrutineer_token.empty()) {
    throw Error(ErrorCode::format, "config needs official_token and scrutineer_token");
  }
  if (cfg.official_token == cfg.scrutineer_token) {
    throw Error(ErrorCode::format, "official and scrutineer tokens must differ");
  }
  return cfg;
}

// ---- JSON views --------------------------------------------------------------

inline json to_json(const ConfidenceInterval& ci) {
  return {{"lower", ci.lower},
          {"upper", ci.upper},
          {"point", ci.point},
          {"level", ci.level},
          {"method", ci.method == IntervalMethod::clopper_pearson ? "clopper_pearson" : "bonferroni_two_stage"}};
}

inline json to_json(const CountInterval& c) { return {{"lower", c.lower}, {"upper", c.upper}}; }

inline json to_json(const SamplingPlan& p) {
  return {{"contest_id", p.contest_id},   {"jurisdiction", p.jurisdiction},
          {"population", p.population},   {"target", p.target},
          {"assurance", p.assurance},     {"p", p.p},
          {"expected_sample", p.expected_sample}};
}

inline json to_json(const ErrorSample& s) {
  return {{"stage", s.stage},
          {"ballots_inspected", s.ballots_inspected},
          {"ballots_with_error", s.ballots_with_error},
          {"total_rank_discrepancies", s.total_rank_discrepancies}};
}

inline json to_json(const MarginRecord& m) {
  return {{"vote_changes", m.vote_changes}, {"kind", m.kind}, {"source", m.source}, {"effect", m.effect}};
}

inline json to_json(const Discrepancy& d) {
  json diffs = json::array();
  for (const auto& r : d.diffs) {
    diffs.push_back({{"candidate", r.candidate}, {"digitised", r.digitised}, {"human_read", r.human_read}});
  }
  return {{"ballot", d.ballot.str()},
          {"digitised", d.digitised.cells()},
          {"human_read", d.human_read.cells()},
          {"rank_diffs", diffs},
          {"entered_by", d.entered_by},
          {"at", d.at.iso8601()}};
}

inline json to_json(const AuditConclusion& c) {
  return {{"scenario", to_string(c.scenario)},
          {"ci", to_json(c.ci)},
          {"ci_counts", to_json(c.ci_counts)},
          {"margin", c.margin},
          {"stage", c.stage},
          {"recommendation", c.recommendation},
          {"checklist", c.checklist}};
}

inline json to_json(const LiveStats& s) {
  json j{{"phase", to_string(s.phase)},
         {"cast_ballots", s.cast_ballots},
         {"selected", s.selected},
         {"read", s.read},
         {"stage1", to_json(s.stage1)},
         {"stage2", s.stage2 ? to_json(*s.stage2) : json(nullptr)},
         {"ci", s.ci ? to_json(*s.ci) : json(nullptr)},
         {"ci_counts", s.ci_counts ? to_json(*s.ci_counts) : json(nullptr)},
         {"margin", s.margin ? to_json(*s.margin) : json(nullptr)},
         {"scenario", s.scenario ? json(to_string(*s.scenario)) : json(nullptr)}};
  return j;
}

inline json to_json(const ReconcileReport& r) {
  json items = json::array();
  for (const auto& i : r.items) {
    items.push_back({{"severity", i.severity},
                     {"kind", i.kind},
                     {"subject", i.subject},
                     {"expected", i.expected},
                     {"actual", i.actual},
                     {"message", i.message}});
  }
  return {{"clean", r.clean()}, {"items", items}};
}

inline int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::forbidden: return 403;
    case ErrorCode::not_found: return 404;
    case ErrorCode::ordering_violation:
    case ErrorCode::invalid_state:
    case ErrorCode::conflicting_reading:
    case ErrorCode::missing_margin:
    case ErrorCode::not_selected:
    case ErrorCode::already_elected:
    case ErrorCode::not_applicable: return 409;
    case ErrorCode::integrity:
    case ErrorCode::io: return 500;
    default: return 400;
  }
}

struct Request {
  std::string method;
  std::string path;
  std::map<std::string, std::string> headers;  // lower-case names
  std::string body;
};

struct Response {
  Response() = default;
  Response(int code, json payload, std::string head)
      : status(code), body(std::move(payload)), log_head(std::move(head)) {}

  int status = 200;
  json body = json::object();
  std::string log_head;
  std::string content_type = "application/json";
  std::string raw;  // non-JSON payloads (event log)
};

/// Routes `/v1` requests onto sessions. Transport-free so it can be driven
/// directly; `Server` binds it to HTTP.
class Api {
 public:
  explicit Api(Config cfg, Clock clock = MonotonicClock{}) : cfg_(std::move(cfg)), clock_(std::move(clock)) {
    std::filesystem::create_directories(cfg_.data_dir);
    for (const auto& entry : std::filesystem::directory_iterator(cfg_.data_dir)) {
      if (entry.path().extension() != ".jsonl") continue;
      auto s = std::make_shared<Entry>(Session::replay(read_file(entry.path()), clock_));
      attach(*s);
      const auto& first = s->session.events().front();
      if (first.idempotency_key) create_keys_[*first.idempotency_key] = s->session.id();
      sessions_.emplace(s->session.id(), std::move(s));
    }
  }

  Response handle(const Request& req) {
    Response res;
    try {
      res = route(req);
    } catch (const Error& e) {
      res.status = http_status(e.code());
      res.body = {{"error", {{"code", to_string(e.code())}, {"message", e.what()}}}};
    } catch (const json::exception& e) {
      res.status = 400;
      res.body = {{"error", {{"code", "format"}, {"message", e.what()}}}};
    }
    if (res.raw.empty()) res.body["log_head"] = res.log_head;
    return res;
  }

 private:
  struct Entry {
    explicit Entry(Session s) : session(std::move(s)) {}
    std::mutex mu;
    Session session;
  };

  Role authorize(const Request& req) const {
    auto it = req.headers.find("authorization");
    if (it == req.headers.end() || it->second.rfind("Bearer ", 0) != 0) {
      throw Error(ErrorCode::forbidden, "missing bearer token");
    }
    const auto token = it->second.substr(7);
    if (token == cfg_.official_token) return Role::official;
    if (token == cfg_.scrutineer_token) return Role::scrutineer;
    throw Error(ErrorCode::forbidden, "unknown token");
  }

  void attach(Entry& e) {
    const auto path = cfg_.data_dir / (e.session.id() + ".jsonl");
    e.session.on_append([path](const Event& ev) {
      std::ofstream out(path, std::ios::binary | std::ios::app);
      if (!out) throw Error(ErrorCode::io, "cannot append to " + path.string());
      out << ev.to_json().dump() << "\n";
    });
  }

  std::shared_ptr<Entry> find(const std::string& id) {
    std::shared_lock lock(sessions_mu_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw Error(ErrorCode::not_found, "no session " + id);
    return it->second;
  }

  static std::optional<std::string> header(const Request& req, const std::string& name) {
    auto it = req.headers.find(name);
    if (it == req.headers.end() || it->second.empty()) return std::nullopt;
    return it->second;
  }

  static json body_of(const Request& req) {
    if (trim(req.body).empty()) return json::object();
    auto j = json::parse(req.body);
    if (!j.is_object()) throw Error(ErrorCode::format, "request body must be a JSON object");
    return j;
  }

  Response create_session(const Request& req) {
    auto idem = header(req, "idempotency-key");
    auto b = body_of(req);
    std::unique_lock lock(sessions_mu_);
    if (idem) {
      if (auto it = create_keys_.find(*idem); it != create_keys_.end()) {
        auto& s = sessions_.at(it->second)->session;
        return {201, {{"session_id", s.id()}, {"plan", to_json(s.plan())}}, s.head()};
      }
    }
    SessionConfig sc;
    sc.session_id = b.value("session_id", std::string{});
    if (sc.session_id.empty()) sc.session_id = "s" + std::to_string(sessions_.size() + 1);
    check_batch_id(sc.session_id);
    if (sessions_.count(sc.session_id)) {
      throw Error(ErrorCode::invalid_state, "session " + sc.session_id + " already exists");
    }
    sc.contest = b.at("contest").get<Contest>();
    sc.target = b.at("target").get<std::int64_t>();
    sc.assurance = b.value("assurance", 0.999);
    sc.level = b.value("level", 0.95);
    if (b.contains("population") && !b["population"].is_null()) sc.population = b["population"].get<std::int64_t>();
    auto entry = std::make_shared<Entry>(Session::create(sc, clock_, "official", idem));
    const auto path = cfg_.data_dir / (sc.session_id + ".jsonl");
    write_file(path, entry->session.log_jsonl());
    attach(*entry);
    if (idem) create_keys_[*idem] = sc.session_id;
    auto& s = entry->session;
    Response r{201, {{"session_id", s.id()}, {"plan", to_json(s.plan())}}, s.head()};
    sessions_.emplace(sc.session_id, std::move(entry));
    return r;
  }

  Response route(const Request& req) {
    static const std::regex session_path(R"(^/v1/sessions/([A-Za-z0-9_.-]+)(/.*)?$)");
    if (req.method == "GET" && req.path == "/v1/health") return {200, {{"status", "ok"}}, ""};
    const Role role = authorize(req);
    const bool mutating = req.method != "GET";
    if (mutating && role != Role::official) {
      throw Error(ErrorCode::forbidden, "scrutineer role is read-only");
    }
    if (req.path == "/v1/sessions") {
      if (req.method == "POST") return create_session(req);
      if (req.method == "GET") {
        std::shared_lock lock(sessions_mu_);
        json ids = json::array();
        for (const auto& [id, _] : sessions_) ids.push_back(id);
        return {200, {{"sessions", ids}}, ""};
      }
    }
    std::smatch m;
    if (!std::regex_match(req.path, m, session_path)) throw Error(ErrorCode::not_found, "no route " + req.path);
    auto entry = find(m[1].str());
    std::lock_guard lock(entry->mu);
    Session& s = entry->session;
    const std::string sub = m[2].matched ? m[2].str() : "";
    auto idem = header(req, "idempotency-key");
    const std::string actor = role == Role::official ? "official" : "scrutineer";
    auto ok = [&](json body, int status = 200) { return Response{status, std::move(body), s.head()}; };

    if (req.method == "GET") {
      if (sub.empty()) return ok(summary(s));
      if (sub == "/stats") return ok(to_json(s.stats()));
      if (sub == "/selections") return ok(selections(s));
      if (sub == "/reconcile") return ok(to_json(s.reconcile()));
      if (sub == "/discrepancies") {
        json arr = json::array();
        for (const auto& d : s.discrepancies()) arr.push_back(to_json(d));
        return ok({{"discrepancies", arr}});
      }
      if (sub == "/events") {
        Response r(200, json::object(), s.head());
        r.content_type = "application/x-ndjson";
        r.raw = s.log_jsonl();
        return r;
      }
      if (sub == "/export") return ok(export_bundle(s));
      if (sub.rfind("/ballots/", 0) == 0) return ok(ballot_view(s, BallotRef::parse(sub.substr(9))));
      throw Error(ErrorCode::not_found, "no route " + req.path);
    }
    if (req.method != "POST") throw Error(ErrorCode::not_found, "unsupported method " + req.method);

    auto b = body_of(req);
    if (sub == "/turnout") {
      s.record_turnout(b.at("place").get<std::string>(), b.at("count").get<std::int64_t>(), actor, idem);
      return ok({{"place", b["place"]}, {"count", s.turnout().at(b["place"].get<std::string>())}});
    }
    if (sub == "/batches") {
      const auto id = b.at("batch_id").get<std::string>();
      check_batch_id(id);
      Batch batch = parse_preference_file(b.at("ballots_csv").get<std::string>(), s.contest(), id);
      std::optional<std::int64_t> first_serial;
      if (b.contains("first_serial") && !b["first_serial"].is_null()) first_serial = b["first_serial"].get<std::int64_t>();
      s.commit_batch(batch, first_serial, actor, idem);
      const auto& c = *s.batch(id).commitment();
      return ok({{"batch_id", id}, {"size", s.batch(id).size()}, {"digest", to_hex(c.digest)},
                 {"committed_at", c.at.iso8601()}}, 201);
    }
    if (sub == "/seeds") {
      std::optional<std::vector<std::string>> batches;
      if (b.contains("batches") && !b["batches"].is_null()) batches = b["batches"].get<std::vector<std::string>>();
      const auto& e = s.register_seed(b.at("transcript").get<std::string>(), batches, actor, idem);
      return ok({{"seed_digest", e.data["seed_digest"]}, {"drawn_at", e.at.iso8601()},
                 {"selections", e.data["selections"]}}, 201);
    }
    if (sub == "/readings") {
      auto ref = BallotRef::parse(b.at("ballot").get<std::string>());
      PreferenceSequence human;
      if (b.contains("cells")) {
        human = PreferenceSequence(b["cells"].get<std::vector<std::string>>(), Source::human_read);
      } else {
        human = PreferenceSequence::from_ranks(s.contest(), b.at("ranks").get<std::map<std::string, int>>());
      }
      auto d = s.submit_reading(ref, human, b.value("operator", actor), b.value("correction", false), idem);
      return ok({{"ballot", ref.str()}, {"discrepancy", d ? to_json(*d) : json(nullptr)},
                 {"stats", to_json(s.stats())}});
    }
    if (sub == "/margin") {
      if (b.value("compute", false)) {
        stv::MarginOptions opt;
        opt.first_preferences_frozen = b.value("first_preferences_frozen", false);
        return ok(to_json(s.compute_margin(actor, idem, opt)));
      }
      MarginRecord mr{b.at("vote_changes").get<std::int64_t>(), b.value("kind", std::string("external")),
                      "external", b.value("effect", std::string{})};
      s.set_margin(mr, actor, idem);
      return ok(to_json(*s.margin()));
    }
    if (sub == "/analysis") {
      s.begin_analysis(actor, idem);
      return ok({{"phase", to_string(s.phase())}});
    }
    if (sub == "/conclusion") return ok(to_json(s.conclude(actor, idem)));
    if (sub == "/second-pass") {
      return ok(to_json(s.escalate_second_pass(b.at("target").get<std::int64_t>(), actor, idem)), 201);
    }
    if (sub == "/second-pass/seed") {
      const auto& e = s.register_second_pass_seed(b.at("transcript").get<std::string>(), actor, idem);
      return ok({{"seed_digest", e.data["seed_digest"]}, {"indices", e.data["indices"]}}, 201);
    }
    throw Error(ErrorCode::not_found, "no route " + req.path);
  }

  static json summary(const Session& s) {
    json batches = json::array();
    for (const auto& id : s.batch_ids()) {
      const auto& b = s.batch(id);
      batches.push_back({{"batch_id", id}, {"size", b.size()}, {"digest", to_hex(b.commitment()->digest)},
                         {"committed_at", b.commitment()->at.iso8601()}});
    }
    return {{"session_id", s.id()},
            {"contest", s.contest()},
            {"phase", to_string(s.phase())},
            {"level", s.level()},
            {"plan", to_json(s.plan())},
            {"second_plan", s.second_plan() ? to_json(*s.second_plan()) : json(nullptr)},
            {"batches", batches},
            {"turnout", s.turnout()},
            {"events", s.events().size()},
            {"conclusion", s.conclusion() ? to_json(*s.conclusion()) : json(nullptr)}};
  }

  static json selections(const Session& s) {
    json per = json::array();
    for (const auto& [id, idx] : s.selections()) per.push_back({{"batch_id", id}, {"indices", idx}});
    json pending = json::array();
    for (const auto& r : s.pending_ballots()) {
      pending.push_back({{"ballot", r.str()}, {"origin", s.batch(r.batch_id).ballots()[static_cast<std::size_t>(r.index)].origin_label},
                         {"stage", s.stage_of(r)}});
    }
    json all = json::array();
    for (const auto& r : s.selected_ballots()) all.push_back(r.str());
    return {{"selections", per}, {"ballots", all}, {"pending", pending}, {"selection_file", s.selection_file()}};
  }

  static json ballot_view(const Session& s, const BallotRef& ref) {
    json readings = json::array();
    if (auto it = s.readings().find(ref); it != s.readings().end()) {
      for (const auto& r : it->second) {
        readings.push_back({{"cells", r.human.cells()}, {"operator", r.operator_id},
                            {"at", r.at.iso8601()}, {"correction", r.correction}, {"seq", r.seq}});
      }
    }
    auto d = s.discrepancy_for(ref);
    return {{"ballot", ref.str()},
            {"stage", s.stage_of(ref)},
            {"candidates", s.contest().candidates},
            {"digitised", s.digitised(ref).cells()},
            {"readings", readings},
            {"discrepancy", d ? to_json(*d) : json(nullptr)}};
  }

  static json export_bundle(const Session& s) {
    auto dir = std::filesystem::temp_directory_path() /
               ("senaudit-export-" + s.id() + "-" + s.head().substr(0, 16));
    s.export_bundle(dir);
    json files = json::object();
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
      files[entry.path().filename().string()] = read_file(entry.path());
    }
    std::filesystem::remove_all(dir);
    return {{"files", files}};
  }

  Config cfg_;
  Clock clock_;
  std::shared_mutex sessions_mu_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  std::map<std::string, std::string> create_keys_;
};

/// Binds an Api to cpp-httplib.
class Server {
 public:
  explicit Server(Config cfg, Clock clock = MonotonicClock{}) : cfg_(cfg), api_(std::move(cfg), std::move(clock)) {
    auto handler = [this](const httplib::Request& hreq, httplib::Response& hres) {
      Request req{hreq.method, hreq.path, {}, hreq.body};
      for (const auto& [k, v] : hreq.headers) {
        std::string key = k;
        for (auto& ch : key) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        req.headers[key] = v;
      }
      auto res = api_.handle(req);
      hres.status = res.status;
      hres.set_header("X-Log-Head", res.log_head);
      if (!res.raw.empty()) hres.set_content(res.raw, res.content_type);
      else hres.set_content(res.body.dump(), res.content_type);
    };
    const std::string pattern = R"(/v1(/.*)?)";
    http_.Get(pattern, handler);
    http_.Post(pattern, handler);
    http_.Put(pattern, handler);
    http_.Delete(pattern, handler);
    http_.Patch(pattern, handler);
  }

  /// Binds the configured port (0 picks a free one) and returns it.
  int bind() {
    if (cfg_.port == 0) return port_ = http_.bind_to_any_port(cfg_.host);
    if (!http_.bind_to_port(cfg_.host, cfg_.port)) throw Error(ErrorCode::io, "cannot bind port");
    return port_ = cfg_.port;
  }
  bool listen() { return http_.listen_after_bind(); }
  void stop() { http_.stop(); }
  bool running() const { return http_.is_running(); }
  int port() const { return port_; }
  void wait_until_ready() const { http_.wait_until_ready(); }

 private:
  Config cfg_;
  Api api_;
  httplib::Server http_;
  int port_ = 0;
};

}  // namespace senaudit::service
