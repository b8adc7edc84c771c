#include "consensus/review_service.hpp"

#include <set>

#include "consensus/error.hpp"
#include "consensus/manifest.hpp"
#include "consensus/scoring.hpp"
#include "httplib.h"
#include "json_util.hpp"

namespace consensus {

struct ReviewService::Http {
  httplib::Server server;
};

namespace {

Json error_body(const Error& e) { return Json{{"error", to_string(e.code())}, {"detail", e.detail()}}; }

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kUnknownCase: return 404;
    case ErrorCode::kAlreadyDecided: return 409;
    case ErrorCode::kSchemaError: return 400;
    default: return 500;
  }
}

void reply(httplib::Response& res, int status, const Json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

std::optional<Json> read_optional(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) return std::nullopt;
  return detail::read_json_file(p);
}

}  // namespace

ReviewService::ReviewService(std::filesystem::path run_dir, std::shared_ptr<DecisionStore> decisions)
    : run_dir_(std::move(run_dir)), decisions_(std::move(decisions)), http_(std::make_unique<Http>()) {
  if (!std::filesystem::is_directory(run_dir_)) {
    throw Error(ErrorCode::kConfigError, "run directory " + run_dir_.string() + " does not exist");
  }
  if (!decisions_) decisions_ = std::make_shared<DecisionStore>(run_dir_);

  auto& s = http_->server;
  // SO_REUSEPORT (the library default) would let a second server share a busy port.
  s.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
  });
  s.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                         {"Access-Control-Allow-Headers", "Content-Type"},
                         {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  s.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  auto guarded = [](auto&& fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const Error& e) {
        reply(res, http_status(e.code()), error_body(e));
      } catch (const std::exception& e) {
        reply(res, 500, Json{{"error", "Internal"}, {"detail", e.what()}});
      }
    };
  };
  s.Get("/api/queue", guarded([this](const httplib::Request&, httplib::Response& res) {
          reply(res, 200, queue());
        }));
  s.Get(R"(/api/case/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
          reply(res, 200, task(req.matches[1]));
        }));
  s.Post(R"(/api/case/([^/]+)/decision)", guarded([this](const httplib::Request& req, httplib::Response& res) {
           Json body;
           try {
             body = Json::parse(req.body);
           } catch (const Json::parse_error& e) {
             throw Error(ErrorCode::kSchemaError, e.what());
           }
           const std::string id = req.matches[1];
           decide(id, body);
           reply(res, 200, task(id));
         }));
  s.Get("/api/run/summary", guarded([this](const httplib::Request&, httplib::Response& res) {
          reply(res, 200, summary());
        }));
}

ReviewService::~ReviewService() { stop(); }

bool ReviewService::known_case(const std::string& case_id) const {
  const auto manifest = run_dir_ / "cases.json";
  if (!std::filesystem::exists(manifest)) return false;
  const auto doc = detail::read_json_file(manifest);
  for (const auto& c : doc.at("cases")) {
    if (c.value("case_id", "") == case_id) return true;
  }
  return false;
}

Json ReviewService::task(const std::string& case_id) const {
  if (!known_case(case_id)) throw Error(ErrorCode::kUnknownCase, case_id);
  const auto dir = case_dir(run_dir_, case_id);
  const auto state = read_optional(dir / "state");
  if (!state) throw Error(ErrorCode::kUnknownCase, case_id + " has no review state");

  Json t;
  t["case_id"] = case_id;
  t["case_status"] = state->value("status", "");
  const auto decision = decisions_->get(case_id);
  t["status"] = decision ? "decided" : "open";
  t["decision"] = decision ? Json(*decision) : Json(nullptr);
  t["report"] = nullptr;
  t["inconsistencies"] = Json::array();
  t["digests"] = Json::object();
  for (const auto& out : state->at("outputs")) {
    const auto output = output_from_json(out);
    t["digests"][std::string(to_string(role_of(output)))] = output_digest(output);
    if (const auto* composed = std::get_if<ComposedReport>(&output); composed && t["report"].is_null()) {
      t["report"] = composed->report;
    }
    if (const auto* qa = std::get_if<QAReview>(&output)) {
      t["inconsistencies"] = qa->inconsistencies;
      if (qa->revised_report) t["report"] = *qa->revised_report;
    }
  }
  const auto trace = state->at("trace");
  std::int64_t updated = 0;
  for (const auto& step : trace.at("steps")) updated = std::max<std::int64_t>(updated, step.value("end_ms", 0));
  t["updated_ms"] = updated;
  return t;
}

Json ReviewService::queue() const {
  Json out = Json::array();
  const auto cases_dir = run_dir_ / "cases";
  if (!std::filesystem::exists(cases_dir)) return out;
  std::set<std::string> ids;
  for (const auto& entry : std::filesystem::directory_iterator(cases_dir)) {
    if (entry.is_directory()) ids.insert(entry.path().filename().string());
  }
  for (const auto& id : ids) {
    const auto state = read_optional(case_dir(run_dir_, id) / "state");
    if (!state || state->value("status", "") != to_string(CaseStatus::kAwaitingReview)) continue;
    if (decisions_->get(id)) continue;
    out.push_back(task(id));
  }
  return out;
}

void ReviewService::decide(const std::string& case_id, const Json& body) {
  const auto current = task(case_id);
  if (current["status"] == "decided" || current["case_status"] != to_string(CaseStatus::kAwaitingReview)) {
    throw Error(ErrorCode::kAlreadyDecided, case_id);
  }
  const auto decision = body.get<ReviewerDecision>();
  if (!decisions_->post(case_id, decision)) throw Error(ErrorCode::kAlreadyDecided, case_id);
}

Json ReviewService::summary() const { return to_json_value(score_run(run_dir_)); }

void ReviewService::bind(const std::string& host, int port) {
  if (port == 0) {
    port_ = http_->server.bind_to_any_port(host);
  } else if (http_->server.bind_to_port(host, port)) {
    port_ = port;
  } else {
    port_ = -1;
  }
  if (port_ <= 0) throw Error(ErrorCode::kBindError, host + ":" + std::to_string(port));
}

void ReviewService::start() {
  thread_ = std::thread([this] { http_->server.listen_after_bind(); });
  http_->server.wait_until_ready();
}

void ReviewService::serve() { http_->server.listen_after_bind(); }

void ReviewService::stop() {
  http_->server.stop();
  if (thread_.joinable()) thread_.join();
}

std::pair<std::string, int> parse_bind_address(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos) throw Error(ErrorCode::kBindError, "expected host:port, got " + address);
  try {
    std::size_t used = 0;
    const int port = std::stoi(address.substr(colon + 1), &used);
    if (used != address.size() - colon - 1 || port < 0 || port > 65535) throw std::out_of_range("port");
    return {address.substr(0, colon), port};
  } catch (const std::exception&) {
    throw Error(ErrorCode::kBindError, "invalid port in " + address);
  }
}

}  // namespace consensus
