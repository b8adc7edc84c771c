#include <fstream>
#include <future>

#include "consensus/error.hpp"
#include "consensus/harness.hpp"
#include "consensus/review_service.hpp"
#include "doctest.h"
#include "fixtures.hpp"

using namespace consensus;
using namespace std::chrono_literals;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

bool wait_for_awaiting(const std::filesystem::path& state) {
  for (int i = 0; i < 400; ++i) {
    if (std::filesystem::exists(state)) {
      try {
        if (Json::parse(slurp(state)).at("status") == "awaiting_review") return true;
      } catch (const std::exception&) {
      }
    }
    std::this_thread::sleep_for(25ms);
  }
  return false;
}

}  // namespace

TEST_SUITE("review_api") {
  TEST_CASE("decisions over http") {
    testing::TempDir dir;
    const auto config = testing::fixture_config("hitl_interactive.json", dir.path());
    const auto run_dir = config.run_dir();
    auto run = std::async(std::launch::async, [&] { return run_benchmark(config); });
    REQUIRE(wait_for_awaiting(case_dir(run_dir, "c001") / "state"));

    ReviewService service(run_dir);
    service.bind("127.0.0.1", 0);
    service.start();
    httplib::Client client("127.0.0.1", service.port());

    auto queue = client.Get("/api/queue");
    REQUIRE(queue);
    CHECK(queue->status == 200);
    const auto items = Json::parse(queue->body);
    REQUIRE(items.size() == 1);
    CHECK(items[0]["case_id"] == "c001");
    CHECK(items[0]["status"] == "open");
    CHECK(items[0]["report"]["findings_section"].get<std::string>().find("left frontal lobe") != std::string::npos);
    CHECK(items[0]["digests"].contains("ReportComposer"));

    auto task = client.Get("/api/case/c001");
    REQUIRE(task);
    CHECK(task->status == 200);
    CHECK(Json::parse(task->body)["case_status"] == "awaiting_review");

    auto missing = client.Get("/api/case/c999");
    REQUIRE(missing);
    CHECK(missing->status == 404);
    auto missing_post = client.Post("/api/case/c999/decision", R"({"decision":"approved"})", "application/json");
    REQUIRE(missing_post);
    CHECK(missing_post->status == 404);

    auto malformed = client.Post("/api/case/c001/decision", "{not json", "application/json");
    REQUIRE(malformed);
    CHECK(malformed->status == 400);
    auto pending = client.Post("/api/case/c001/decision", R"({"decision":"pending"})", "application/json");
    REQUIRE(pending);
    CHECK(pending->status == 400);

    auto accepted = client.Post("/api/case/c001/decision", R"({"decision":"approved"})", "application/json");
    REQUIRE(accepted);
    CHECK(accepted->status == 200);
    const auto decision_file = case_dir(run_dir, "c001") / "decision";
    const auto stored = slurp(decision_file);

    auto repeat = client.Post("/api/case/c001/decision", R"({"decision":"rejected"})", "application/json");
    REQUIRE(repeat);
    CHECK(repeat->status == 409);
    CHECK(slurp(decision_file) == stored);

    const auto summary = run.get();
    CHECK(summary.exit_code == 0);
    CHECK(summary.outcomes.front().trace.status == CaseStatus::kSucceeded);

    auto after = client.Get("/api/queue");
    REQUIRE(after);
    CHECK(Json::parse(after->body).empty());
    auto done = client.Post("/api/case/c001/decision", R"({"decision":"approved"})", "application/json");
    REQUIRE(done);
    CHECK(done->status == 409);

    auto scores = client.Get("/api/run/summary");
    REQUIRE(scores);
    CHECK(scores->status == 200);
    CHECK(Json::parse(scores->body)["global"]["success_rate"] == 1.0);
    service.stop();
  }

  TEST_CASE("handlers without a socket") {
    testing::TempDir dir;
    ReviewService service(dir.path());
    CHECK(service.queue().empty());
    CHECK_THROWS_AS(service.task("c001"), Error);
    try {
      service.decide("c001", Json{{"decision", "approved"}});
      FAIL("expected UnknownCase");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kUnknownCase);
    }
  }

  TEST_CASE("bind addresses") {
    CHECK(parse_bind_address("127.0.0.1:8080") == std::pair<std::string, int>{"127.0.0.1", 8080});
    CHECK_THROWS_AS(parse_bind_address("localhost"), Error);
    CHECK_THROWS_AS(parse_bind_address("host:99999"), Error);
    CHECK_THROWS_AS(parse_bind_address("host:80x"), Error);

    testing::TempDir dir;
    ReviewService first(dir.path());
    first.bind("127.0.0.1", 0);
    ReviewService second(dir.path());
    CHECK_THROWS_AS(second.bind("127.0.0.1", first.port()), Error);
  }
}
