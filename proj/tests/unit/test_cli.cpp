#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "anchor/cli.hpp"

using namespace anchor;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "anchor-cli-test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::string write_corpus(const std::string& name, int n) {
  const auto path = scratch(name);
  std::ofstream f(path);
  for (int i = 0; i < n; ++i) {
    nlohmann::ordered_json t{{"id", "c" + std::to_string(i)},
                             {"prompt", std::string("ab⟦cd⟧") + static_cast<char>('a' + i % 26)},
                             {"entry_check", {{{"in", "ab"}, {"out", "abab"}}}},
                             {"difficulty", i % 2 ? "easy" : "hard"}};
    f << t.dump() << '\n';
  }
  return path.string();
}

}  // namespace

TEST_CASE("backend selectors") {
  const auto toy = cli::BackendSelector::parse("toy:seed=7:vocab=32:dim=8");
  CHECK(toy.kind == cli::BackendSelector::Kind::toy);
  CHECK(toy.seed == 7);
  CHECK(toy.vocab == 32);
  CHECK(toy.dim == 8);
  const auto remote = cli::BackendSelector::parse("remote:localhost:7070");
  CHECK(remote.host == "localhost");
  CHECK(remote.port == 7070);
  CHECK(cli::BackendSelector::parse("synthetic:peak=1.4").peak == 1.4);
  CHECK_THROWS_AS(cli::BackendSelector::parse("gpu"), cli::UsageError);
  CHECK_THROWS_AS(cli::BackendSelector::parse("toy:seed"), cli::UsageError);
  CHECK_THROWS_AS(cli::BackendSelector::parse("toy:peak=1"), cli::UsageError);
}

TEST_CASE("version and usage") {
  const auto v = run({"--version"});
  CHECK(v.code == 0);
  CHECK(v.out.find("anchor ") == 0);
  CHECK(run({}).code == 1);
  CHECK(run({"frobnicate"}).code == 1);
  CHECK(run({"generate", "--backend", "toy:seed=7"}).code == 1);
}

TEST_CASE("generate") {
  const auto plain = run({"generate", "--backend", "toy:seed=7", "--prompt", "ab⟦cd⟧e", "--json"});
  REQUIRE(plain.code == 0);
  const auto one = run({"generate", "--backend", "toy:seed=7", "--prompt", "ab⟦cd⟧e", "--omega", "1", "--json"});
  REQUIRE(one.code == 0);
  const auto a = nlohmann::json::parse(plain.out);
  const auto b = nlohmann::json::parse(one.out);
  CHECK(a["tokens"] == b["tokens"]);
  CHECK(a["mode"] == "off");
  CHECK(b["mode"] == "fixed");

  const auto conf = run({"generate", "--backend", "toy:seed=7", "--prompt", "ab⟦cd⟧e", "--mode", "confidence", "--omega", "1.5"});
  CHECK(conf.code == 1);
  CHECK(conf.err.find("--mode confidence") != std::string::npos);
  CHECK(conf.err.find("--omega") != std::string::npos);
  CHECK(run({"generate", "--backend", "toy:seed=7", "--prompt", "ab", "--lambda", "1", "--mode", "fixed"}).code == 1);
  CHECK(run({"generate", "--backend", "toy:seed=7", "--prompt", "ab", "--top-k", "3"}).code == 1);
  CHECK(run({"generate", "--backend", "toy:seed=7", "--prompt", "ab⟦c⟧", "--lambda", "0.5"}).code == 0);
  // Runtime failures exit 2.
  CHECK(run({"generate", "--backend", "toy:seed=7", "--prompt", "zzz", "--omega", "1.5"}).code == 2);
  CHECK(run({"generate", "--backend", "remote:127.0.0.1:1", "--prompt", "ab"}).code == 2);

  const auto beam = run({"generate", "--backend", "toy:seed=7", "--prompt", "ab⟦c⟧", "--beam", "2", "--max-new", "3", "--json"});
  REQUIRE(beam.code == 0);
  CHECK(nlohmann::json::parse(beam.out)["candidates"].size() == 2);
}

TEST_CASE("generate then analyze dilution") {
  const auto trace = scratch("trace.ndjson").string();
  const auto csv = scratch("dilution.csv").string();
  REQUIRE(run({"generate", "--backend", "toy:seed=3", "--prompt", "ab⟦cd⟧e", "--omega", "1.5", "--attention", "--trace", trace}).code == 0);
  REQUIRE(run({"analyze", "dilution", "--trace", trace, "--out", csv}).code == 0);
  std::ifstream in(csv);
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  CHECK(header == "step,alpha");
  CHECK(first == "1,1");
}

TEST_CASE("gradients") {
  const auto r = run({"analyze", "gradients", "--backend", "toy:seed=7", "--prompt", "abc"});
  REQUIRE(r.code == 0);
  CHECK(r.out.rfind("position,token,score\n", 0) == 0);
  CHECK(run({"analyze", "gradients", "--backend", "remote:127.0.0.1:1", "--prompt", "abc"}).code == 2);
}

TEST_CASE("tune with a synthetic evaluator") {
  const auto corpus = write_corpus("tune.ndjson", 10);
  const auto r = run({"tune", "--backend", "synthetic:peak=1.4", "--corpus", corpus, "--json", "--early-exit"});
  REQUIRE(r.code == 0);
  CHECK(nlohmann::json::parse(r.out)["recommended"] == 1.4);
  const auto custom = run({"tune", "--backend", "synthetic:peak=0.9", "--corpus", corpus, "--grid", "0.8:1.2:0.1", "--json"});
  REQUIRE(custom.code == 0);
  CHECK(nlohmann::json::parse(custom.out)["recommended"] == 0.9);
  CHECK(run({"tune", "--backend", "synthetic:peak=1.4", "--corpus", corpus, "--folds", "11"}).code == 1);
}

TEST_CASE("eval and length analysis") {
  const auto corpus = write_corpus("eval.ndjson", 6);
  const auto report = scratch("report.json").string();
  const auto csv = scratch("report.csv").string();
  const auto r = run({"eval", "--backend", "toy:seed=7:vocab=64", "--corpus", corpus, "--out", report, "--csv", csv,
                      "--max-new", "4", "--activation", "always"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("pass@1: ") != std::string::npos);
  CHECK(std::filesystem::exists(csv));
  const auto lengths = run({"analyze", "lengths", "--report", report});
  REQUIRE(lengths.code == 0);
  CHECK(lengths.out.rfind("group,status,mean,median,count\n", 0) == 0);
  CHECK(lengths.out.find("overall,") != std::string::npos);
  CHECK(run({"eval", "--backend", "toy:seed=7:vocab=64", "--corpus", corpus, "--workers", "0"}).code == 1);
}
