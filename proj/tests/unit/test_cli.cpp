#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "calip/cli.hpp"
#include "calip/feature_store.hpp"
#include "doctest.h"
#include "json.hpp"
#include "support/synthetic.hpp"

using namespace calip;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "calip");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

bool contains(const std::string& haystack, const std::string& needle) {
  return haystack.find(needle) != std::string::npos;
}

struct Workspace {
  fs::path dir;
  std::string bundle;
  Workspace() {
    dir = fs::temp_directory_path() / ("calip_cli_" + std::to_string(std::random_device{}()));
    fs::create_directories(dir);
    bundle = (dir / "b.calf").string();
    save_bundle(testing::aligned_bundle(1, 3, 8, 6), bundle);
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string path(const char* name) const { return (dir / name).string(); }
};

}  // namespace

TEST_CASE("zeroshot prints accuracy and writes a report") {
  Workspace ws;
  const auto r = run_cli({"zeroshot", "--features", ws.bundle, "--report", ws.path("r.jsonl")});
  CHECK(r.code == 0);
  CHECK(contains(r.out, "accuracy: 100.00%"));
  std::ifstream f(ws.path("r.jsonl"));
  std::string line;
  REQUIRE(std::getline(f, line));
  CHECK(nlohmann::json::parse(line)["mode"] == "zeroshot");
}

TEST_CASE("usage errors exit 2 with a message") {
  Workspace ws;
  auto r = run_cli({"zeroshot", "--features", ws.path("missing.calf")});
  CHECK(r.code == 2);
  CHECK(contains(r.err, "no such file"));

  r = run_cli({"zeroshot", "--features", ws.bundle, "--beta2", "-1"});
  CHECK(r.code == 2);
  CHECK(contains(r.err, "--beta2"));

  r = run_cli({"zeroshot", "--features", ws.bundle, "--mask", "1,5"});
  CHECK(r.code == 2);
  CHECK(contains(r.err, "--mask"));

  r = run_cli({"zeroshot"});
  CHECK(r.code == 2);
  r = run_cli({"frobnicate"});
  CHECK(r.code == 2);
  r = run_cli({});
  CHECK(r.code == 2);
}

TEST_CASE("help exits 0") {
  const auto r = run_cli({"--help"});
  CHECK(r.code == 0);
  CHECK(contains(r.out, "zeroshot"));
}

TEST_CASE("corrupt bundle is reported with its offset") {
  Workspace ws;
  auto bytes = read_file(ws.bundle);
  bytes[0] = 'X';
  write_file(ws.path("bad.calf"), bytes);
  const auto r = run_cli({"inspect", "--features", ws.path("bad.calf")});
  CHECK(r.code == 2);
  CHECK(contains(r.err, "byte offset 0"));
}

TEST_CASE("train then fewshot") {
  Workspace ws;
  const auto w = ws.path("w.calw");
  auto r = run_cli({"train", "--features", ws.bundle, "--shots", "4", "--epochs", "5", "--out", w});
  CHECK(r.code == 0);
  CHECK(contains(r.out, "final train accuracy"));
  CHECK(fs::file_size(w) == weights_file_size(8));
  r = run_cli({"fewshot", "--features", ws.bundle, "--weights", w});
  CHECK(r.code == 0);
  CHECK(contains(r.out, "accuracy:"));

  r = run_cli({"train", "--features", ws.bundle, "--shots", "3", "--out", w});
  CHECK(r.code == 2);
  CHECK(contains(r.err, "--allow-any-shots"));
  r = run_cli({"train", "--features", ws.bundle, "--shots", "3", "--epochs", "2", "--allow-any-shots", "--out", w});
  CHECK(r.code == 0);
  r = run_cli({"train", "--features", ws.bundle, "--shots", "8", "--out", w});
  CHECK(r.code == 2);
  CHECK(contains(r.err, "class"));
}

TEST_CASE("sweep writes a table") {
  Workspace ws;
  const auto r = run_cli({"sweep", "--val", ws.bundle, "--grid", "beta2=0:0.5:1,beta3=0.1", "--table",
                          ws.path("t.jsonl")});
  CHECK(r.code == 0);
  CHECK(contains(r.out, "grid points: 3"));
  std::ifstream f(ws.path("t.jsonl"));
  int lines = 0;
  for (std::string l; std::getline(f, l);) ++lines;
  CHECK(lines == 3);
  CHECK(run_cli({"sweep", "--val", ws.bundle, "--grid", "beta2=oops"}).code == 2);
}

TEST_CASE("gradcheck and inspect") {
  Workspace ws;
  auto r = run_cli({"gradcheck", "--seed", "1"});
  CHECK(r.code == 0);
  CHECK(contains(r.out, "gradcheck: pass"));
  CHECK(run_cli({"gradcheck", "--dims", "20x2x2"}).code == 2);

  r = run_cli({"inspect", "--features", ws.bundle});
  CHECK(r.code == 0);
  CHECK(contains(r.out, "images: 18"));
  CHECK(contains(r.out, "classes: 3"));
  CHECK(contains(r.out, "non-finite values: 0"));
}

TEST_CASE("ablate") {
  Workspace ws;
  auto r = run_cli({"ablate", "--features", ws.bundle, "--kind", "logits"});
  CHECK(r.code == 0);
  CHECK(contains(r.out, "1,2,3,4"));
  r = run_cli({"ablate", "--features", ws.bundle, "--shots", "2", "--epochs", "2"});
  CHECK(r.code == 0);
  CHECK(contains(r.out, "pre+post"));
}

TEST_CASE("train is byte-reproducible and fits a separable bundle") {
  Workspace ws;
  const auto features = ws.path("clustered.calf");
  save_bundle(testing::clustered_bundle(2, 4, 16, 16), features);
  const auto a = ws.path("a.calw"), b = ws.path("b.calw");
  const auto r = run_cli({"train", "--features", features, "--shots", "16", "--out", a});
  CHECK(r.code == 0);
  CHECK(contains(r.out, "final train accuracy: 100.00%"));
  CHECK(contains(r.out, "epoch loss:"));
  CHECK(run_cli({"train", "--features", features, "--shots", "16", "--out", b}).code == 0);
  CHECK(read_file(a) == read_file(b));
}

TEST_CASE("sweep grid forms") {
  Workspace ws;
  auto r = run_cli({"sweep", "--val", ws.bundle, "--grid", "beta2=0.5,beta3=0.25,alpha_t=1.5,alpha_s=3"});
  CHECK(r.code == 0);
  CHECK(contains(r.out, "best: alpha_t=1.5 alpha_s=3 beta1=1 beta2=0.5 beta3=0.25"));

  r = run_cli({"sweep", "--val", ws.bundle, "--grid", "beta2=0.08:0.02:0.18,beta3=0.12", "--table", ws.path("t.jsonl")});
  CHECK(r.code == 0);
  CHECK(contains(r.out, "(6 rows)"));

  r = run_cli({"sweep", "--val", ws.bundle, "--grid", "beta2=0.1,beta3=0.1:x:1"});
  CHECK(r.code == 2);
  CHECK(contains(r.err, "position 20"));

  r = run_cli({"sweep", "--train", ws.bundle, "--grid", "beta2=0:0.5:1", "--mode", "fewshot", "--shots", "4",
               "--epochs", "2"});
  CHECK(r.code == 0);
  CHECK(contains(r.out, "grid points: 3"));
}

TEST_CASE("inspect an empty bundle") {
  Workspace ws;
  auto b = testing::aligned_bundle(1, 2, 4, 0);
  const auto path = ws.path("empty.calf");
  save_bundle(b, path);
  const auto r = run_cli({"inspect", "--features", path});
  CHECK(r.code == 0);
  CHECK(contains(r.out, "images: 0"));
}
