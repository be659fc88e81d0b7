#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <regex>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const fs::path& workdir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "mixflow_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

fs::path at(const std::string& name) { return workdir() / name; }

// Runs the CLI with stdout/stderr captured into files; returns the exit code.
int run(const std::string& args, const std::string& env = "") {
  const std::string cmd = "cd '" + workdir().string() + "' && " + env + " '" MIXFLOW_CLI "' " + args +
                          " > last.out 2> last.err";
  const int status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

// Checkpoint contents without the run's own output directory.
nlohmann::json checkpoint_body(const fs::path& p) {
  nlohmann::json j = read_json(p);
  j["config"].erase("checkpoint_dir");
  return j;
}

void write(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

const std::string kTiny = R"({
  "trainer": {"epochs": 2, "iterations_per_epoch": 4, "batch_size": 32},
  "velocity": {"hidden": [16, 16]},
  "base": {"hidden": [16]},
  "validation": {"samples": 64, "steps": 4}
})";

// Data and a trained checkpoint shared by the sample/eval cases.
void ensure_fixture() {
  static bool done = false;
  if (done) return;
  REQUIRE(run("gen-data --letters AS --val-letter S --rotations 4 --samples 150 --seed 3 --out data") == 0);
  write(at("tiny.json"), kTiny);
  REQUIRE(run("train --data data --config tiny.json --model mixflow --seed 5 --out ck") == 0);
  done = true;
}

}  // namespace

TEST_CASE("gen-data writes populations and a manifest") {
  ensure_fixture();
  const auto m = read_json(at("data/manifest.json"));
  CHECK(m["dim"] == 2);
  int train = 0, val = 0;
  for (const auto& [id, c] : m["conditions"].items()) {
    CHECK(c["descriptor"].size() == 3);
    (c["split"] == "train" ? train : val)++;
  }
  CHECK(train == 4);
  CHECK(val == 2);
  CHECK(slurp(at("data/data.csv")).rfind("condition_id,f0,f1\n", 0) == 0);
}

TEST_CASE("train writes checkpoints and is deterministic") {
  ensure_fixture();
  for (const char* f : {"best.json", "last.json", "metrics.csv"}) CHECK(fs::exists(at("ck") / f));
  CHECK(read_json(at("ck/best.json")).contains("base"));
  REQUIRE(run("train --data data --config tiny.json --model mixflow --seed 5 --out ck_again") == 0);
  CHECK(checkpoint_body(at("ck/last.json")) == checkpoint_body(at("ck_again/last.json")));
  CHECK(slurp(at("ck/metrics.csv")) == slurp(at("ck_again/metrics.csv")));
}

TEST_CASE("train variants: cfm, zero epochs, dotted overrides") {
  ensure_fixture();
  CHECK(run("train --data data --config tiny.json --model cfm --out ck_cfm") == 0);
  CHECK(fs::exists(at("ck_cfm/best.json")));
  CHECK(run("train --data data --config tiny.json --epochs 0 --out ck_zero") == 0);
  CHECK(fs::exists(at("ck_zero/best.json")));
  CHECK(fs::exists(at("ck_zero/metrics.csv")));
  CHECK(run("train --data data --config tiny.json --trainer.epochs=0 --base.num_modes 3 --out ck_ovr") == 0);
  CHECK(read_json(at("ck_ovr/best.json"))["base"]["num_modes"] == 3);
}

TEST_CASE("train rejects bad configuration with exit code 2") {
  ensure_fixture();
  write(at("bad.json"), R"({"trainer": {"epochs": -1, "batch_size": 0}, "bogus": 1})");
  CHECK(run("train --data data --config bad.json --out ck_bad") == 2);
  const std::string err = slurp(at("last.err"));
  CHECK(err.find("3 problems") != std::string::npos);
  CHECK(err.find("bogus") != std::string::npos);
  CHECK(run("train --data data --model nope --out ck_bad") == 2);
  CHECK(run("train --data missing_dir --config tiny.json --out ck_bad") == 4);
}

TEST_CASE("sample: snapshots and determinism") {
  ensure_fixture();
  REQUIRE(run("sample --checkpoint ck/best.json --descriptor S_r01 --data data --n 20 "
              "--t-snapshots 0 0.5 1 --seed 9 --out s1.csv") == 0);
  REQUIRE(run("sample --checkpoint ck/best.json --descriptor '[0,1,0.25]' --n 20 "
              "--t-snapshots 0 0.5 1 --seed 9 --out s2.csv") == 0);
  const std::string a = slurp(at("s1.csv"));
  CHECK(a == slurp(at("s2.csv")));  // S_r01 has descriptor (0, 1, 0.25)
  std::istringstream in(a);
  std::string line;
  std::getline(in, line);
  CHECK(line == "t,x0,x1");
  std::map<std::string, int> per_t;
  while (std::getline(in, line)) per_t[line.substr(0, line.find(','))]++;
  CHECK(per_t.size() == 3);
  for (const auto& [t, n] : per_t) CHECK(n == 20);

  REQUIRE(run("sample --checkpoint ck/best.json --descriptor S_r01 --data data --n 20 --t-snapshots 0 "
              "--seed 10 --out s3.csv") == 0);
  CHECK(slurp(at("s3.csv")) != a);
  CHECK(run("sample --checkpoint ck/best.json --descriptor '[0,1]' --n 3 --out s4.csv") == 2);
  CHECK(run("sample --checkpoint ck/best.json --descriptor nope --data data --n 3 --out s4.csv") == 2);
  CHECK(run("sample --checkpoint missing.json --descriptor '[0,1,0]' --n 3 --out s4.csv") == 4);
}

TEST_CASE("eval: per-condition rows and a consistent aggregate") {
  ensure_fixture();
  REQUIRE(run("eval --checkpoint ck/best.json --data data --n 80 --seed 2 --out ev") == 0);
  const auto j = read_json(at("ev/eval.json"));
  CHECK(j["split"] == "val");
  REQUIRE(j["conditions"].size() == 2);
  for (const char* metric : {"mmd", "w1", "w2", "ed"}) {
    double sum = 0.0, sq = 0.0;
    for (const auto& c : j["conditions"]) sum += c[metric].get<double>();
    const double mean = sum / 2.0;
    for (const auto& c : j["conditions"]) sq += std::pow(c[metric].get<double>() - mean, 2);
    CHECK(std::abs(j["aggregate"][metric]["mean"].get<double>() - mean) <= 1e-12);
    const double sd = j["aggregate"][metric]["std"].get<double>();
    CHECK((std::abs(sd - std::sqrt(sq / 2.0)) <= 1e-12 || std::abs(sd - std::sqrt(sq)) <= 1e-12));
  }
  const std::string csv = slurp(at("ev/eval.csv"));
  CHECK(csv.rfind("condition_id,mmd,w1,w2,ed\n", 0) == 0);
  REQUIRE(run("eval --checkpoint ck/best.json --data data --n 80 --seed 2 --out ev_again") == 0);
  CHECK(slurp(at("ev_again/eval.csv")) == csv);

  CHECK(run("eval --checkpoint ck/best.json --data data --conditions S_r01 ZZ --out ev_bad") == 2);
  CHECK(slurp(at("last.err")).find("ZZ") != std::string::npos);
}

TEST_CASE("eval on an empty split is an error") {
  ensure_fixture();
  fs::remove_all(at("data_noval"));
  fs::copy(at("data"), at("data_noval"));
  auto m = read_json(at("data/manifest.json"));
  for (auto& [id, c] : m["conditions"].items()) c["split"] = "train";
  write(at("data_noval/manifest.json"), m.dump());
  CHECK(run("eval --checkpoint ck/best.json --data data_noval --out ev_empty") == 2);
}

TEST_CASE("theory --random reports") {
  REQUIRE(run("theory --random --I 2 --J 5 --D 3 --seed 4 --out th.json") == 0);
  const auto j = read_json(at("th.json"));
  CHECK(j["duality"]["gap"].get<double>() <= 1e-9);
  REQUIRE(j["dof"]["solver_support"].size() == 3);
  for (const auto& row : j["dof"]["solver_support"]) {
    CHECK(row.contains("dof"));
    CHECK(row.contains("counted_dof"));
  }
  CHECK(j["projection"]["weights"].size() == 2);
  CHECK(j["subset_sum"].contains("holds"));

  REQUIRE(run("theory --random --I 2 --J 5 --D 3 --seed 4 --out th2.json") == 0);
  CHECK(slurp(at("th.json")) == slurp(at("th2.json")));

  REQUIRE(run("theory --random --I 1 --J 6 --D 2 --checks illposed --seed 4 --out th1.json") == 0);
  const auto k = read_json(at("th1.json"));
  CHECK(std::abs(k["illposed"]["i1_coefficient"].get<double>()) <= 1e-12);
  CHECK(std::abs(k["illposed"]["i1_measured_slope"].get<double>()) <= 1e-9);
  CHECK_FALSE(k.contains("dof"));

  CHECK(run("theory --random --I 2 --J 5 --D 3 --checks nonsense") == 2);
  CHECK(run("theory --random --I 30 --J 5 --D 3 --checks subset_sum") == 2);
}

TEST_CASE("theory --instance runs the oracle pipeline") {
  write(at("inst.json"), R"({
    "I": 2,
    "gamma": [[0,0],[1,0],[0,1],[5,5],[6,5]],
    "q_list": [[0.1,0.2,0.3,0.25,0.15],[0.3,0.1,0.1,0.2,0.3]]
  })");
  REQUIRE(run("theory --instance inst.json --seed 1 --out ti.json") == 0);
  const auto j = read_json(at("ti.json"));
  CHECK(j["instance"]["conditions"] == 2);
  CHECK(j.contains("pipeline"));
  write(at("inst_bad.json"), R"({"I": "two", "gamma": [[0]], "q_list": [[1]]})");
  CHECK(run("theory --instance inst_bad.json") == 2);
  CHECK(run("theory --instance missing.json") == 4);
}

TEST_CASE("plot: geometry and escaping") {
  write(at("one.csv"), "x0,x1\n0,0\n");
  REQUIRE(run("plot --points one.csv --labels 'a<b&c' --out one.svg") == 0);
  const std::string svg = slurp(at("one.svg"));
  const std::regex circle("<circle cx=\"([0-9.]+)\" cy=\"([0-9.]+)\" r=\"([0-9.]+)\"");
  std::smatch m;
  REQUIRE(std::regex_search(svg, m, circle));
  CHECK(std::stod(m[1]) == doctest::Approx(150.0));
  CHECK(std::stod(m[2]) == doctest::Approx(150.0));
  CHECK(std::stod(m[3]) == doctest::Approx(2.4));
  CHECK(svg.find("a&lt;b&amp;c") != std::string::npos);
  CHECK(svg.find("width=\"300\"") != std::string::npos);

  write(at("two.csv"), "0.5,1.0\n2.0,0.0\n");
  REQUIRE(run("plot --points one.csv two.csv --out two.svg") == 0);
  const std::string svg2 = slurp(at("two.svg"));
  CHECK(svg2.find("width=\"600\"") != std::string::npos);
  std::ptrdiff_t circles = 0;
  for (auto it = std::sregex_iterator(svg2.begin(), svg2.end(), circle); it != std::sregex_iterator(); ++it)
    ++circles;
  CHECK(circles == 2);  // (2, 0) is outside the viewport

  if (std::system("python3 -c 'import xml.dom.minidom' > /dev/null 2>&1") == 0) {
    const std::string cmd = "python3 -c 'import sys, xml.dom.minidom; xml.dom.minidom.parse(sys.argv[1])' '" +
                            at("two.svg").string() + "'";
    CHECK(std::system(cmd.c_str()) == 0);
  }

  write(at("three.csv"), "x0,x1,x2\n0,0,0\n");
  CHECK(run("plot --points three.csv --out three.svg") == 2);
  CHECK(slurp(at("last.err")).find("pca_reduce") != std::string::npos);
}

TEST_CASE("seed precedence and exit codes") {
  ensure_fixture();
  // env seed is used when --seed is absent, and --seed beats the env
  REQUIRE(run("sample --checkpoint ck/best.json --descriptor S_r01 --data data --n 5 --out e1.csv",
              "MIXFLOW_SEED=77") == 0);
  REQUIRE(run("sample --checkpoint ck/best.json --descriptor S_r01 --data data --n 5 --seed 77 --out e2.csv") == 0);
  REQUIRE(run("sample --checkpoint ck/best.json --descriptor S_r01 --data data --n 5 --seed 78 --out e3.csv",
              "MIXFLOW_SEED=77") == 0);
  CHECK(slurp(at("e1.csv")) == slurp(at("e2.csv")));
  CHECK(slurp(at("e1.csv")) != slurp(at("e3.csv")));
  CHECK(run("sample --checkpoint ck/best.json --descriptor S_r01 --data data --n 5 --out e4.csv",
            "MIXFLOW_SEED=abc") == 2);

  write(at("sample_cfg.json"), R"({"seed": 77, "n": 5})");
  REQUIRE(run("sample --config sample_cfg.json --checkpoint ck/best.json --descriptor S_r01 --data data "
              "--out e5.csv") == 0);
  CHECK(slurp(at("e5.csv")) == slurp(at("e1.csv")));

  CHECK(run("--help") == 0);
  CHECK(run("") != 0);
  CHECK(run("frobnicate") == 2);
  CHECK(run("gen-data --samples notanumber --out x") == 2);
}
