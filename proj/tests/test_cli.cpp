// End-to-end checks of the treeq binary: exit codes, output bytes,
// config round trips, and agreement with the library it wraps.
// The binary path arrives through the TREEQ_CLI environment variable.
#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>
#include <treeq/experiments.hpp>
#include <treeq/tree.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace treeq;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* cli_path() {
  const char* p = std::getenv("TREEQ_CLI");
  REQUIRE(p != nullptr);
  return p;
}

fs::path scratch_dir() {
  static fs::path dir = [] {
    fs::path d = fs::current_path() / "cli_test_scratch";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

// Runs the binary through the shell so environment prefixes work; stdout and
// stderr land in per-call files under the scratch directory.
RunResult run_cli(const std::string& args, const std::string& env_prefix = "") {
  static int call = 0;
  fs::path out_file = scratch_dir() / ("stdout_" + std::to_string(call) + ".txt");
  fs::path err_file = scratch_dir() / ("stderr_" + std::to_string(call) + ".txt");
  ++call;
  std::string cmd = env_prefix + std::string(cli_path()) + " " + args + " >" +
                    out_file.string() + " 2>" + err_file.string();
  int status = std::system(cmd.c_str());
  RunResult r;
  REQUIRE(WIFEXITED(status));
  r.code = WEXITSTATUS(status);
  r.out = slurp(out_file);
  r.err = slurp(err_file);
  return r;
}

std::string out_dir(const std::string& name) {
  fs::path d = scratch_dir() / name;
  fs::create_directories(d);
  return d.string();
}

// Last data row of a CSV, split into doubles.
std::vector<double> last_row(const std::string& csv) {
  std::vector<std::string> lines;
  std::stringstream ss(csv);
  std::string line;
  while (std::getline(ss, line))
    if (!line.empty()) lines.push_back(line);
  REQUIRE(lines.size() >= 2);
  std::vector<double> vals;
  std::stringstream row(lines.back());
  std::string cell;
  while (std::getline(row, cell, ',')) vals.push_back(std::stod(cell));
  return vals;
}

double parse_after(const std::string& text, const std::string& marker) {
  auto pos = text.find(marker);
  REQUIRE(pos != std::string::npos);
  return std::strtod(text.c_str() + pos + marker.size(), nullptr);
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(run_cli("").code == 2);                          // no subcommand
  CHECK(run_cli("frobnicate --seed 1").code == 2);       // unknown subcommand
  CHECK(run_cli("quench --seed 1 --bogus 3").code == 2); // unknown flag

  RunResult no_seed = run_cli("quench --depth 4");
  CHECK(no_seed.code == 2);
  CHECK(no_seed.err.find("--seed") != std::string::npos);

  CHECK(run_cli("--help").code == 0);
  CHECK(run_cli("quench --help").code == 0);
  CHECK(run_cli("gap --help").out.find("--depth") != std::string::npos);

  // Config file problems are usage errors too.
  fs::path bad = scratch_dir() / "bad.json";
  std::ofstream(bad) << "{\"bogus_key\": 1}\n";
  RunResult bad_key = run_cli("quench --seed 1 --config " + bad.string());
  CHECK(bad_key.code == 2);
  CHECK(bad_key.err.find("bogus_key") != std::string::npos);
  CHECK(run_cli("quench --seed 1 --config " +
                (scratch_dir() / "missing.json").string())
            .code == 2);

  // Env-var workers must parse as a nonnegative integer.
  CHECK(run_cli("validate --seed 1 --out " + out_dir("we"),
                "TREEQ_WORKERS=abc ")
            .code == 2);
}

TEST_CASE("invalid model parameters exit with code 1") {
  RunResult r = run_cli("recursion --b 1 --beta 1 --seed 1 --out " + out_dir("b1"));
  CHECK(r.code == 1);
  CHECK(r.err.find("error:") != std::string::npos);
}

TEST_CASE("recursion subcommand matches the library fixed point") {
  std::string dir = out_dir("rec");
  RunResult r = run_cli(
      "recursion --b 2 --beta 1 --h 0 --depth 8 --boundary plus --seed 3 --out " + dir);
  REQUIRE(r.code == 0);

  FixedPointResult ref = mu_plus_root(ModelParams{1.0, 0.0, 2}, 8);
  double printed = parse_after(r.out, "root magnetization = ");
  CHECK(printed == Catch::Approx(ref.magnetization).margin(1e-9));

  // The CSV carries full precision, so the last row round-trips exactly.
  std::vector<double> row = last_row(slurp(fs::path(dir) / "recursion.csv"));
  REQUIRE(row.size() == 3);
  CHECK(row[0] == 8.0);
  CHECK(row[1] == ref.log_ratio);
  CHECK(row[2] == ref.magnetization);

  // Minus boundary mirrors plus at h = 0; free boundary stays unmagnetized.
  RunResult rm = run_cli(
      "recursion --b 2 --beta 1 --h 0 --depth 8 --boundary minus --seed 3 --out " +
      out_dir("recm"));
  REQUIRE(rm.code == 0);
  CHECK(parse_after(rm.out, "root magnetization = ") ==
        Catch::Approx(-ref.magnetization).margin(1e-9));
  RunResult rf = run_cli(
      "recursion --b 2 --beta 1 --h 0 --depth 8 --boundary free --seed 3 --out " +
      out_dir("recf"));
  REQUIRE(rf.code == 0);
  CHECK(parse_after(rf.out, "root magnetization = ") == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("identical invocations reproduce identical data bytes") {
  std::string flags = "quench --seed 11 --depth 6 --replicas 50 --probes 0,1,2 --t-max 2";
  std::string d1 = out_dir("rep1"), d2 = out_dir("rep2"), d3 = out_dir("rep3");
  REQUIRE(run_cli(flags + " --out " + d1).code == 0);
  REQUIRE(run_cli(flags + " --out " + d2).code == 0);

  std::string csv1 = slurp(fs::path(d1) / "quench.csv");
  std::string csv2 = slurp(fs::path(d2) / "quench.csv");
  CHECK(csv1 == csv2);

  // Manifests agree everywhere except wall time and the output directory.
  json m1 = json::parse(slurp(fs::path(d1) / "quench.manifest.json"));
  json m2 = json::parse(slurp(fs::path(d2) / "quench.manifest.json"));
  CHECK(m1["outputs"] == m2["outputs"]);
  CHECK(m1["spec_echo"] == m2["spec_echo"]);
  m1.erase("wall_seconds");
  m2.erase("wall_seconds");
  m1["config"].erase("out");
  m2["config"].erase("out");
  CHECK(m1 == m2);

  // A different seed must change the data and its checksum.
  REQUIRE(run_cli("quench --seed 12 --depth 6 --replicas 50 --probes 0,1,2 --t-max 2 --out " +
                  d3)
              .code == 0);
  json m3 = json::parse(slurp(fs::path(d3) / "quench.manifest.json"));
  CHECK(slurp(fs::path(d3) / "quench.csv") != csv1);
  CHECK(m3["outputs"] != m2["outputs"]);
}

TEST_CASE("config file round trip with flag overrides") {
  std::string flags = "quench --seed 21 --depth 5 --replicas 40 --probes 0,0.5,1 --t-max 1";
  std::string da = out_dir("cfga");
  REQUIRE(run_cli(flags + " --out " + da).code == 0);
  json ma = json::parse(slurp(fs::path(da) / "quench.manifest.json"));

  // Re-running from the embedded config alone reproduces the data.
  fs::path cfg = scratch_dir() / "roundtrip.json";
  std::ofstream(cfg) << ma["config"].dump(2) << "\n";
  std::string db = out_dir("cfgb");
  REQUIRE(run_cli("quench --config " + cfg.string() + " --out " + db).code == 0);
  CHECK(slurp(fs::path(db) / "quench.csv") == slurp(fs::path(da) / "quench.csv"));

  // A flag on the command line beats the same key in the file.
  std::string dc = out_dir("cfgc");
  REQUIRE(run_cli("quench --config " + cfg.string() + " --seed 22 --out " + dc).code == 0);
  json mc = json::parse(slurp(fs::path(dc) / "quench.manifest.json"));
  CHECK(mc["config"]["seed"] == 22);
  CHECK(slurp(fs::path(dc) / "quench.csv") != slurp(fs::path(da) / "quench.csv"));
}

TEST_CASE("worker count does not change the data") {
  std::string flags = "hc-quench --seed 7 --depth 5 --replicas 40 --probes 0,1 --t-max 1";
  std::string d1 = out_dir("w1"), d2 = out_dir("w2"), d3 = out_dir("w3");
  REQUIRE(run_cli(flags + " --workers 1 --out " + d1).code == 0);
  REQUIRE(run_cli(flags + " --workers 3 --out " + d2).code == 0);
  REQUIRE(run_cli(flags + " --out " + d3, "TREEQ_WORKERS=2 ").code == 0);
  std::string csv = slurp(fs::path(d1) / "hc-quench.csv");
  CHECK(slurp(fs::path(d2) / "hc-quench.csv") == csv);
  CHECK(slurp(fs::path(d3) / "hc-quench.csv") == csv);
}

TEST_CASE("validate subcommand checks recursions against enumeration") {
  std::string dir = out_dir("val");
  RunResult r = run_cli("validate --seed 2 --out " + dir);
  CHECK(r.code == 0);
  CHECK(r.out.find("PASS") != std::string::npos);
  std::string csv = slurp(fs::path(dir) / "validate.csv");
  CHECK(csv.find("model,b,depth,boundary,cases,max_abs_err") == 0);
  // Both models appear in the table.
  CHECK(csv.find("\n0,") != std::string::npos);
  CHECK(csv.find("\n1,") != std::string::npos);
}

TEST_CASE("remaining subcommands run and write their tables") {
  struct Probe {
    std::string args;
    std::string file;
    std::string header;
  };
  const Probe probes[] = {
      {"gap --seed 1 --beta 1.2 --depth 1", "gap.csv", "depth,free_sites,gap"},
      {"blocks --seed 1 --beta 1 --depth 1", "blocks.csv", "ell1,block_chain_gap"},
      {"contraction --seed 1 --depth 4 --replicas 60 --t-max 1.5 --probes 0.5,1,1.5",
       "contraction.csv", "t,distance"},
      {"phase-diagram --seed 1 --beta 2", "phase-diagram.csv", "beta,h_c"},
  };
  int idx = 0;
  for (const Probe& p : probes) {
    std::string dir = out_dir("sub" + std::to_string(idx++));
    RunResult r = run_cli(p.args + " --out " + dir);
    INFO(p.args << "\nstderr: " << r.err);
    REQUIRE(r.code == 0);
    std::string csv = slurp(fs::path(dir) / p.file);
    CHECK(csv.find(p.header) == 0);
    CHECK(last_row(csv).size() >= 2);
    json m = json::parse(slurp(fs::path(dir) / (p.file.substr(0, p.file.size() - 4) +
                                                ".manifest.json")));
    CHECK(m["outputs"][0]["file"] == p.file);
    CHECK(m.contains("wall_seconds"));
    CHECK(m["code_version"] == kCodeVersion);
  }
}
