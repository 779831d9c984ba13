// treeq: command-line driver for the tree Gibbs recursions, the continuous
// time heat-bath dynamics, and the scripted experiments. Every subcommand
// writes a CSV data file plus a JSON manifest (spec echo, code version,
// per-output checksums) into --out, and prints a short summary. Seeds are
// mandatory; identical flags and seed reproduce identical data bytes.
//
// Exit codes: 0 success, 1 validation failure (bad parameter combination or
// a failed validate run), 2 usage error (unknown flag, missing seed).

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <treeq/experiments.hpp>
#include <treeq/spectral.hpp>

using nlohmann::json;
using namespace treeq;

namespace {

constexpr double kUnsetD = std::numeric_limits<double>::quiet_NaN();

// One flat bag of settings shared by all subcommands; each subcommand binds
// only the flags it understands, and the dispatch code resolves the
// remaining NaN / -1 sentinels to per-subcommand defaults. The resolved bag
// is what the manifest records, so a manifest's config block can be fed back
// through --config to reproduce the run.
struct RunConfig {
  std::string subcommand;
  int b = 2;
  double beta = kUnsetD;
  double h = 0.0;
  double lambda = kUnsetD;  // hard-core activity, or the contraction weight
  double p = kUnsetD;
  long depth = -1;
  std::string boundary = "plus";
  double t_max = kUnsetD;
  std::vector<double> probes;
  long replicas = -1;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int workers = -1;  // -1: take TREEQ_WORKERS, else 1
  std::string out = ".";
  std::string regime = "a";
  double truncation = 4.0;  // config-file only; region rule constant
};

struct OptRefs {
  std::map<std::string, CLI::Option*> m;
  bool passed(const std::string& k) const {
    auto it = m.find(k);
    return it != m.end() && it->second->count() > 0;
  }
};

json config_to_json(const RunConfig& c) {
  json j;
  j["subcommand"] = c.subcommand;
  j["b"] = c.b;
  j["beta"] = c.beta;
  j["h"] = c.h;
  j["lambda"] = c.lambda;
  j["p"] = c.p;
  j["depth"] = c.depth;
  j["boundary"] = c.boundary;
  j["t_max"] = c.t_max;
  j["probes"] = c.probes;
  j["replicas"] = c.replicas;
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  j["out"] = c.out;
  j["regime"] = c.regime;
  j["truncation"] = c.truncation;
  return j;
}

// Applies one config-file entry unless the matching flag was given on the
// command line (flags override the file). Unknown keys are usage errors.
void apply_json_field(RunConfig& c, const OptRefs& refs, const std::string& k, const json& v) {
  if (k == "subcommand") {
    std::string s = v.get<std::string>();
    if (s != c.subcommand)
      throw std::invalid_argument("config names subcommand '" + s + "' but '" + c.subcommand +
                                  "' was invoked");
    return;
  }
  if (refs.passed(k)) return;
  if (k == "b")
    c.b = v.get<int>();
  else if (k == "beta")
    c.beta = v.get<double>();
  else if (k == "h")
    c.h = v.get<double>();
  else if (k == "lambda")
    c.lambda = v.get<double>();
  else if (k == "p")
    c.p = v.get<double>();
  else if (k == "depth")
    c.depth = v.get<long>();
  else if (k == "boundary")
    c.boundary = v.get<std::string>();
  else if (k == "t_max")
    c.t_max = v.get<double>();
  else if (k == "probes")
    c.probes = v.get<std::vector<double>>();
  else if (k == "replicas")
    c.replicas = v.get<long>();
  else if (k == "seed") {
    c.seed = v.get<std::uint64_t>();
    c.seed_set = true;
  } else if (k == "workers")
    c.workers = v.get<int>();
  else if (k == "out")
    c.out = v.get<std::string>();
  else if (k == "regime")
    c.regime = v.get<std::string>();
  else if (k == "truncation")
    c.truncation = v.get<double>();
  else
    throw std::invalid_argument("config: unknown key '" + k + "'");
}

std::string checksum_hex(const std::string& bytes) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(bytes)));
  return buf;
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f << bytes;
  if (!f) throw std::runtime_error("short write to " + path.string());
}

// Writes <sub>.csv and <sub>.manifest.json. The manifest repeats the
// resolved configuration (round-trips through --config), the spec echo when
// an experiment spec drove the run, and a checksum per data output so reruns
// can be compared without keeping the data.
void emit_outputs(const RunConfig& cfg, const std::string& csv, const std::string& spec_echo,
                  double wall_seconds) {
  std::filesystem::path dir(cfg.out);
  std::filesystem::create_directories(dir);
  std::string csv_name = cfg.subcommand + ".csv";
  write_file(dir / csv_name, csv);

  json manifest;
  manifest["subcommand"] = cfg.subcommand;
  manifest["code_version"] = std::string(kCodeVersion);
  manifest["config"] = config_to_json(cfg);
  if (!spec_echo.empty()) manifest["spec_echo"] = spec_echo;
  manifest["wall_seconds"] = wall_seconds;
  manifest["outputs"] = json::array({{{"file", csv_name}, {"fnv1a64", checksum_hex(csv)}}});
  write_file(dir / (cfg.subcommand + ".manifest.json"), manifest.dump(2) + "\n");

  std::printf("wrote %s and %s.manifest.json in %s\n", csv_name.c_str(), cfg.subcommand.c_str(),
              cfg.out.c_str());
}

double resolve(double v, double fallback) { return std::isnan(v) ? fallback : v; }
long resolve(long v, long fallback) { return v < 0 ? fallback : v; }

std::vector<double> default_probes(double t_max) {
  return {0.0,          t_max / 16.0, t_max / 8.0, t_max / 4.0,
          t_max / 2.0,  3.0 * t_max / 4.0,         t_max};
}

BoundarySpec boundary_from_name(const std::string& name) {
  if (name == "plus") return BoundarySpec::plus();
  if (name == "minus") return BoundarySpec::minus();
  if (name == "free") return BoundarySpec::free_bc();
  throw std::invalid_argument("boundary must be plus, minus, or free");
}

Regime regime_from_name(const std::string& name) {
  if (name == "a") return Regime::A;
  if (name == "b") return Regime::B;
  if (name == "c") return Regime::C;
  throw std::invalid_argument("regime must be a, b, or c");
}

ExperimentSpec quench_spec(RunConfig& cfg, bool hard_core) {
  cfg.beta = resolve(cfg.beta, 1.0);
  cfg.lambda = resolve(cfg.lambda, 6.0);
  cfg.p = resolve(cfg.p, hard_core ? 0.9 : 0.95);
  cfg.t_max = resolve(cfg.t_max, 10.0);
  cfg.depth = resolve(cfg.depth, hard_core ? 6L : 8L);
  cfg.replicas = resolve(cfg.replicas, 200L);
  if (cfg.probes.empty()) cfg.probes = default_probes(cfg.t_max);

  ExperimentSpec spec;
  spec.model = hard_core ? ModelKind::HardCore : ModelKind::Ising;
  spec.ising = ModelParams{cfg.beta, cfg.h, cfg.b};
  spec.hc = HCParams{cfg.lambda, cfg.b};
  spec.start = hard_core ? StartLaw::NuBiased : StartLaw::Bernoulli;
  spec.p = cfg.p;
  spec.truncation = cfg.truncation;
  spec.depth = cfg.depth;
  spec.probes = cfg.probes;
  spec.replicas = cfg.replicas;
  spec.seed = cfg.seed;
  spec.regime = regime_from_name(cfg.regime);
  spec.workers = cfg.workers;
  return spec;
}

int run_quench(RunConfig& cfg, bool hard_core) {
  ExperimentSpec spec = quench_spec(cfg, hard_core);
  auto t0 = std::chrono::steady_clock::now();
  QuenchResult q = hard_core ? hc_quench_convergence(spec) : quench_convergence(spec);
  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const QuenchRow& last = q.rows.back();
  std::printf("%s: depth=%ld replicas=%ld mu_ref=%.9g\n", cfg.subcommand.c_str(), q.depth,
              cfg.replicas, q.mu_ref);
  std::printf("final probe t=%.6g: value=%.9g se=%.3g gap=%.3g\n", last.t, last.rho, last.se,
              last.gap);
  if (std::isfinite(q.decay.slope))
    std::printf("fitted gap decay rate %.4g, 95%% CI [%.4g, %.4g]\n", q.decay.slope,
                q.decay.ci_low, q.decay.ci_high);
  emit_outputs(cfg, q.csv(), spec.echo(), wall);
  return 0;
}

int run_contraction(RunConfig& cfg) {
  cfg.beta = resolve(cfg.beta, 0.5);
  cfg.p = resolve(cfg.p, 0.5);
  cfg.t_max = resolve(cfg.t_max, 4.5);
  cfg.depth = resolve(cfg.depth, 7L);
  cfg.replicas = resolve(cfg.replicas, 500L);
  cfg.lambda = resolve(cfg.lambda, 1.0 / std::sqrt(double(cfg.b)));
  if (cfg.probes.empty()) {
    for (int k = 1; k <= 6; ++k) cfg.probes.push_back(cfg.t_max * k / 6.0);
  }

  ExperimentSpec spec;
  spec.model = ModelKind::Ising;
  spec.ising = ModelParams{cfg.beta, cfg.h, cfg.b};
  spec.start = StartLaw::Bernoulli;
  spec.p = cfg.p;
  spec.truncation = cfg.truncation;
  spec.depth = cfg.depth;
  spec.probes = cfg.probes;
  spec.replicas = cfg.replicas;
  spec.seed = cfg.seed;
  spec.regime = regime_from_name(cfg.regime);
  spec.workers = cfg.workers;

  auto t0 = std::chrono::steady_clock::now();
  ContractionResult c = contraction_experiment(spec, cfg.lambda);
  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("contraction: depth=%ld weight=%.6g replicas=%ld\n", cfg.depth, cfg.lambda,
              cfg.replicas);
  if (std::isfinite(c.decay.slope))
    std::printf("fitted distance decay rate %.4g, 95%% CI [%.4g, %.4g]\n", c.decay.slope,
                c.decay.ci_low, c.decay.ci_high);
  else
    std::printf("decay fit unavailable (%ld usable points)\n", c.decay.n_used);
  emit_outputs(cfg, c.csv(), spec.echo(), wall);
  return 0;
}

int run_phase_diagram(RunConfig& cfg) {
  cfg.beta = resolve(cfg.beta, 5.0);  // largest beta in the scan grid
  if (!(cfg.beta > 0.05)) throw std::invalid_argument("phase diagram: --beta must exceed 0.05");
  std::vector<double> grid;
  for (long k = 1; 0.05 * double(k) <= cfg.beta + 1e-12; ++k) grid.push_back(0.05 * double(k));

  auto t0 = std::chrono::steady_clock::now();
  PhaseDiagram pd = phase_diagram_scan(cfg.b, grid);
  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("phase-diagram: b=%d, %zu grid points, beta0=%.9g\n", cfg.b, grid.size(),
              critical_beta0(cfg.b));
  std::printf("h_c(beta=%.6g) = %.9g, distance to the b-1 asymptote %.4g\n", grid.back(),
              pd.rows.back().h_c, pd.asymptote_gap);
  emit_outputs(cfg, pd.csv(), "", wall);
  return 0;
}

int run_recursion(RunConfig& cfg) {
  cfg.beta = resolve(cfg.beta, 1.0);
  cfg.depth = resolve(cfg.depth, 8L);
  ModelParams P{cfg.beta, cfg.h, cfg.b};
  P.validate();
  double start;
  if (cfg.boundary == "plus")
    start = -std::numeric_limits<double>::infinity();
  else if (cfg.boundary == "minus")
    start = std::numeric_limits<double>::infinity();
  else if (cfg.boundary == "free")
    start = 0.0;
  else
    throw std::invalid_argument("boundary must be plus, minus, or free");

  auto t0 = std::chrono::steady_clock::now();
  std::vector<std::vector<double>> rows;
  double x = start;
  for (long i = 0; i <= cfg.depth; ++i) {
    x = homogeneous_step(P, x);
    rows.push_back({double(i), x, magnetization_from_log_ratio(x)});
  }
  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::string csv = format_csv({"ell", "log_ratio", "magnetization"}, rows);
  std::printf("root magnetization = %.12f (log ratio %.12g, depth %ld, %s boundary)\n",
              rows.back()[2], rows.back()[1], cfg.depth, cfg.boundary.c_str());
  emit_outputs(cfg, csv, "", wall);
  return 0;
}

int run_gap(RunConfig& cfg) {
  cfg.beta = resolve(cfg.beta, 1.2);
  cfg.depth = resolve(cfg.depth, 3L);
  cfg.t_max = resolve(cfg.t_max, 1.0);
  cfg.replicas = resolve(cfg.replicas, 20000L);
  if (cfg.probes.empty()) {
    for (int k = 1; k <= 8; ++k) cfg.probes.push_back(cfg.t_max * k / 8.0);
  }
  ModelParams P{cfg.beta, cfg.h, cfg.b};
  P.validate();
  BoundarySpec bc = boundary_from_name(cfg.boundary);

  auto t0 = std::chrono::steady_clock::now();
  // depth, free sites, gap, se, r2, flagged, method (0 exact / 1 fitted)
  std::vector<std::vector<double>> rows;
  for (long d = 1; d <= cfg.depth; ++d) {
    TreeShape shape = build_tree(cfg.b, d);
    if (shape.n <= 15) {
      GeneratorMatrix G = build_generator(P, shape, nullptr, bc);
      double gap = spectral_gap_exact(G);
      rows.push_back({double(d), double(shape.n), gap, 0.0, 1.0, 0.0, 0.0});
      std::printf("depth %ld: exact gap %.9g\n", d, gap);
    } else {
      VarianceDecayResult v =
          variance_decay_gap(P, shape, bc, cfg.probes, cfg.replicas, cfg.seed, cfg.workers);
      rows.push_back({double(d), double(shape.n), v.gap, v.gap_se, v.r_squared,
                      v.flagged ? 1.0 : 0.0, 1.0});
      std::printf("depth %ld: fitted gap %.6g (se %.2g, R2 %.3f%s)\n", d, v.gap, v.gap_se,
                  v.r_squared, v.flagged ? ", flagged" : "");
    }
  }
  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::string csv =
      format_csv({"depth", "free_sites", "gap", "gap_se", "r_squared", "flagged", "fitted"}, rows);
  emit_outputs(cfg, csv, "", wall);
  return 0;
}

int run_blocks(RunConfig& cfg) {
  cfg.beta = resolve(cfg.beta, 1.0);
  cfg.depth = resolve(cfg.depth, 2L);
  ModelParams P{cfg.beta, cfg.h, cfg.b};
  P.validate();
  BoundarySpec bc = boundary_from_name(cfg.boundary);
  TreeShape shape = build_tree(cfg.b, cfg.depth);

  auto t0 = std::chrono::steady_clock::now();
  double exact = spectral_gap_exact(build_generator(P, shape, nullptr, bc));
  std::vector<std::vector<double>> rows;
  for (int ell1 = 1; ell1 <= int(cfg.depth) + 1; ++ell1) {
    BlockGapResult r = block_dynamics_gap(P, shape, nullptr, bc, ell1);
    rows.push_back(
        {double(ell1), r.block_chain_gap, r.min_block_gap, r.single_site_bound, exact});
    std::printf("ell1=%d: block chain gap %.9g, implied bound %.9g, exact gap %.9g\n", ell1,
                r.block_chain_gap, r.single_site_bound, exact);
  }
  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::string csv = format_csv(
      {"ell1", "block_chain_gap", "min_block_gap", "single_site_bound", "exact_gap"}, rows);
  emit_outputs(cfg, csv, "", wall);
  return 0;
}

// Oracle-equivalence sweep: the ratio recursions against exhaustive
// enumeration on every tree with at most 13 free vertices, across boundary
// conditions and a parameter grid. Exits 1 when any marginal disagrees
// beyond 1e-10.
int run_validate(RunConfig& cfg) {
  const double tol = 1e-10;
  struct Shape {
    int b;
    long depth;
  };
  const std::vector<Shape> shapes{{2, 0}, {2, 1}, {2, 2}, {3, 0}, {3, 1}, {3, 2}};
  const std::vector<double> betas{0.3, 0.7, 1.2, 2.0, 5.0};
  const std::vector<double> fields{-1.0, -0.3, 0.0, 0.3, 1.0};
  // CSV boundary encoding: 0 plus, 1 minus, 2 free, 3 fixed, 4 even, 5 odd.
  auto t0 = std::chrono::steady_clock::now();
  std::vector<std::vector<double>> rows;
  double worst = 0.0;

  std::uint64_t fixed_counter = 0;
  for (const Shape& s : shapes) {
    TreeShape shape = build_tree(s.b, s.depth);
    std::vector<std::pair<double, BoundarySpec>> bcs{{0.0, BoundarySpec::plus()},
                                                     {1.0, BoundarySpec::minus()},
                                                     {2.0, BoundarySpec::free_bc()}};
    for (int r = 0; r < 20; ++r) {
      Stream rng(derive_key(cfg.seed, 0x46495844ULL + fixed_counter++));
      std::vector<std::int8_t> vals(size_t(shape.boundary_count()));
      for (std::int8_t& v : vals) v = rng.next_bernoulli(0.5) ? 1 : -1;
      bcs.emplace_back(3.0, BoundarySpec::fixed(std::move(vals)));
    }
    std::map<double, std::pair<long, double>> agg;  // boundary code -> (cases, max err)
    for (const auto& [code, bc] : bcs) {
      for (double beta : betas)
        for (double h : fields) {
          ModelParams P{beta, h, s.b};
          RecursionResult rr = r_recursion(P, shape, nullptr, bc);
          std::vector<double> marg = site_marginals(P, shape, rr);
          BruteForceGibbs bf = brute_force_gibbs(P, shape, nullptr, bc);
          double err = 0.0;
          for (Vertex v = 0; v < shape.n; ++v)
            err = std::max(err, std::abs(marg[size_t(v)] - bf.marginal_plus(v)));
          auto& slot = agg[code];
          ++slot.first;
          slot.second = std::max(slot.second, err);
        }
    }
    for (const auto& [code, cw] : agg) {
      rows.push_back({0.0, double(s.b), double(s.depth), code, double(cw.first), cw.second});
      worst = std::max(worst, cw.second);
    }
  }

  const std::vector<double> lambdas{0.5, 1.0, 4.0, 6.0};
  for (const Shape& s : shapes) {
    TreeShape shape = build_tree(s.b, s.depth);
    const std::vector<std::pair<double, BoundarySpec>> bcs{{4.0, BoundarySpec::even_bc()},
                                                           {5.0, BoundarySpec::odd_bc()},
                                                           {2.0, BoundarySpec::free_bc()}};
    for (const auto& [code, bc] : bcs) {
      long cases = 0;
      double err = 0.0;
      for (double lambda : lambdas) {
        HCParams P{lambda, s.b};
        HCRecursionResult rr = hc_r_recursion(P, shape, nullptr, bc);
        HCBruteForce bf = hc_brute_force(P, shape, nullptr, bc);
        err = std::max(err, std::abs(rr.root_occupation - bf.occupation(0)));
        ++cases;
      }
      rows.push_back({1.0, double(s.b), double(s.depth), code, double(cases), err});
      worst = std::max(worst, err);
    }
  }

  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::string csv =
      format_csv({"model", "b", "depth", "boundary", "cases", "max_abs_err"}, rows);
  emit_outputs(cfg, csv, "", wall);
  bool pass = worst <= tol;
  std::printf("validate: worst marginal deviation %.3g (tolerance %.0e) -> %s\n", worst, tol,
              pass ? "PASS" : "FAIL");
  return pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"b-ary tree Gibbs recursions, heat-bath dynamics, and experiments"};
  // --h is the external-field flag, so help must not claim the -h short name.
  app.set_help_flag("--help", "print help and exit");
  app.require_subcommand(1);

  RunConfig cfg;
  std::string config_path;
  std::map<std::string, OptRefs> refs;

  auto add_common = [&](CLI::App* s) {
    s->set_help_flag("--help", "print help and exit");
    OptRefs& r = refs[s->get_name()];
    r.m["seed"] = s->add_option("--seed", cfg.seed, "random seed (mandatory)");
    r.m["workers"] = s->add_option("--workers", cfg.workers,
                                   "worker threads (default: TREEQ_WORKERS or 1)");
    r.m["out"] = s->add_option("--out", cfg.out, "output directory (default .)");
    s->add_option("--config", config_path, "JSON config file; flags override its values");
    return &r;
  };
  auto add_model = [&](CLI::App* s, OptRefs* r) {
    r->m["b"] = s->add_option("--b", cfg.b, "branching number (default 2)");
    r->m["beta"] = s->add_option("--beta", cfg.beta, "inverse temperature");
    r->m["h"] = s->add_option("--h", cfg.h, "external field (default 0)");
  };
  auto add_run = [&](CLI::App* s, OptRefs* r) {
    r->m["depth"] = s->add_option("--depth", cfg.depth, "region depth");
    r->m["t_max"] = s->add_option("--t-max", cfg.t_max, "largest probe time");
    r->m["probes"] =
        s->add_option("--probes", cfg.probes, "comma-separated probe times")->delimiter(',');
    r->m["replicas"] = s->add_option("--replicas", cfg.replicas, "replica count");
    r->m["regime"] = s->add_option("--regime", cfg.regime, "initial-law regime tag")
                         ->check(CLI::IsMember({"a", "b", "c"}));
  };
  auto add_boundary = [&](CLI::App* s, OptRefs* r) {
    r->m["boundary"] = s->add_option("--boundary", cfg.boundary, "plus|minus|free")
                           ->check(CLI::IsMember({"plus", "minus", "free"}));
  };

  CLI::App* quench =
      app.add_subcommand("quench", "independent-spin deep quench relaxing to the plus phase");
  {
    OptRefs* r = add_common(quench);
    add_model(quench, r);
    add_run(quench, r);
    r->m["p"] = quench->add_option("--p", cfg.p, "initial plus density (default 0.95)");
  }

  CLI::App* hcq =
      app.add_subcommand("hc-quench", "hard-core two-stage quench relaxing to the even phase");
  {
    OptRefs* r = add_common(hcq);
    r->m["b"] = hcq->add_option("--b", cfg.b, "branching number (default 2)");
    r->m["lambda"] = hcq->add_option("--lambda", cfg.lambda, "activity (default 6)");
    add_run(hcq, r);
    r->m["p"] = hcq->add_option("--p", cfg.p, "stage-one even density (default 0.9)");
  }

  CLI::App* phase =
      app.add_subcommand("phase-diagram", "critical field h_c along a beta grid");
  {
    OptRefs* r = add_common(phase);
    r->m["b"] = phase->add_option("--b", cfg.b, "branching number (default 2)");
    r->m["beta"] = phase->add_option("--beta", cfg.beta, "largest beta in the grid (default 5)");
  }

  CLI::App* recursion =
      app.add_subcommand("recursion", "homogeneous root log-ratio ladder by depth");
  {
    OptRefs* r = add_common(recursion);
    add_model(recursion, r);
    r->m["depth"] = recursion->add_option("--depth", cfg.depth, "ladder depth (default 8)");
    add_boundary(recursion, r);
  }

  CLI::App* gap = app.add_subcommand(
      "gap", "spectral gap by depth: exact on small trees, variance-decay fit beyond");
  {
    OptRefs* r = add_common(gap);
    add_model(gap, r);
    add_boundary(gap, r);
    r->m["depth"] = gap->add_option("--depth", cfg.depth, "largest depth (default 3)");
    r->m["t_max"] = gap->add_option("--t-max", cfg.t_max, "fit horizon (default 1)");
    r->m["probes"] =
        gap->add_option("--probes", cfg.probes, "fit time grid")->delimiter(',');
    r->m["replicas"] = gap->add_option("--replicas", cfg.replicas,
                                       "Monte Carlo samples for fitted depths (default 20000)");
  }

  CLI::App* blocks =
      app.add_subcommand("blocks", "block-dynamics gap and the implied single-site bound");
  {
    OptRefs* r = add_common(blocks);
    add_model(blocks, r);
    add_boundary(blocks, r);
    r->m["depth"] = blocks->add_option("--depth", cfg.depth, "region depth (default 2)");
  }

  CLI::App* contraction = app.add_subcommand(
      "contraction", "weighted-distance decay of a coupled pair with a flipped root");
  {
    OptRefs* r = add_common(contraction);
    add_model(contraction, r);
    add_run(contraction, r);
    r->m["p"] = contraction->add_option("--p", cfg.p, "start density (default 0.5)");
    r->m["lambda"] =
        contraction->add_option("--lambda", cfg.lambda, "distance weight (default 1/sqrt(b))");
  }

  CLI::App* validate =
      app.add_subcommand("validate", "recursion-vs-enumeration oracle sweep; exit 1 on mismatch");
  add_common(validate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  cfg.subcommand = sub->get_name();
  const OptRefs& r = refs[cfg.subcommand];
  cfg.seed_set = r.passed("seed");

  if (!config_path.empty()) {
    try {
      std::ifstream f(config_path);
      if (!f) throw std::invalid_argument("cannot read config file " + config_path);
      json j = json::parse(f);
      for (const auto& [k, v] : j.items()) apply_json_field(cfg, r, k, v);
    } catch (const std::exception& e) {
      std::fprintf(stderr, "usage error: %s\n", e.what());
      return 2;
    }
  }

  if (!cfg.seed_set) {
    std::fprintf(stderr, "usage error: --seed is mandatory (run with --help for usage)\n");
    return 2;
  }
  if (cfg.workers < 0) {
    cfg.workers = 1;
    if (const char* env = std::getenv("TREEQ_WORKERS")) {
      char* end = nullptr;
      long w = std::strtol(env, &end, 10);
      if (end == env || *end != '\0' || w < 0) {
        std::fprintf(stderr, "usage error: TREEQ_WORKERS must be a nonnegative integer\n");
        return 2;
      }
      cfg.workers = int(w);
    }
  }

  try {
    if (cfg.subcommand == "quench") return run_quench(cfg, false);
    if (cfg.subcommand == "hc-quench") return run_quench(cfg, true);
    if (cfg.subcommand == "phase-diagram") return run_phase_diagram(cfg);
    if (cfg.subcommand == "recursion") return run_recursion(cfg);
    if (cfg.subcommand == "gap") return run_gap(cfg);
    if (cfg.subcommand == "blocks") return run_blocks(cfg);
    if (cfg.subcommand == "contraction") return run_contraction(cfg);
    if (cfg.subcommand == "validate") return run_validate(cfg);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  std::fprintf(stderr, "usage error: unknown subcommand\n");
  return 2;
}
