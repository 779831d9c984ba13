#pragma once
// Scripted experiments over the recursion and the dynamics: deep-quench
// relaxation curves for both models, the three-term decomposition of the
// root-magnetization error after a quench, the minus-path product bound,
// weighted-Hamming contraction at high temperature, and the phase-boundary
// scan. Operations return plain tabular structs; CSV and checksum helpers
// keep the byte format in one place so identical specs reproduce identical
// output bytes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "treeq/dynamics.hpp"
#include "treeq/gibbs.hpp"
#include "treeq/hardcore.hpp"

namespace treeq {

inline constexpr const char* kCodeVersion = "treeq 0.1.0";

// ---------------------------------------------------------------------------
// Output plumbing: checksums, CSV bytes, least-squares decay fits.

// FNV-1a, the 64-bit variant; stable across platforms, good enough to detect
// any byte-level drift between reruns.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Shortest round-trip decimal for a double; the C locale's '.' separator is
// never touched anywhere in the library, so the bytes are reproducible.
inline std::string csv_number(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

// Header row plus one record per line, '\n' terminated, no trailing comma.
inline std::string format_csv(const std::vector<std::string>& header,
                              const std::vector<std::vector<double>>& rows) {
  if (header.empty()) throw std::invalid_argument("csv: header must be nonempty");
  std::string out;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i) out += ',';
    out += header[i];
  }
  out += '\n';
  for (const std::vector<double>& r : rows) {
    if (r.size() != header.size())
      throw std::invalid_argument("csv: row width differs from header");
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (i) out += ',';
      out += csv_number(r[i]);
    }
    out += '\n';
  }
  return out;
}

// Ordinary least squares of log(y) on t, restricted to the y > 0 points.
// Fewer than three usable points (or a degenerate t spread) leaves the
// estimates NaN with n_used reporting how many points qualified; rates are
// only ever quoted together with their confidence interval.
struct FitResult {
  double slope = std::numeric_limits<double>::quiet_NaN();
  double intercept = std::numeric_limits<double>::quiet_NaN();
  double se_slope = std::numeric_limits<double>::quiet_NaN();
  double ci_low = std::numeric_limits<double>::quiet_NaN();
  double ci_high = std::numeric_limits<double>::quiet_NaN();
  long n_used = 0;
};

inline FitResult fit_log_decay(const std::vector<double>& ts, const std::vector<double>& ys) {
  if (ts.size() != ys.size()) throw std::invalid_argument("fit: size mismatch");
  std::vector<double> xs, ls;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (std::isfinite(ts[i]) && ys[i] > 0.0 && std::isfinite(ys[i])) {
      xs.push_back(ts[i]);
      ls.push_back(std::log(ys[i]));
    }
  }
  FitResult fr;
  fr.n_used = static_cast<long>(xs.size());
  if (xs.size() < 3) return fr;
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ls[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ls[i] - my);
  }
  if (!(sxx > 0.0)) return fr;
  fr.slope = sxy / sxx;
  fr.intercept = my - fr.slope * mx;
  double ssr = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double e = ls[i] - (fr.intercept + fr.slope * xs[i]);
    ssr += e * e;
  }
  double s2 = ssr / (n - 2.0);
  fr.se_slope = std::sqrt(s2 / sxx);
  const double z95 = 1.959963984540054;
  fr.ci_low = fr.slope - z95 * fr.se_slope;
  fr.ci_high = fr.slope + z95 * fr.se_slope;
  return fr;
}

// ---------------------------------------------------------------------------
// Experiment specification.

enum class ModelKind { Ising, HardCore };

// Initial laws: independent spins at density p, the two-stage biased law
// nu_{p,lambda} for occupations, the maximal configuration (all-plus spins or
// the even-parity maximal packing), or an explicit per-vertex start.
enum class StartLaw { Bernoulli, NuBiased, AllMax, Explicit };

struct ExperimentSpec {
  ModelKind model = ModelKind::Ising;
  ModelParams ising{1.0, 0.0, 2};
  HCParams hc{1.0, 2};
  StartLaw start = StartLaw::Bernoulli;
  double p = 1.0;
  std::vector<std::int8_t> explicit_start;
  double truncation = 4.0;  // region rule: depth = ceil(truncation * max(t,1))
  long depth = -1;          // >= 0 overrides the region rule
  std::vector<double> probes;
  long replicas = 0;
  std::optional<std::uint64_t> seed;  // mandatory; optional only to force a choice
  Regime regime = Regime::A;
  int workers = 1;

  int branching() const { return model == ModelKind::Ising ? ising.b : hc.b; }

  void validate() const {
    if (model == ModelKind::Ising)
      ising.validate();
    else
      hc.validate();
    if (!seed) throw std::invalid_argument("spec: seed is mandatory");
    if (replicas < 1) throw std::invalid_argument("spec: need at least one replica");
    if (workers < 0) throw std::invalid_argument("spec: workers must be >= 0");
    if (!(truncation > 0.0)) throw std::invalid_argument("spec: truncation constant must be > 0");
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("spec: p outside [0,1]");
    for (std::size_t i = 0; i < probes.size(); ++i) {
      if (!(probes[i] >= 0.0) || !std::isfinite(probes[i]))
        throw std::invalid_argument("spec: probe times must be finite and >= 0");
      if (i && probes[i] < probes[i - 1])
        throw std::invalid_argument("spec: probe times must be sorted");
    }
    if (start == StartLaw::Explicit && explicit_start.empty())
      throw std::invalid_argument("spec: explicit start is empty");
    if (start == StartLaw::NuBiased && model != ModelKind::HardCore)
      throw std::invalid_argument("spec: the two-stage biased start is hard-core only");
    if (start == StartLaw::Bernoulli && model != ModelKind::Ising)
      throw std::invalid_argument("spec: independent spin starts are Ising only");
  }

  // Depth actually simulated: the explicit override, or the truncation rule.
  // The cap is a memory guard; past it the caller must choose a depth and own
  // the truncation error.
  long region_depth(double t_max) const {
    long d = depth >= 0 ? depth : truncation_depth_for_time(t_max, truncation);
    const int b = branching();
    long count = 1, level = 1;
    for (long k = 0; k < d; ++k) {
      if (level > ((long(1) << 28) - count) / b) {
        throw std::invalid_argument(
            "spec: region would exceed 2^28 vertices; set an explicit depth");
      }
      level *= b;
      count += level;
    }
    return d;
  }

  // Canonical key=value serialization; the manifest echoes these bytes and a
  // rerun of the same echo reproduces identical outputs.
  std::string echo() const {
    std::string s;
    s += "model=";
    s += model == ModelKind::Ising ? "ising" : "hardcore";
    s += "\nb=" + std::to_string(branching());
    s += "\nbeta=" + csv_number(ising.beta);
    s += "\nh=" + csv_number(ising.h);
    s += "\nlambda=" + csv_number(hc.lambda);
    s += "\nstart=";
    switch (start) {
      case StartLaw::Bernoulli: s += "bernoulli"; break;
      case StartLaw::NuBiased: s += "nu"; break;
      case StartLaw::AllMax: s += "max"; break;
      case StartLaw::Explicit: s += "explicit"; break;
    }
    s += "\np=" + csv_number(p);
    std::string_view raw{reinterpret_cast<const char*>(explicit_start.data()),
                         explicit_start.size()};
    s += "\nexplicit_n=" + std::to_string(explicit_start.size());
    s += "\nexplicit_sum=" + std::to_string(fnv1a64(raw));
    s += "\ntruncation=" + csv_number(truncation);
    s += "\ndepth=" + std::to_string(depth);
    s += "\nprobes=";
    for (std::size_t i = 0; i < probes.size(); ++i) {
      if (i) s += ',';
      s += csv_number(probes[i]);
    }
    s += "\nreplicas=" + std::to_string(replicas);
    s += "\nseed=" + (seed ? std::to_string(*seed) : std::string("none"));
    s += "\nregime=";
    s += regime == Regime::A ? 'a' : (regime == Regime::B ? 'b' : 'c');
    s += "\nworkers=" + std::to_string(workers);
    s += '\n';
    return s;
  }
};

struct RunManifest {
  std::string spec_echo;
  std::string code_version = kCodeVersion;
  double wall_seconds = 0.0;
  // Output name -> FNV-1a of its bytes, in emission order.
  std::vector<std::pair<std::string, std::uint64_t>> outputs;
};

inline RunManifest make_manifest(const ExperimentSpec& spec,
                                 const std::vector<std::pair<std::string, std::string>>& outputs,
                                 double wall_seconds) {
  RunManifest m;
  m.spec_echo = spec.echo();
  m.wall_seconds = wall_seconds;
  for (const auto& [name, bytes] : outputs) m.outputs.emplace_back(name, fnv1a64(bytes));
  return m;
}

namespace detail {

inline SpinConfig ising_start(const ExperimentSpec& spec, const TreeShape& region,
                              std::uint64_t key) {
  SpinConfig c;
  switch (spec.start) {
    case StartLaw::Bernoulli:
      c.spin = sample_bernoulli_spins(region, spec.p, key);
      break;
    case StartLaw::AllMax:
      c = uniform_config(region, 1);
      break;
    case StartLaw::Explicit:
      if (Vertex(spec.explicit_start.size()) != region.n)
        throw std::invalid_argument("spec: explicit start size differs from region");
      c.spin = spec.explicit_start;
      break;
    default:
      throw std::invalid_argument("spec: the two-stage biased start is hard-core only");
  }
  return c;
}

inline SpinConfig hc_start(const ExperimentSpec& spec, const TreeShape& region,
                           std::uint64_t key) {
  SpinConfig c;
  switch (spec.start) {
    case StartLaw::NuBiased:
      c = hc_sample_nu(spec.hc, spec.p, region, key);
      // On regions whose boundary level is even-occupied the biased law can
      // still place a particle on a leaf; the dynamics would reject such a
      // start, so those occupations are dropped.
      if ((region.depth + 1) % 2 == 0)
        for (Vertex v = region.level_begin(region.depth); v < region.n; ++v)
          c.spin[static_cast<std::size_t>(v)] = 0;
      break;
    case StartLaw::AllMax:
      c = hc_parity_config(region, nullptr, 0);
      break;
    case StartLaw::Explicit:
      if (Vertex(spec.explicit_start.size()) != region.n)
        throw std::invalid_argument("spec: explicit start size differs from region");
      c.spin = spec.explicit_start;
      break;
    default:
      throw std::invalid_argument("spec: independent spin starts are Ising only");
  }
  return c;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty sample");
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct MeanSE {
  double mean = 0.0;
  double se = 0.0;
};

// Fixed-order reduction; replica results land in preassigned slots, so the
// worker count never changes a digit.
inline MeanSE mean_se(const std::vector<double>& vals) {
  const double n = static_cast<double>(vals.size());
  Kahan acc;
  for (double v : vals) acc.add(v);
  MeanSE out;
  out.mean = acc.sum / n;
  if (vals.size() < 2) return out;
  Kahan var;
  for (double v : vals) var.add((v - out.mean) * (v - out.mean));
  out.se = std::sqrt(var.sum / (n - 1.0) / n);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Deep-quench relaxation at the root.

struct QuenchRow {
  double t = 0.0;
  double rho = 0.0;      // root observable from the sampled start
  double se = 0.0;
  double rho_max = 0.0;  // same event stream from the maximal start
  double se_max = 0.0;
  double gap = 0.0;      // rho - mu_ref
};

struct QuenchResult {
  long depth = 0;
  double mu_ref = 0.0;  // limiting root value the curve is measured against
  std::vector<QuenchRow> rows;
  FitResult decay;  // log |gap| against t

  std::string csv() const {
    std::vector<std::vector<double>> r;
    for (const QuenchRow& q : rows)
      r.push_back({q.t, q.rho, q.se, q.rho_max, q.se_max, mu_ref, q.gap});
    return format_csv({"t", "rho", "se", "rho_max", "se_max", "mu_ref", "gap"}, r);
  }
};

// Couples every sampled start with the all-plus start on the same event
// stream under a plus boundary; the order eta <= + is asserted pathwise at
// every update. The reference value is the homogeneous plus fixed point.
inline QuenchResult quench_convergence(const ExperimentSpec& spec) {
  spec.validate();
  if (spec.model != ModelKind::Ising)
    throw std::invalid_argument("quench: spec must name the Ising model");
  if (spec.probes.empty()) throw std::invalid_argument("quench: need probe times");
  const ModelParams& P = spec.ising;
  const double t_max = spec.probes.back();
  const TreeShape region = build_tree(P.b, static_cast<int>(spec.region_depth(t_max)));
  const std::size_t np = spec.probes.size();
  const std::size_t nr = static_cast<std::size_t>(spec.replicas);

  std::vector<double> eta_vals(nr * np), max_vals(nr * np);
  parallel_items(spec.replicas, spec.workers, [&](long i) {
    std::uint64_t key = derive_key(*spec.seed, static_cast<std::uint64_t>(i));
    std::vector<CoupledInstance> inst(2);
    inst[0].boundary = BoundarySpec::plus();
    inst[0].eta0 = detail::ising_start(spec, region, key);
    inst[1].boundary = BoundarySpec::plus();
    inst[1].eta0 = uniform_config(region, 1);
    CouplingDriver driver(derive_key(key, 0x44525652ULL), t_max);  // "DRVR"
    CoupledOptions opt;
    opt.assert_leq_pairs = {{0, 1}};
    opt.record_updates = false;
    auto trajs = coupled_simulate(P, region, nullptr, inst, driver, spec.probes, opt);
    for (std::size_t k = 0; k < np; ++k) {
      eta_vals[static_cast<std::size_t>(i) * np + k] = trajs[0].snapshots[k].spin[0];
      max_vals[static_cast<std::size_t>(i) * np + k] = trajs[1].snapshots[k].spin[0];
    }
  });

  QuenchResult out;
  out.depth = region.depth;
  out.mu_ref = mu_plus_root(P).magnetization;
  std::vector<double> slice(nr), gaps(np);
  for (std::size_t k = 0; k < np; ++k) {
    QuenchRow row;
    row.t = spec.probes[k];
    for (std::size_t i = 0; i < nr; ++i) slice[i] = eta_vals[i * np + k];
    detail::MeanSE e = detail::mean_se(slice);
    row.rho = e.mean;
    row.se = e.se;
    for (std::size_t i = 0; i < nr; ++i) slice[i] = max_vals[i * np + k];
    detail::MeanSE m = detail::mean_se(slice);
    row.rho_max = m.mean;
    row.se_max = m.se;
    row.gap = row.rho - out.mu_ref;
    gaps[k] = std::abs(row.gap);
    out.rows.push_back(row);
  }
  out.decay = fit_log_decay(spec.probes, gaps);
  return out;
}

// Hard-core analogue: nu_{p,lambda} starts coupled with the maximal even
// configuration under the even-phase boundary; target is the even-phase root
// occupation.
inline QuenchResult hc_quench_convergence(const ExperimentSpec& spec) {
  spec.validate();
  if (spec.model != ModelKind::HardCore)
    throw std::invalid_argument("hc quench: spec must name the hard-core model");
  if (spec.probes.empty()) throw std::invalid_argument("hc quench: need probe times");
  const HCParams& P = spec.hc;
  const double t_max = spec.probes.back();
  const TreeShape region = build_tree(P.b, static_cast<int>(spec.region_depth(t_max)));
  const std::size_t np = spec.probes.size();
  const std::size_t nr = static_cast<std::size_t>(spec.replicas);

  std::vector<double> nu_vals(nr * np), max_vals(nr * np);
  parallel_items(spec.replicas, spec.workers, [&](long i) {
    std::uint64_t key = derive_key(*spec.seed, static_cast<std::uint64_t>(i));
    std::vector<CoupledInstance> inst(2);
    inst[0].boundary = BoundarySpec::even_bc();
    inst[0].eta0 = detail::hc_start(spec, region, key);
    inst[1].boundary = BoundarySpec::even_bc();
    inst[1].eta0 = hc_parity_config(region, nullptr, 0);
    CouplingDriver driver(derive_key(key, 0x44525652ULL), t_max);  // "DRVR"
    CoupledOptions opt;
    // Every configuration sits below the maximal even packing in the biased
    // order, so the pair order is exact from the start.
    opt.assert_leq_pairs = {{0, 1}};
    opt.record_updates = false;
    auto trajs = hc_coupled_simulate(P, region, nullptr, inst, driver, spec.probes, opt);
    for (std::size_t k = 0; k < np; ++k) {
      nu_vals[static_cast<std::size_t>(i) * np + k] = trajs[0].snapshots[k].spin[0];
      max_vals[static_cast<std::size_t>(i) * np + k] = trajs[1].snapshots[k].spin[0];
    }
  });

  QuenchResult out;
  out.depth = region.depth;
  out.mu_ref = hc_mu_even_root(P);
  std::vector<double> slice(nr), gaps(np);
  for (std::size_t k = 0; k < np; ++k) {
    QuenchRow row;
    row.t = spec.probes[k];
    for (std::size_t i = 0; i < nr; ++i) slice[i] = nu_vals[i * np + k];
    detail::MeanSE e = detail::mean_se(slice);
    row.rho = e.mean;
    row.se = e.se;
    for (std::size_t i = 0; i < nr; ++i) slice[i] = max_vals[i * np + k];
    detail::MeanSE m = detail::mean_se(slice);
    row.rho_max = m.mean;
    row.se_max = m.se;
    row.gap = row.rho - out.mu_ref;
    gaps[k] = std::abs(row.gap);
    out.rows.push_back(row);
  }
  out.decay = fit_log_decay(spec.probes, gaps);
  return out;
}

// ---------------------------------------------------------------------------
// Three-term decomposition of the root error after a quench.
//
// The environment is read off the sampled start: levels <= ell stay free,
// deeper vertices become obstacles where the start is minus. The error of
// the root magnetization against the homogeneous plus value then splits into
//   (i)   the quenched equilibrium shift  mu+ - mu+_omega,
//   (ii)  relaxation inside the free ball of radius L = ell^gamma with plus
//         boundary on its frontier,
//   (iii) the influence of everything beyond L, measured by coupling the
//         frontier-frozen run with the full run on one event stream.
// Term (iii) is nonnegative pathwise; the frozen run dominates.

struct DecompositionRow {
  double t = 0.0;
  double relax = 0.0;  // frozen-frontier root mean minus its own equilibrium
  double relax_se = 0.0;
  double influence = 0.0;  // frozen-frontier root mean minus full-run root mean
  double influence_se = 0.0;
  double influence_bound = 0.0;  // t * e^{-2 ell}
  long discrepancies = 0;        // environments whose roots differ at this probe
};

struct DecompositionResult {
  long ell = 0;
  long L = 0;
  long depth = 0;
  double mu_plus_region = 0.0;       // homogeneous plus root value on the region
  std::vector<double> term_i;        // per environment |mu+ - mu+_omega|
  double term_i_median = 0.0;
  std::vector<DecompositionRow> rows;

  std::string csv() const {
    std::vector<std::vector<double>> r;
    for (const DecompositionRow& d : rows)
      r.push_back({d.t, d.relax, d.relax_se, d.influence, d.influence_se, d.influence_bound,
                   static_cast<double>(d.discrepancies)});
    return format_csv({"t", "relax", "relax_se", "influence", "influence_se", "influence_bound",
                       "discrepancies"},
                      r);
  }
};

inline DecompositionResult quench_decomposition(const ExperimentSpec& spec, long ell,
                                                double gamma) {
  spec.validate();
  if (spec.model != ModelKind::Ising)
    throw std::invalid_argument("decomposition: spec must name the Ising model");
  if (ell < 1) throw std::invalid_argument("decomposition: ell must be >= 1");
  if (!(gamma >= 1.0)) throw std::invalid_argument("decomposition: gamma must be >= 1");
  const ModelParams& P = spec.ising;
  const long L = std::lround(std::pow(static_cast<double>(ell), gamma));
  const double t_max = spec.probes.empty() ? 1.0 : spec.probes.back();
  const long d = spec.depth >= 0 ? spec.region_depth(t_max) : L + 7;
  if (d < L) throw std::invalid_argument("decomposition: region shallower than L");
  const TreeShape region = build_tree(P.b, static_cast<int>(d));
  const TreeShape ball = build_tree(P.b, static_cast<int>(L));
  const std::size_t np = spec.probes.size();
  const std::size_t nr = static_cast<std::size_t>(spec.replicas);

  const RecursionResult rr_free = r_recursion(P, region, nullptr, BoundarySpec::plus());
  const double mu_region = magnetization_from_log_ratio(rr_free.log_ratio[0]);

  std::vector<double> term_i(nr), frozen_root(nr * np), full_root(nr * np), ball_mu(nr);
  parallel_items(spec.replicas, spec.workers, [&](long i) {
    std::uint64_t key = derive_key(*spec.seed, static_cast<std::uint64_t>(i));
    std::vector<std::int8_t> spins = sample_bernoulli_spins(region, spec.p, key);
    ObstacleEnv omega = obstacles_from_quench(region, spins, static_cast<int>(ell));
    RecursionResult rr = r_recursion(P, region, &omega, BoundarySpec::plus());
    term_i[static_cast<std::size_t>(i)] =
        std::abs(mu_region - magnetization_from_log_ratio(rr.log_ratio[0]));
    if (np == 0) return;

    RecursionResult rr_ball = r_recursion(P, ball, &omega, BoundarySpec::plus());
    ball_mu[static_cast<std::size_t>(i)] = magnetization_from_log_ratio(rr_ball.log_ratio[0]);

    std::vector<CoupledInstance> inst(2);
    inst[0].boundary = BoundarySpec::plus();
    inst[0].eta0.spin = spins;
    inst[0].frozen.assign(static_cast<std::size_t>(region.n), 0);
    for (Vertex v = region.level_end(static_cast<int>(L)); v < region.n; ++v) {
      inst[0].eta0.spin[static_cast<std::size_t>(v)] = 1;
      inst[0].frozen[static_cast<std::size_t>(v)] = 1;
    }
    inst[1].boundary = BoundarySpec::plus();
    inst[1].eta0.spin = spins;
    CouplingDriver driver(derive_key(key, 0x44525652ULL), t_max);  // "DRVR"
    CoupledOptions opt;
    opt.assert_leq_pairs = {{1, 0}};
    opt.record_updates = false;
    auto trajs = coupled_simulate(P, region, &omega, inst, driver, spec.probes, opt);
    for (std::size_t k = 0; k < np; ++k) {
      frozen_root[static_cast<std::size_t>(i) * np + k] = trajs[0].snapshots[k].spin[0];
      full_root[static_cast<std::size_t>(i) * np + k] = trajs[1].snapshots[k].spin[0];
    }
  });

  DecompositionResult out;
  out.ell = ell;
  out.L = L;
  out.depth = d;
  out.mu_plus_region = mu_region;
  out.term_i = term_i;
  out.term_i_median = detail::median(term_i);
  std::vector<double> slice(nr);
  for (std::size_t k = 0; k < np; ++k) {
    DecompositionRow row;
    row.t = spec.probes[k];
    for (std::size_t i = 0; i < nr; ++i) slice[i] = frozen_root[i * np + k] - ball_mu[i];
    detail::MeanSE rel = detail::mean_se(slice);
    row.relax = rel.mean;
    row.relax_se = rel.se;
    long disc = 0;
    for (std::size_t i = 0; i < nr; ++i) {
      slice[i] = frozen_root[i * np + k] - full_root[i * np + k];
      if (slice[i] != 0.0) ++disc;
    }
    detail::MeanSE inf = detail::mean_se(slice);
    row.influence = inf.mean;
    row.influence_se = inf.se;
    row.influence_bound = row.t * std::exp(-2.0 * static_cast<double>(ell));
    row.discrepancies = disc;
    out.rows.push_back(row);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Minus-path product bound at level ell.

struct MinusPathResult {
  long ell = 0;
  long depth = 0;
  std::vector<double> bounds;  // per environment: sum over level-ell vertices
  double bound_median = 0.0;
  double mc_estimate = std::numeric_limits<double>::quiet_NaN();
  double mc_se = std::numeric_limits<double>::quiet_NaN();
  long mc_samples = 0;
};

// For each quenched environment, sums over the free level-ell vertices the
// product of eps^{-1} R_z along the root-to-vertex path (root excluded), an
// upper bound for the probability that some such path is entirely minus.
// With n_mc > 0 the event itself is estimated by exact top-down sampling;
// the event includes the root spin. A fixed environment can be supplied
// directly, in which case the sampled-environment loop is skipped.
inline MinusPathResult minus_path_probability(const ExperimentSpec& spec, long ell,
                                              long n_mc_per_env = 0,
                                              const ObstacleEnv* omega_override = nullptr) {
  spec.validate();
  if (spec.model != ModelKind::Ising)
    throw std::invalid_argument("minus path: spec must name the Ising model");
  if (ell < 1 || ell > 12) throw std::invalid_argument("minus path: ell outside [1, 12]");
  if (n_mc_per_env < 0) throw std::invalid_argument("minus path: negative sample count");
  const ModelParams& P = spec.ising;
  const long d = spec.depth >= 0 ? spec.depth : ell + 8;
  if (d < ell) throw std::invalid_argument("minus path: region shallower than ell");
  const TreeShape region = build_tree(P.b, static_cast<int>(d));
  const long n_env = omega_override ? 1 : spec.replicas;
  const std::size_t ne = static_cast<std::size_t>(n_env);
  const double minus_log_eps = 2.0 * P.beta;

  std::vector<double> bounds(ne), hits(ne);
  parallel_items(n_env, spec.workers, [&](long i) {
    std::uint64_t key = derive_key(*spec.seed, static_cast<std::uint64_t>(i));
    ObstacleEnv sampled;
    const ObstacleEnv* omega = omega_override;
    if (!omega) {
      std::vector<std::int8_t> spins = sample_bernoulli_spins(region, spec.p, key);
      sampled = obstacles_from_quench(region, spins, static_cast<int>(ell));
      omega = &sampled;
    }
    RecursionResult rr = r_recursion(P, region, omega, BoundarySpec::plus());

    Kahan sum;
    for (Vertex x : descendants_at_depth(region, 0, static_cast<int>(ell))) {
      if (!rr.active[static_cast<std::size_t>(x)]) continue;
      double lg = 0.0;
      for (Vertex z : path_to_descendant(region, 0, x))
        lg += rr.log_ratio[static_cast<std::size_t>(z)] + minus_log_eps;
      sum.add(std::exp(lg));
    }
    bounds[static_cast<std::size_t>(i)] = sum.sum;

    if (n_mc_per_env == 0) return;
    Stream rng(derive_key(key, 0x50415448ULL));  // "PATH"
    long found = 0;
    std::vector<Vertex> stack;
    for (long s = 0; s < n_mc_per_env; ++s) {
      std::vector<std::int8_t> sample = sample_gibbs_topdown(P, region, rr, rng);
      stack.clear();
      if (rr.active[0] && sample[0] == -1) stack.push_back(0);
      bool hit = false;
      while (!stack.empty() && !hit) {
        Vertex v = stack.back();
        stack.pop_back();
        if (region.level(v) == static_cast<int>(ell)) {
          hit = true;
          break;
        }
        for (int k = 0; k < region.b; ++k) {
          Vertex c = region.child(v, k);
          if (rr.active[static_cast<std::size_t>(c)] && sample[static_cast<std::size_t>(c)] == -1)
            stack.push_back(c);
        }
      }
      if (hit) ++found;
    }
    hits[static_cast<std::size_t>(i)] = static_cast<double>(found);
  });

  MinusPathResult out;
  out.ell = ell;
  out.depth = d;
  out.bounds = bounds;
  out.bound_median = detail::median(bounds);
  if (n_mc_per_env > 0) {
    Kahan total;
    for (double h : hits) total.add(h);
    const double n = static_cast<double>(n_env) * static_cast<double>(n_mc_per_env);
    double m = total.sum / n;
    out.mc_estimate = m;
    out.mc_se = n > 1.0 ? std::sqrt(m * (1.0 - m) / (n - 1.0)) : 0.0;
    out.mc_samples = n_env * n_mc_per_env;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Weighted-Hamming contraction at high temperature.

struct ContractionRow {
  double t = 0.0;
  double distance = 0.0;  // mean over replicas of sum_x lambda^{level(x)} [differ]
  double se = 0.0;
};

struct ContractionResult {
  long depth = 0;
  double lambda_weight = 0.0;
  std::vector<ContractionRow> rows;
  FitResult decay;  // log mean distance against t

  std::string csv() const {
    std::vector<std::vector<double>> r;
    for (const ContractionRow& c : rows) r.push_back({c.t, c.distance, c.se});
    return format_csv({"t", "distance", "se"}, r);
  }
};

// Couples a start with its copy flipped on the given set and tracks the
// weighted Hamming distance. The weight must lie in the contraction window
// (tanh beta, 1/(b tanh beta)), which is nonempty exactly below the
// spin-glass temperature; flipped pairs are not ordered, so no pathwise
// assertion applies.
inline ContractionResult contraction_experiment(const ExperimentSpec& spec, double lambda_weight,
                                                const std::vector<Vertex>& flips = {0}) {
  spec.validate();
  if (spec.model != ModelKind::Ising)
    throw std::invalid_argument("contraction: spec must name the Ising model");
  if (spec.probes.empty()) throw std::invalid_argument("contraction: need probe times");
  const ModelParams& P = spec.ising;
  const double th = std::tanh(P.beta);
  if (!(lambda_weight > th) || (th > 0.0 && !(lambda_weight < 1.0 / (P.b * th))))
    throw std::invalid_argument("contraction: weight outside (tanh beta, 1/(b tanh beta))");
  const double t_max = spec.probes.back();
  const TreeShape region = build_tree(P.b, static_cast<int>(spec.region_depth(t_max)));
  for (Vertex x : flips)
    if (x < 0 || x >= region.n) throw std::out_of_range("contraction: flip outside region");
  const std::size_t np = spec.probes.size();
  const std::size_t nr = static_cast<std::size_t>(spec.replicas);

  std::vector<double> lam_pow(static_cast<std::size_t>(region.depth) + 1, 1.0);
  for (std::size_t k = 1; k < lam_pow.size(); ++k) lam_pow[k] = lam_pow[k - 1] * lambda_weight;

  std::vector<double> dist(nr * np);
  parallel_items(spec.replicas, spec.workers, [&](long i) {
    std::uint64_t key = derive_key(*spec.seed, static_cast<std::uint64_t>(i));
    std::vector<CoupledInstance> inst(2);
    inst[0].boundary = BoundarySpec::free_bc();
    inst[0].eta0 = detail::ising_start(spec, region, key);
    inst[1].boundary = BoundarySpec::free_bc();
    inst[1].eta0 = inst[0].eta0;
    for (Vertex x : flips)
      inst[1].eta0.spin[static_cast<std::size_t>(x)] =
          static_cast<std::int8_t>(-inst[1].eta0.spin[static_cast<std::size_t>(x)]);
    CouplingDriver driver(derive_key(key, 0x44525652ULL), t_max);  // "DRVR"
    CoupledOptions opt;
    opt.record_updates = false;
    auto trajs = coupled_simulate(P, region, nullptr, inst, driver, spec.probes, opt);
    for (std::size_t k = 0; k < np; ++k) {
      Kahan dsum;
      const SpinConfig& a = trajs[0].snapshots[k];
      const SpinConfig& b = trajs[1].snapshots[k];
      for (Vertex v = 0; v < region.n; ++v)
        if (a.spin[static_cast<std::size_t>(v)] != b.spin[static_cast<std::size_t>(v)])
          dsum.add(lam_pow[static_cast<std::size_t>(region.level(v))]);
      dist[static_cast<std::size_t>(i) * np + k] = dsum.sum;
    }
  });

  ContractionResult out;
  out.depth = region.depth;
  out.lambda_weight = lambda_weight;
  std::vector<double> slice(nr), means(np);
  for (std::size_t k = 0; k < np; ++k) {
    ContractionRow row;
    row.t = spec.probes[k];
    for (std::size_t i = 0; i < nr; ++i) slice[i] = dist[i * np + k];
    detail::MeanSE e = detail::mean_se(slice);
    row.distance = e.mean;
    row.se = e.se;
    means[k] = e.mean;
    out.rows.push_back(row);
  }
  out.decay = fit_log_decay(spec.probes, means);
  return out;
}

// ---------------------------------------------------------------------------
// Phase boundary scan.

struct PhasePoint {
  double beta = 0.0;
  double h_c = 0.0;
  bool unique = true;
};

struct PhaseDiagram {
  std::vector<PhasePoint> rows;
  double asymptote_gap = 0.0;  // h_c at the largest beta minus (b - 1)

  std::string csv() const {
    std::vector<std::vector<double>> r;
    for (const PhasePoint& p : rows) r.push_back({p.beta, p.h_c, p.unique ? 1.0 : 0.0});
    return format_csv({"beta", "h_c", "unique"}, r);
  }
};

// Critical field along an ascending beta grid. The curve is nondecreasing in
// beta; a violation beyond bisection slack means a defect, not data.
inline PhaseDiagram phase_diagram_scan(int b, const std::vector<double>& betas,
                                       double tol = 1e-6) {
  if (b < 2) throw std::invalid_argument("phase diagram: branching number must be >= 2");
  if (betas.empty()) throw std::invalid_argument("phase diagram: empty grid");
  for (std::size_t i = 0; i < betas.size(); ++i) {
    if (!(betas[i] >= 0.0) || !std::isfinite(betas[i]))
      throw std::invalid_argument("phase diagram: beta must be finite and >= 0");
    if (i && betas[i] <= betas[i - 1])
      throw std::invalid_argument("phase diagram: grid must be strictly increasing");
  }
  PhaseDiagram out;
  for (double beta : betas) {
    CriticalField cf = critical_field(beta, b, tol);
    out.rows.push_back({beta, cf.h_c, cf.unique});
  }
  for (std::size_t i = 1; i < out.rows.size(); ++i)
    if (out.rows[i].h_c < out.rows[i - 1].h_c - 5.0 * tol)
      throw std::runtime_error("phase diagram: critical field decreased along the grid");
  out.asymptote_gap = out.rows.back().h_c - static_cast<double>(b - 1);
  return out;
}

}  // namespace treeq
