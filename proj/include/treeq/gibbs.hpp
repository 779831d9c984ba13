#pragma once

// Ising Gibbs measures on b-ary trees: the one-level ratio recursion, exact
// marginals, small-region brute force, free-boundary fixed points, critical
// parameters, and tail bounds for the ratio recursion in a diluted
// environment.
//
// Everything works with log-ratios x = log R, where R is the minus/plus
// probability ratio at a vertex given its subtree and boundary. Conventions:
// x = -inf means the vertex is surely +1, x = +inf surely -1, and vertices
// outside the working region carry +inf (they behave as -1 boundary).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "parallel.hpp"
#include "rng.hpp"
#include "tree.hpp"

namespace treeq {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct ModelParams {
  double beta = 1.0;  // inverse temperature, >= 0
  double h = 0.0;     // external field
  int b = 2;          // branching number

  void validate() const {
    if (!(beta >= 0.0) || !std::isfinite(beta))
      throw std::invalid_argument("params: beta must be finite and >= 0");
    if (!std::isfinite(h)) throw std::invalid_argument("params: field must be finite");
    if (b < 2) throw std::invalid_argument("params: branching number must be >= 2");
  }

  double log_eps() const { return -2.0 * beta; }          // log of e^{-2 beta}
  double eps() const { return std::exp(-2.0 * beta); }
  double log_field_factor() const { return -2.0 * beta * h; }
};

// ---------------------------------------------------------------------------
// Scalar kernels.

inline double sigmoid(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  double e = std::exp(t);
  return e / (1.0 + e);
}

inline double logsumexp2(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  double m = a > b ? a : b;
  double d = a > b ? b - a : a - b;
  return m + std::log1p(std::exp(d));
}

// log F(e^x) where F(r) = (eps + r) / (1 + eps r) is the one-child map of the
// ratio recursion. Finite for every x in [-inf, +inf]; range [log eps, -log eps].
inline double log_f_beta(double log_eps, double x) {
  if (x == -kInf) return log_eps;
  if (x == kInf) return -log_eps;
  return logsumexp2(log_eps, x) - logsumexp2(0.0, log_eps + x);
}

// K(e^x) = 1/(eps e^x + 1) - 1/(e^x/eps + 1), the per-edge contraction factor.
// The difference is rewritten through expm1 and two sigmoids so there is no
// cancellation anywhere on [0, +inf]; the endpoints give exactly 0 and the
// maximum over x is tanh(beta), attained at x = 0.
inline double k_beta_log(double log_eps, double x) {
  if (x == -kInf || x == kInf) return 0.0;
  return std::expm1(-2.0 * log_eps) * sigmoid(x + log_eps) * sigmoid(log_eps - x);
}

inline double f_beta(const ModelParams& P, double r) {
  P.validate();
  if (std::isnan(r) || r < 0.0) throw std::domain_error("f_beta: ratio must lie in [0, +inf]");
  return std::exp(log_f_beta(P.log_eps(), std::log(r)));
}

inline double k_beta(const ModelParams& P, double r) {
  P.validate();
  if (std::isnan(r) || r < 0.0) throw std::domain_error("k_beta: ratio must lie in [0, +inf]");
  return k_beta_log(P.log_eps(), std::log(r));
}

// Expected spin of a vertex whose marginal minus/plus ratio is e^x.
inline double magnetization_from_log_ratio(double x) {
  if (x == -kInf) return 1.0;
  if (x == kInf) return -1.0;
  return -std::tanh(0.5 * x);
}

// ---------------------------------------------------------------------------
// Boundary reading. Returns the spin a leaf sees through its k-th boundary
// slot: +-1, or 0 for a free boundary (no interaction). Under a plus boundary
// with an environment deeper than the region, the maximal compatible
// configuration puts +1 exactly on boundary vertices inside the environment's
// free component and -1 elsewhere.
inline int boundary_spin(const TreeShape& t, const ObstacleEnv* omega, const BoundarySpec& bc,
                         Vertex leaf, int k) {
  switch (bc.kind) {
    case BoundaryKind::Plus:
      if (omega && omega->shape.depth > t.depth)
        return omega->in_free_component(t.child(leaf, k)) ? 1 : -1;
      return 1;
    case BoundaryKind::Minus:
      return -1;
    case BoundaryKind::Free:
      return 0;
    case BoundaryKind::Fixed:
      return bc.values[size_t(t.boundary_slot(leaf, k))];
    default:
      throw std::invalid_argument("boundary: parity boundary conditions are hard-core only");
  }
}

// ---------------------------------------------------------------------------
// Ratio recursion over a region.

struct RecursionResult {
  std::vector<double> log_ratio;      // +inf outside the region
  std::vector<std::uint8_t> active;   // 1 = inside the free component
};

inline RecursionResult r_recursion(const ModelParams& P, const TreeShape& t,
                                   const ObstacleEnv* omega, const BoundarySpec& bc) {
  P.validate();
  if (P.b != t.b) throw std::invalid_argument("r_recursion: branching number mismatch");
  check_region(t, omega);
  check_boundary(t, bc, /*hard_core=*/false);

  const double le = P.log_eps();
  RecursionResult out;
  out.log_ratio.assign(size_t(t.n), kInf);
  out.active.assign(size_t(t.n), 0);

  for (Vertex v = t.n - 1; v >= 0; --v) {
    if (!vertex_active(t, omega, v)) continue;
    out.active[size_t(v)] = 1;
    double acc = P.log_field_factor();
    if (t.is_leaf(v)) {
      for (int k = 0; k < t.b; ++k) {
        int s = boundary_spin(t, omega, bc, v, k);
        acc += s == 1 ? le : (s == -1 ? -le : 0.0);
      }
    } else {
      // An inactive child carries +inf and contributes log F(+inf) = -log eps,
      // which is exactly the factor of a child frozen at -1.
      for (int k = 0; k < t.b; ++k) acc += log_f_beta(le, out.log_ratio[size_t(t.child(v, k))]);
    }
    out.log_ratio[size_t(v)] = acc;
  }
  return out;
}

// Exact single-site marginals P(sigma_v = +1) by a second, downward pass.
// Inactive vertices report 0 (they are frozen at -1).
inline std::vector<double> site_marginals(const ModelParams& P, const TreeShape& t,
                                          const RecursionResult& rr) {
  const double le = P.log_eps();
  std::vector<double> prob(size_t(t.n), 0.0);
  // log_above[v] = log ratio of the system seen by v through its parent.
  std::vector<double> log_above(size_t(t.n), 0.0);
  for (Vertex v = 0; v < t.n; ++v) {
    if (!rr.active[size_t(v)]) continue;
    double log_m = rr.log_ratio[size_t(v)];
    if (v != 0) log_m += log_f_beta(le, log_above[size_t(v)]);
    prob[size_t(v)] = sigmoid(-log_m);
    if (!t.is_leaf(v)) {
      for (int k = 0; k < t.b; ++k) {
        Vertex c = t.child(v, k);
        if (rr.active[size_t(c)])
          log_above[size_t(c)] = log_m - log_f_beta(le, rr.log_ratio[size_t(c)]);
      }
    }
  }
  return prob;
}

// Exact sample from the region's Gibbs measure: the root by its marginal, then
// each vertex conditionally on its parent (ratio eps^{s_parent} R_v).
inline std::vector<std::int8_t> sample_gibbs_topdown(const ModelParams& P, const TreeShape& t,
                                                     const RecursionResult& rr, Stream& rng) {
  const double le = P.log_eps();
  std::vector<std::int8_t> spins(size_t(t.n), -1);
  for (Vertex v = 0; v < t.n; ++v) {
    if (!rr.active[size_t(v)]) continue;
    double log_m = rr.log_ratio[size_t(v)];
    if (v != 0) log_m += spins[size_t(t.parent(v))] == 1 ? le : -le;
    spins[size_t(v)] = rng.next_bernoulli(sigmoid(-log_m)) ? 1 : -1;
  }
  return spins;
}

// Product of per-edge contraction factors along a vertex path; 0 if the path
// touches anything outside the region.
inline double path_weight(const ModelParams& P, const RecursionResult& rr,
                          const std::vector<Vertex>& path) {
  const double le = P.log_eps();
  double w = 1.0;
  for (Vertex z : path) {
    if (!rr.active[size_t(z)]) return 0.0;
    w *= k_beta_log(le, rr.log_ratio[size_t(z)]);
  }
  return w;
}

// ---------------------------------------------------------------------------
// Brute force over small regions; the oracle everything else is tested against.

struct BruteForceGibbs {
  std::vector<Vertex> sites;      // active vertices, ascending BFS order
  std::vector<int> site_index;    // vertex -> bit position, -1 elsewhere
  std::vector<double> prob;       // normalized, bit i set = sites[i] carries +1

  std::size_t states() const { return prob.size(); }

  double marginal_plus(Vertex x) const {
    int i = site_index[size_t(x)];
    if (i < 0) return 0.0;
    double s = 0.0;
    for (std::size_t m = 0; m < prob.size(); ++m)
      if (m >> i & 1) s += prob[m];
    return s;
  }

  double magnetization(Vertex x) const { return 2.0 * marginal_plus(x) - 1.0; }

  // P(sigma_x = +1 | sigma_c = s); c must be an active site.
  double conditional_marginal_plus(Vertex x, Vertex c, int s) const {
    int i = site_index[size_t(x)];
    int j = site_index[size_t(c)];
    if (j < 0) throw std::invalid_argument("conditional: conditioning vertex is not free");
    unsigned want = s == 1 ? 1u : 0u;
    double num = 0.0, den = 0.0;
    for (std::size_t m = 0; m < prob.size(); ++m) {
      if ((m >> j & 1) != want) continue;
      den += prob[m];
      if (i >= 0 && (m >> i & 1)) num += prob[m];
    }
    if (den <= 0.0) throw std::runtime_error("conditional: conditioning event has zero mass");
    return num / den;
  }

  template <class Fn>
  double expectation(Fn&& f) const {
    double s = 0.0;
    for (std::size_t m = 0; m < prob.size(); ++m) s += prob[m] * f(m);
    return s;
  }

  std::size_t sample_mask(Stream& rng) const {
    double u = rng.next_unit();
    double acc = 0.0;
    for (std::size_t m = 0; m < prob.size(); ++m) {
      acc += prob[m];
      if (u < acc) return m;
    }
    return prob.size() - 1;
  }
};

inline BruteForceGibbs brute_force_gibbs(const ModelParams& P, const TreeShape& t,
                                         const ObstacleEnv* omega, const BoundarySpec& bc,
                                         int max_sites = 13) {
  P.validate();
  if (P.b != t.b) throw std::invalid_argument("brute force: branching number mismatch");
  check_region(t, omega);
  check_boundary(t, bc, /*hard_core=*/false);

  BruteForceGibbs bf;
  bf.site_index.assign(size_t(t.n), -1);
  for (Vertex v = 0; v < t.n; ++v)
    if (vertex_active(t, omega, v)) {
      bf.site_index[size_t(v)] = int(bf.sites.size());
      bf.sites.push_back(v);
    }
  int f = int(bf.sites.size());
  if (f > max_sites) throw std::invalid_argument("brute force: too many free sites to enumerate");

  // Per site: external field from fixed neighbors (field h + frozen -1
  // children + boundary slots), plus the list of active-active edges.
  std::vector<double> g(size_t(f), P.h);
  std::vector<std::pair<int, int>> edges;
  for (int i = 0; i < f; ++i) {
    Vertex v = bf.sites[size_t(i)];
    if (t.is_leaf(v)) {
      for (int k = 0; k < t.b; ++k) g[size_t(i)] += boundary_spin(t, omega, bc, v, k);
    } else {
      for (int k = 0; k < t.b; ++k) {
        Vertex c = t.child(v, k);
        int j = bf.site_index[size_t(c)];
        if (j >= 0)
          edges.emplace_back(i, j);
        else
          g[size_t(i)] += -1;  // child frozen at -1
      }
    }
  }

  std::size_t nstates = std::size_t(1) << f;
  std::vector<double> logw(nstates);
  double maxw = -kInf;
  for (std::size_t m = 0; m < nstates; ++m) {
    double e = 0.0;
    for (auto [i, j] : edges) {
      int si = (m >> i & 1) ? 1 : -1;
      int sj = (m >> j & 1) ? 1 : -1;
      e += si * sj;
    }
    for (int i = 0; i < f; ++i) e += ((m >> i & 1) ? 1 : -1) * g[size_t(i)];
    logw[m] = P.beta * e;
    maxw = std::max(maxw, logw[m]);
  }
  bf.prob.resize(nstates);
  double z = 0.0;
  for (std::size_t m = 0; m < nstates; ++m) {
    bf.prob[m] = std::exp(logw[m] - maxw);
    z += bf.prob[m];
  }
  for (double& p : bf.prob) p /= z;
  return bf;
}

// ---------------------------------------------------------------------------
// Critical parameters and homogeneous fixed points.

inline double critical_beta0(int b) {
  if (b < 2) throw std::invalid_argument("critical_beta0: branching number must be >= 2");
  return 0.5 * std::log((b + 1.0) / (b - 1.0));
}

inline double critical_beta1(int b) {
  if (b < 2) throw std::invalid_argument("critical_beta1: branching number must be >= 2");
  double s = std::sqrt(double(b));
  return 0.5 * std::log((s + 1.0) / (s - 1.0));
}

struct FixedPointResult {
  double log_ratio = kInf;
  double magnetization = -1.0;
  long iters = 0;
  bool converged = false;
};

// One level of the homogeneous recursion: x -> -2 beta h + b log F(x).
inline double homogeneous_step(const ModelParams& P, double x) {
  return P.log_field_factor() + P.b * log_f_beta(P.log_eps(), x);
}

// Root log-ratio of the depth-ell homogeneous tree whose boundary children all
// carry log-ratio `start` (Plus boundary: -inf, Minus: +inf). With ell empty,
// iterate to the fixed point instead; convergence means successive log-ratios
// differ by less than tol, and failure to converge within max_iter is
// reported through the flag rather than by raising.
inline FixedPointResult iterate_homogeneous(const ModelParams& P, double start,
                                            std::optional<long> ell,
                                            long max_iter = 100000, double tol = 1e-13) {
  P.validate();
  FixedPointResult res;
  double x = start;
  if (ell) {
    if (*ell < 0) throw std::invalid_argument("iterate_homogeneous: negative depth");
    for (long i = 0; i <= *ell; ++i) x = homogeneous_step(P, x);
    res.iters = *ell + 1;
    res.converged = true;
  } else {
    for (long i = 0; i < max_iter; ++i) {
      double nx = homogeneous_step(P, x);
      ++res.iters;
      if (std::isfinite(x) && std::abs(nx - x) < tol) {
        x = nx;
        res.converged = true;
        break;
      }
      x = nx;
    }
  }
  res.log_ratio = x;
  res.magnetization = magnetization_from_log_ratio(x);
  return res;
}

inline FixedPointResult mu_plus_root(const ModelParams& P, std::optional<long> ell = {}) {
  return iterate_homogeneous(P, -kInf, ell);
}

inline FixedPointResult mu_minus_root(const ModelParams& P, std::optional<long> ell = {}) {
  return iterate_homogeneous(P, kInf, ell);
}

struct CriticalField {
  double h_c = 0.0;
  bool unique = true;  // true when the Gibbs measure is unique for every h >= 0
};

// Smallest field killing the plus/minus phase coexistence, by bisection on
// the gap between the two homogeneous fixed points. Below the zero-field
// uniqueness temperature the answer is 0 and the measure is unique.
inline CriticalField critical_field(double beta, int b, double tol = 1e-6) {
  if (!(beta > 0.0) || !std::isfinite(beta))
    throw std::invalid_argument("critical_field: beta must be finite and > 0");
  if (b < 2) throw std::invalid_argument("critical_field: branching number must be >= 2");
  auto coexists = [&](double h) {
    ModelParams P{beta, h, b};
    double mp = mu_plus_root(P).magnetization;
    double mm = mu_minus_root(P).magnetization;
    return std::abs(mp - mm) > 1e-8;
  };
  if (beta <= critical_beta0(b) || !coexists(0.0)) return {0.0, true};
  double lo = 0.0, hi = 1.0;
  while (coexists(hi)) {
    hi *= 2.0;
    if (hi > 8.0 * b + 16.0)
      throw std::runtime_error("critical_field: coexistence persists at implausibly large field");
  }
  for (int i = 0; i < 200 && hi - lo > tol; ++i) {
    double mid = 0.5 * (lo + hi);
    (coexists(mid) ? lo : hi) = mid;
  }
  return {0.5 * (lo + hi), false};
}

// ---------------------------------------------------------------------------
// Tail of the ratio recursion in a diluted environment.

struct TailEstimate {
  std::vector<long> ell;
  std::vector<double> value;      // value[i] bounds P(R >= eps) at depth ell[i]
  double sup = 0.0;
  bool diverged = false;          // iteration reached 1 (the trivial bound)
  bool has_fixed_point = false;   // the quadratic map has a real fixed point
  double fixed_point = std::numeric_limits<double>::quiet_NaN();
};

// Analytic recursion bounding the exceedance probability P(R >= eps) on a
// binary tree with vertex density p, for field offset exponent a in (0, 4):
// q_1 = 2(1-p), q_l = 2^{k0+1} (2(1-p) + q_{l-1}^2), k0 = floor(4/a - 1).
// Values are clamped at the trivial bound 1. Only b = 2 is supported; the
// constants are specific to the binary case.
inline TailEstimate r_tail_bound_recursion(double a, double p, int b, int ell_max) {
  if (b != 2) throw std::invalid_argument("r_tail_bound_recursion: analytic constants cover b = 2 only");
  if (!(a > 0.0 && a < 4.0)) throw std::invalid_argument("r_tail_bound_recursion: exponent outside (0, 4)");
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("r_tail_bound_recursion: p outside [0,1]");
  if (ell_max < 1) throw std::invalid_argument("r_tail_bound_recursion: need at least one level");

  int k0 = int(std::floor(4.0 / a - 1.0));
  double c2 = std::ldexp(1.0, k0 + 1);
  double c1 = c2 * 2.0 * (1.0 - p);

  TailEstimate est;
  double disc = 1.0 - 4.0 * c1 * c2;
  est.has_fixed_point = disc >= 0.0;
  if (est.has_fixed_point) est.fixed_point = (1.0 - std::sqrt(disc)) / (2.0 * c2);

  double q = std::min(1.0, 2.0 * (1.0 - p));
  est.ell.push_back(1);
  est.value.push_back(q);
  for (int l = 2; l <= ell_max; ++l) {
    q = c1 + c2 * q * q;
    if (q >= 1.0) {
      q = 1.0;
      est.diverged = true;
    }
    est.ell.push_back(l);
    est.value.push_back(q);
  }
  est.sup = *std::max_element(est.value.begin(), est.value.end());
  return est;
}

struct CertifiedTail {
  bool below_threshold = false;        // every iterate stayed strictly below x*
  int frac_bits = 60;
  std::uint64_t threshold_fp = 0;      // x* = 2^{-(k0+2)} in fixed point
  std::vector<std::uint64_t> values_fp;
};

// Exact fixed-point (64.60) evaluation of the same recursion at the dyadic
// density p = 1 - 2^{-(5+2k0)}, where the quadratic has a double root at
// x* = 2^{-(k0+2)} and every constant is a power of two. All roundings go
// upward, so values_fp[i] certifiably dominates the exact iterate and
// below_threshold certifies sup_l q_l < x*.
inline CertifiedTail r_tail_bound_certified(int k0, int ell_max) {
  if (k0 < 0 || k0 > 26) throw std::invalid_argument("r_tail_bound_certified: k0 outside [0, 26]");
  if (ell_max < 1) throw std::invalid_argument("r_tail_bound_certified: need at least one level");
  const int SH = 60;
  CertifiedTail out;
  out.frac_bits = SH;
  out.threshold_fp = std::uint64_t(1) << (SH - (k0 + 2));
  std::uint64_t x = std::uint64_t(1) << (SH - (4 + 2 * k0));  // q_1 = 2(1-p)
  const std::uint64_t c1 = std::uint64_t(1) << (SH - (3 + k0));
  const int rs = SH - (k0 + 1);  // rescale of c2 * x^2 back to 60 fractional bits
  out.values_fp.push_back(x);
  out.below_threshold = x < out.threshold_fp;
  for (int l = 2; l <= ell_max && out.below_threshold; ++l) {
    unsigned __int128 sq = (unsigned __int128)x * x;
    unsigned __int128 t = sq >> rs;
    if (sq & ((((unsigned __int128)1) << rs) - 1)) t += 1;  // round up
    unsigned __int128 nx = (unsigned __int128)c1 + t;
    if (nx >= out.threshold_fp) {
      out.below_threshold = false;
      break;
    }
    x = (std::uint64_t)nx;
    out.values_fp.push_back(x);
  }
  return out;
}

struct TailMonteCarlo {
  double estimate = 0.0;
  double std_error = 0.0;
  long exceed = 0;
  long n = 0;
};

// Empirical exceedance frequency P(R_root >= eps) over i.i.d. dilutions of the
// depth-ell tree under a plus boundary. The root is forced free: its own state
// never enters the root ratio, which is a function of the environment below.
inline TailMonteCarlo r_tail_monte_carlo(const ModelParams& P, double p, int ell, long n,
                                         std::uint64_t seed, int workers = 0) {
  P.validate();
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("r_tail_monte_carlo: p outside [0,1]");
  if (n <= 0) throw std::invalid_argument("r_tail_monte_carlo: need a positive sample count");
  TreeShape t = build_tree(P.b, ell);
  const std::uint64_t base = derive_key(seed, 0x5441494cULL);  // "TAIL"
  std::vector<std::uint8_t> hits(static_cast<std::size_t>(n));
  parallel_items(n, workers, [&](long i) {
    Stream s(derive_key(base, std::uint64_t(i)));
    std::vector<std::uint8_t> flags(size_t(t.n), 0);
    for (Vertex v = 1; v < t.n; ++v) flags[size_t(v)] = s.next_bernoulli(p) ? 0 : 1;
    ObstacleEnv env = ObstacleEnv::from_flags(t, std::move(flags));
    RecursionResult rr = r_recursion(P, t, &env, BoundarySpec::plus());
    hits[size_t(i)] = rr.log_ratio[0] >= P.log_eps() ? 1 : 0;
  });
  TailMonteCarlo mc;
  mc.n = n;
  for (long i = 0; i < n; ++i) mc.exceed += hits[size_t(i)];
  mc.estimate = double(mc.exceed) / double(n);
  mc.std_error = std::sqrt(std::max(0.0, mc.estimate * (1.0 - mc.estimate) / double(n)));
  return mc;
}

// ---------------------------------------------------------------------------
// Path weights in a random environment: Monte Carlo moments of the summed
// root-to-level weights, plain and with the good/bad modification.

enum class Regime { A, B, C };

struct WeightMomentOptions {
  Regime regime = Regime::A;
  double a = 1.0;    // regime A: sets the required run of regular vertices
  double a1 = 0.1;   // regimes B, C: density slack in the obstacle count
  int pad = 6;       // environment levels kept below the target level
};

struct WeightMomentResult {
  double moment = 0.0;            // E exp(t sum_x W(x))
  double moment_se = 0.0;
  double modified_moment = 0.0;   // same with the psi-modified weights
  double modified_moment_se = 0.0;
  double mean_weight_sum = 0.0;
  long n = 0;
  long good_steps = 0;
  long bad_steps = 0;
  long blocked_paths = 0;
};

namespace detail {

// Accumulates, for one environment, sum_x prod K and sum_x prod psi over the
// root-to-level-ell paths inside the free component. The path vertices are
// z_1..z_ell (the root is never classified and carries no factor); psi is u on
// good vertices, 1 on bad ones, and a path through an obstacle contributes 0
// by never being walked.
struct WeightWalker {
  const ModelParams* P = nullptr;
  const TreeShape* t = nullptr;
  const RecursionResult* rr = nullptr;
  const WeightMomentOptions* opt = nullptr;
  int ell = 0;
  int k0 = 0;      // regime A: a good vertex needs k0-1 regular vertices below it
  double u = 0.0;
  double sum_w = 0.0;
  double sum_mod = 0.0;
  long good = 0, bad = 0, blocked = 0;
  std::vector<Vertex> pathv;      // current path z_1..z_ell
  std::vector<std::uint8_t> reg;  // scratch: per-vertex regularity / goodness flag

  // Regime A regularity of path vertex z: every off-path child is free with
  // ratio at most eps. Children beyond the stored environment sit on the plus
  // boundary (ratio 0) and never spoil it.
  bool regular_at(Vertex z, Vertex on_path_child) const {
    const double thr = P->log_eps() + 1e-12;
    if (t->is_leaf(z)) return true;
    for (int k = 0; k < t->b; ++k) {
      Vertex y = t->child(z, k);
      if (y == on_path_child) continue;
      if (!rr->active[size_t(y)] || rr->log_ratio[size_t(y)] > thr) return false;
    }
    return true;
  }

  // Regimes B and C bound the number m of obstacle children off the path;
  // regime B additionally requires every free off-path child to have ratio
  // at most eps.
  bool good_bc_at(Vertex z, Vertex on_path_child) const {
    const double thr = P->log_eps() + 1e-12;
    int m = 0;
    bool ratios_ok = true;
    if (!t->is_leaf(z)) {
      for (int k = 0; k < t->b; ++k) {
        Vertex y = t->child(z, k);
        if (y == on_path_child) continue;
        if (!rr->active[size_t(y)])
          ++m;
        else if (rr->log_ratio[size_t(y)] > thr)
          ratios_ok = false;
      }
    }
    if (opt->regime == Regime::B) return ratios_ok && double(m) <= (1.0 - 2.0 * opt->a1) * t->b / 2.0;
    return double(m) <= (1.0 - opt->a1) * t->b;
  }

  void finish_path() {
    const double le = P->log_eps();
    double w = 1.0;
    for (int i = 0; i < ell; ++i) w *= k_beta_log(le, rr->log_ratio[size_t(pathv[size_t(i)])]);
    sum_w += w;
    for (int i = 0; i < ell; ++i) {
      Vertex next = i + 1 < ell ? pathv[size_t(i) + 1] : Vertex(-1);
      bool flag = opt->regime == Regime::A ? regular_at(pathv[size_t(i)], next)
                                           : good_bc_at(pathv[size_t(i)], next);
      reg[size_t(i)] = flag ? 1 : 0;
    }
    double mod = 1.0;
    for (int i = 0; i < ell; ++i) {
      bool is_good = reg[size_t(i)] != 0;
      if (opt->regime == Regime::A) {
        // Good further requires k0-1 consecutive regular vertices immediately
        // below on the path; vertices too close to the endpoint stay bad.
        is_good = is_good && (ell - 1 - i >= k0 - 1);
        for (int j = 1; is_good && j <= k0 - 1; ++j) is_good = reg[size_t(i + j)] != 0;
      }
      mod *= is_good ? u : 1.0;
      if (is_good)
        ++good;
      else
        ++bad;
    }
    sum_mod += mod;
  }

  void walk(Vertex z, int level) {
    if (level == ell) {
      finish_path();
      return;
    }
    for (int k = 0; k < t->b; ++k) {
      Vertex c = t->child(z, k);
      if (!rr->active[size_t(c)]) {
        ++blocked;  // one dead branch, however many paths it would have carried
        continue;
      }
      pathv[size_t(level)] = c;
      walk(c, level + 1);
    }
  }
};

}  // namespace detail

// Monte Carlo moments of the summed path weights at level ell under i.i.d.
// dilution with density p: reports E exp(t sum_x W(x)) for the plain weights
// W(x) = prod_z K(R_z) and for the modified weights in which good vertices
// contribute the factor u and bad ones the factor 1. The environment extends
// opt.pad levels below the target level so the ratios at level ell feel a
// generic environment rather than the plus boundary directly.
inline WeightMomentResult modified_weight_moment(const ModelParams& P, double p, int ell,
                                                 double t_exp, double u, long n,
                                                 std::uint64_t seed,
                                                 const WeightMomentOptions& opt = {},
                                                 int workers = 0) {
  P.validate();
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("weight moment: p outside [0,1]");
  if (ell < 1) throw std::invalid_argument("weight moment: need level >= 1");
  if (n <= 0) throw std::invalid_argument("weight moment: need a positive sample count");
  if (opt.pad < 0) throw std::invalid_argument("weight moment: negative padding");
  if (!(u >= 0.0)) throw std::invalid_argument("weight moment: u must be >= 0");
  if (opt.regime == Regime::A && !(opt.a > 0.0 && opt.a < 4.0))
    throw std::invalid_argument("weight moment: regime A exponent outside (0, 4)");
  if (opt.regime != Regime::A && !(opt.a1 > 0.0 && opt.a1 < 0.5))
    throw std::invalid_argument("weight moment: density slack outside (0, 1/2)");

  TreeShape shape = build_tree(P.b, ell + opt.pad);
  const int k0 = opt.regime == Regime::A ? int(std::floor(4.0 / opt.a)) : 0;
  const std::uint64_t base = derive_key(seed, 0x4d4f4dULL);

  const std::size_t un = static_cast<std::size_t>(n);
  std::vector<double> ew(un), emod(un), wsum(un);
  std::vector<long> goods(un), bads(un), blocks(un);
  parallel_items(n, workers, [&](long i) {
    Stream s(derive_key(base, std::uint64_t(i)));
    std::vector<std::uint8_t> flags(size_t(shape.n));
    for (Vertex v = 0; v < shape.n; ++v) flags[size_t(v)] = s.next_bernoulli(p) ? 0 : 1;
    ObstacleEnv env = ObstacleEnv::from_flags(shape, std::move(flags));
    RecursionResult rr = r_recursion(P, shape, &env, BoundarySpec::plus());
    detail::WeightWalker w;
    w.P = &P;
    w.t = &shape;
    w.rr = &rr;
    w.opt = &opt;
    w.ell = ell;
    w.k0 = k0;
    w.u = u;
    w.pathv.assign(size_t(ell), 0);
    w.reg.assign(size_t(ell), 0);
    if (rr.active[0])
      w.walk(0, 0);
    else
      w.blocked = 1;
    ew[size_t(i)] = std::exp(t_exp * w.sum_w);
    emod[size_t(i)] = std::exp(t_exp * w.sum_mod);
    wsum[size_t(i)] = w.sum_w;
    goods[size_t(i)] = w.good;
    bads[size_t(i)] = w.bad;
    blocks[size_t(i)] = w.blocked;
  });

  auto mean_se = [n](const std::vector<double>& x, double& mean, double& se) {
    Kahan m;
    for (double v : x) m.add(v);
    mean = m.sum / double(n);
    Kahan q;
    for (double v : x) q.add((v - mean) * (v - mean));
    se = n > 1 ? std::sqrt(q.sum / (double(n) * double(n - 1))) : 0.0;
  };

  WeightMomentResult res;
  res.n = n;
  mean_se(ew, res.moment, res.moment_se);
  mean_se(emod, res.modified_moment, res.modified_moment_se);
  double dummy_se = 0.0;
  mean_se(wsum, res.mean_weight_sum, dummy_se);
  for (long i = 0; i < n; ++i) {
    res.good_steps += goods[size_t(i)];
    res.bad_steps += bads[size_t(i)];
    res.blocked_paths += blocks[size_t(i)];
  }
  return res;
}

}  // namespace treeq
