#pragma once

// Hard-core lattice gas (independent sets) on the b-ary tree: activity
// parameters, the bipartite partial order, the occupation-ratio recursion
// with its even/odd phase limits, the two-stage biased initial law, exact
// enumeration over legal configurations, and heat-bath dynamics through the
// shared coupled event engine.
//
// Occupations ride in the same per-vertex int8 containers as spins, with
// values 0/1. Level parity counts from the root (level 0 is even), so tau^e
// occupies even levels and is the maximum of the partial order, tau^o
// occupies odd levels and is the minimum. Obstacle sites are empty sites:
// they are pinned vacant and impose no constraint.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dynamics.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "tree.hpp"

namespace treeq {

struct HCParams {
  double lambda = 1.0;  // activity, > 0
  int b = 2;            // branching number

  void validate() const {
    if (!(lambda > 0.0) || !std::isfinite(lambda))
      throw std::invalid_argument("hc params: activity must be finite and > 0");
    if (b < 2) throw std::invalid_argument("hc params: branching number must be >= 2");
  }

  double p_occ() const { return lambda / (1.0 + lambda); }  // occupation pull
  double q_occ() const { return 1.0 / (1.0 + lambda); }
};

// Critical activity: below it the homogeneous recursion has a unique fixed
// point, above it the even and odd seeded iterations split.
inline double hc_lambda_c(int b) {
  if (b < 2) throw std::invalid_argument("hc lambda_c: branching number must be >= 2");
  return std::pow(static_cast<double>(b), b) / std::pow(static_cast<double>(b - 1), b + 1);
}

inline void check_hc_boundary(const TreeShape& t, const BoundarySpec& bc) {
  if (bc.kind == BoundaryKind::Plus || bc.kind == BoundaryKind::Minus)
    throw std::invalid_argument("hc boundary: spin boundaries have no hard-core meaning");
  check_boundary(t, bc, /*hard_core=*/true);
}

// Occupation a leaf sees through its k-th boundary slot. With an environment
// deeper than the region, boundary vertices outside the free component read
// vacant.
inline int boundary_occupation(const TreeShape& t, const ObstacleEnv* omega,
                               const BoundarySpec& bc, Vertex leaf, int k) {
  bool free_slot = !omega || omega->shape.depth <= t.depth ||
                   omega->in_free_component(t.child(leaf, k));
  switch (bc.kind) {
    case BoundaryKind::Free:
      return 0;
    case BoundaryKind::EvenBC:
      return free_slot && (t.depth + 1) % 2 == 0 ? 1 : 0;
    case BoundaryKind::OddBC:
      return free_slot && (t.depth + 1) % 2 == 1 ? 1 : 0;
    case BoundaryKind::Fixed:
      return free_slot ? bc.values[static_cast<std::size_t>(t.boundary_slot(leaf, k))] : 0;
    default:
      throw std::invalid_argument("hc boundary: spin boundaries have no hard-core meaning");
  }
}

// tau^e (parity 0) or tau^o (parity 1) restricted to the region: occupied
// exactly on the matching levels inside the free component.
inline SpinConfig hc_parity_config(const TreeShape& t, const ObstacleEnv* omega, int parity) {
  if (parity != 0 && parity != 1) throw std::invalid_argument("hc parity config: parity is 0 or 1");
  SpinConfig c = uniform_config(t, 0);
  for (Vertex v = 0; v < t.n; ++v)
    if (vertex_active(t, omega, v) && t.level(v) % 2 == parity)
      c.spin[static_cast<std::size_t>(v)] = 1;
  return c;
}

// The biased order: smaller means less occupied on even levels and more
// occupied on odd levels, so tau^o is the minimum and tau^e the maximum.
inline bool hc_order_leq(const TreeShape& t, const SpinConfig& a, const SpinConfig& b) {
  if (a.spin.size() != static_cast<std::size_t>(t.n) || b.spin.size() != a.spin.size())
    throw std::invalid_argument("hc order: configurations do not share the region");
  for (Vertex v = 0; v < t.n; ++v) {
    std::size_t vi = static_cast<std::size_t>(v);
    if (t.level(v) % 2 == 0 ? a.spin[vi] > b.spin[vi] : a.spin[vi] < b.spin[vi]) return false;
  }
  return true;
}

// True iff the configuration is 0/1, vacant outside the free component, and
// an independent set compatible with the boundary. Malformed input (wrong
// size, values outside 0/1) throws instead of answering.
inline bool hc_is_independent(const TreeShape& t, const ObstacleEnv* omega,
                              const BoundarySpec& bc, const SpinConfig& c) {
  check_region(t, omega);
  check_hc_boundary(t, bc);
  if (c.spin.size() != static_cast<std::size_t>(t.n))
    throw std::invalid_argument("hc config: size differs from region");
  for (Vertex v = 0; v < t.n; ++v) {
    std::int8_t s = c.spin[static_cast<std::size_t>(v)];
    if (s != 0 && s != 1) throw std::invalid_argument("hc config: occupations must be 0/1");
    if (s == 1 && !vertex_active(t, omega, v)) return false;
  }
  for (Vertex v = 1; v < t.n; ++v)
    if (c.spin[static_cast<std::size_t>(v)] == 1 &&
        c.spin[static_cast<std::size_t>(t.parent(v))] == 1)
      return false;
  for (Vertex leaf = t.level_begin(t.depth); leaf < t.n; ++leaf) {
    if (c.spin[static_cast<std::size_t>(leaf)] != 1) continue;
    for (int k = 0; k < t.b; ++k)
      if (boundary_occupation(t, omega, bc, leaf, k)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Occupation-ratio recursion.

struct HCRecursionResult {
  std::vector<double> ratio;     // per-vertex subtree ratio P(occ)/P(vac); 0 on inactive vertices
  double root_occupation = 0.0;  // ratio[0] / (1 + ratio[0]) when the root is free
};

// Leaf-to-root sweep of R_z = lambda * prod_children 1/(1 + R_child). An
// occupied boundary slot forces R = 0 (the 1/(1+inf) factor), a vacant child
// contributes factor 1. Interior ratios therefore stay in [0, lambda].
inline HCRecursionResult hc_r_recursion(const HCParams& P, const TreeShape& t,
                                        const ObstacleEnv* omega, const BoundarySpec& bc) {
  P.validate();
  check_region(t, omega);
  check_hc_boundary(t, bc);
  if (P.b != t.b) throw std::invalid_argument("hc recursion: branching number mismatch");
  HCRecursionResult out;
  out.ratio.assign(static_cast<std::size_t>(t.n), 0.0);
  for (Vertex v = t.n - 1; v >= 0; --v) {
    if (!vertex_active(t, omega, v)) continue;
    double r = P.lambda;
    if (t.is_leaf(v)) {
      for (int k = 0; k < t.b; ++k)
        if (boundary_occupation(t, omega, bc, v, k)) {
          r = 0.0;
          break;
        }
    } else {
      for (int k = 0; k < t.b; ++k) {
        Vertex c = t.child(v, k);
        if (vertex_active(t, omega, c)) r /= 1.0 + out.ratio[static_cast<std::size_t>(c)];
      }
    }
    out.ratio[static_cast<std::size_t>(v)] = r;
  }
  if (vertex_active(t, omega, 0))
    out.root_occupation = out.ratio[0] / (1.0 + out.ratio[0]);
  return out;
}

// ---------------------------------------------------------------------------
// Homogeneous phase limits.

namespace detail {

inline double hc_g_step(double lambda, int b, double r) {
  return lambda / std::pow(1.0 + r, b);
}

// Root ratio of the depth-ell tree under the even (even_phase) or odd
// boundary, by the one-dimensional recursion; an empty ell takes the limit.
// An occupied seed collapses to a vacant one a level higher since
// g(inf) = 0, so the even phase is always an odd-count g-iterate of 0 and
// the odd phase an even count; the limits are the extremal fixed points of
// the doubled map.
inline double hc_phase_root_ratio(const HCParams& P, std::optional<long> ell, bool even_phase) {
  if (!ell) {
    double x = even_phase ? hc_g_step(P.lambda, P.b, 0.0) : 0.0;
    for (int it = 0; it < 200000; ++it) {
      double nx = hc_g_step(P.lambda, P.b, hc_g_step(P.lambda, P.b, x));
      if (std::abs(nx - x) <= 1e-15 * (1.0 + std::abs(nx))) return nx;
      x = nx;
    }
    return x;  // critically slow convergence: best iterate
  }
  if (*ell < 0) throw std::invalid_argument("hc phase: negative depth");
  bool boundary_occupied = ((*ell + 1) % 2 == 0) == even_phase;
  long steps = boundary_occupied ? *ell : *ell + 1;
  double x = 0.0;
  for (long i = 0; i < steps; ++i) x = hc_g_step(P.lambda, P.b, x);
  return x;
}

}  // namespace detail

// Root occupation of the depth-ell measure with the tau^e boundary; with
// ell empty, the limit, which is the even-phase root occupation.
inline double hc_mu_even_root(const HCParams& P, std::optional<long> ell = {}) {
  P.validate();
  double r = detail::hc_phase_root_ratio(P, ell, true);
  return r / (1.0 + r);
}

// Same under tau^o; the limit is the odd-phase root occupation.
inline double hc_mu_odd_root(const HCParams& P, std::optional<long> ell = {}) {
  P.validate();
  double r = detail::hc_phase_root_ratio(P, ell, false);
  return r / (1.0 + r);
}

// ---------------------------------------------------------------------------
// Exact enumeration over legal configurations.

// Unlike the spin models the state space is not a power set: only masks
// passing the independence constraint appear, so counts grow like the
// Fibonacci analogue of the tree rather than 2^n.
struct HCBruteForce {
  std::vector<Vertex> sites;           // free vertices, ascending
  std::vector<int> site_index;         // per-vertex position in sites, or -1
  std::vector<std::uint32_t> configs;  // legal occupation masks, ascending
  std::vector<double> prob;            // matching stationary weights

  int nsites() const { return static_cast<int>(sites.size()); }

  std::size_t config_index(std::uint32_t mask) const {
    auto it = std::lower_bound(configs.begin(), configs.end(), mask);
    if (it == configs.end() || *it != mask)
      throw std::out_of_range("hc brute force: not a legal configuration");
    return static_cast<std::size_t>(it - configs.begin());
  }

  double occupation(Vertex x) const {
    int i = site_index[static_cast<std::size_t>(x)];
    if (i < 0) throw std::domain_error("hc brute force: vertex outside the free region");
    double s = 0.0;
    for (std::size_t a = 0; a < configs.size(); ++a)
      if (configs[a] >> i & 1) s += prob[a];
    return s;
  }

  template <class Fn>
  double expectation(Fn&& f) const {
    double s = 0.0;
    for (std::size_t a = 0; a < configs.size(); ++a)
      s += prob[a] * f(configs[a]);
    return s;
  }

  std::size_t sample_index(Stream& rng) const {
    double u = rng.next_unit();
    double acc = 0.0;
    for (std::size_t a = 0; a < configs.size(); ++a) {
      acc += prob[a];
      if (u < acc) return a;
    }
    return configs.size() - 1;
  }
};

inline HCBruteForce hc_brute_force(const HCParams& P, const TreeShape& t,
                                   const ObstacleEnv* omega, const BoundarySpec& bc,
                                   int max_sites = 24) {
  P.validate();
  check_region(t, omega);
  check_hc_boundary(t, bc);
  if (P.b != t.b) throw std::invalid_argument("hc brute force: branching number mismatch");
  if (max_sites > 31) throw std::invalid_argument("hc brute force: size budget too large");

  HCBruteForce bf;
  bf.site_index.assign(static_cast<std::size_t>(t.n), -1);
  for (Vertex v = 0; v < t.n; ++v)
    if (vertex_active(t, omega, v)) {
      bf.site_index[static_cast<std::size_t>(v)] = static_cast<int>(bf.sites.size());
      bf.sites.push_back(v);
    }
  const int k = bf.nsites();
  if (k > max_sites)
    throw std::invalid_argument("hc brute force: " + std::to_string(k) +
                                " sites exceed the budget of " + std::to_string(max_sites));

  // Per site: position of the active parent (-1 if none) and whether a
  // boundary slot blocks occupation outright.
  std::vector<int> parent_pos(static_cast<std::size_t>(k), -1);
  std::vector<std::uint8_t> blocked(static_cast<std::size_t>(k), 0);
  for (int i = 0; i < k; ++i) {
    Vertex v = bf.sites[static_cast<std::size_t>(i)];
    if (v != 0) parent_pos[static_cast<std::size_t>(i)] =
        bf.site_index[static_cast<std::size_t>(t.parent(v))];
    if (t.is_leaf(v))
      for (int kk = 0; kk < t.b; ++kk)
        if (boundary_occupation(t, omega, bc, v, kk)) blocked[static_cast<std::size_t>(i)] = 1;
  }

  // Depth-first over sites in BFS order; parents precede children, so the
  // adjacency test only looks backward.
  std::vector<std::pair<std::uint32_t, double>> found;
  std::vector<std::pair<int, std::uint32_t>> stack;  // (next position, mask so far)
  stack.push_back({0, 0u});
  while (!stack.empty()) {
    auto [pos, mask] = stack.back();
    stack.pop_back();
    if (pos == k) {
      found.push_back({mask, std::pow(P.lambda, __builtin_popcount(mask))});
      continue;
    }
    std::size_t p = static_cast<std::size_t>(pos);
    bool can_occupy = !blocked[p] &&
                      (parent_pos[p] < 0 || !(mask >> parent_pos[p] & 1));
    if (can_occupy) stack.push_back({pos + 1, mask | (1u << pos)});
    stack.push_back({pos + 1, mask});
  }

  std::sort(found.begin(), found.end());
  double z = 0.0;
  for (auto& fw : found) z += fw.second;
  bf.configs.reserve(found.size());
  bf.prob.reserve(found.size());
  for (auto& fw : found) {
    bf.configs.push_back(fw.first);
    bf.prob.push_back(fw.second / z);
  }
  return bf;
}

// ---------------------------------------------------------------------------
// The two-stage biased initial law.

// Even levels take independent Bernoulli(p) occupations; odd vertices at
// graph distance >= 3 from every occupied even vertex then occupy
// independently with probability p_lambda. One uniform is consumed per
// vertex either way, so the draw at a vertex never depends on its peers. On
// the bipartite tree even vertices sit at odd distances from an odd vertex,
// so the literal distance-3 rule reduces to the adjacency scan below.
inline SpinConfig hc_sample_nu(const HCParams& P, double p, const TreeShape& t,
                               std::uint64_t seed) {
  P.validate();
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("hc sample nu: p outside [0,1]");
  if (P.b != t.b) throw std::invalid_argument("hc sample nu: branching number mismatch");
  Stream s(derive_key(seed, 0x48434e55ULL));  // "HCNU"
  SpinConfig c = uniform_config(t, 0);
  for (Vertex v = 0; v < t.n; ++v)
    if (t.level(v) % 2 == 0)
      c.spin[static_cast<std::size_t>(v)] = s.next_bernoulli(p) ? 1 : 0;
  for (Vertex v = 0; v < t.n; ++v) {
    if (t.level(v) % 2 == 0) continue;
    bool want = s.next_bernoulli(P.p_occ());
    if (!want) continue;
    bool near = c.spin[static_cast<std::size_t>(t.parent(v))] == 1;
    if (!t.is_leaf(v))
      for (int k = 0; k < t.b && !near; ++k)
        near = c.spin[static_cast<std::size_t>(t.child(v, k))] == 1;
    if (!near) c.spin[static_cast<std::size_t>(v)] = 1;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Heat-bath dynamics.

// Probability that a resampled x comes back occupied: p_lambda when every
// neighbor is vacant, zero otherwise. Raising odd neighbors only lowers it
// at an even x and vice versa, so the shared mark rule "occupy iff
// U < probability" preserves the biased order between coupled copies.
inline double hc_heat_bath_occupy_probability(const HCParams& P, const TreeShape& t,
                                              const ObstacleEnv* omega, const BoundarySpec& bc,
                                              const SpinConfig& sigma, Vertex x) {
  P.validate();
  check_region(t, omega);
  check_hc_boundary(t, bc);
  if (P.b != t.b) throw std::invalid_argument("hc heat bath: branching number mismatch");
  if (x < 0 || x >= t.n) throw std::out_of_range("hc heat bath: vertex outside region");
  if (sigma.spin.size() != static_cast<std::size_t>(t.n))
    throw std::invalid_argument("hc heat bath: configuration size differs from region");
  if (!vertex_active(t, omega, x))
    throw std::domain_error("hc heat bath: vertex is not a free interior vertex");
  bool blocked = false;
  if (x != 0) {
    Vertex pa = t.parent(x);
    blocked = vertex_active(t, omega, pa) && sigma.spin[static_cast<std::size_t>(pa)] == 1;
  }
  if (t.is_leaf(x)) {
    for (int k = 0; k < t.b && !blocked; ++k)
      blocked = boundary_occupation(t, omega, bc, x, k) == 1;
  } else {
    for (int k = 0; k < t.b && !blocked; ++k) {
      Vertex c = t.child(x, k);
      blocked = vertex_active(t, omega, c) && sigma.spin[static_cast<std::size_t>(c)] == 1;
    }
  }
  return blocked ? 0.0 : P.p_occ();
}

namespace detail {

struct HCUpdatePolicy {
  const TreeShape* t = nullptr;
  double occupy_p = 0.0;
  std::vector<std::uint8_t> leaf_blocked;  // per leaf: some boundary slot occupied
  std::vector<std::uint8_t> odd_level;     // per vertex: flips the coupling order

  HCUpdatePolicy() = default;
  HCUpdatePolicy(const HCParams& P, const TreeShape& shape, const ObstacleEnv* omega,
                 const BoundarySpec& bc)
      : t(&shape), occupy_p(P.p_occ()) {
    Vertex lb = shape.level_begin(shape.depth);
    leaf_blocked.assign(static_cast<std::size_t>(shape.n - lb), 0);
    for (Vertex leaf = lb; leaf < shape.n; ++leaf)
      for (int k = 0; k < shape.b; ++k)
        if (boundary_occupation(shape, omega, bc, leaf, k))
          leaf_blocked[static_cast<std::size_t>(leaf - lb)] = 1;
    odd_level.resize(static_cast<std::size_t>(shape.n));
    for (Vertex v = 0; v < shape.n; ++v)
      odd_level[static_cast<std::size_t>(v)] = static_cast<std::uint8_t>(shape.level(v) & 1);
  }

  std::int8_t apply(const std::vector<std::int8_t>& st, Vertex v, double mark) const {
    bool blocked = false;
    if (v != 0) blocked = st[static_cast<std::size_t>(t->parent(v))] == 1;
    if (t->is_leaf(v)) {
      blocked = blocked || leaf_blocked[static_cast<std::size_t>(v - t->level_begin(t->depth))];
    } else {
      for (int k = 0; k < t->b && !blocked; ++k)
        blocked = st[static_cast<std::size_t>(t->child(v, k))] == 1;
    }
    return !blocked && mark < occupy_p ? 1 : 0;
  }

  bool leq(std::int8_t a, std::int8_t b, Vertex v) const {
    return odd_level[static_cast<std::size_t>(v)] ? b <= a : a <= b;
  }
};

// Normalizes an initial configuration: 0/1 values, inactive vertices pinned
// vacant, and the result must be an independent set compatible with the
// boundary; the dynamics preserves that invariant, so it must hold at entry.
inline std::vector<std::int8_t> hc_initial_state(const TreeShape& t, const ObstacleEnv* omega,
                                                 const BoundarySpec& bc, const SpinConfig& eta0) {
  if (eta0.spin.size() != static_cast<std::size_t>(t.n))
    throw std::invalid_argument("hc simulate: configuration size differs from region");
  std::vector<std::int8_t> st(eta0.spin);
  for (Vertex v = 0; v < t.n; ++v) {
    std::size_t vi = static_cast<std::size_t>(v);
    if (st[vi] != 0 && st[vi] != 1)
      throw std::invalid_argument("hc simulate: occupations must be 0/1");
    if (!vertex_active(t, omega, v)) st[vi] = 0;
  }
  for (Vertex v = 1; v < t.n; ++v)
    if (st[static_cast<std::size_t>(v)] == 1 && st[static_cast<std::size_t>(t.parent(v))] == 1)
      throw std::invalid_argument("hc simulate: initial configuration is not an independent set");
  for (Vertex leaf = t.level_begin(t.depth); leaf < t.n; ++leaf) {
    if (st[static_cast<std::size_t>(leaf)] != 1) continue;
    for (int k = 0; k < t.b; ++k)
      if (boundary_occupation(t, omega, bc, leaf, k))
        throw std::invalid_argument("hc simulate: initial configuration occupies against the boundary");
  }
  return st;
}

}  // namespace detail

// One trajectory, sharing the event-loop contract of the spin dynamics:
// identical probe semantics, determinism, and frozen-vertex behavior.
inline Trajectory hc_simulate(const HCParams& P, const TreeShape& t, const ObstacleEnv* omega,
                              const BoundarySpec& bc, const SpinConfig& eta0,
                              const CouplingDriver& driver, const std::vector<double>& probe_times,
                              bool record_updates = true) {
  P.validate();
  check_hc_boundary(t, bc);
  if (P.b != t.b) throw std::invalid_argument("hc simulate: branching number mismatch");
  std::vector<detail::HCUpdatePolicy> pol;
  pol.emplace_back(P, t, omega, bc);
  std::vector<std::vector<std::int8_t>> init;
  init.push_back(detail::hc_initial_state(t, omega, bc, eta0));
  detail::RunOptions opt;
  opt.record_updates = record_updates;
  auto trajs = detail::run_coupled(t, omega, pol, std::move(init), {{}}, driver, probe_times, opt);
  return std::move(trajs[0]);
}

inline std::vector<Trajectory> hc_coupled_simulate(const HCParams& P, const TreeShape& t,
                                                   const ObstacleEnv* omega,
                                                   const std::vector<CoupledInstance>& instances,
                                                   const CouplingDriver& driver,
                                                   const std::vector<double>& probe_times,
                                                   const CoupledOptions& options = {}) {
  P.validate();
  if (P.b != t.b) throw std::invalid_argument("hc simulate: branching number mismatch");
  if (instances.empty()) throw std::invalid_argument("hc simulate: no instances");
  std::vector<detail::HCUpdatePolicy> pol;
  std::vector<std::vector<std::int8_t>> init;
  std::vector<std::vector<std::uint8_t>> frozen;
  for (const CoupledInstance& ci : instances) {
    check_hc_boundary(t, ci.boundary);
    pol.emplace_back(P, t, omega, ci.boundary);
    init.push_back(detail::hc_initial_state(t, omega, ci.boundary, ci.eta0));
    frozen.push_back(ci.frozen);
  }
  detail::RunOptions opt;
  opt.assert_leq_pairs = options.assert_leq_pairs;
  opt.record_updates = options.record_updates;
  return detail::run_coupled(t, omega, pol, std::move(init), frozen, driver, probe_times, opt);
}

// Monte Carlo mean occupation at x at the given time; the driver for replica
// i derives from (seed, i), so the result is worker-count independent.
inline RhoEstimate hc_estimate_rho(const HCParams& P, const TreeShape& t,
                                   const ObstacleEnv* omega, const BoundarySpec& bc,
                                   const SpinConfig& eta0, double time, Vertex x, long n_samples,
                                   std::uint64_t seed, int workers = 0) {
  P.validate();
  check_hc_boundary(t, bc);
  if (P.b != t.b) throw std::invalid_argument("hc estimate_rho: branching number mismatch");
  if (n_samples < 2) throw std::invalid_argument("hc estimate_rho: need at least 2 samples");
  if (!(time >= 0.0)) throw std::invalid_argument("hc estimate_rho: time must be >= 0");
  if (x < 0 || x >= t.n) throw std::out_of_range("hc estimate_rho: vertex outside region");
  (void)detail::hc_initial_state(t, omega, bc, eta0);

  std::vector<double> vals(static_cast<std::size_t>(n_samples), 0.0);
  parallel_items(n_samples, workers, [&](long i) {
    CouplingDriver d(derive_key(seed, static_cast<std::uint64_t>(i)), time);
    std::vector<detail::HCUpdatePolicy> pol;
    pol.emplace_back(P, t, omega, bc);
    std::vector<std::vector<std::int8_t>> init;
    init.push_back(detail::hc_initial_state(t, omega, bc, eta0));
    detail::RunOptions opt;
    opt.record_updates = false;
    auto trajs = detail::run_coupled(t, omega, pol, std::move(init), {{}}, d, {time}, opt);
    vals[static_cast<std::size_t>(i)] =
        static_cast<double>(trajs[0].snapshots[0].spin[static_cast<std::size_t>(x)]);
  });

  Kahan mean_acc;
  for (double v : vals) mean_acc.add(v);
  double mean = mean_acc.sum / static_cast<double>(n_samples);
  Kahan var_acc;
  for (double v : vals) var_acc.add((v - mean) * (v - mean));
  double var = var_acc.sum / static_cast<double>(n_samples - 1);
  RhoEstimate est;
  est.mean = mean;
  est.std_error = std::sqrt(var / static_cast<double>(n_samples));
  est.n = n_samples;
  return est;
}

// ---------------------------------------------------------------------------
// Scalar tail bound for the b = 2 recursion.

struct HCTailResult {
  std::vector<double> q;     // bound at ell = 0, 2, 4, ..., capped at 1
  double supremum = 0.0;
  bool divergent = false;    // the quadratic has no real fixed point
};

// Exceedance bound started from the even boundary: q_ell = 12(1-p) +
// 30 q_{ell-2}^2, capped at 1 since it bounds a probability. The base case
// compares the depth-0 ratio lambda to the sqrt(lambda) threshold, so it is
// 0 exactly when lambda > 1. A real fixed point exists iff 12(1-p) <= 1/120;
// otherwise the iterates escape toward the cap and the flag is set.
inline HCTailResult hc_tail_recursion(double p, double lambda, int ell_max) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("hc tail: p outside [0,1]");
  if (!(lambda > 0.0) || !std::isfinite(lambda))
    throw std::invalid_argument("hc tail: activity must be finite and > 0");
  if (ell_max < 0) throw std::invalid_argument("hc tail: need ell_max >= 0");
  HCTailResult out;
  out.divergent = 12.0 * (1.0 - p) > 1.0 / 120.0;
  double q = lambda > 1.0 ? 0.0 : 1.0;
  out.q.push_back(q);
  out.supremum = q;
  for (int ell = 2; ell <= ell_max; ell += 2) {
    q = std::min(1.0, 12.0 * (1.0 - p) + 30.0 * q * q);
    out.q.push_back(q);
    out.supremum = std::max(out.supremum, q);
  }
  return out;
}

}  // namespace treeq
