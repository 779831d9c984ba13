#pragma once

// Continuous-time heat-bath dynamics on tree regions, driven by a grand
// coupling: every vertex carries an independent rate-1 Poisson clock and a
// uniform mark per ring, and an update sets the spin from its conditional
// distribution given the neighbors, using the shared mark. Coupled instances
// consume the identical event stream, so monotonicity of the update rule
// turns into pathwise order preservation.
//
// The event stream is a pure function of (driver seed, vertex): per-vertex
// streams are seeded with derive_key(seed, vertex), and each ring consumes a
// mark first and an exponential gap second. Dropping or freezing a vertex
// never shifts the randomness seen by any other vertex.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <queue>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gibbs.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "tree.hpp"

namespace treeq {

// Per-vertex values over a region, indexed like the region's vertices.
// Ising dynamics uses +-1; the hard-core module reuses the container with
// 0/1 occupations. Vertices outside the free component are pinned at the
// policy's frozen value and never updated.
struct SpinConfig {
  std::vector<std::int8_t> spin;

  bool operator==(const SpinConfig& o) const { return spin == o.spin; }
};

inline SpinConfig uniform_config(const TreeShape& t, int value) {
  SpinConfig c;
  c.spin.assign(static_cast<std::size_t>(t.n), static_cast<std::int8_t>(value));
  return c;
}

struct UpdateRecord {
  double time;
  Vertex vertex;
  std::int8_t value;
};

struct Trajectory {
  std::vector<double> probe_times;      // sorted ascending, as executed
  std::vector<SpinConfig> snapshots;    // one per probe time
  std::vector<UpdateRecord> records;    // every ring, in time order (optional)
};

// Seed plus horizon. The horizon is a consumption guard: probing past it is
// an error, but the stream values themselves depend only on (seed, vertex).
class CouplingDriver {
 public:
  CouplingDriver(std::uint64_t seed, double horizon) : seed_(seed), horizon_(horizon) {
    if (!(horizon >= 0.0)) throw std::invalid_argument("driver: horizon must be >= 0");
  }
  std::uint64_t seed() const { return seed_; }
  double horizon() const { return horizon_; }

 private:
  std::uint64_t seed_;
  double horizon_;
};

namespace detail {

// One Poisson clock. Consumption order per ring is mark first, gap second.
struct VertexClock {
  Stream rng;
  double time = 0.0;
  double mark = 0.0;

  explicit VertexClock(std::uint64_t key) : rng(key) { advance(); }

  void advance() {
    mark = rng.next_unit();
    time += rng.next_exp();
  }
};

struct EventOrder {
  // Min-heap on (time, vertex); the vertex index breaks exact ties.
  bool operator()(const std::pair<double, Vertex>& a, const std::pair<double, Vertex>& b) const {
    if (a.first != b.first) return a.first > b.first;
    return a.second > b.second;
  }
};

struct RunOptions {
  std::vector<std::pair<std::size_t, std::size_t>> assert_leq_pairs;
  bool record_updates = true;
};

// Shared event loop. Policy provides:
//   std::int8_t apply(const std::vector<std::int8_t>& state, Vertex v, double mark) const;
//   bool leq(std::int8_t a, std::int8_t b, Vertex v) const;   // coupling order
// Instance i updates vertex v only when frozen[i] is empty or frozen[i][v]==0;
// a frozen vertex still consumes the shared event.
template <class Policy>
std::vector<Trajectory> run_coupled(const TreeShape& t, const ObstacleEnv* omega,
                                    const std::vector<Policy>& policies,
                                    std::vector<std::vector<std::int8_t>> init,
                                    const std::vector<std::vector<std::uint8_t>>& frozen,
                                    const CouplingDriver& driver, std::vector<double> probes,
                                    const RunOptions& opt) {
  check_region(t, omega);
  const std::size_t m = policies.size();
  if (m == 0) throw std::invalid_argument("run: no instances");
  if (init.size() != m || frozen.size() != m)
    throw std::invalid_argument("run: instance arrays disagree in length");
  const std::size_t n = static_cast<std::size_t>(t.n);
  for (std::size_t i = 0; i < m; ++i) {
    if (init[i].size() != n) throw std::invalid_argument("run: configuration size differs from region");
    if (!frozen[i].empty() && frozen[i].size() != n)
      throw std::invalid_argument("run: frozen mask size differs from region");
  }
  for (auto& pr : opt.assert_leq_pairs)
    if (pr.first >= m || pr.second >= m)
      throw std::invalid_argument("run: order assertion names a missing instance");

  std::sort(probes.begin(), probes.end());
  if (!probes.empty() && probes.front() < 0.0)
    throw std::invalid_argument("run: negative probe time");
  const double t_end = probes.empty() ? 0.0 : probes.back();
  if (t_end > driver.horizon()) throw std::invalid_argument("run: probe time beyond driver horizon");

  std::vector<std::uint8_t> live(n, 0);
  for (Vertex v = 0; v < t.n; ++v) live[static_cast<std::size_t>(v)] = vertex_active(t, omega, v) ? 1 : 0;

  std::vector<Trajectory> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    out[i].probe_times = probes;
    out[i].snapshots.reserve(probes.size());
  }

  // Clocks for the active vertices only; inactive vertices keep their pinned
  // value and never ring.
  std::vector<detail::VertexClock> clocks;
  clocks.reserve(n);
  std::vector<std::int64_t> clock_of(n, -1);
  std::priority_queue<std::pair<double, Vertex>, std::vector<std::pair<double, Vertex>>, EventOrder>
      heap;
  for (Vertex v = 0; v < t.n; ++v) {
    if (!live[static_cast<std::size_t>(v)]) continue;
    clock_of[static_cast<std::size_t>(v)] = static_cast<std::int64_t>(clocks.size());
    clocks.emplace_back(derive_key(driver.seed(), static_cast<std::uint64_t>(v)));
    heap.push({clocks.back().time, v});
  }

  auto check_pairs_at = [&](Vertex v, double when) {
    for (auto& pr : opt.assert_leq_pairs) {
      std::int8_t a = init[pr.first][static_cast<std::size_t>(v)];
      std::int8_t b = init[pr.second][static_cast<std::size_t>(v)];
      if (!policies[pr.first].leq(a, b, v))
        throw std::logic_error("coupling order violated at vertex " + std::to_string(v) +
                               ", time " + std::to_string(when));
    }
  };
  auto check_pairs_everywhere = [&](double when) {
    for (Vertex v = 0; v < t.n; ++v) check_pairs_at(v, when);
  };

  std::size_t pi = 0;
  auto flush_probes_before = [&](double time) {
    while (pi < probes.size() && probes[pi] < time) {
      check_pairs_everywhere(probes[pi]);
      for (std::size_t i = 0; i < m; ++i) out[i].snapshots.push_back(SpinConfig{init[i]});
      ++pi;
    }
  };

  while (!heap.empty()) {
    auto [te, v] = heap.top();
    if (te > t_end) break;
    heap.pop();
    flush_probes_before(te);
    const std::size_t vi = static_cast<std::size_t>(v);
    detail::VertexClock& ck = clocks[static_cast<std::size_t>(clock_of[vi])];
    for (std::size_t i = 0; i < m; ++i) {
      if (!frozen[i].empty() && frozen[i][vi]) continue;
      std::int8_t nv = policies[i].apply(init[i], v, ck.mark);
      init[i][vi] = nv;
      if (opt.record_updates) out[i].records.push_back({te, v, nv});
    }
    if (!opt.assert_leq_pairs.empty()) check_pairs_at(v, te);
    ck.advance();
    heap.push({ck.time, v});
  }
  flush_probes_before(std::numeric_limits<double>::infinity());
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ising heat-bath updates.

// Signed sum the updating vertex sees: parent (the root has none), children
// inside the region, boundary slots under the leaves. Free boundary slots
// contribute 0; vertices outside the free component read -1.
inline int neighbor_field_sum(const TreeShape& t, const ObstacleEnv* omega, const BoundarySpec& bc,
                              const SpinConfig& sigma, Vertex x) {
  int S = 0;
  if (x != 0) {
    Vertex p = t.parent(x);
    S += vertex_active(t, omega, p) ? sigma.spin[static_cast<std::size_t>(p)] : -1;
  }
  if (t.is_leaf(x)) {
    for (int k = 0; k < t.b; ++k) S += boundary_spin(t, omega, bc, x, k);
  } else {
    for (int k = 0; k < t.b; ++k) {
      Vertex c = t.child(x, k);
      S += vertex_active(t, omega, c) ? sigma.spin[static_cast<std::size_t>(c)] : -1;
    }
  }
  return S;
}

// P(new spin = +1) when x is resampled: sigmoid of 2 beta (h + S). Does not
// depend on the current spin at x, which is exactly the heat-bath property.
inline double heat_bath_plus_probability(const ModelParams& P, const TreeShape& t,
                                         const ObstacleEnv* omega, const BoundarySpec& bc,
                                         const SpinConfig& sigma, Vertex x) {
  P.validate();
  check_region(t, omega);
  check_boundary(t, bc, false);
  if (P.b != t.b) throw std::invalid_argument("heat bath: branching number mismatch");
  if (x < 0 || x >= t.n) throw std::out_of_range("heat bath: vertex outside region");
  if (sigma.spin.size() != static_cast<std::size_t>(t.n))
    throw std::invalid_argument("heat bath: configuration size differs from region");
  if (!vertex_active(t, omega, x))
    throw std::domain_error("heat bath: vertex is not a free interior vertex");
  int S = neighbor_field_sum(t, omega, bc, sigma, x);
  return sigmoid(2.0 * P.beta * (P.h + static_cast<double>(S)));
}

namespace detail {

// Update rule for one instance: table lookup on the integer neighbor sum.
// Inactive vertices are pinned at -1 in the state vector, so plain sums over
// parent and children are already correct; leaves use a precomputed boundary
// slot sum per vertex.
struct IsingUpdatePolicy {
  const TreeShape* t = nullptr;
  std::vector<double> plus_prob;  // indexed by S + b + 1
  std::vector<int> leaf_bsum;     // per leaf, offset by level_begin(depth)

  IsingUpdatePolicy() = default;
  IsingUpdatePolicy(const ModelParams& P, const TreeShape& shape, const ObstacleEnv* omega,
                    const BoundarySpec& bc)
      : t(&shape) {
    plus_prob.resize(static_cast<std::size_t>(2 * shape.b + 3));
    for (int S = -(shape.b + 1); S <= shape.b + 1; ++S)
      plus_prob[static_cast<std::size_t>(S + shape.b + 1)] =
          sigmoid(2.0 * P.beta * (P.h + static_cast<double>(S)));
    Vertex lb = shape.level_begin(shape.depth);
    leaf_bsum.resize(static_cast<std::size_t>(shape.n - lb));
    for (Vertex leaf = lb; leaf < shape.n; ++leaf) {
      int s = 0;
      for (int k = 0; k < shape.b; ++k) s += boundary_spin(shape, omega, bc, leaf, k);
      leaf_bsum[static_cast<std::size_t>(leaf - lb)] = s;
    }
  }

  std::int8_t apply(const std::vector<std::int8_t>& st, Vertex v, double mark) const {
    int S = 0;
    if (v != 0) S += st[static_cast<std::size_t>(t->parent(v))];
    if (t->is_leaf(v)) {
      S += leaf_bsum[static_cast<std::size_t>(v - t->level_begin(t->depth))];
    } else {
      for (int k = 0; k < t->b; ++k) S += st[static_cast<std::size_t>(t->child(v, k))];
    }
    return mark < plus_prob[static_cast<std::size_t>(S + t->b + 1)] ? 1 : -1;
  }

  bool leq(std::int8_t a, std::int8_t b, Vertex) const { return a <= b; }
};

// Normalizes an initial configuration: entries must be +-1, and vertices
// outside the free component are pinned to -1.
inline std::vector<std::int8_t> ising_initial_state(const TreeShape& t, const ObstacleEnv* omega,
                                                    const SpinConfig& eta0) {
  if (eta0.spin.size() != static_cast<std::size_t>(t.n))
    throw std::invalid_argument("simulate: configuration size differs from region");
  std::vector<std::int8_t> st(eta0.spin);
  for (Vertex v = 0; v < t.n; ++v) {
    std::size_t vi = static_cast<std::size_t>(v);
    if (st[vi] != 1 && st[vi] != -1)
      throw std::invalid_argument("simulate: spins must be +-1");
    if (!vertex_active(t, omega, v)) st[vi] = -1;
  }
  return st;
}

}  // namespace detail

// One trajectory under the given boundary, fully determined by the driver.
inline Trajectory simulate(const ModelParams& P, const TreeShape& t, const ObstacleEnv* omega,
                           const BoundarySpec& bc, const SpinConfig& eta0,
                           const CouplingDriver& driver, const std::vector<double>& probe_times,
                           bool record_updates = true) {
  P.validate();
  check_boundary(t, bc, false);
  if (P.b != t.b) throw std::invalid_argument("simulate: branching number mismatch");
  std::vector<detail::IsingUpdatePolicy> pol;
  pol.emplace_back(P, t, omega, bc);
  std::vector<std::vector<std::int8_t>> init;
  init.push_back(detail::ising_initial_state(t, omega, eta0));
  detail::RunOptions opt;
  opt.record_updates = record_updates;
  auto trajs = detail::run_coupled(t, omega, pol, std::move(init), {{}}, driver, probe_times, opt);
  return std::move(trajs[0]);
}

// One instance of a coupled run: its own boundary and start, plus an optional
// mask of vertices it never updates (their start value acts as a frozen
// sub-boundary). Freezing the complement of a subregion realizes dynamics on
// the subregion inside a larger coupled system.
struct CoupledInstance {
  BoundarySpec boundary;
  SpinConfig eta0;
  std::vector<std::uint8_t> frozen;  // empty, or one flag per vertex
};

struct CoupledOptions {
  // Pairs (i, j) asserting instance i <= instance j pointwise; checked at the
  // updated vertex after every event and everywhere at probe times. A
  // violation throws logic_error.
  std::vector<std::pair<std::size_t, std::size_t>> assert_leq_pairs;
  bool record_updates = true;
};

inline std::vector<Trajectory> coupled_simulate(const ModelParams& P, const TreeShape& t,
                                                const ObstacleEnv* omega,
                                                const std::vector<CoupledInstance>& instances,
                                                const CouplingDriver& driver,
                                                const std::vector<double>& probe_times,
                                                const CoupledOptions& options = {}) {
  P.validate();
  if (P.b != t.b) throw std::invalid_argument("simulate: branching number mismatch");
  if (instances.empty()) throw std::invalid_argument("simulate: no instances");
  std::vector<detail::IsingUpdatePolicy> pol;
  std::vector<std::vector<std::int8_t>> init;
  std::vector<std::vector<std::uint8_t>> frozen;
  for (const CoupledInstance& ci : instances) {
    check_boundary(t, ci.boundary, false);
    pol.emplace_back(P, t, omega, ci.boundary);
    init.push_back(detail::ising_initial_state(t, omega, ci.eta0));
    frozen.push_back(ci.frozen);
  }
  detail::RunOptions opt;
  opt.assert_leq_pairs = options.assert_leq_pairs;
  opt.record_updates = options.record_updates;
  return detail::run_coupled(t, omega, pol, std::move(init), frozen, driver, probe_times, opt);
}

struct RhoEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  long n = 0;
};

// Monte Carlo mean of sigma_x at time `time` over independent drivers; the
// driver for replica i is derived from (seed, i). Deterministic for a fixed
// seed regardless of worker count.
inline RhoEstimate estimate_rho(const ModelParams& P, const TreeShape& t, const ObstacleEnv* omega,
                                const BoundarySpec& bc, const SpinConfig& eta0, double time,
                                Vertex x, long n_samples, std::uint64_t seed, int workers = 0) {
  P.validate();
  check_boundary(t, bc, false);
  if (P.b != t.b) throw std::invalid_argument("estimate_rho: branching number mismatch");
  if (n_samples < 2) throw std::invalid_argument("estimate_rho: need at least 2 samples");
  if (!(time >= 0.0)) throw std::invalid_argument("estimate_rho: time must be >= 0");
  if (x < 0 || x >= t.n) throw std::out_of_range("estimate_rho: vertex outside region");
  // Validates the configuration once up front.
  (void)detail::ising_initial_state(t, omega, eta0);

  std::vector<double> vals(static_cast<std::size_t>(n_samples), 0.0);
  parallel_items(n_samples, workers, [&](long i) {
    CouplingDriver d(derive_key(seed, static_cast<std::uint64_t>(i)), time);
    std::vector<detail::IsingUpdatePolicy> pol;
    pol.emplace_back(P, t, omega, bc);
    std::vector<std::vector<std::int8_t>> init;
    init.push_back(detail::ising_initial_state(t, omega, eta0));
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

// Truncation rule for infinite-volume questions: simulate on depth
// ceil(c * max(t, 1)). The contract is the doubling self-check, not a proven
// constant: doubling the depth must not move root observables beyond
// statistical error.
inline long truncation_depth_for_time(double t, double safety_constant = 4.0) {
  if (!(t >= 0.0)) throw std::invalid_argument("truncation depth: time must be >= 0");
  if (!(safety_constant > 0.0)) throw std::invalid_argument("truncation depth: constant must be > 0");
  return static_cast<long>(std::ceil(safety_constant * std::max(t, 1.0)));
}

}  // namespace treeq
