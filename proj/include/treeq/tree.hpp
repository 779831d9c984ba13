#pragma once

// Rooted complete b-ary trees with breadth-first vertex indexing, obstacle
// environments (site dilution) and boundary conditions.
//
// Indexing: the root is 0, the children of v are b*v+1 .. b*v+b, so parent
// and child lookups are pure arithmetic and do not depend on the tree depth.
// Two trees with the same branching number but different depths therefore
// agree on every index they share; a deep obstacle environment can be read
// by a shallower working region without any re-indexing.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "rng.hpp"

namespace treeq {

using Vertex = std::int64_t;

struct TreeShape {
  int b = 2;       // branching number, >= 2
  int depth = 0;   // levels 0..depth carry vertices; level depth+1 is boundary
  Vertex n = 1;    // total vertex count, (b^(depth+1)-1)/(b-1)
  std::vector<Vertex> level_offset;  // size depth+2, level k spans [off[k], off[k+1])

  Vertex parent(Vertex v) const { return (v - 1) / b; }
  Vertex child(Vertex v, int k) const { return v * b + 1 + k; }
  Vertex level_begin(int k) const { return level_offset[k]; }
  Vertex level_end(int k) const { return level_offset[size_t(k) + 1]; }
  bool is_leaf(Vertex v) const { return v >= level_offset[size_t(depth)]; }

  int level(Vertex v) const {
    // level_offset has at most a few dozen entries; linear scan is fine.
    int k = 0;
    while (level_offset[size_t(k) + 1] <= v) ++k;
    return k;
  }

  // Number of phantom boundary vertices (level depth+1).
  Vertex boundary_count() const {
    Vertex leaves = level_end(depth) - level_begin(depth);
    return leaves * b;
  }

  // Index of the k-th boundary slot hanging below a leaf, in 0..boundary_count().
  Vertex boundary_slot(Vertex leaf, int k) const {
    return (leaf - level_begin(depth)) * b + k;
  }

  // True when x lies in the subtree rooted at y (x == y included).
  bool is_descendant(Vertex x, Vertex y) const {
    while (x > y) x = parent(x);
    return x == y;
  }
};

inline TreeShape build_tree(int b, int depth) {
  if (b < 2) throw std::invalid_argument("build_tree: branching number must be >= 2");
  if (depth < 0) throw std::invalid_argument("build_tree: depth must be >= 0");
  TreeShape t;
  t.b = b;
  t.depth = depth;
  t.level_offset.assign(size_t(depth) + 2, 0);
  Vertex level_size = 1;
  Vertex total = 0;
  for (int k = 0; k <= depth + 1; ++k) {
    t.level_offset[size_t(k)] = total;
    if (k == depth + 1) break;
    if (total > (std::int64_t(1) << 62) - level_size)
      throw std::overflow_error("build_tree: vertex count overflows 64-bit index");
    total += level_size;
    if (level_size > ((std::int64_t(1) << 62) / b))
      throw std::overflow_error("build_tree: vertex count overflows 64-bit index");
    level_size *= b;
  }
  t.n = total;
  return t;
}

// Vertices at distance exactly k below y. They form one contiguous BFS block.
inline std::vector<Vertex> descendants_at_depth(const TreeShape& t, Vertex y, int k) {
  if (y < 0 || y >= t.n) throw std::out_of_range("descendants_at_depth: vertex outside tree");
  if (k < 0 || t.level(y) + k > t.depth) return {};
  Vertex first = y;
  Vertex count = 1;
  for (int i = 0; i < k; ++i) {
    first = t.child(first, 0);
    count *= t.b;
  }
  std::vector<Vertex> out(static_cast<std::size_t>(count));
  for (Vertex i = 0; i < count; ++i) out[size_t(i)] = first + i;
  return out;
}

// Path from y down to x, excluding y itself and including x; empty when x == y.
inline std::vector<Vertex> path_to_descendant(const TreeShape& t, Vertex y, Vertex x) {
  if (y < 0 || y >= t.n || x < 0 || x >= t.n)
    throw std::out_of_range("path_to_descendant: vertex outside tree");
  std::vector<Vertex> rev;
  Vertex v = x;
  while (v > y) {
    rev.push_back(v);
    v = t.parent(v);
  }
  if (v != y) throw std::domain_error("path_to_descendant: x is not a descendant of y");
  return {rev.rbegin(), rev.rend()};
}

// ---------------------------------------------------------------------------
// Boundary conditions on the phantom level depth+1.

enum class BoundaryKind {
  Plus,    // all boundary spins +1 (Ising)
  Minus,   // all boundary spins -1 (Ising)
  Free,    // no boundary interaction (Ising); all boundary sites vacant (hard core)
  Fixed,   // explicit per-slot values
  EvenBC,  // hard core: boundary level occupied iff its level index is even
  OddBC,   // hard core: boundary level occupied iff its level index is odd
};

struct BoundarySpec {
  BoundaryKind kind = BoundaryKind::Free;
  // Fixed only: one entry per boundary slot; +-1 for spins, 0/1 for occupation.
  std::vector<std::int8_t> values;

  static BoundarySpec plus() { return {BoundaryKind::Plus, {}}; }
  static BoundarySpec minus() { return {BoundaryKind::Minus, {}}; }
  static BoundarySpec free_bc() { return {BoundaryKind::Free, {}}; }
  static BoundarySpec even_bc() { return {BoundaryKind::EvenBC, {}}; }
  static BoundarySpec odd_bc() { return {BoundaryKind::OddBC, {}}; }
  static BoundarySpec fixed(std::vector<std::int8_t> v) {
    return {BoundaryKind::Fixed, std::move(v)};
  }
};

inline void check_boundary(const TreeShape& t, const BoundarySpec& bc, bool hard_core) {
  if (bc.kind == BoundaryKind::Fixed) {
    if (Vertex(bc.values.size()) != t.boundary_count())
      throw std::invalid_argument("boundary: fixed values must cover every boundary slot");
    for (std::int8_t v : bc.values) {
      bool ok = hard_core ? (v == 0 || v == 1) : (v == -1 || v == 1);
      if (!ok) throw std::invalid_argument("boundary: fixed value outside the state space");
    }
  }
  if (!hard_core && (bc.kind == BoundaryKind::EvenBC || bc.kind == BoundaryKind::OddBC))
    throw std::invalid_argument("boundary: parity boundary conditions are hard-core only");
}

// ---------------------------------------------------------------------------
// Obstacle environments: each vertex is free or an obstacle (frozen at -1).
// The dynamics and the conditional Gibbs measures live on the free component
// of the root; everything outside it behaves like a -1 boundary.

struct ObstacleEnv {
  TreeShape shape;
  std::vector<std::uint8_t> obstacle;  // 1 = obstacle
  std::vector<std::uint8_t> in_comp;   // 1 = inside the root's free component

  bool free(Vertex v) const { return !obstacle[size_t(v)]; }
  bool in_free_component(Vertex v) const { return in_comp[size_t(v)] != 0; }

  static ObstacleEnv from_flags(const TreeShape& t, std::vector<std::uint8_t> flags) {
    if (Vertex(flags.size()) != t.n)
      throw std::invalid_argument("ObstacleEnv: flag vector size mismatch");
    ObstacleEnv env;
    env.shape = t;
    env.obstacle = std::move(flags);
    env.in_comp.assign(size_t(t.n), 0);
    // BFS order guarantees the parent is settled before its children.
    if (!env.obstacle[0]) env.in_comp[0] = 1;
    for (Vertex v = 1; v < t.n; ++v)
      env.in_comp[size_t(v)] = !env.obstacle[size_t(v)] && env.in_comp[size_t(t.parent(v))];
    return env;
  }

  static ObstacleEnv all_free(const TreeShape& t) {
    return from_flags(t, std::vector<std::uint8_t>(size_t(t.n), 0));
  }
};

// A working region may be shallower than the environment it reads, never
// deeper, and branching numbers must agree (indices would diverge otherwise).
inline void check_region(const TreeShape& region, const ObstacleEnv* omega) {
  if (!omega) return;
  if (omega->shape.b != region.b)
    throw std::invalid_argument("region: branching number differs from environment");
  if (omega->shape.depth < region.depth)
    throw std::invalid_argument("region: environment is shallower than the region");
}

inline bool vertex_active(const TreeShape& region, const ObstacleEnv* omega, Vertex v) {
  (void)region;
  return omega ? omega->in_free_component(v) : true;
}

// ---------------------------------------------------------------------------
// Samplers and the quench rule.

// Independent spins, P(+1) = p, drawn in vertex order from one stream.
inline std::vector<std::int8_t> sample_bernoulli_spins(const TreeShape& t, double p,
                                                       std::uint64_t seed) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("sample_bernoulli_spins: p outside [0,1]");
  Stream s(derive_key(seed, 0x5350494eULL));  // "SPIN"
  std::vector<std::int8_t> spins(size_t(t.n));
  for (Vertex v = 0; v < t.n; ++v) spins[size_t(v)] = s.next_bernoulli(p) ? 1 : -1;
  return spins;
}

// Environment read off an initial configuration: vertices at level <= l_cut
// are free unconditionally, deeper vertices are free only where the initial
// spin is +1.
inline ObstacleEnv obstacles_from_quench(const TreeShape& t, const std::vector<std::int8_t>& spins,
                                         int l_cut) {
  if (Vertex(spins.size()) != t.n)
    throw std::invalid_argument("obstacles_from_quench: spin vector size mismatch");
  std::vector<std::uint8_t> flags(size_t(t.n), 0);
  for (Vertex v = 0; v < t.n; ++v) {
    if (t.level(v) <= l_cut) continue;
    if (spins[size_t(v)] != 1) flags[size_t(v)] = 1;
  }
  return ObstacleEnv::from_flags(t, flags);
}

// I.i.d. dilution: every vertex free with probability p.
inline ObstacleEnv sample_obstacles_iid(const TreeShape& t, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("sample_obstacles_iid: p outside [0,1]");
  Stream s(derive_key(seed, 0x4f425354ULL));  // "OBST"
  std::vector<std::uint8_t> flags(size_t(t.n));
  for (Vertex v = 0; v < t.n; ++v) flags[size_t(v)] = s.next_bernoulli(p) ? 0 : 1;
  return ObstacleEnv::from_flags(t, flags);
}

}  // namespace treeq
