#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdlib>
#include <set>

#include <treeq/tree.hpp>

using namespace treeq;

TEST_CASE("build_tree sizes, offsets, and rejects") {
  TreeShape t = build_tree(2, 3);
  REQUIRE(t.n == 15);
  REQUIRE(t.level_offset == std::vector<Vertex>{0, 1, 3, 7, 15});
  REQUIRE(t.boundary_count() == 16);

  TreeShape t3 = build_tree(3, 2);
  REQUIRE(t3.n == 13);
  REQUIRE(t3.boundary_count() == 27);

  REQUIRE(build_tree(2, 0).n == 1);
  REQUIRE(build_tree(2, 0).is_leaf(0));

  REQUIRE_THROWS_AS(build_tree(1, 3), std::invalid_argument);
  REQUIRE_THROWS_AS(build_tree(2, -1), std::invalid_argument);
  REQUIRE_THROWS_AS(build_tree(2, 80), std::overflow_error);
  REQUIRE_THROWS_AS(build_tree(10, 40), std::overflow_error);
}

TEST_CASE("parent and child arithmetic round trips") {
  TreeShape t = build_tree(3, 4);
  for (Vertex v = 0; v < t.n; ++v) {
    int lv = t.level(v);
    REQUIRE((lv >= 0 && lv <= t.depth));
    REQUIRE(t.is_leaf(v) == (lv == t.depth));
    if (lv < t.depth) {
      for (int k = 0; k < t.b; ++k) {
        Vertex c = t.child(v, k);
        REQUIRE(t.parent(c) == v);
        REQUIRE(t.level(c) == lv + 1);
      }
    }
    if (v > 0) REQUIRE(t.is_descendant(v, t.parent(v)));
    REQUIRE(t.is_descendant(v, 0));
    REQUIRE(t.is_descendant(v, v));
  }
  // Siblings are not descendants of each other.
  REQUIRE(!t.is_descendant(1, 2));
  REQUIRE(!t.is_descendant(2, 1));
}

TEST_CASE("index arithmetic does not depend on tree depth") {
  TreeShape shallow = build_tree(2, 3);
  TreeShape deep = build_tree(2, 7);
  for (Vertex v = 0; v < shallow.n; ++v) {
    REQUIRE(shallow.level(v) == deep.level(v));
    if (v > 0) REQUIRE(shallow.parent(v) == deep.parent(v));
  }
}

TEST_CASE("descendants_at_depth returns the whole generation") {
  TreeShape t = build_tree(2, 4);
  REQUIRE(descendants_at_depth(t, 0, 0) == std::vector<Vertex>{0});
  REQUIRE(descendants_at_depth(t, 1, 1) == std::vector<Vertex>{3, 4});

  auto d = descendants_at_depth(t, 1, 3);
  REQUIRE(d.size() == 8);
  for (Vertex x : d) {
    REQUIRE(t.is_descendant(x, 1));
    REQUIRE(t.level(x) == 4);
  }
  // Completeness: every level-4 descendant of 1 is listed.
  std::set<Vertex> listed(d.begin(), d.end());
  for (Vertex x = t.level_begin(4); x < t.level_end(4); ++x)
    if (t.is_descendant(x, 1)) REQUIRE(listed.count(x) == 1);

  REQUIRE(descendants_at_depth(t, 1, 4).empty());  // below the leaf level
  REQUIRE_THROWS_AS(descendants_at_depth(t, t.n, 1), std::out_of_range);
}

TEST_CASE("path_to_descendant walks parent links and excludes the top") {
  TreeShape t = build_tree(2, 4);
  REQUIRE(path_to_descendant(t, 1, 1).empty());
  REQUIRE(path_to_descendant(t, 0, 0).empty());

  Vertex leaf = descendants_at_depth(t, 1, 3)[5];
  auto path = path_to_descendant(t, 1, leaf);
  REQUIRE(path.size() == 3);
  REQUIRE(path.back() == leaf);
  REQUIRE(t.parent(path[0]) == 1);
  for (std::size_t i = 1; i < path.size(); ++i) REQUIRE(t.parent(path[i]) == path[i - 1]);

  REQUIRE_THROWS_AS(path_to_descendant(t, 1, 2), std::domain_error);
  REQUIRE_THROWS_AS(path_to_descendant(t, 2, 1), std::domain_error);
}

TEST_CASE("bernoulli spin sampler: determinism and concentration") {
  TreeShape t = build_tree(2, 12);
  double p = 0.7;
  auto spins = sample_bernoulli_spins(t, p, 42);
  REQUIRE(Vertex(spins.size()) == t.n);

  long plus = 0;
  for (auto s : spins) {
    REQUIRE((s == 1 || s == -1));
    if (s == 1) ++plus;
  }
  double phat = double(plus) / double(t.n);
  REQUIRE(std::abs(phat - p) < 4.0 * std::sqrt(p * (1 - p) / double(t.n)));

  REQUIRE(spins == sample_bernoulli_spins(t, p, 42));
  REQUIRE(spins != sample_bernoulli_spins(t, p, 43));

  auto all_plus = sample_bernoulli_spins(t, 1.0, 7);
  auto all_minus = sample_bernoulli_spins(t, 0.0, 7);
  for (Vertex v = 0; v < t.n; ++v) {
    REQUIRE(all_plus[size_t(v)] == 1);
    REQUIRE(all_minus[size_t(v)] == -1);
  }
  REQUIRE_THROWS_AS(sample_bernoulli_spins(t, 1.5, 7), std::invalid_argument);
}

TEST_CASE("quench rule frees shallow levels and plus spins") {
  TreeShape t = build_tree(2, 3);
  std::vector<std::int8_t> spins(size_t(t.n), -1);
  spins[3] = 1;   // level 2
  spins[8] = 1;   // level 3, child of 3
  spins[14] = 1;  // level 3, elsewhere

  ObstacleEnv env = obstacles_from_quench(t, spins, 1);
  for (Vertex v = 0; v < t.n; ++v) {
    bool expect_free = t.level(v) <= 1 || spins[size_t(v)] == 1;
    REQUIRE(env.free(v) == expect_free);
  }
  // Component: levels 0..1 free, vertex 3 free below 1, vertex 8 below 3.
  REQUIRE(env.in_free_component(3));
  REQUIRE(env.in_free_component(8));
  REQUIRE(!env.in_free_component(14));  // free but parent 6 is an obstacle

  // l_cut at or above the depth frees everything.
  ObstacleEnv all = obstacles_from_quench(t, spins, 3);
  for (Vertex v = 0; v < t.n; ++v) REQUIRE(all.free(v));

  // Monotonicity: flipping one spin to +1 never shrinks the free component.
  TreeShape big = build_tree(2, 5);
  auto base = sample_bernoulli_spins(big, 0.5, 99);
  ObstacleEnv before = obstacles_from_quench(big, base, 1);
  for (Vertex v : {Vertex(17), Vertex(40), Vertex(61)}) {
    if (base[size_t(v)] == 1) continue;
    auto flipped = base;
    flipped[size_t(v)] = 1;
    ObstacleEnv after = obstacles_from_quench(big, flipped, 1);
    for (Vertex w = 0; w < big.n; ++w) {
      if (before.in_free_component(w)) REQUIRE(after.in_free_component(w));
      if (before.free(w)) REQUIRE(after.free(w));
    }
  }
}

TEST_CASE("free component is connected upward and fenced by obstacles") {
  TreeShape t = build_tree(3, 4);
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL}) {
    ObstacleEnv env = sample_obstacles_iid(t, 0.7, seed);
    REQUIRE(env.in_free_component(0) == env.free(0));
    for (Vertex v = 1; v < t.n; ++v) {
      bool expect = env.free(v) && env.in_free_component(t.parent(v));
      REQUIRE(env.in_free_component(v) == expect);
      // Outer boundary of the component consists of obstacles only.
      if (!env.in_free_component(v) && env.in_free_component(t.parent(v)))
        REQUIRE(!env.free(v));
    }
  }
  REQUIRE_THROWS_AS(ObstacleEnv::from_flags(t, std::vector<std::uint8_t>(3, 0)),
                    std::invalid_argument);
}

TEST_CASE("iid dilution matches the branching survival oracle") {
  // Oracle: u_k = P(the free subtree below a free vertex reaches k more
  // levels) satisfies u_0 = 1, u_k = 1 - (1 - p u_{k-1})^b, and the chance
  // that the root component touches level ell is p * u_ell.
  int b = 2, ell = 6;
  double p = 0.8;
  double u = 1.0;
  for (int k = 1; k <= ell; ++k) u = 1.0 - std::pow(1.0 - p * u, b);
  double oracle = p * u;

  TreeShape t = build_tree(b, ell);
  long n = 4000, hit = 0;
  for (long i = 0; i < n; ++i) {
    ObstacleEnv env = sample_obstacles_iid(t, p, 1000 + std::uint64_t(i));
    bool reached = false;
    for (Vertex v = t.level_begin(ell); v < t.level_end(ell) && !reached; ++v)
      reached = env.in_free_component(v);
    if (reached) ++hit;
  }
  double est = double(hit) / double(n);
  double se = std::sqrt(oracle * (1 - oracle) / double(n));
  REQUIRE(std::abs(est - oracle) < 4.0 * se);

  // The survival iteration converges to the fixed point u* of
  // u = 1 - (1 - p u)^b; for b=2, p=0.8 that is u* = 0.9375.
  double ustar = 1.0;
  for (int k = 0; k < 200; ++k) ustar = 1.0 - std::pow(1.0 - p * ustar, b);
  REQUIRE(ustar == Catch::Approx(0.9375).margin(1e-10));
}

TEST_CASE("region compatibility checks") {
  TreeShape region = build_tree(2, 3);
  TreeShape deeper = build_tree(2, 5);
  ObstacleEnv env = sample_obstacles_iid(deeper, 0.9, 5);
  REQUIRE_NOTHROW(check_region(region, &env));
  REQUIRE_NOTHROW(check_region(region, nullptr));

  ObstacleEnv shallow = sample_obstacles_iid(build_tree(2, 2), 0.9, 5);
  REQUIRE_THROWS_AS(check_region(region, &shallow), std::invalid_argument);
  ObstacleEnv wrong_b = sample_obstacles_iid(build_tree(3, 4), 0.9, 5);
  REQUIRE_THROWS_AS(check_region(region, &wrong_b), std::invalid_argument);
}

TEST_CASE("boundary spec validation") {
  TreeShape t = build_tree(2, 1);
  REQUIRE_NOTHROW(check_boundary(t, BoundarySpec::plus(), false));
  REQUIRE_NOTHROW(check_boundary(t, BoundarySpec::fixed({1, -1, 1, -1}), false));
  REQUIRE_THROWS_AS(check_boundary(t, BoundarySpec::fixed({1, -1}), false),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(check_boundary(t, BoundarySpec::fixed({1, 0, 1, -1}), false),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(check_boundary(t, BoundarySpec::even_bc(), false), std::invalid_argument);
  REQUIRE_NOTHROW(check_boundary(t, BoundarySpec::even_bc(), true));
  REQUIRE_NOTHROW(check_boundary(t, BoundarySpec::fixed({1, 0, 1, 0}), true));
  REQUIRE_THROWS_AS(check_boundary(t, BoundarySpec::fixed({1, -1, 1, 0}), true),
                    std::invalid_argument);
}
