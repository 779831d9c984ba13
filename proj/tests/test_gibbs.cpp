#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include <treeq/gibbs.hpp>

using namespace treeq;
using Catch::Approx;

namespace {

double golden_max(double lo, double hi, int iters, const std::function<double(double)>& f,
                  double* argmax = nullptr) {
  const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
  double a = lo, b = hi;
  double x1 = b - phi * (b - a), x2 = a + phi * (b - a);
  double f1 = f(x1), f2 = f(x2);
  for (int i = 0; i < iters; ++i) {
    if (f1 < f2) {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + phi * (b - a);
      f2 = f(x2);
    } else {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - phi * (b - a);
      f1 = f(x1);
    }
  }
  if (argmax) *argmax = 0.5 * (a + b);
  return std::max(f1, f2);
}

}  // namespace

TEST_CASE("f_beta endpoints, symmetry, monotonicity") {
  ModelParams P{0.8, 0.0, 2};
  double eps = std::exp(-1.6);
  REQUIRE(f_beta(P, 0.0) == Approx(eps).margin(1e-15));
  REQUIRE(f_beta(P, 1.0) == Approx(1.0).margin(1e-15));
  REQUIRE(f_beta(P, kInf) == Approx(1.0 / eps).margin(1e-12));

  // F(1/r) = 1/F(r), and F is increasing.
  double prev = 0.0;
  for (double r : {0.01, 0.3, 1.0, 2.5, 40.0}) {
    double v = f_beta(P, r);
    REQUIRE(v > prev);
    prev = v;
    REQUIRE(f_beta(P, 1.0 / r) == Approx(1.0 / v).epsilon(1e-12));
  }
  REQUIRE_THROWS_AS(f_beta(P, -0.5), std::domain_error);

  // beta = 0 collapses F to the constant 1.
  ModelParams P0{0.0, 0.3, 2};
  for (double r : {0.0, 0.5, 1.0, 7.0}) REQUIRE(f_beta(P0, r) == Approx(1.0).margin(1e-15));
}

TEST_CASE("k_beta values, symmetry, supremum, linear bound") {
  ModelParams P1{1.0, 0.0, 2};
  REQUIRE(k_beta(P1, 1.0) == Approx(std::tanh(1.0)).margin(1e-14));
  REQUIRE(k_beta(P1, 0.0) == 0.0);
  REQUIRE(k_beta(P1, kInf) == 0.0);
  REQUIRE_THROWS_AS(k_beta(P1, -1.0), std::domain_error);

  for (double beta : {0.3, 0.55, 1.2, 3.0}) {
    ModelParams P{beta, 0.0, 2};
    double le = P.log_eps();
    // K(a) = K(1/a)
    for (double x : {0.2, 1.7, 5.0})
      REQUIRE(k_beta_log(le, x) == Approx(k_beta_log(le, -x)).epsilon(1e-13));
    // sup over ratios is tanh(beta), attained at a = 1.
    double argmax = 0.0;
    double mx = golden_max(-40.0, 40.0, 300, [&](double x) { return k_beta_log(le, x); }, &argmax);
    REQUIRE(std::abs(mx - std::tanh(beta)) < 1e-12);
    REQUIRE(std::abs(argmax) < 1e-6);
    // K(alpha * eps) <= alpha
    for (double alpha : {0.1, 0.5, 0.9, 2.0})
      REQUIRE(k_beta(P, alpha * P.eps()) <= alpha + 1e-15);
  }

  ModelParams P0{0.0, 0.0, 2};
  for (double r : {0.0, 0.5, 1.0, 3.0}) REQUIRE(k_beta(P0, r) == 0.0);
}

TEST_CASE("recursion closed forms on tiny trees") {
  TreeShape t0 = build_tree(2, 0);

  ModelParams P{0.9, 0.0, 2};
  RecursionResult rr = r_recursion(P, t0, nullptr, BoundarySpec::plus());
  REQUIRE(rr.log_ratio[0] == Approx(2.0 * P.log_eps()).margin(1e-15));  // R = eps^2

  ModelParams Ph{0.7, 0.4, 2};
  RecursionResult rf = r_recursion(Ph, t0, nullptr, BoundarySpec::free_bc());
  REQUIRE(rf.log_ratio[0] == Approx(-2.0 * 0.7 * 0.4).margin(1e-15));  // R = e^{-2 beta h}

  RecursionResult rm = r_recursion(P, t0, nullptr, BoundarySpec::minus());
  REQUIRE(rm.log_ratio[0] == Approx(-2.0 * P.log_eps()).margin(1e-15));
}

TEST_CASE("recursion marginals match brute force everywhere") {
  struct Case {
    int b, depth;
    double beta, h;
    BoundarySpec bc;
    std::uint64_t env_seed;  // 0 = no obstacles
  };
  std::vector<Case> cases;
  cases.push_back({2, 2, 1.0, 0.0, BoundarySpec::fixed({1, -1, -1, 1, 1, 1, -1, 1}), 0});
  cases.push_back({2, 2, 0.2, -0.3, BoundarySpec::free_bc(), 0});
  cases.push_back({2, 2, 3.0, 0.1, BoundarySpec::plus(), 0});
  cases.push_back({2, 2, 0.8, 0.5, BoundarySpec::minus(), 7});
  cases.push_back({3, 1, 1.4, 0.0, BoundarySpec::plus(), 3});
  cases.push_back({2, 2, 1.1, 0.2, BoundarySpec::plus(), 11});

  for (const auto& c : cases) {
    TreeShape t = build_tree(c.b, c.depth);
    ObstacleEnv env;
    const ObstacleEnv* omega = nullptr;
    if (c.env_seed) {
      env = sample_obstacles_iid(t, 0.75, c.env_seed);
      if (!env.free(0)) continue;  // nothing to compare on an empty region
      omega = &env;
    }
    ModelParams P{c.beta, c.h, c.b};
    RecursionResult rr = r_recursion(P, t, omega, c.bc);
    std::vector<double> marg = site_marginals(P, t, rr);
    BruteForceGibbs bf = brute_force_gibbs(P, t, omega, c.bc);
    for (Vertex v = 0; v < t.n; ++v) {
      if (!rr.active[size_t(v)]) {
        REQUIRE(marg[size_t(v)] == 0.0);
        continue;
      }
      REQUIRE(marg[size_t(v)] == Approx(bf.marginal_plus(v)).margin(1e-10));
    }
    // Root marginal straight from the ratio.
    REQUIRE(sigmoid(-rr.log_ratio[0]) == Approx(bf.marginal_plus(0)).margin(1e-12));
  }
}

TEST_CASE("recursion reads a deeper environment under plus boundary") {
  // A region of depth 2 inside an environment of depth 4: boundary slots read
  // +1 exactly on free-component vertices of level 3. Cross-checked against an
  // explicit Fixed boundary built from the environment.
  TreeShape region = build_tree(2, 2);
  TreeShape deep = build_tree(2, 4);
  ObstacleEnv env = sample_obstacles_iid(deep, 0.6, 17);
  if (env.free(0)) {
    ModelParams P{1.2, 0.15, 2};
    RecursionResult implicit = r_recursion(P, region, &env, BoundarySpec::plus());

    std::vector<std::int8_t> vals(size_t(region.boundary_count()), -1);
    for (Vertex leaf = region.level_begin(2); leaf < region.level_end(2); ++leaf)
      for (int k = 0; k < 2; ++k)
        if (env.in_free_component(region.child(leaf, k)))
          vals[size_t(region.boundary_slot(leaf, k))] = 1;
    RecursionResult explicit_bc = r_recursion(P, region, &env, BoundarySpec::fixed(vals));
    for (Vertex v = 0; v < region.n; ++v) {
      REQUIRE(implicit.active[size_t(v)] == explicit_bc.active[size_t(v)]);
      if (implicit.active[size_t(v)])
        REQUIRE(implicit.log_ratio[size_t(v)] ==
                Approx(explicit_bc.log_ratio[size_t(v)]).margin(1e-13));
    }
  }
}

TEST_CASE("brute force closed forms") {
  // Single free spin with both phantom neighbors +1: P(+) = 1/(1+e^{-4 beta}).
  for (double beta : {0.4, 1.0, 2.5}) {
    ModelParams P{beta, 0.0, 2};
    TreeShape t0 = build_tree(2, 0);
    BruteForceGibbs bf = brute_force_gibbs(P, t0, nullptr, BoundarySpec::plus());
    REQUIRE(bf.marginal_plus(0) == Approx(1.0 / (1.0 + std::exp(-4.0 * beta))).margin(1e-14));
  }

  // Near-zero temperature of the sampler: all configurations equiprobable.
  ModelParams Pz{1e-8, 0.0, 2};
  TreeShape t = build_tree(2, 2);
  BruteForceGibbs bf = brute_force_gibbs(Pz, t, nullptr, BoundarySpec::plus());
  for (double pr : bf.prob) REQUIRE(pr == Approx(1.0 / 128.0).margin(1e-6));

  // Independent cross-check of the two implementations under a minus boundary.
  ModelParams Pm{0.7, 0.3, 2};
  RecursionResult rr = r_recursion(Pm, t, nullptr, BoundarySpec::minus());
  BruteForceGibbs bfm = brute_force_gibbs(Pm, t, nullptr, BoundarySpec::minus());
  REQUIRE(bfm.magnetization(0) ==
          Approx(magnetization_from_log_ratio(rr.log_ratio[0])).margin(1e-12));

  REQUIRE_THROWS_AS(brute_force_gibbs(Pm, build_tree(2, 3), nullptr, BoundarySpec::plus()),
                    std::invalid_argument);
}

TEST_CASE("path weight equals the conditional marginal gap") {
  ModelParams P{1.0, 0.0, 2};
  TreeShape t = build_tree(2, 2);
  RecursionResult rr = r_recursion(P, t, nullptr, BoundarySpec::plus());
  BruteForceGibbs bf = brute_force_gibbs(P, t, nullptr, BoundarySpec::plus());

  for (Vertex leaf = t.level_begin(2); leaf < t.level_end(2); ++leaf) {
    auto path = path_to_descendant(t, 0, leaf);
    double w = path_weight(P, rr, path);
    double gap =
        bf.conditional_marginal_plus(leaf, 0, 1) - bf.conditional_marginal_plus(leaf, 0, -1);
    REQUIRE(w == Approx(gap).margin(1e-10));
  }

  // Same identity with a field and an intermediate vertex.
  ModelParams Ph{0.8, 0.25, 2};
  RecursionResult rh = r_recursion(Ph, t, nullptr, BoundarySpec::free_bc());
  BruteForceGibbs bh = brute_force_gibbs(Ph, t, nullptr, BoundarySpec::free_bc());
  auto path = path_to_descendant(t, 0, 4);
  REQUIRE(path_weight(Ph, rh, path) ==
          Approx(bh.conditional_marginal_plus(4, 0, 1) - bh.conditional_marginal_plus(4, 0, -1))
              .margin(1e-10));

  // Trivia: empty product, a surely-plus vertex, an obstacle.
  REQUIRE(path_weight(P, rr, {}) == 1.0);
  RecursionResult manual;
  manual.log_ratio = {-kInf};
  manual.active = {1};
  REQUIRE(path_weight(P, manual, {0}) == 0.0);
  manual.active = {0};
  REQUIRE(path_weight(P, manual, {0}) == 0.0);
}

TEST_CASE("monotonicity: field, boundary, and volume") {
  TreeShape t = build_tree(2, 3);
  ObstacleEnv env = sample_obstacles_iid(t, 0.8, 23);
  REQUIRE(env.free(0));

  // Marginals increase with the field at every active vertex.
  std::vector<double> hs = {-0.5, 0.0, 0.4};
  std::vector<std::vector<double>> margs;
  for (double h : hs) {
    ModelParams P{0.9, h, 2};
    RecursionResult rr = r_recursion(P, t, &env, BoundarySpec::plus());
    margs.push_back(site_marginals(P, t, rr));
  }
  for (Vertex v = 0; v < t.n; ++v) {
    if (!env.in_free_component(v)) continue;
    REQUIRE(margs[0][size_t(v)] <= margs[1][size_t(v)] + 1e-12);
    REQUIRE(margs[1][size_t(v)] <= margs[2][size_t(v)] + 1e-12);
  }

  // Plus dominates any fixed boundary dominates minus.
  ModelParams P{1.1, 0.0, 2};
  RecursionResult rp = r_recursion(P, t, nullptr, BoundarySpec::plus());
  RecursionResult rm = r_recursion(P, t, nullptr, BoundarySpec::minus());
  std::vector<std::int8_t> mixed(size_t(t.boundary_count()));
  for (std::size_t i = 0; i < mixed.size(); ++i) mixed[i] = (i * 7 % 3 == 0) ? 1 : -1;
  RecursionResult rx = r_recursion(P, t, nullptr, BoundarySpec::fixed(mixed));
  auto mp = site_marginals(P, t, rp);
  auto mm = site_marginals(P, t, rm);
  auto mx = site_marginals(P, t, rx);
  for (Vertex v = 0; v < t.n; ++v) {
    REQUIRE(mm[size_t(v)] <= mx[size_t(v)] + 1e-12);
    REQUIRE(mx[size_t(v)] <= mp[size_t(v)] + 1e-12);
  }

  // Volume monotonicity: growing the region under a plus boundary can only
  // lower the root plus-marginal. Same environment read at increasing depths.
  TreeShape deep = build_tree(2, 5);
  ObstacleEnv wide = sample_obstacles_iid(deep, 0.85, 31);
  REQUIRE(wide.free(0));
  ModelParams Pv{1.3, 0.05, 2};
  double prev = 1.0;
  for (int d = 1; d <= 5; ++d) {
    TreeShape region = build_tree(2, d);
    RecursionResult rr = r_recursion(Pv, region, &wide, BoundarySpec::plus());
    double root_plus = sigmoid(-rr.log_ratio[0]);
    REQUIRE(root_plus <= prev + 1e-12);
    prev = root_plus;
  }

  // FKG at the level of pair correlations on a small tree.
  BruteForceGibbs bf = brute_force_gibbs(ModelParams{0.8, 0.1, 2}, build_tree(2, 2), nullptr,
                                         BoundarySpec::free_bc());
  int f = int(bf.sites.size());
  for (int i = 0; i < f; ++i)
    for (int j = i + 1; j < f; ++j) {
      double eij = bf.expectation([&](std::size_t m) {
        return ((m >> i & 1) ? 1.0 : -1.0) * ((m >> j & 1) ? 1.0 : -1.0);
      });
      double ei = bf.expectation([&](std::size_t m) { return (m >> i & 1) ? 1.0 : -1.0; });
      double ej = bf.expectation([&](std::size_t m) { return (m >> j & 1) ? 1.0 : -1.0; });
      REQUIRE(eij - ei * ej >= -1e-12);
    }
}

TEST_CASE("critical temperatures") {
  REQUIRE(critical_beta0(2) == Approx(0.5493061443340549).margin(1e-12));
  REQUIRE(critical_beta1(2) == Approx(0.8813735870195430).margin(1e-12));
  for (int b = 2; b <= 10; ++b) REQUIRE(critical_beta0(b) < critical_beta1(b));
  REQUIRE_THROWS_AS(critical_beta0(1), std::invalid_argument);
}

TEST_CASE("homogeneous fixed points") {
  // Deep zero-field quench at very low temperature: full magnetization.
  ModelParams cold{20.0, 0.0, 2};
  REQUIRE(std::abs(mu_plus_root(cold).magnetization - 1.0) < 1e-8);

  // Uniqueness region: plus and minus limits agree.
  ModelParams warm{0.5, 0.0, 2};
  REQUIRE(std::abs(mu_plus_root(warm).magnetization - mu_minus_root(warm).magnetization) < 1e-10);

  // Coexistence just above the uniqueness line.
  ModelParams coex{0.7, 0.0, 2};
  REQUIRE(mu_plus_root(coex).magnetization - mu_minus_root(coex).magnetization > 1e-3);

  // Finite depth agrees with the brute-force root magnetization.
  ModelParams P{1.0, 0.0, 2};
  TreeShape t2 = build_tree(2, 2);
  BruteForceGibbs bf = brute_force_gibbs(P, t2, nullptr, BoundarySpec::plus());
  REQUIRE(mu_plus_root(P, 2).magnetization == Approx(bf.magnetization(0)).margin(1e-12));
  // ... and with the generic recursion on the homogeneous tree.
  TreeShape t3 = build_tree(2, 3);
  RecursionResult rr = r_recursion(P, t3, nullptr, BoundarySpec::plus());
  REQUIRE(mu_plus_root(P, 3).log_ratio == Approx(rr.log_ratio[0]).margin(1e-12));

  // The plus-boundary ratio grows with depth (marginal shrinks toward the
  // infinite-volume value).
  for (ModelParams Q : {ModelParams{1.2, 0.0, 2}, ModelParams{0.4, 0.3, 2}}) {
    double prev = -kInf;
    for (long ell = 0; ell <= 15; ++ell) {
      double x = mu_plus_root(Q, ell).log_ratio;
      REQUIRE(x >= prev - 1e-12);
      prev = x;
    }
    REQUIRE(mu_plus_root(Q).log_ratio >= prev - 1e-12);
  }

  // Non-convergence is reported, not raised.
  ModelParams crit{critical_beta0(2), 0.0, 2};
  FixedPointResult fp = iterate_homogeneous(crit, kInf, {}, 5);
  REQUIRE(!fp.converged);
  REQUIRE(fp.iters == 5);
}

TEST_CASE("critical field") {
  // Continuity at the uniqueness line.
  CriticalField near0 = critical_field(critical_beta0(2) + 1e-4, 2);
  REQUIRE(near0.h_c < 0.05);

  // Deep quench: h_c approaches b - 1, with a log-size first-order
  // correction.  The doubled minus recursion x -> 2 log F(x) - 2 beta h
  // loses its large stable fixed point by tangency; expanding log F at
  // large argument gives h_c = (b-1) - (b log b - (b-1) log(b-1)) / (2 beta)
  // up to O(beta^-2), which is 1 - log(4)/(2 beta) for b = 2.
  CriticalField deep = critical_field(5.0, 2);
  REQUIRE(!deep.unique);
  REQUIRE(deep.h_c == Catch::Approx(1.0 - std::log(4.0) / 10.0).margin(5e-3));
  REQUIRE(std::abs(deep.h_c - 1.0) < 0.2);

  // Below the line: 0 with the uniqueness flag.
  CriticalField uni = critical_field(0.5, 2);
  REQUIRE(uni.unique);
  REQUIRE(uni.h_c == 0.0);

  // The coexistence predicate flips across the returned threshold.
  auto coexists = [](double beta, int b, double h) {
    ModelParams P{beta, h, b};
    return std::abs(mu_plus_root(P).magnetization - mu_minus_root(P).magnetization) > 1e-8;
  };
  REQUIRE(coexists(5.0, 2, deep.h_c - 2e-6));
  REQUIRE(!coexists(5.0, 2, deep.h_c + 2e-6));

  REQUIRE_THROWS_AS(critical_field(0.0, 2), std::invalid_argument);
}

TEST_CASE("tail bound recursion") {
  // Dyadic density: the quadratic has the double root 1/32 and the sequence
  // climbs toward it monotonically without ever reaching it.
  double p_dyadic = 1.0 - std::ldexp(1.0, -11);
  TailEstimate est = r_tail_bound_recursion(1.0, p_dyadic, 2, 60);
  REQUIRE(est.has_fixed_point);
  REQUIRE(est.fixed_point == Approx(1.0 / 32.0).margin(1e-15));
  REQUIRE(!est.diverged);
  REQUIRE(est.value.front() == Approx(std::ldexp(1.0, -10)).margin(1e-18));
  for (std::size_t i = 1; i < est.value.size(); ++i)
    REQUIRE(est.value[i] >= est.value[i - 1] - 1e-18);
  REQUIRE(est.sup < 1.0 / 32.0);

  // Low density: the bound is vacuous and flagged as such.
  TailEstimate bad = r_tail_bound_recursion(0.5, 0.5, 2, 10);
  REQUIRE(bad.diverged);
  REQUIRE(bad.sup == 1.0);

  // Convergence to the closed-form stable fixed point.
  TailEstimate conv = r_tail_bound_recursion(1.0, 0.9999, 2, 300);
  REQUIRE(conv.has_fixed_point);
  REQUIRE(conv.value.back() == Approx(conv.fixed_point).margin(1e-12));

  // The sequence is monotone nondecreasing for any parameters.
  for (double p : {0.3, 0.9, 0.999, 1.0}) {
    TailEstimate e = r_tail_bound_recursion(0.8, p, 2, 40);
    for (std::size_t i = 1; i < e.value.size(); ++i)
      REQUIRE(e.value[i] >= e.value[i - 1] - 1e-18);
  }

  REQUIRE_THROWS_AS(r_tail_bound_recursion(1.0, 0.9, 3, 10), std::invalid_argument);
  REQUIRE_THROWS_AS(r_tail_bound_recursion(0.0, 0.9, 2, 10), std::invalid_argument);
  REQUIRE_THROWS_AS(r_tail_bound_recursion(1.0, 0.9, 2, 0), std::invalid_argument);
}

TEST_CASE("certified dyadic tail iteration stays below the double root") {
  CertifiedTail ct = r_tail_bound_certified(3, 100);
  REQUIRE(ct.below_threshold);
  REQUIRE(ct.threshold_fp == (std::uint64_t(1) << 55));
  REQUIRE(ct.values_fp.size() == 100);
  REQUIRE(ct.values_fp.front() == (std::uint64_t(1) << 50));
  for (std::size_t i = 1; i < ct.values_fp.size(); ++i) {
    REQUIRE(ct.values_fp[i] > ct.values_fp[i - 1]);  // strictly increasing here
    REQUIRE(ct.values_fp[i] < ct.threshold_fp);
  }

  // Agreement with the floating-point recursion at the same density.
  double scale = std::ldexp(1.0, -60);
  TailEstimate fl = r_tail_bound_recursion(1.0, 1.0 - std::ldexp(1.0, -11), 2, 30);
  for (int i = 0; i < 30; ++i)
    REQUIRE(double(ct.values_fp[size_t(i)]) * scale ==
            Approx(fl.value[size_t(i)]).margin(1e-12));

  REQUIRE_THROWS_AS(r_tail_bound_certified(-1, 10), std::invalid_argument);
  REQUIRE_THROWS_AS(r_tail_bound_certified(30, 10), std::invalid_argument);
}

TEST_CASE("tail monte carlo") {
  // All-free environment: the homogeneous plus recursion stays far below eps.
  ModelParams P{3.0, 0.0, 2};
  TailMonteCarlo clean = r_tail_monte_carlo(P, 1.0, 6, 50, 11);
  REQUIRE(clean.estimate == 0.0);
  REQUIRE(clean.exceed == 0);

  REQUIRE_THROWS_AS(r_tail_monte_carlo(P, 1.0, 6, 0, 11), std::invalid_argument);

  // Reproducibility across seeds and worker counts.
  ModelParams Pd{1.2, 0.0, 2};
  TailMonteCarlo a = r_tail_monte_carlo(Pd, 0.75, 4, 400, 5, 1);
  TailMonteCarlo b = r_tail_monte_carlo(Pd, 0.75, 4, 400, 5, 3);
  REQUIRE(a.exceed == b.exceed);
  REQUIRE(a.estimate > 0.0);
  REQUIRE(a.estimate < 1.0);
  REQUIRE(a.std_error == Approx(std::sqrt(a.estimate * (1 - a.estimate) / 400.0)).margin(1e-15));

  // The analytic recursion dominates the empirical exceedance frequency in
  // its own regime: b=2, margin a=1, p=0.999, field one margin above the
  // negative critical field.
  double a_margin = 1.0;
  double h = -critical_field(3.0, 2).h_c + a_margin;
  ModelParams Pr{3.0, h, 2};
  TailMonteCarlo mc = r_tail_monte_carlo(Pr, 0.999, 6, 1500, 29);
  TailEstimate bound = r_tail_bound_recursion(a_margin, 0.999, 2, 6);
  REQUIRE(mc.estimate <= bound.value.back() + 3.0 * mc.std_error);
}

TEST_CASE("weight moments: exact depth-1 enumeration") {
  ModelParams P{1.1, 0.2, 2};
  double p = 0.8, t_exp = 0.7, u = 0.3;
  long n = 20000;

  // With no padding the level-1 vertices are leaves: their ratio under the
  // plus boundary is deterministic, R = e^{-2 beta h} eps^2.
  double lr_leaf = P.log_field_factor() + 2.0 * P.log_eps();
  double kappa = k_beta_log(P.log_eps(), lr_leaf);

  auto plain_oracle = [&](double factor) {
    double s = 1.0 - p;  // blocked root contributes exp(0)
    for (int j = 0; j <= 2; ++j) {
      double binom = (j == 1 ? 2.0 : 1.0) * std::pow(p, j) * std::pow(1.0 - p, 2 - j);
      s += p * binom * std::exp(t_exp * j * factor);
    }
    return s;
  };

  WeightMomentOptions copt;
  copt.regime = Regime::C;
  copt.a1 = 0.1;
  copt.pad = 0;
  WeightMomentResult rc = modified_weight_moment(P, p, 1, t_exp, u, n, 77, copt);
  REQUIRE(rc.moment == Approx(plain_oracle(kappa)).margin(4.0 * rc.moment_se + 1e-12));
  // Regime C: a leaf has no obstacle children, so every endpoint is good.
  REQUIRE(rc.modified_moment ==
          Approx(plain_oracle(u)).margin(4.0 * rc.modified_moment_se + 1e-12));
  REQUIRE(rc.bad_steps == 0);
  // E[good steps per sample] = p * 2p.
  REQUIRE(double(rc.good_steps) / double(n) == Approx(2.0 * p * p).margin(0.05));

  // Regime A with a = 1 (k0 = 4): no room for a regular run below a depth-1
  // endpoint, so every endpoint is bad and psi = 1.
  WeightMomentOptions aopt;
  aopt.regime = Regime::A;
  aopt.a = 1.0;
  aopt.pad = 0;
  WeightMomentResult ra = modified_weight_moment(P, p, 1, t_exp, u, n, 78, aopt);
  REQUIRE(ra.modified_moment ==
          Approx(plain_oracle(1.0)).margin(4.0 * ra.modified_moment_se + 1e-12));
  REQUIRE(ra.good_steps == 0);

  // Regime A with a = 3 (k0 = 1): goodness needs no run at all, endpoints are
  // regular (their children sit on the plus boundary), so psi = u.
  aopt.a = 3.0;
  WeightMomentResult rg = modified_weight_moment(P, p, 1, t_exp, u, n, 79, aopt);
  REQUIRE(rg.modified_moment ==
          Approx(plain_oracle(u)).margin(4.0 * rg.modified_moment_se + 1e-12));
  REQUIRE(rg.bad_steps == 0);
}

TEST_CASE("weight moments: contract details") {
  ModelParams P{2.0, 0.0, 2};
  WeightMomentOptions opt;
  opt.regime = Regime::A;
  opt.a = 1.0;
  opt.pad = 2;

  // t = 0 gives exactly 1.
  WeightMomentResult z = modified_weight_moment(P, 0.9, 3, 0.0, 0.1, 8, 5, opt);
  REQUIRE(z.moment == 1.0);
  REQUIRE(z.modified_moment == 1.0);

  // Clean tree at low temperature: both moments stay at most 2.
  WeightMomentResult m = modified_weight_moment(P, 1.0, 6, 1.0, 0.05, 3, 5, opt);
  REQUIRE(m.moment <= 2.0);
  REQUIRE(m.modified_moment <= 2.0);
  REQUIRE(m.moment >= 1.0);

  // Determinism, including across worker counts.
  WeightMomentResult d1 = modified_weight_moment(P, 0.85, 3, 0.5, 0.2, 500, 9, opt, 1);
  WeightMomentResult d2 = modified_weight_moment(P, 0.85, 3, 0.5, 0.2, 500, 9, opt, 4);
  REQUIRE(d1.moment == d2.moment);
  REQUIRE(d1.modified_moment == d2.modified_moment);
  REQUIRE(d1.good_steps == d2.good_steps);

  REQUIRE_THROWS_AS(modified_weight_moment(P, 0.9, 0, 0.5, 0.2, 10, 9, opt),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(modified_weight_moment(P, 0.9, 2, 0.5, -0.2, 10, 9, opt),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(modified_weight_moment(P, 0.9, 2, 0.5, 0.2, 0, 9, opt),
                    std::invalid_argument);
  WeightMomentOptions badopt = opt;
  badopt.a = 5.0;
  REQUIRE_THROWS_AS(modified_weight_moment(P, 0.9, 2, 0.5, 0.2, 10, 9, badopt),
                    std::invalid_argument);
}

TEST_CASE("top-down sampler matches brute force") {
  ModelParams P{0.9, 0.1, 2};
  TreeShape t = build_tree(2, 2);
  ObstacleEnv env = sample_obstacles_iid(t, 0.85, 41);
  REQUIRE(env.free(0));
  RecursionResult rr = r_recursion(P, t, &env, BoundarySpec::plus());
  BruteForceGibbs bf = brute_force_gibbs(P, t, &env, BoundarySpec::plus());

  long n = 20000;
  std::vector<long> plus(size_t(t.n), 0);
  long corr = 0;  // root and vertex 1 jointly plus, if vertex 1 is active
  Stream rng(derive_key(99, 1));
  for (long i = 0; i < n; ++i) {
    auto s = sample_gibbs_topdown(P, t, rr, rng);
    for (Vertex v = 0; v < t.n; ++v)
      if (s[size_t(v)] == 1) ++plus[size_t(v)];
    if (s[0] == 1 && s[1] == 1) ++corr;
  }
  for (Vertex v = 0; v < t.n; ++v) {
    if (!rr.active[size_t(v)]) {
      REQUIRE(plus[size_t(v)] == 0);
      continue;
    }
    double exact = bf.marginal_plus(v);
    double se = std::sqrt(std::max(exact * (1 - exact), 1e-6) / double(n));
    REQUIRE(double(plus[size_t(v)]) / double(n) == Approx(exact).margin(4.5 * se));
  }
  if (rr.active[1]) {
    double exact = bf.expectation(
        [&](std::size_t m) { return double((m >> bf.site_index[0] & 1) & (m >> bf.site_index[1] & 1)); });
    double se = std::sqrt(exact * (1 - exact) / double(n));
    REQUIRE(double(corr) / double(n) == Approx(exact).margin(4.5 * se));
  }
}
