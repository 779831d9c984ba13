#pragma once

// Exact spectra of the heat-bath generator on tiny regions, the block
// dynamics decomposition, a numerical upper bound on the log-Sobolev
// constant, the variance-mixing criterion, and a Monte Carlo variance-decay
// gap estimator for regions too large for exact treatment.
//
// Exact computations live on the 2^k configuration space of the k free
// vertices (bit i of a state mask = +1 at the i-th free vertex, matching the
// brute-force enumeration). Gap extraction symmetrizes the generator with
// the similarity transform D^{1/2} L D^{-1/2}; the symmetric off-diagonal is
// computed as -sqrt of the product of the two opposing rates, which avoids
// dividing by tiny stationary weights.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynamics.hpp"
#include "gibbs.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "tree.hpp"

namespace treeq {

// ---------------------------------------------------------------------------
// Exact generator.

struct GeneratorMatrix {
  std::vector<Vertex> sites;    // free vertices, ascending; bit order of masks
  std::vector<double> mu;       // stationary law, one entry per mask
  std::vector<double> rate;     // rate[m * k + i]: flip rate of bit i in state m

  int nsites() const { return static_cast<int>(sites.size()); }
  std::size_t states() const { return mu.size(); }

  double flip_rate(std::size_t m, int i) const {
    return rate[m * static_cast<std::size_t>(nsites()) + static_cast<std::size_t>(i)];
  }

  // Total escape rate from state m; also the diagonal of the symmetrized
  // positive semidefinite form.
  double escape(std::size_t m) const {
    double s = 0.0;
    for (int i = 0; i < nsites(); ++i) s += flip_rate(m, i);
    return s;
  }
};

inline GeneratorMatrix build_generator(const ModelParams& P, const TreeShape& t,
                                       const ObstacleEnv* omega, const BoundarySpec& bc,
                                       int max_sites = 15) {
  P.validate();
  if (max_sites > 24) throw std::invalid_argument("generator: size budget too large");
  BruteForceGibbs bf = brute_force_gibbs(P, t, omega, bc, max_sites);
  GeneratorMatrix G;
  G.sites = bf.sites;
  G.mu = bf.prob;
  const int k = G.nsites();
  const std::size_t states = G.states();
  G.rate.assign(states * static_cast<std::size_t>(k), 0.0);

  SpinConfig c = uniform_config(t, -1);
  for (std::size_t m = 0; m < states; ++m) {
    for (int i = 0; i < k; ++i)
      c.spin[static_cast<std::size_t>(G.sites[static_cast<std::size_t>(i)])] =
          (m >> i & 1) ? 1 : -1;
    for (int i = 0; i < k; ++i) {
      double pp = heat_bath_plus_probability(P, t, omega, bc, c, G.sites[static_cast<std::size_t>(i)]);
      G.rate[m * static_cast<std::size_t>(k) + static_cast<std::size_t>(i)] =
          (m >> i & 1) ? 1.0 - pp : pp;
    }
  }

  // Reversibility is structural (rates are conditional probabilities of the
  // same Gibbs law), but verify the residual to catch any drift between the
  // dynamics and equilibrium code paths.
  double res = 0.0;
  for (std::size_t m = 0; m < states; ++m)
    for (int i = 0; i < k; ++i) {
      std::size_t m2 = m ^ (std::size_t(1) << i);
      res = std::max(res, std::abs(G.mu[m] * G.flip_rate(m, i) - G.mu[m2] * G.flip_rate(m2, i)));
    }
  if (res > 1e-12)
    throw std::runtime_error("generator: reversibility residual " + std::to_string(res));
  return G;
}

namespace detail {

// y = S x for the symmetrized form S = D^{1/2} (-L) D^{-1/2}: diagonal is the
// escape rate, off-diagonal is -sqrt(rate_forward * rate_backward).
inline void apply_symmetrized(const GeneratorMatrix& G, const std::vector<double>& x,
                              std::vector<double>& y) {
  const int k = G.nsites();
  const std::size_t states = G.states();
  for (std::size_t m = 0; m < states; ++m) {
    double acc = G.escape(m) * x[m];
    for (int i = 0; i < k; ++i) {
      std::size_t m2 = m ^ (std::size_t(1) << i);
      acc -= std::sqrt(G.flip_rate(m, i) * G.flip_rate(m2, i)) * x[m2];
    }
    y[m] = acc;
  }
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  Kahan s;
  for (std::size_t i = 0; i < a.size(); ++i) s.add(a[i] * b[i]);
  return s.sum;
}

inline void axpy(double a, const std::vector<double>& x, std::vector<double>& y) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

}  // namespace detail

namespace detail {

// Lanczos with full reorthogonalization on c I - S restricted to the
// complement of the known kernel vector sqrt(mu); tolerance 1e-10 on the
// eigenvalue residual. Optionally reconstructs the gap eigenvector of S.
inline double lanczos_gap(const GeneratorMatrix& G, std::vector<double>* eigvec) {
  const std::size_t states = G.states();
  if (states < 2) throw std::invalid_argument("gap: empty generator");

  // Known kernel of S: v0 = sqrt(mu), normalized.
  std::vector<double> v0(states);
  for (std::size_t m = 0; m < states; ++m) v0[m] = std::sqrt(G.mu[m]);
  double n0 = std::sqrt(detail::dot(v0, v0));
  for (double& x : v0) x /= n0;

  // Gershgorin upper bound for the spectrum of S.
  double c = 0.0;
  const int k = G.nsites();
  for (std::size_t m = 0; m < states; ++m) {
    double radius = 0.0;
    for (int i = 0; i < k; ++i) {
      std::size_t m2 = m ^ (std::size_t(1) << i);
      radius += std::sqrt(G.flip_rate(m, i) * G.flip_rate(m2, i));
    }
    c = std::max(c, G.escape(m) + radius);
  }
  c = std::max(c, 1.0);

  // Working on B = c I - S, the gap of S becomes the top eigenvalue of B on
  // the orthogonal complement of v0.
  const std::size_t max_iter = std::min<std::size_t>(states - 1, 600);
  std::vector<std::vector<double>> basis;
  std::vector<double> alpha, beta;

  Stream rng(0x47415053ULL);  // fixed seed: deterministic solver
  std::vector<double> q(states);
  for (double& x : q) x = rng.next_unit() - 0.5;
  // Remove the kernel component and normalize.
  detail::axpy(-detail::dot(q, v0), v0, q);
  double nq = std::sqrt(detail::dot(q, q));
  for (double& x : q) x /= nq;

  auto ritz_vector = [&](const Eigen::MatrixXd& vecs, int col) {
    if (!eigvec) return;
    eigvec->assign(states, 0.0);
    for (std::size_t j = 0; j < basis.size(); ++j)
      detail::axpy(vecs(static_cast<int>(j), col), basis[j], *eigvec);
  };

  std::vector<double> w(states);
  double last_theta = 0.0;
  for (std::size_t it = 0; it < max_iter; ++it) {
    basis.push_back(q);
    detail::apply_symmetrized(G, q, w);
    for (std::size_t m = 0; m < states; ++m) w[m] = c * q[m] - w[m];
    double a = detail::dot(w, q);
    alpha.push_back(a);
    // Full reorthogonalization against the Lanczos vectors and the known
    // kernel. The kernel must be removed after each basis sweep, not before:
    // basis vectors carry O(eps) kernel components, and since B maps the
    // kernel to its largest eigenvalue c, any component the sweep reinjects
    // grows by roughly (alpha+beta)/beta per iteration until it poisons the
    // tridiagonal section on runs long enough to need ~100 iterations.
    for (const auto& bv : basis) detail::axpy(-detail::dot(w, bv), bv, w);
    detail::axpy(-detail::dot(w, v0), v0, w);
    for (const auto& bv : basis) detail::axpy(-detail::dot(w, bv), bv, w);
    detail::axpy(-detail::dot(w, v0), v0, w);
    double bnorm = std::sqrt(detail::dot(w, w));

    // Ritz values of the tridiagonal section.
    const int dim = static_cast<int>(alpha.size());
    Eigen::MatrixXd T = Eigen::MatrixXd::Zero(dim, dim);
    for (int i = 0; i < dim; ++i) {
      T(i, i) = alpha[static_cast<std::size_t>(i)];
      if (i + 1 < dim) {
        T(i, i + 1) = beta[static_cast<std::size_t>(i)];
        T(i + 1, i) = beta[static_cast<std::size_t>(i)];
      }
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(T);
    int top;
    es.eigenvalues().maxCoeff(&top);
    double theta = es.eigenvalues()(top);
    // Residual bound for the top Ritz pair: |last beta * last component|.
    double resid = bnorm * std::abs(es.eigenvectors()(dim - 1, top));
    if (resid <= 1e-10 * std::max(1.0, std::abs(theta)) || bnorm <= 1e-14 * c) {
      ritz_vector(es.eigenvectors(), top);
      return c - theta;
    }
    last_theta = theta;
    beta.push_back(bnorm);
    for (std::size_t m = 0; m < states; ++m) q[m] = w[m] / bnorm;
  }
  throw std::runtime_error("gap: eigensolver did not converge, best estimate " +
                           std::to_string(c - last_theta));
}

}  // namespace detail

// Smallest nonzero eigenvalue of -L in the mu-weighted inner product.
inline double spectral_gap_exact(const GeneratorMatrix& G) {
  return detail::lanczos_gap(G, nullptr);
}

// Exact time-t law of the dynamics from a point mass, by dense spectral
// decomposition of the symmetrized generator. Only for small regions.
inline std::vector<double> law_at_time(const GeneratorMatrix& G, std::size_t start_mask,
                                       double time) {
  const std::size_t states = G.states();
  if (states > 4096) throw std::invalid_argument("law: region too large for a dense law");
  if (start_mask >= states) throw std::out_of_range("law: start state out of range");
  if (!(time >= 0.0)) throw std::invalid_argument("law: time must be >= 0");
  const int k = G.nsites();

  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(static_cast<int>(states), static_cast<int>(states));
  for (std::size_t m = 0; m < states; ++m) {
    S(static_cast<int>(m), static_cast<int>(m)) = G.escape(m);
    for (int i = 0; i < k; ++i) {
      std::size_t m2 = m ^ (std::size_t(1) << i);
      S(static_cast<int>(m), static_cast<int>(m2)) =
          -std::sqrt(G.flip_rate(m, i) * G.flip_rate(m2, i));
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
  if (es.info() != Eigen::Success) throw std::runtime_error("law: dense eigensolver failed");
  const Eigen::MatrixXd& U = es.eigenvectors();
  const Eigen::VectorXd& lam = es.eigenvalues();

  // exp(tL) = D^{-1/2} exp(-tS) D^{1/2}.
  std::vector<double> out(states);
  Eigen::VectorXd row = Eigen::VectorXd::Zero(static_cast<int>(states));
  for (int j = 0; j < static_cast<int>(states); ++j) {
    double w = U(static_cast<int>(start_mask), j) * std::exp(-std::max(lam(j), 0.0) * time);
    for (int m2 = 0; m2 < static_cast<int>(states); ++m2) row(m2) += w * U(m2, j);
  }
  double total = 0.0;
  for (std::size_t m2 = 0; m2 < states; ++m2) {
    double p = row(static_cast<int>(m2)) * std::sqrt(G.mu[m2] / G.mu[start_mask]);
    out[m2] = std::max(p, 0.0);
    total += out[m2];
  }
  if (!(std::abs(total - 1.0) < 1e-6))
    throw std::runtime_error("law: probability mass drifted to " + std::to_string(total));
  for (double& p : out) p /= total;
  return out;
}

// ---------------------------------------------------------------------------
// Block dynamics.

struct BlockGapResult {
  double block_chain_gap = 0.0;   // gap of the chain that resamples blocks
  double min_block_gap = 0.0;     // worst single-site gap inside any block,
                                  // over all blocks and outside configurations
  double single_site_bound = 0.0; // (1/ell1) * min_block_gap * block_chain_gap
};

// Block chain: every free vertex x carries a rate-1 move that resamples the
// depth-(ell1 - 1) subtree below x from the conditional Gibbs law given
// everything else. ell1 = 1 is the single-site chain; ell1 = depth + 1 makes
// the root move a full resampling.
inline BlockGapResult block_dynamics_gap(const ModelParams& P, const TreeShape& t,
                                         const ObstacleEnv* omega, const BoundarySpec& bc,
                                         int ell1) {
  P.validate();
  if (ell1 < 1) throw std::invalid_argument("block gap: ell1 must be >= 1");
  BruteForceGibbs bf = brute_force_gibbs(P, t, omega, bc, 15);
  const int k = static_cast<int>(bf.sites.size());
  const std::size_t states = bf.prob.size();
  if (states > 4096) throw std::invalid_argument("block gap: region too large for dense spectra");

  // Bit mask of each block: the free vertices within distance ell1 - 1 below
  // the block root.
  std::vector<std::size_t> block_mask(static_cast<std::size_t>(k), 0);
  for (int i = 0; i < k; ++i) {
    Vertex x = bf.sites[static_cast<std::size_t>(i)];
    std::size_t mask = 0;
    for (int d = 0; d < ell1; ++d) {
      for (Vertex y : descendants_at_depth(t, x, d)) {
        int j = bf.site_index[static_cast<std::size_t>(y)];
        if (j >= 0) mask |= std::size_t(1) << j;
      }
    }
    block_mask[static_cast<std::size_t>(i)] = mask;
  }

  // Dense generator of the block chain, then the symmetrized form.
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(static_cast<int>(states), static_cast<int>(states));
  for (int i = 0; i < k; ++i) {
    std::size_t bm = block_mask[static_cast<std::size_t>(i)];
    // Conditional law inside the block given the outside: group states by
    // their outside part.
    std::vector<double> z(states, 0.0);
    for (std::size_t m = 0; m < states; ++m) z[m & ~bm] += bf.prob[m];
    for (std::size_t m = 0; m < states; ++m) {
      std::size_t outside = m & ~bm;
      if (z[outside] <= 0.0) continue;
      // Enumerate the block sub-masks inside bm.
      std::size_t sub = bm;
      while (true) {
        std::size_t m2 = outside | sub;
        double p = bf.prob[m2] / z[outside];
        L(static_cast<int>(m), static_cast<int>(m2)) += p;
        if (sub == 0) break;
        sub = (sub - 1) & bm;
      }
      L(static_cast<int>(m), static_cast<int>(m)) -= 1.0;  // move at rate 1
    }
  }

  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(static_cast<int>(states), static_cast<int>(states));
  for (int m = 0; m < static_cast<int>(states); ++m)
    for (int m2 = 0; m2 < static_cast<int>(states); ++m2) {
      if (m == m2) continue;
      S(m, m2) = -std::sqrt(std::max(L(m, m2), 0.0) * std::max(L(m2, m), 0.0));
    }
  for (int m = 0; m < static_cast<int>(states); ++m) S(m, m) = -L(m, m);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
  if (es.info() != Eigen::Success) throw std::runtime_error("block gap: eigensolver failed");
  BlockGapResult out;
  out.block_chain_gap = es.eigenvalues()(1);

  // Worst single-site gap of the dynamics inside one block, over all blocks
  // and all configurations outside the block.
  double worst = kInf;
  SpinConfig cfg = uniform_config(t, -1);
  for (int i = 0; i < k; ++i) {
    std::size_t bm = block_mask[static_cast<std::size_t>(i)];
    std::vector<int> inner;
    for (int j = 0; j < k; ++j)
      if (bm >> j & 1) inner.push_back(j);
    const int nb = static_cast<int>(inner.size());
    std::size_t outside_bits = ~bm & ((states - 1));
    // Iterate over outside configurations via sub-mask enumeration.
    std::size_t sub = outside_bits;
    while (true) {
      std::size_t outside = sub;
      // Dense single-site generator restricted to the block.
      const std::size_t bs = std::size_t(1) << nb;
      Eigen::MatrixXd Sb = Eigen::MatrixXd::Zero(static_cast<int>(bs), static_cast<int>(bs));
      std::vector<double> esc(bs, 0.0);
      for (std::size_t q = 0; q < bs; ++q) {
        std::size_t m = outside;
        for (int j = 0; j < nb; ++j)
          if (q >> j & 1) m |= std::size_t(1) << inner[static_cast<std::size_t>(j)];
        for (int j = 0; j < k; ++j)
          cfg.spin[static_cast<std::size_t>(bf.sites[static_cast<std::size_t>(j)])] =
              (m >> j & 1) ? 1 : -1;
        for (int j = 0; j < nb; ++j) {
          Vertex site = bf.sites[static_cast<std::size_t>(inner[static_cast<std::size_t>(j)])];
          double pp = heat_bath_plus_probability(P, t, omega, bc, cfg, site);
          double r = (q >> j & 1) ? 1.0 - pp : pp;
          std::size_t q2 = q ^ (std::size_t(1) << j);
          Sb(static_cast<int>(q), static_cast<int>(q2)) = -r;  // filled as sqrt later
          esc[q] += r;
        }
      }
      // Symmetrize using the geometric mean of opposing rates.
      for (std::size_t q = 0; q < bs; ++q)
        for (int j = 0; j < nb; ++j) {
          std::size_t q2 = q ^ (std::size_t(1) << j);
          if (q < q2) {
            double g = std::sqrt(Sb(static_cast<int>(q), static_cast<int>(q2)) *
                                 Sb(static_cast<int>(q2), static_cast<int>(q)));
            Sb(static_cast<int>(q), static_cast<int>(q2)) = -g;
            Sb(static_cast<int>(q2), static_cast<int>(q)) = -g;
          }
        }
      for (std::size_t q = 0; q < bs; ++q) Sb(static_cast<int>(q), static_cast<int>(q)) = esc[q];
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> esb(Sb);
      if (esb.info() != Eigen::Success) throw std::runtime_error("block gap: inner eigensolver failed");
      worst = std::min(worst, esb.eigenvalues()(1));
      if (sub == 0) break;
      sub = (sub - 1) & outside_bits;
    }
  }
  out.min_block_gap = worst;
  out.single_site_bound = out.block_chain_gap * out.min_block_gap / static_cast<double>(ell1);
  return out;
}

// ---------------------------------------------------------------------------
// Variance-mixing criterion.

struct VmCheckResult {
  double worst_ratio = 0.0;   // max over x of Var(E[sigma_x | sigma_D]) / Var(sigma_x)
  double threshold = 0.0;     // r^{ell1}
  bool satisfied = true;
  Vertex worst_vertex = -1;
};

// For every free vertex x, conditions on the spins at distance exactly ell1
// below x and measures how much of Var(sigma_x) the conditioning explains.
inline VmCheckResult vm_mixing_check(const ModelParams& P, const TreeShape& t,
                                     const ObstacleEnv* omega, const BoundarySpec& bc, int ell1,
                                     double r) {
  P.validate();
  if (ell1 < 1) throw std::invalid_argument("vm check: ell1 must be >= 1");
  if (!(r > 0.0)) throw std::invalid_argument("vm check: r must be > 0");
  BruteForceGibbs bf = brute_force_gibbs(P, t, omega, bc, 15);
  const std::size_t states = bf.prob.size();

  VmCheckResult out;
  out.threshold = std::pow(r, ell1);
  for (std::size_t i = 0; i < bf.sites.size(); ++i) {
    Vertex x = bf.sites[i];
    std::size_t dmask = 0;
    for (Vertex y : descendants_at_depth(t, x, ell1)) {
      int j = bf.site_index[static_cast<std::size_t>(y)];
      if (j >= 0) dmask |= std::size_t(1) << j;
    }
    // Group by the conditioning spins; accumulate mass and conditional mean.
    std::vector<double> mass(states, 0.0), meansum(states, 0.0);
    double mean = 0.0;
    for (std::size_t m = 0; m < states; ++m) {
      double s = (m >> i & 1) ? 1.0 : -1.0;
      mass[m & dmask] += bf.prob[m];
      meansum[m & dmask] += bf.prob[m] * s;
      mean += bf.prob[m] * s;
    }
    double var = 1.0 - mean * mean;
    if (var <= 1e-15) continue;
    double var_cond = 0.0;
    std::size_t sub = dmask;
    while (true) {
      if (mass[sub] > 0.0) {
        double ce = meansum[sub] / mass[sub];
        var_cond += mass[sub] * (ce - mean) * (ce - mean);
      }
      if (sub == 0) break;
      sub = (sub - 1) & dmask;
    }
    double ratio = var_cond / var;
    if (ratio > out.worst_ratio) {
      out.worst_ratio = ratio;
      out.worst_vertex = x;
    }
  }
  out.satisfied = out.worst_ratio <= out.threshold;
  return out;
}

// ---------------------------------------------------------------------------
// Log-Sobolev upper bound.

struct LogSobBound {
  double bound = kInf;   // best ratio found; an upper bound on c_sob
  int restarts_used = 0;
};

namespace detail {

// (1 + v) log(1 + v) - v, nonnegative for v > -1, with a series branch so
// small v loses no precision to cancellation.
inline double xlogx_excess(double v) {
  if (std::abs(v) < 1e-4)
    return v * v * (0.5 + v * (-1.0 / 6.0 + v * (1.0 / 12.0 - v / 20.0)));
  return (1.0 + v) * std::log1p(v) - v;
}

}  // namespace detail

// Minimizes E(sqrt f, sqrt f) / Ent(f) over positive f = exp(u) by gradient
// descent with backtracking from random starts. The infimum definition makes
// any found ratio an upper bound on c_sob.
inline LogSobBound logsob_upper_bound(const GeneratorMatrix& G, int n_restarts,
                                      std::uint64_t seed = 0x4c4f4753ULL) {
  const std::size_t states = G.states();
  const int k = G.nsites();
  if (n_restarts < 1) throw std::invalid_argument("logsob: need at least one restart");

  auto objective = [&](const std::vector<double>& u, std::vector<double>* grad) {
    // f = exp(u), g = exp(u/2).
    std::vector<double> f(states), g(states);
    for (std::size_t m = 0; m < states; ++m) {
      f[m] = std::exp(u[m]);
      g[m] = std::exp(0.5 * u[m]);
    }
    double mf = 0.0;
    for (std::size_t m = 0; m < states; ++m) mf += G.mu[m] * f[m];
    // Ent(f) = mf * sum_m mu_m h(f_m / mf - 1) with h(v) = (1+v)log(1+v) - v:
    // every term is nonnegative, so nothing cancels and the ratio stays
    // trustworthy arbitrarily close to the flat function. The naive
    // mu[f log f] - mf log mf form loses all digits there and can report a
    // ratio below the true constant, which would break the upper-bound
    // contract.
    double ent = 0.0;
    for (std::size_t m = 0; m < states; ++m)
      ent += G.mu[m] * detail::xlogx_excess(f[m] / mf - 1.0);
    ent *= mf;
    // Same idea for the form: sqrt f differences via (f - f') / (g + g').
    double dir = 0.0;
    for (std::size_t m = 0; m < states; ++m)
      for (int i = 0; i < k; ++i) {
        std::size_t m2 = m ^ (std::size_t(1) << i);
        double d = (f[m] - f[m2]) / (g[m] + g[m2]);
        dir += 0.5 * G.mu[m] * G.flip_rate(m, i) * d * d;
      }
    if (ent <= 1e-13) return kInf;
    double ratio = dir / ent;
    if (grad) {
      // dE/du_m = mu_m g_m * sum_i rate(m,i) (g_m - g_{m^i}) * 1/2 ... using
      // symmetry of the form, d/dg_m E = 2 * mu_m sum_i rate (g_m - g_m2),
      // and dg_m/du_m = g_m / 2.
      std::vector<double> dE(states, 0.0);
      for (std::size_t m = 0; m < states; ++m) {
        double acc = 0.0;
        for (int i = 0; i < k; ++i) {
          std::size_t m2 = m ^ (std::size_t(1) << i);
          acc += G.flip_rate(m, i) * (g[m] - g[m2]);
        }
        dE[m] = G.mu[m] * acc * g[m];  // (2 * mu * acc) * (g / 2)
      }
      // dEnt/du_m = mu_m f_m (u_m + 1) - (1 + log mf) mu_m f_m.
      for (std::size_t m = 0; m < states; ++m) {
        double dent = G.mu[m] * f[m] * (u[m] - std::log(mf));
        (*grad)[m] = (dE[m] - ratio * dent) / ent;
      }
    }
    return ratio;
  };

  LogSobBound best;
  Stream rng(seed);
  for (int rs = 0; rs < n_restarts; ++rs) {
    std::vector<double> u(states);
    for (double& x : u) x = 2.0 * (rng.next_unit() - 0.5);
    std::vector<double> grad(states), trial(states);
    double cur = objective(u, &grad);
    if (!std::isfinite(cur)) continue;
    double step = 0.5;
    for (int it = 0; it < 400; ++it) {
      double gn2 = detail::dot(grad, grad);
      if (gn2 < 1e-18) break;
      bool moved = false;
      while (step > 1e-12) {
        for (std::size_t m = 0; m < states; ++m) trial[m] = u[m] - step * grad[m];
        double val = objective(trial, nullptr);
        if (val < cur - 1e-12 * std::abs(cur)) {
          u = trial;
          cur = objective(u, &grad);
          step *= 1.6;
          moved = true;
          break;
        }
        step *= 0.5;
      }
      if (!moved) break;
    }
    if (std::isfinite(cur) && cur < best.bound) best.bound = cur;
    best.restarts_used = rs + 1;
  }

  // Ray polish: along f = 1 + eps * phi with phi the gap eigenfunction, the
  // ratio tends to gap/2 from above as eps -> 0 (and c_sob <= gap/2 always),
  // so scanning small eps guarantees the bound is never worse than gap/2 up
  // to rounding, even when the descent stalls on the flat direction.
  {
    std::vector<double> psi;
    double gap = detail::lanczos_gap(G, &psi);
    (void)gap;
    std::vector<double> phi(states);
    double phimax = 0.0;
    for (std::size_t m = 0; m < states; ++m) {
      phi[m] = psi[m] / std::sqrt(G.mu[m]);
      phimax = std::max(phimax, std::abs(phi[m]));
    }
    std::vector<double> u(states);
    for (double eps = 0.45 / phimax; eps > 1e-7 / phimax; eps *= 0.5) {
      for (std::size_t m = 0; m < states; ++m) u[m] = std::log1p(eps * phi[m]);
      double val = objective(u, nullptr);
      if (std::isfinite(val) && val < best.bound) best.bound = val;
    }
  }

  if (!std::isfinite(best.bound))
    throw std::runtime_error("logsob: every restart collapsed to a constant function");
  return best;
}

// ---------------------------------------------------------------------------
// Variance-decay gap estimate for large regions.

struct VarianceDecayResult {
  double gap = 0.0;
  double gap_se = 0.0;
  double r_squared = 0.0;
  bool flagged = false;                 // poor exponential fit or empty window
  std::vector<double> times;            // grid points that entered the fit
  std::vector<double> variances;        // estimated Var(P_t f) on that window
  std::vector<double> variance_ses;     // jackknife errors
};

// Estimates Var_mu(P_t sigma_root) on a time grid and fits its log slope.
// Each sample draws an equilibrium start by the exact top-down sampler, then
// runs two independent trajectories from it: X Y is an unbiased estimate of
// (P_t f)^2 in the mean. Fit by GLS with a jackknife covariance; the window
// drops grid points with relative error above 30%.
inline VarianceDecayResult variance_decay_gap(const ModelParams& P, const TreeShape& t,
                                              const BoundarySpec& bc,
                                              const std::vector<double>& t_grid, long n_samples,
                                              std::uint64_t seed, int workers = 0) {
  P.validate();
  check_boundary(t, bc, false);
  if (P.b != t.b) throw std::invalid_argument("variance decay: branching number mismatch");
  if (t_grid.size() < 2) throw std::invalid_argument("variance decay: need at least 2 grid points");
  if (n_samples < 8) throw std::invalid_argument("variance decay: need at least 8 samples");
  std::vector<double> grid(t_grid);
  std::sort(grid.begin(), grid.end());
  if (grid.front() < 0.0) throw std::invalid_argument("variance decay: negative time");
  const std::size_t ng = grid.size();
  const double t_max = grid.back();

  RecursionResult rr = r_recursion(P, t, nullptr, bc);

  // Per-sample products X(t) Y(t) and means, deterministic slot layout.
  std::vector<double> xy(static_cast<std::size_t>(n_samples) * ng);
  std::vector<double> xs(static_cast<std::size_t>(n_samples) * ng);
  parallel_items(n_samples, workers, [&](long i) {
    Stream eq(derive_key(seed, 2 * static_cast<std::uint64_t>(i)));
    std::vector<std::int8_t> start = sample_gibbs_topdown(P, t, rr, eq);
    SpinConfig eta0{start};
    std::uint64_t dseed = derive_key(seed, 2 * static_cast<std::uint64_t>(i) + 1);
    Trajectory X = simulate(P, t, nullptr, bc, eta0, CouplingDriver(derive_key(dseed, 0), t_max),
                            grid, /*record_updates=*/false);
    Trajectory Y = simulate(P, t, nullptr, bc, eta0, CouplingDriver(derive_key(dseed, 1), t_max),
                            grid, /*record_updates=*/false);
    for (std::size_t gidx = 0; gidx < ng; ++gidx) {
      double xv = X.snapshots[gidx].spin[0];
      double yv = Y.snapshots[gidx].spin[0];
      xy[static_cast<std::size_t>(i) * ng + gidx] = xv * yv;
      xs[static_cast<std::size_t>(i) * ng + gidx] = 0.5 * (xv + yv);
    }
  });

  // Variance estimates and delete-1 jackknife replicates of log-variance.
  const double n = static_cast<double>(n_samples);
  std::vector<double> sum_xy(ng, 0.0), sum_x(ng, 0.0);
  for (long i = 0; i < n_samples; ++i)
    for (std::size_t g = 0; g < ng; ++g) {
      sum_xy[g] += xy[static_cast<std::size_t>(i) * ng + g];
      sum_x[g] += xs[static_cast<std::size_t>(i) * ng + g];
    }
  std::vector<double> vhat(ng);
  for (std::size_t g = 0; g < ng; ++g) {
    double m = sum_x[g] / n;
    vhat[g] = sum_xy[g] / n - m * m;
  }

  std::vector<std::vector<double>> jack(static_cast<std::size_t>(n_samples),
                                        std::vector<double>(ng));
  for (long i = 0; i < n_samples; ++i)
    for (std::size_t g = 0; g < ng; ++g) {
      double sxy = sum_xy[g] - xy[static_cast<std::size_t>(i) * ng + g];
      double sx = sum_x[g] - xs[static_cast<std::size_t>(i) * ng + g];
      double m = sx / (n - 1.0);
      jack[static_cast<std::size_t>(i)][g] = sxy / (n - 1.0) - m * m;
    }

  // Jackknife SE of vhat per grid point.
  std::vector<double> vse(ng, 0.0);
  for (std::size_t g = 0; g < ng; ++g) {
    double mean_j = 0.0;
    for (long i = 0; i < n_samples; ++i) mean_j += jack[static_cast<std::size_t>(i)][g];
    mean_j /= n;
    double s2 = 0.0;
    for (long i = 0; i < n_samples; ++i) {
      double d = jack[static_cast<std::size_t>(i)][g] - mean_j;
      s2 += d * d;
    }
    vse[g] = std::sqrt(s2 * (n - 1.0) / n);
  }

  // Window: relative error <= 30% and positive variance.
  std::vector<std::size_t> win;
  for (std::size_t g = 0; g < ng; ++g)
    if (vhat[g] > 0.0 && vse[g] / vhat[g] <= 0.30) win.push_back(g);

  VarianceDecayResult out;
  for (std::size_t g : win) {
    out.times.push_back(grid[g]);
    out.variances.push_back(vhat[g]);
    out.variance_ses.push_back(vse[g]);
  }
  if (win.size() < 2) {
    out.flagged = true;
    return out;
  }

  // GLS on log vhat with the jackknife covariance across the window.
  const std::size_t w = win.size();
  Eigen::MatrixXd C = Eigen::MatrixXd::Zero(static_cast<int>(w), static_cast<int>(w));
  std::vector<double> logj_mean(w, 0.0);
  std::vector<std::vector<double>> logj(static_cast<std::size_t>(n_samples),
                                        std::vector<double>(w));
  for (long i = 0; i < n_samples; ++i)
    for (std::size_t a = 0; a < w; ++a) {
      double v = std::max(jack[static_cast<std::size_t>(i)][win[a]], 1e-300);
      logj[static_cast<std::size_t>(i)][a] = std::log(v);
      logj_mean[a] += logj[static_cast<std::size_t>(i)][a];
    }
  for (std::size_t a = 0; a < w; ++a) logj_mean[a] /= n;
  for (long i = 0; i < n_samples; ++i)
    for (std::size_t a = 0; a < w; ++a)
      for (std::size_t b2 = 0; b2 < w; ++b2)
        C(static_cast<int>(a), static_cast<int>(b2)) +=
            (logj[static_cast<std::size_t>(i)][a] - logj_mean[a]) *
            (logj[static_cast<std::size_t>(i)][b2] - logj_mean[b2]);
  C *= (n - 1.0) / n;
  // Regularize mildly to keep the solve stable.
  for (std::size_t a = 0; a < w; ++a) C(static_cast<int>(a), static_cast<int>(a)) *= 1.0 + 1e-8;

  Eigen::MatrixXd X(static_cast<int>(w), 2);
  Eigen::VectorXd yv(static_cast<int>(w));
  for (std::size_t a = 0; a < w; ++a) {
    X(static_cast<int>(a), 0) = 1.0;
    X(static_cast<int>(a), 1) = grid[win[a]];
    yv(static_cast<int>(a)) = std::log(vhat[win[a]]);
  }
  Eigen::MatrixXd Ci = C.ldlt().solve(Eigen::MatrixXd::Identity(static_cast<int>(w),
                                                                static_cast<int>(w)));
  Eigen::Matrix2d A = X.transpose() * Ci * X;
  Eigen::Vector2d rhs = X.transpose() * Ci * yv;
  Eigen::Vector2d coef = A.ldlt().solve(rhs);
  Eigen::Matrix2d cov = A.inverse();

  out.gap = -coef(1) / 2.0;
  out.gap_se = std::sqrt(std::max(cov(1, 1), 0.0)) / 2.0;

  // Ordinary R^2 of the fit on the window.
  double ss_res = 0.0, ss_tot = 0.0, ymean = 0.0;
  for (std::size_t a = 0; a < w; ++a) ymean += yv(static_cast<int>(a));
  ymean /= static_cast<double>(w);
  for (std::size_t a = 0; a < w; ++a) {
    double fit = coef(0) + coef(1) * grid[win[a]];
    ss_res += (yv(static_cast<int>(a)) - fit) * (yv(static_cast<int>(a)) - fit);
    ss_tot += (yv(static_cast<int>(a)) - ymean) * (yv(static_cast<int>(a)) - ymean);
  }
  out.r_squared = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 0.0;
  if (out.r_squared < 0.9) out.flagged = true;
  return out;
}

}  // namespace treeq
