#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>

#include "greenfn/grid.hpp"
#include "greenfn/kernels.hpp"

namespace greenfn {

struct FunctionSample {
  GridPtr grid;
  Vector values;
};

/// Seeded random stream. Identical seed and call sequence give bit-identical
/// draws; split() derives independent per-worker streams.
class RngState {
 public:
  explicit RngState(uint64_t seed) : seed_(seed), engine_(seed) {}

  uint64_t seed() const { return seed_; }

  double normal() { return normal_(engine_); }
  double uniform() { return unif_(engine_); }

  Vector normal_vector(Eigen::Index n) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  /// Independent stream for substream `index` (splitmix64 of seed ^ index).
  RngState split(uint64_t index) const {
    uint64_t z = seed_ + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return RngState(z ^ (z >> 31));
  }

 private:
  uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> unif_{0.0, 1.0};
};

/// Brownian bridge on [0,1] via its sine Karhunen-Loeve expansion,
/// B(x) = offset + scale * sigma * sum_k xi_k sqrt(2) sin(pi k x)/(pi k),
/// with an optional constant Gaussian offset.
inline FunctionSample sample_brownian_bridge(const GridPtr& grid, int n_modes,
                                             double sigma, double scale,
                                             double offset_sigma, RngState& rng) {
  if (grid->dims() != 1 || std::abs(grid->bounds()[0].lo) > 1e-12 ||
      std::abs(grid->bounds()[0].hi - 1.0) > 1e-12)
    throw std::invalid_argument("sample_brownian_bridge: grid must cover [0,1]");
  if (n_modes < 1) throw std::invalid_argument("sample_brownian_bridge: n_modes >= 1");
  if (offset_sigma < 0)
    throw std::invalid_argument("sample_brownian_bridge: negative offset_sigma");

  Vector xi = rng.normal_vector(n_modes);
  const double offset = offset_sigma > 0 ? offset_sigma * rng.normal() : 0.0;
  Vector vals = Vector::Constant(grid->size(), offset);
  for (Eigen::Index i = 0; i < grid->size(); ++i) {
    const double x = grid->points()(i, 0);
    double s = 0.0;
    for (int k = 1; k <= n_modes; ++k)
      s += xi[k - 1] * std::numbers::sqrt2 * detail::sinpi(k * x) /
           (std::numbers::pi * k);
    vals[i] += scale * sigma * s;
  }
  return {grid, std::move(vals)};
}

/// Numerically eigendecomposed covariance basis for Karhunen-Loeve sampling.
/// Solves the weighted eigenproblem of the covariance operator on the grid
/// (square-root weight symmetrization) and keeps the top n_modes pairs.
struct KlBasis {
  GridPtr grid;
  Vector eigenvalues;  // descending, clipped at zero
  Matrix modes;        // columns: sqrt(lambda_k) * phi_k on grid points
};

inline KlBasis make_kl_basis(const GridPtr& grid, const Kernel& covariance,
                             int n_modes) {
  if (n_modes < 1 || n_modes > grid->size())
    throw std::invalid_argument("make_kl_basis: need 1 <= n_modes <= grid size");
  if (covariance.arity() != grid->dims())
    throw std::invalid_argument("make_kl_basis: covariance arity mismatch");

  const Matrix C = gram_cross(covariance, grid->points(), grid->points());
  const Vector sqw = grid->weights().cwiseSqrt();
  Matrix A = sqw.asDiagonal() * C * sqw.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (A + A.transpose()));
  const Eigen::Index m = grid->size();
  const double lmax = eig.eigenvalues().cwiseAbs().maxCoeff();
  if (eig.eigenvalues().minCoeff() < -1e-8 * lmax)
    throw std::runtime_error("make_kl_basis: covariance is not numerically PSD");

  KlBasis basis;
  basis.grid = grid;
  basis.eigenvalues.resize(n_modes);
  basis.modes.resize(m, n_modes);
  for (int k = 0; k < n_modes; ++k) {
    const Eigen::Index idx = m - 1 - k;  // eigensolver sorts ascending
    const double lam = std::max(eig.eigenvalues()[idx], 0.0);
    basis.eigenvalues[k] = lam;
    basis.modes.col(k) =
        std::sqrt(lam) * (eig.eigenvectors().col(idx).array() / sqw.array()).matrix();
  }
  return basis;
}

inline FunctionSample sample_kl(const KlBasis& basis, RngState& rng) {
  Vector xi = rng.normal_vector(basis.modes.cols());
  return {basis.grid, basis.modes * xi};
}

/// Mean-zero field with exponential covariance exp(-|x-y|/l), sampled through
/// its numerically computed Karhunen-Loeve expansion.
inline FunctionSample sample_kl_exponential(const GridPtr& grid, int n_modes,
                                            double length_l, RngState& rng) {
  const auto cov = make_exponential_cov(length_l, grid->dims());
  return sample_kl(make_kl_basis(grid, *cov, n_modes), rng);
}

/// Weighted root-mean-square of a sample over its grid.
inline double weighted_rms(const FunctionSample& s) {
  const double vol = s.grid->volume();
  return std::sqrt(s.grid->integrate(s.values.cwiseAbs2()) / vol);
}

/// Additive Gaussian noise with per-sample standard deviation
/// level * weighted RMS of the sample.
inline FunctionSample add_noise(const FunctionSample& sample, double level,
                                RngState& rng) {
  if (level < 0) throw std::invalid_argument("add_noise: level must be >= 0");
  if (level == 0) return sample;
  const double sd = level * weighted_rms(sample);
  FunctionSample out{sample.grid, sample.values};
  for (Eigen::Index i = 0; i < out.values.size(); ++i)
    out.values[i] += sd * rng.normal();
  return out;
}

}  // namespace greenfn
