#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cmath>
#include <memory>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "greenfn/grid.hpp"

namespace greenfn {

class Kernel;
using KernelPtr = std::shared_ptr<const Kernel>;

namespace detail {

/// sin(pi t) with exact zeros at integer t, so Dirichlet boundary values
/// vanish exactly on grid endpoints.
inline double sinpi(double t) {
  double m = std::fmod(t, 2.0);
  if (m < 0) m += 2.0;
  double sign = 1.0;
  if (m >= 1.0) {
    m -= 1.0;
    sign = -1.0;
  }
  if (m > 0.5) m = 1.0 - m;
  return sign * std::sin(std::numbers::pi * m);
}

/// Dense row-major tensor, just enough for kernel mode contractions.
struct Tensor {
  std::vector<double> data;
  std::vector<Eigen::Index> dims;

  Eigen::Index size() const {
    Eigen::Index n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

/// Contract axis `axis` of T (size c) against B (r x c); the axis size
/// becomes r. Layout is row-major throughout.
inline Tensor mode_apply(const Tensor& T, int axis, const Matrix& B) {
  const Eigen::Index c = T.dims[axis];
  const Eigen::Index r = B.rows();
  if (B.cols() != c) throw std::logic_error("mode_apply: shape mismatch");
  Eigen::Index outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= T.dims[d];
  for (size_t d = axis + 1; d < T.dims.size(); ++d) inner *= T.dims[d];

  Tensor out;
  out.dims = T.dims;
  out.dims[axis] = r;
  out.data.resize(outer * r * inner);
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  for (Eigen::Index o = 0; o < outer; ++o) {
    Eigen::Map<const RowMat> slice(T.data.data() + o * c * inner, c, inner);
    Eigen::Map<RowMat> dst(out.data.data() + o * r * inner, r, inner);
    dst.noalias() = B * slice;
  }
  return out;
}

/// Permute tensor axes: output axis i is input axis perm[i].
inline Tensor transpose(const Tensor& T, const std::vector<int>& perm) {
  const int nd = static_cast<int>(T.dims.size());
  Tensor out;
  out.dims.resize(nd);
  for (int i = 0; i < nd; ++i) out.dims[i] = T.dims[perm[i]];
  out.data.resize(T.data.size());

  std::vector<Eigen::Index> in_stride(nd, 1), out_stride(nd, 1);
  for (int d = nd - 2; d >= 0; --d) in_stride[d] = in_stride[d + 1] * T.dims[d + 1];
  for (int d = nd - 2; d >= 0; --d) out_stride[d] = out_stride[d + 1] * out.dims[d + 1];

  std::vector<Eigen::Index> idx(nd, 0);
  const Eigen::Index total = T.size();
  for (Eigen::Index flat = 0; flat < total; ++flat) {
    Eigen::Index src = 0;
    for (int d = 0; d < nd; ++d) src += idx[d] * in_stride[perm[d]];
    out.data[flat] = T.data[src];
    for (int d = nd - 1; d >= 0; --d) {
      if (++idx[d] < out.dims[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

}  // namespace detail

/// One factor of a separable kernel term: a 1D kernel linking one coordinate
/// of the first argument tuple to one coordinate of the second.
struct SepFactor {
  KernelPtr base;  // arity-1 kernel
  int row_axis = 0;
  int col_axis = 0;
};

struct SepTerm {
  double coef = 1.0;
  std::vector<SepFactor> factors;
};

/// Indicator pair for causal masking: kernel vanishes unless
/// point[t_axis] <= point[s_axis] (or >= for anticausal) in both arguments.
struct CausalPair {
  int t_axis = 0;
  int s_axis = 0;
  bool anticausal = false;

  bool pass(std::span<const double> pt) const {
    return anticausal ? pt[t_axis] >= pt[s_axis] : pt[t_axis] <= pt[s_axis];
  }
};

/// Sum-of-separable-terms representation with optional causal indicators.
/// Every term must pair each coordinate of the first argument with exactly
/// one coordinate of the second.
struct SeparableForm {
  int arity = 0;
  std::vector<SepTerm> terms;
  std::vector<CausalPair> masks;
};

class SineSeriesKernel;

/// A reproducing kernel on pairs of d-tuples. Immutable; evaluation is pure.
class Kernel {
 public:
  virtual ~Kernel() = default;
  virtual int arity() const = 0;
  virtual double eval(std::span<const double> p, std::span<const double> q) const = 0;
  virtual nlohmann::json to_json() const = 0;
  virtual bool lower_separable(SeparableForm&) const { return false; }
  virtual const SineSeriesKernel* as_sine_series() const { return nullptr; }
};

inline double eval_kernel(const Kernel& k, std::span<const double> p,
                          std::span<const double> q) {
  if (static_cast<int>(p.size()) != k.arity() ||
      static_cast<int>(q.size()) != k.arity())
    throw std::invalid_argument("eval_kernel: tuple length does not match kernel arity");
  return k.eval(p, q);
}

/// Gram block: entry (i,j) = K(rows[i], cols[j]). Rows of the point matrices
/// are coordinate tuples.
inline Matrix gram_cross(const Kernel& k, const Matrix& rows, const Matrix& cols) {
  if (rows.cols() != k.arity() || cols.cols() != k.arity())
    throw std::invalid_argument("gram_cross: point dimension does not match kernel arity");
  Matrix out(rows.rows(), cols.rows());
  std::vector<double> p(k.arity()), q(k.arity());
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    for (int d = 0; d < k.arity(); ++d) p[d] = rows(i, d);
    for (Eigen::Index j = 0; j < cols.rows(); ++j) {
      for (int d = 0; d < k.arity(); ++d) q[d] = cols(j, d);
      out(i, j) = k.eval(p, q);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Base kernels
// ---------------------------------------------------------------------------

/// Product of axis-wise normalized Gaussians with diagonal covariance,
/// (2pi)^{-d/2} |Sigma|^{-1/2} exp(-1/2 (p-q)^T Sigma^{-1} (p-q)).
class GaussianKernel final : public Kernel {
 public:
  explicit GaussianKernel(std::vector<double> variances)
      : variances_(std::move(variances)) {
    if (variances_.empty())
      throw std::invalid_argument("gaussian: need at least one axis variance");
    for (double v : variances_)
      if (!(v > 0)) throw std::invalid_argument("gaussian: variances must be positive");
  }

  int arity() const override { return static_cast<int>(variances_.size()); }

  double eval(std::span<const double> p, std::span<const double> q) const override {
    double v = 1.0;
    for (size_t d = 0; d < variances_.size(); ++d)
      v *= axis_eval(p[d], q[d], variances_[d]);
    return v;
  }

  static double axis_eval(double a, double b, double var) {
    const double z = a - b;
    return std::exp(-0.5 * z * z / var) / std::sqrt(2.0 * std::numbers::pi * var);
  }

  bool lower_separable(SeparableForm& out) const override;

  nlohmann::json to_json() const override {
    return {{"type", "gaussian"}, {"variances", variances_}};
  }

  const std::vector<double>& variances() const { return variances_; }

 private:
  std::vector<double> variances_;
};

/// Reproducing kernel of the order-m tail space of W_m^2([0,1]) (functions
/// with vanishing derivatives through order m-1 at 0):
/// K(x,y) = integral of G_m(x,z) G_m(y,z) dz with G_m(x,z) = (x-z)_+^{m-1}/(m-1)!.
/// m=1 gives min(x,y); m=2 integrates to a*a*(3*max - a)/6 with a = min(x,y).
class SobolevTailKernel final : public Kernel {
 public:
  explicit SobolevTailKernel(int m) : m_(m) {
    if (m_ != 1 && m_ != 2)
      throw std::invalid_argument("sobolev_m_tail: only m=1 and m=2 are supported");
  }

  int arity() const override { return 1; }

  double eval(std::span<const double> p, std::span<const double> q) const override {
    const double x = p[0], y = q[0];
    if (m_ == 1) return std::min(x, y);
    const double a = std::min(x, y), b = std::max(x, y);
    return a * a * (3.0 * b - a) / 6.0;
  }

  bool lower_separable(SeparableForm& out) const override {
    out.arity = 1;
    out.terms.assign(1, SepTerm{});
    out.terms[0].factors.push_back({std::make_shared<SobolevTailKernel>(m_), 0, 0});
    return true;
  }

  nlohmann::json to_json() const override {
    return {{"type", "sobolev_m_tail"}, {"m", m_}};
  }

  int order() const { return m_; }

 private:
  int m_;
};

/// Brownian bridge covariance sigma^2 (min(x,y) - x y) on [0,1].
class BrownianBridgeCovKernel final : public Kernel {
 public:
  explicit BrownianBridgeCovKernel(double sigma2) : sigma2_(sigma2) {
    if (!(sigma2_ > 0)) throw std::invalid_argument("brownian_bridge_cov: sigma2 must be positive");
  }

  int arity() const override { return 1; }

  double eval(std::span<const double> p, std::span<const double> q) const override {
    return sigma2_ * (std::min(p[0], q[0]) - p[0] * q[0]);
  }

  bool lower_separable(SeparableForm& out) const override {
    out.arity = 1;
    out.terms.assign(1, SepTerm{});
    out.terms[0].factors.push_back(
        {std::make_shared<BrownianBridgeCovKernel>(sigma2_), 0, 0});
    return true;
  }

  nlohmann::json to_json() const override {
    return {{"type", "brownian_bridge_cov"}, {"sigma2", sigma2_}};
  }

 private:
  double sigma2_;
};

/// Ornstein-Uhlenbeck covariance exp(-|p-q|/l).
class ExponentialCovKernel final : public Kernel {
 public:
  ExponentialCovKernel(double length, int dims = 1) : length_(length), dims_(dims) {
    if (!(length_ > 0)) throw std::invalid_argument("exponential_cov: length must be positive");
    if (dims_ < 1) throw std::invalid_argument("exponential_cov: dims must be >= 1");
  }

  int arity() const override { return dims_; }

  double eval(std::span<const double> p, std::span<const double> q) const override {
    double s = 0.0;
    for (int d = 0; d < dims_; ++d) {
      const double z = p[d] - q[d];
      s += z * z;
    }
    return std::exp(-std::sqrt(s) / length_);
  }

  bool lower_separable(SeparableForm& out) const override {
    if (dims_ != 1) return false;
    out.arity = 1;
    out.terms.assign(1, SepTerm{});
    out.terms[0].factors.push_back(
        {std::make_shared<ExponentialCovKernel>(length_, 1), 0, 0});
    return true;
  }

  nlohmann::json to_json() const override {
    return {{"type", "exponential_cov"}, {"length", length_}, {"dims", dims_}};
  }

 private:
  double length_;
  int dims_;
};

/// Sine-series kernel of the Dirichlet Sobolev-1 space on [0,1]^d:
/// 2^d sum over k in N^d of prod_i sin(pi k_i p_i) sin(pi k_i q_i) / (pi^2 |k|^2),
/// truncated at N terms per index.
class SineSeriesKernel final : public Kernel {
 public:
  SineSeriesKernel(int dims, int n_series = 200) : dims_(dims), n_(n_series) {
    if (dims_ < 1) throw std::invalid_argument("sobolev1_dirichlet: dims must be >= 1");
    if (n_ < 1) throw std::invalid_argument("sobolev1_dirichlet: series truncation must be >= 1");
    double guard = 1.0;
    for (int d = 0; d < dims_; ++d) {
      guard *= n_;
      if (guard > 2e7)
        throw std::invalid_argument("sobolev1_dirichlet: series tensor too large; lower N or dims");
    }
  }

  int arity() const override { return dims_; }

  double eval(std::span<const double> p, std::span<const double> q) const override {
    // Iterate over the d-dimensional index box; d is 2 in practice.
    Matrix feats(dims_, n_);
    for (int d = 0; d < dims_; ++d)
      for (int k = 1; k <= n_; ++k)
        feats(d, k - 1) = std::sin(std::numbers::pi * k * p[d]) *
                          std::sin(std::numbers::pi * k * q[d]);
    const double scale = std::pow(2.0, dims_) / (std::numbers::pi * std::numbers::pi);
    double total = 0.0;
    std::vector<int> idx(dims_, 1);
    while (true) {
      double prod = 1.0;
      double k2 = 0.0;
      for (int d = 0; d < dims_; ++d) {
        prod *= feats(d, idx[d] - 1);
        k2 += static_cast<double>(idx[d]) * idx[d];
      }
      total += prod / k2;
      int d = dims_ - 1;
      while (d >= 0 && ++idx[d] > n_) idx[d--] = 1;
      if (d < 0) break;
    }
    return scale * total;
  }

  const SineSeriesKernel* as_sine_series() const override { return this; }

  /// sin(pi k x) feature matrix, one row per point, one column per mode.
  Matrix features(const Vector& pts) const {
    Matrix S(pts.size(), n_);
    for (Eigen::Index i = 0; i < pts.size(); ++i)
      for (int k = 1; k <= n_; ++k)
        S(i, k - 1) = std::sin(std::numbers::pi * k * pts[i]);
    return S;
  }

  int n_series() const { return n_; }

  /// Series coefficient tensor 2^d / (pi^2 (k_1^2 + ... + k_d^2)).
  detail::Tensor coefficients() const {
    detail::Tensor rho;
    rho.dims.assign(dims_, n_);
    rho.data.resize(rho.size());
    const double scale = std::pow(2.0, dims_) / (std::numbers::pi * std::numbers::pi);
    std::vector<int> idx(dims_, 1);
    for (Eigen::Index flat = 0; flat < rho.size(); ++flat) {
      double k2 = 0.0;
      for (int d = 0; d < dims_; ++d) k2 += static_cast<double>(idx[d]) * idx[d];
      rho.data[flat] = scale / k2;
      int d = dims_ - 1;
      while (d >= 0 && ++idx[d] > n_) idx[d--] = 1;
    }
    return rho;
  }

  nlohmann::json to_json() const override {
    return {{"type", "sobolev1_dirichlet"}, {"dims", dims_}, {"n_series", n_}};
  }

 private:
  int dims_;
  int n_;
};

// ---------------------------------------------------------------------------
// Structural transforms
// ---------------------------------------------------------------------------

/// Product of kernels acting on disjoint consecutive axis blocks.
class ProductKernel final : public Kernel {
 public:
  explicit ProductKernel(std::vector<KernelPtr> factors) : factors_(std::move(factors)) {
    if (factors_.empty()) throw std::invalid_argument("product: empty factor list");
    arity_ = 0;
    for (const auto& f : factors_) {
      offsets_.push_back(arity_);
      arity_ += f->arity();
    }
  }

  int arity() const override { return arity_; }

  double eval(std::span<const double> p, std::span<const double> q) const override {
    double v = 1.0;
    for (size_t i = 0; i < factors_.size(); ++i) {
      const int off = offsets_[i], d = factors_[i]->arity();
      v *= factors_[i]->eval(p.subspan(off, d), q.subspan(off, d));
    }
    return v;
  }

  bool lower_separable(SeparableForm& out) const override {
    out.arity = arity_;
    out.terms.assign(1, SepTerm{});
    for (size_t i = 0; i < factors_.size(); ++i) {
      SeparableForm sub;
      if (!factors_[i]->lower_separable(sub)) return false;
      if (sub.terms.size() != 1 || !sub.masks.empty()) return false;
      for (auto f : sub.terms[0].factors) {
        f.row_axis += offsets_[i];
        f.col_axis += offsets_[i];
        out.terms[0].factors.push_back(std::move(f));
      }
      out.terms[0].coef *= sub.terms[0].coef;
    }
    return true;
  }

  nlohmann::json to_json() const override {
    nlohmann::json jf = nlohmann::json::array();
    for (const auto& f : factors_) jf.push_back(f->to_json());
    return {{"type", "product"}, {"factors", jf}};
  }

  const std::vector<KernelPtr>& factors() const { return factors_; }

 private:
  std::vector<KernelPtr> factors_;
  std::vector<int> offsets_;
  int arity_ = 0;
};

namespace detail {

inline std::vector<int> swap_permutation(int arity, const std::vector<int>& a,
                                         const std::vector<int>& b) {
  std::vector<int> perm(arity);
  for (int i = 0; i < arity; ++i) perm[i] = i;
  for (size_t i = 0; i < a.size(); ++i) std::swap(perm[a[i]], perm[b[i]]);
  return perm;
}

inline void apply_perm(std::span<const double> in, const std::vector<int>& perm,
                       std::vector<double>& out) {
  out.resize(in.size());
  for (size_t i = 0; i < in.size(); ++i) out[i] = in[perm[i]];
}

/// Monte Carlo check of an algebraic kernel identity on the unit cube.
template <typename F>
bool mc_identity_holds(const Kernel& k, F&& lhs_rhs, int n_samples = 100,
                       double tol = 1e-10) {
  std::mt19937_64 rng(0x5eedULL);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> p(k.arity()), q(k.arity());
  for (int s = 0; s < n_samples; ++s) {
    for (auto& v : p) v = unif(rng);
    for (auto& v : q) v = unif(rng);
    auto [l, r] = lhs_rhs(p, q);
    if (std::abs(l - r) > tol * std::max({1.0, std::abs(l), std::abs(r)})) return false;
  }
  return true;
}

}  // namespace detail

/// Four-term swap average restricting the RKHS to functions symmetric under
/// exchanging the axis groups. Construction verifies the inner kernel's
/// swap symmetry K(p,q) = K(swap p, swap q) by Monte Carlo sampling.
class SymmetrizedKernel final : public Kernel {
 public:
  SymmetrizedKernel(KernelPtr inner, std::vector<int> group_a, std::vector<int> group_b)
      : inner_(std::move(inner)), ga_(std::move(group_a)), gb_(std::move(group_b)) {
    if (ga_.size() != gb_.size() || ga_.empty())
      throw std::invalid_argument("symmetrize: groups must be nonempty and of equal length");
    for (size_t i = 0; i < ga_.size(); ++i) {
      for (size_t j = 0; j < ga_.size(); ++j)
        if (ga_[i] == gb_[j]) throw std::invalid_argument("symmetrize: groups must be disjoint");
      if (ga_[i] < 0 || ga_[i] >= inner_->arity() || gb_[i] < 0 || gb_[i] >= inner_->arity())
        throw std::invalid_argument("symmetrize: axis index out of range");
    }
    perm_ = detail::swap_permutation(inner_->arity(), ga_, gb_);
    const bool ok = detail::mc_identity_holds(
        *inner_, [&](const std::vector<double>& p, const std::vector<double>& q) {
          std::vector<double> ps, qs;
          detail::apply_perm(p, perm_, ps);
          detail::apply_perm(q, perm_, qs);
          return std::pair<double, double>(inner_->eval(p, q), inner_->eval(ps, qs));
        });
    if (!ok)
      throw std::invalid_argument(
          "symmetrize: inner kernel fails the swap-symmetry condition "
          "K(p, q) = K(swap p, swap q) required for the symmetric subspace "
          "to be reproducing");
  }

  int arity() const override { return inner_->arity(); }

  double eval(std::span<const double> p, std::span<const double> q) const override {
    std::vector<double> ps, qs;
    detail::apply_perm(p, perm_, ps);
    detail::apply_perm(q, perm_, qs);
    return 0.25 * (inner_->eval(p, q) + inner_->eval(p, qs) +
                   inner_->eval(ps, q) + inner_->eval(ps, qs));
  }

  bool lower_separable(SeparableForm& out) const override {
    SeparableForm sub;
    if (!inner_->lower_separable(sub)) return false;
    out.arity = sub.arity;
    out.masks = sub.masks;
    for (int row_swap = 0; row_swap < 2; ++row_swap) {
      for (int col_swap = 0; col_swap < 2; ++col_swap) {
        for (const auto& t : sub.terms) {
          SepTerm nt;
          nt.coef = 0.25 * t.coef;
          for (auto f : t.factors) {
            if (row_swap) f.row_axis = perm_[f.row_axis];
            if (col_swap) f.col_axis = perm_[f.col_axis];
            nt.factors.push_back(std::move(f));
          }
          out.terms.push_back(std::move(nt));
        }
      }
    }
    return true;
  }

  nlohmann::json to_json() const override {
    return {{"type", "symmetrized"},
            {"inner", inner_->to_json()},
            {"group_a", ga_},
            {"group_b", gb_}};
  }

 private:
  KernelPtr inner_;
  std::vector<int> ga_, gb_;
  std::vector<int> perm_;
};

/// Causal restriction 1_{t<=s} 1_{tau<=sigma} K (anticausal mirrors with >=).
/// Requires the inner kernel to be symmetric under swapping the two time
/// axes within one argument, which holds after time symmetrization.
class CausalKernel final : public Kernel {
 public:
  CausalKernel(KernelPtr inner, int t_axis, int s_axis, bool anticausal = false)
      : inner_(std::move(inner)), mask_{t_axis, s_axis, anticausal} {
    if (t_axis < 0 || t_axis >= inner_->arity() || s_axis < 0 ||
        s_axis >= inner_->arity() || t_axis == s_axis)
      throw std::invalid_argument("causal: invalid time axis indices");
    std::vector<int> perm = detail::swap_permutation(inner_->arity(), {t_axis}, {s_axis});
    const bool ok = detail::mc_identity_holds(
        *inner_, [&](const std::vector<double>& p, const std::vector<double>& q) {
          std::vector<double> ps;
          detail::apply_perm(p, perm, ps);
          return std::pair<double, double>(inner_->eval(p, q), inner_->eval(ps, q));
        });
    if (!ok)
      throw std::invalid_argument(
          "causal: inner kernel must be symmetrized in the (t, s) time pair "
          "before masking");
  }

  int arity() const override { return inner_->arity(); }

  double eval(std::span<const double> p, std::span<const double> q) const override {
    if (!mask_.pass(p) || !mask_.pass(q)) return 0.0;
    return inner_->eval(p, q);
  }

  bool lower_separable(SeparableForm& out) const override {
    if (!inner_->lower_separable(out)) return false;
    out.masks.push_back(mask_);
    return true;
  }

  nlohmann::json to_json() const override {
    return {{"type", "causal"},
            {"inner", inner_->to_json()},
            {"t_axis", mask_.t_axis},
            {"s_axis", mask_.s_axis},
            {"direction", mask_.anticausal ? "anticausal" : "causal"}};
  }

 private:
  KernelPtr inner_;
  CausalPair mask_;
};

/// Translation-invariant kernel K(x, y, xi, eta) = k(y - x, eta - xi) built
/// from a base kernel on the lag domain; restricts the RKHS to convolutional
/// Green's functions G(x, y) = g(y - x).
class ConvolutionalKernel final : public Kernel {
 public:
  explicit ConvolutionalKernel(KernelPtr base) : base_(std::move(base)) {
    if (base_->arity() < 1)
      throw std::invalid_argument("convolutional: base kernel must have positive arity");
  }

  int arity() const override { return 2 * base_->arity(); }

  double eval(std::span<const double> p, std::span<const double> q) const override {
    const int d = base_->arity();
    std::vector<double> u(d), v(d);
    for (int i = 0; i < d; ++i) {
      u[i] = p[d + i] - p[i];
      v[i] = q[d + i] - q[i];
    }
    return base_->eval(u, v);
  }

  nlohmann::json to_json() const override {
    return {{"type", "convolutional"}, {"base", base_->to_json()}};
  }

 private:
  KernelPtr base_;
};

inline bool GaussianKernel::lower_separable(SeparableForm& out) const {
  out.arity = arity();
  out.terms.assign(1, SepTerm{});
  for (int d = 0; d < arity(); ++d) {
    auto axis = std::make_shared<GaussianKernel>(std::vector<double>{variances_[d]});
    out.terms[0].factors.push_back({axis, d, d});
  }
  return true;
}

// ---------------------------------------------------------------------------
// Factory helpers and JSON round trip
// ---------------------------------------------------------------------------

inline KernelPtr make_gaussian(std::vector<double> variances) {
  return std::make_shared<GaussianKernel>(std::move(variances));
}
inline KernelPtr make_sobolev1_dirichlet(int dims, int n_series = 200) {
  return std::make_shared<SineSeriesKernel>(dims, n_series);
}
inline KernelPtr make_sobolev_tail(int m) { return std::make_shared<SobolevTailKernel>(m); }
inline KernelPtr make_brownian_bridge_cov(double sigma2) {
  return std::make_shared<BrownianBridgeCovKernel>(sigma2);
}
inline KernelPtr make_exponential_cov(double length, int dims = 1) {
  return std::make_shared<ExponentialCovKernel>(length, dims);
}
inline KernelPtr make_product(std::vector<KernelPtr> factors) {
  return std::make_shared<ProductKernel>(std::move(factors));
}
inline KernelPtr symmetrize(KernelPtr inner, std::vector<int> group_a,
                            std::vector<int> group_b) {
  return std::make_shared<SymmetrizedKernel>(std::move(inner), std::move(group_a),
                                             std::move(group_b));
}
inline KernelPtr causal_mask(KernelPtr inner, int t_axis, int s_axis,
                             bool anticausal = false) {
  return std::make_shared<CausalKernel>(std::move(inner), t_axis, s_axis, anticausal);
}
inline KernelPtr make_convolutional(KernelPtr base) {
  return std::make_shared<ConvolutionalKernel>(std::move(base));
}

inline KernelPtr kernel_from_json(const nlohmann::json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "gaussian")
    return make_gaussian(j.at("variances").get<std::vector<double>>());
  if (type == "sobolev1_dirichlet")
    return make_sobolev1_dirichlet(j.at("dims").get<int>(),
                                   j.value("n_series", 200));
  if (type == "sobolev_m_tail") return make_sobolev_tail(j.at("m").get<int>());
  if (type == "brownian_bridge_cov")
    return make_brownian_bridge_cov(j.at("sigma2").get<double>());
  if (type == "exponential_cov")
    return make_exponential_cov(j.at("length").get<double>(), j.value("dims", 1));
  if (type == "product") {
    std::vector<KernelPtr> fs;
    for (const auto& jf : j.at("factors")) fs.push_back(kernel_from_json(jf));
    return make_product(std::move(fs));
  }
  if (type == "symmetrized")
    return symmetrize(kernel_from_json(j.at("inner")),
                      j.at("group_a").get<std::vector<int>>(),
                      j.at("group_b").get<std::vector<int>>());
  if (type == "causal")
    return causal_mask(kernel_from_json(j.at("inner")), j.at("t_axis").get<int>(),
                       j.at("s_axis").get<int>(),
                       j.value("direction", "causal") == std::string("anticausal"));
  if (type == "convolutional")
    return make_convolutional(kernel_from_json(j.at("base")));
  throw std::invalid_argument("unknown kernel type: " + type);
}

// ---------------------------------------------------------------------------
// Grid contraction
// ---------------------------------------------------------------------------

/// Precomputed plan for M[s,t] = sum_{sig,tau} K((rx_s, ry_t), (cx_sig, cy_tau))
/// V[sig,tau]. Chooses a separable mode-product path, the sine-series
/// spectral path, or dense evaluation, in that order of preference.
class ContractionPlan {
 public:
  ContractionPlan(KernelPtr kernel, const Grid& row_x, const Grid& row_y,
                  const Grid& col_x, const Grid& col_y)
      : kernel_(std::move(kernel)),
        row_x_(row_x), row_y_(row_y), col_x_(col_x), col_y_(col_y) {
    const int d = row_x.dims() + row_y.dims();
    if (kernel_->arity() != d || col_x.dims() + col_y.dims() != d)
      throw std::invalid_argument("contraction: kernel arity does not match grid dims");

    row_axes_ = collect_axes(row_x, row_y);
    col_axes_ = collect_axes(col_x, col_y);
    const bool tensor_ok = static_cast<int>(row_axes_.size()) == d &&
                           static_cast<int>(col_axes_.size()) == d;

    SeparableForm form;
    if (tensor_ok && kernel_->lower_separable(form) && validate(form, d)) {
      mode_ = Mode::kSeparable;
      form_ = std::move(form);
      build_separable();
      return;
    }
    if (tensor_ok && kernel_->as_sine_series() != nullptr) {
      mode_ = Mode::kSine;
      build_sine();
      return;
    }
    mode_ = Mode::kDense;
    build_dense();
  }

  Matrix apply(const Matrix& V) const {
    if (V.rows() != col_x_.size() || V.cols() != col_y_.size())
      throw std::invalid_argument("contraction: V shape mismatch");
    switch (mode_) {
      case Mode::kSeparable: return apply_separable(V);
      case Mode::kSine: return apply_sine(V);
      default: return apply_dense(V);
    }
  }

 private:
  enum class Mode { kSeparable, kSine, kDense };

  static std::vector<Grid::Axis> collect_axes(const Grid& a, const Grid& b) {
    std::vector<Grid::Axis> out;
    if (!a.has_axes() || !b.has_axes()) return out;
    for (const auto& ax : a.axes()) out.push_back(ax);
    for (const auto& ax : b.axes()) out.push_back(ax);
    return out;
  }

  static bool validate(const SeparableForm& form, int d) {
    for (const auto& t : form.terms) {
      if (static_cast<int>(t.factors.size()) != d) return false;
      std::vector<bool> row_seen(d, false), col_seen(d, false);
      for (const auto& f : t.factors) {
        if (row_seen[f.row_axis] || col_seen[f.col_axis]) return false;
        row_seen[f.row_axis] = col_seen[f.col_axis] = true;
      }
    }
    return true;
  }

  Matrix mask_matrix(const Grid& gx, const Grid& gy) const {
    Matrix m = Matrix::Ones(gx.size(), gy.size());
    if (form_.masks.empty()) return m;
    std::vector<double> pt(kernel_->arity());
    for (Eigen::Index i = 0; i < gx.size(); ++i) {
      for (Eigen::Index j = 0; j < gy.size(); ++j) {
        for (int d = 0; d < gx.dims(); ++d) pt[d] = gx.points()(i, d);
        for (int d = 0; d < gy.dims(); ++d) pt[gx.dims() + d] = gy.points()(j, d);
        for (const auto& mk : form_.masks)
          if (!mk.pass(pt)) { m(i, j) = 0.0; break; }
      }
    }
    return m;
  }

  void build_separable() {
    col_mask_ = mask_matrix(col_x_, col_y_);
    row_mask_ = mask_matrix(row_x_, row_y_);
    // Factor matrices, shared across terms when (base, axes) repeat.
    for (const auto& t : form_.terms) {
      for (const auto& f : t.factors) {
        bool found = false;
        for (const auto& c : factor_cache_)
          if (c.base == f.base.get() && c.row_axis == f.row_axis &&
              c.col_axis == f.col_axis) { found = true; break; }
        if (found) continue;
        FactorMat fm;
        fm.base = f.base.get();
        fm.row_axis = f.row_axis;
        fm.col_axis = f.col_axis;
        const auto& rp = row_axes_[f.row_axis].points;
        const auto& cp = col_axes_[f.col_axis].points;
        fm.mat.resize(rp.size(), cp.size());
        for (Eigen::Index i = 0; i < rp.size(); ++i)
          for (Eigen::Index j = 0; j < cp.size(); ++j) {
            const double a = rp[i], b = cp[j];
            fm.mat(i, j) = f.base->eval({&a, 1}, {&b, 1});
          }
        factor_cache_.push_back(std::move(fm));
      }
    }
  }

  const Matrix& factor_mat(const SepFactor& f) const {
    for (const auto& c : factor_cache_)
      if (c.base == f.base.get() && c.row_axis == f.row_axis &&
          c.col_axis == f.col_axis)
        return c.mat;
    throw std::logic_error("contraction: missing factor matrix");
  }

  Matrix apply_separable(const Matrix& V) const {
    const int d = kernel_->arity();
    detail::Tensor t0;
    t0.dims.reserve(d);
    for (const auto& ax : col_axes_) t0.dims.push_back(ax.points.size());
    t0.data.resize(V.size());
    // Row-major flat layout over (x-point, y-point) matches the concatenated
    // axis dims because tensor-grid points are themselves row-major.
    {
      Eigen::Index k = 0;
      for (Eigen::Index i = 0; i < V.rows(); ++i)
        for (Eigen::Index j = 0; j < V.cols(); ++j)
          t0.data[k++] = V(i, j) * col_mask_(i, j);
    }

    Matrix out = Matrix::Zero(row_x_.size(), row_y_.size());
    for (const auto& term : form_.terms) {
      detail::Tensor t = t0;
      std::vector<int> perm(d);
      for (const auto& f : term.factors) {
        t = detail::mode_apply(t, f.col_axis, factor_mat(f));
        perm[f.row_axis] = f.col_axis;
      }
      // Tensor axis a now carries row axis of the factor that consumed col
      // axis a; permute into natural row-axis order.
      t = detail::transpose(t, perm);
      Eigen::Index k = 0;
      for (Eigen::Index i = 0; i < out.rows(); ++i)
        for (Eigen::Index j = 0; j < out.cols(); ++j)
          out(i, j) += term.coef * t.data[k++];
    }
    return out.cwiseProduct(row_mask_);
  }

  void build_sine() {
    const auto* sk = kernel_->as_sine_series();
    rho_ = sk->coefficients();
    for (const auto& ax : row_axes_) sine_row_.push_back(sk->features(ax.points));
    for (const auto& ax : col_axes_) sine_col_.push_back(sk->features(ax.points));
  }

  Matrix apply_sine(const Matrix& V) const {
    const int d = kernel_->arity();
    detail::Tensor t;
    t.dims.reserve(d);
    for (const auto& ax : col_axes_) t.dims.push_back(ax.points.size());
    t.data.resize(V.size());
    {
      Eigen::Index k = 0;
      for (Eigen::Index i = 0; i < V.rows(); ++i)
        for (Eigen::Index j = 0; j < V.cols(); ++j) t.data[k++] = V(i, j);
    }
    for (int a = 0; a < d; ++a) t = detail::mode_apply(t, a, sine_col_[a].transpose());
    for (Eigen::Index k = 0; k < t.size(); ++k) t.data[k] *= rho_.data[k];
    for (int a = 0; a < d; ++a) t = detail::mode_apply(t, a, sine_row_[a]);
    Matrix out(row_x_.size(), row_y_.size());
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < out.rows(); ++i)
      for (Eigen::Index j = 0; j < out.cols(); ++j) out(i, j) = t.data[k++];
    return out;
  }

  void build_dense() {
    const double evals = static_cast<double>(row_x_.size()) * row_y_.size() *
                         col_x_.size() * col_y_.size();
    if (evals > 2e8)
      throw std::invalid_argument(
          "contraction: kernel admits no structured path and the dense Gram "
          "block is too large");
    cache_dense_ = evals <= 4e6;
    if (!cache_dense_) return;
    dense_.resize(row_x_.size() * row_y_.size(), col_x_.size() * col_y_.size());
    std::vector<double> p(kernel_->arity()), q(kernel_->arity());
    for (Eigen::Index s = 0; s < row_x_.size(); ++s)
      for (Eigen::Index t = 0; t < row_y_.size(); ++t) {
        fill_point(row_x_, row_y_, s, t, p);
        for (Eigen::Index si = 0; si < col_x_.size(); ++si)
          for (Eigen::Index ti = 0; ti < col_y_.size(); ++ti) {
            fill_point(col_x_, col_y_, si, ti, q);
            dense_(s * row_y_.size() + t, si * col_y_.size() + ti) =
                kernel_->eval(p, q);
          }
      }
  }

  static void fill_point(const Grid& gx, const Grid& gy, Eigen::Index i,
                         Eigen::Index j, std::vector<double>& pt) {
    for (int d = 0; d < gx.dims(); ++d) pt[d] = gx.points()(i, d);
    for (int d = 0; d < gy.dims(); ++d) pt[gx.dims() + d] = gy.points()(j, d);
  }

  Matrix apply_dense(const Matrix& V) const {
    Matrix out(row_x_.size(), row_y_.size());
    if (cache_dense_) {
      Vector v(V.size());
      Eigen::Index k = 0;
      for (Eigen::Index i = 0; i < V.rows(); ++i)
        for (Eigen::Index j = 0; j < V.cols(); ++j) v[k++] = V(i, j);
      Vector r = dense_ * v;
      k = 0;
      for (Eigen::Index i = 0; i < out.rows(); ++i)
        for (Eigen::Index j = 0; j < out.cols(); ++j) out(i, j) = r[k++];
      return out;
    }
    std::vector<double> p(kernel_->arity()), q(kernel_->arity());
    for (Eigen::Index s = 0; s < row_x_.size(); ++s)
      for (Eigen::Index t = 0; t < row_y_.size(); ++t) {
        fill_point(row_x_, row_y_, s, t, p);
        double acc = 0.0;
        for (Eigen::Index si = 0; si < col_x_.size(); ++si)
          for (Eigen::Index ti = 0; ti < col_y_.size(); ++ti) {
            fill_point(col_x_, col_y_, si, ti, q);
            acc += kernel_->eval(p, q) * V(si, ti);
          }
        out(s, t) = acc;
      }
    return out;
  }

  struct FactorMat {
    const Kernel* base;
    int row_axis, col_axis;
    Matrix mat;
  };

  KernelPtr kernel_;
  Grid row_x_, row_y_, col_x_, col_y_;
  std::vector<Grid::Axis> row_axes_, col_axes_;
  Mode mode_ = Mode::kDense;

  SeparableForm form_;
  std::vector<FactorMat> factor_cache_;
  Matrix row_mask_, col_mask_;

  detail::Tensor rho_;
  std::vector<Matrix> sine_row_, sine_col_;

  bool cache_dense_ = false;
  Matrix dense_;
};

inline Matrix contract_grids(KernelPtr kernel, const Grid& row_x, const Grid& row_y,
                             const Grid& col_x, const Grid& col_y, const Matrix& V) {
  return ContractionPlan(std::move(kernel), row_x, row_y, col_x, col_y).apply(V);
}

}  // namespace greenfn
