#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <memory>
#include <stdexcept>
#include <vector>

namespace greenfn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct Interval {
  double lo = 0.0;
  double hi = 1.0;
  double length() const { return hi - lo; }
};

/// Discretized box domain: a list of points with quadrature weights.
/// Weights follow the rectangle rule, so the weighted sum of the constant 1
/// equals the volume of the box. Tensor grids keep their per-axis structure
/// (needed by the separable kernel contractions); grids loaded from JSON
/// without axis data fall back to dense evaluation paths.
class Grid {
 public:
  struct Axis {
    Vector points;
    Vector weights;
    Interval bounds;
  };

  Grid() = default;
  Grid(std::vector<Axis> axes) : axes_(std::move(axes)) { build_from_axes(); }
  Grid(int dims, std::vector<Interval> bounds, Matrix points, Vector weights)
      : dims_(dims),
        bounds_(std::move(bounds)),
        points_(std::move(points)),
        weights_(std::move(weights)) {
    if (points_.cols() != dims_ || points_.rows() != weights_.size())
      throw std::invalid_argument("grid: inconsistent point/weight shapes");
  }

  int dims() const { return dims_; }
  Eigen::Index size() const { return points_.rows(); }
  const Matrix& points() const { return points_; }
  const Vector& weights() const { return weights_; }
  const std::vector<Interval>& bounds() const { return bounds_; }
  const std::vector<Axis>& axes() const { return axes_; }
  bool has_axes() const { return !axes_.empty(); }

  double volume() const {
    double v = 1.0;
    for (const auto& b : bounds_) v *= b.length();
    return v;
  }

  /// Weighted sum of a function sampled on the grid points.
  double integrate(const Vector& values) const {
    if (values.size() != size())
      throw std::invalid_argument("grid: value count mismatch");
    return weights_.dot(values);
  }

  bool same_bounds(const Grid& other, double tol = 1e-12) const {
    if (dims_ != other.dims_) return false;
    for (int j = 0; j < dims_; ++j) {
      if (std::abs(bounds_[j].lo - other.bounds_[j].lo) > tol) return false;
      if (std::abs(bounds_[j].hi - other.bounds_[j].hi) > tol) return false;
    }
    return true;
  }

  nlohmann::json to_json() const {
    nlohmann::json jb = nlohmann::json::array();
    for (const auto& b : bounds_) jb.push_back({b.lo, b.hi});
    nlohmann::json jp = nlohmann::json::array();
    for (Eigen::Index i = 0; i < size(); ++i) {
      nlohmann::json row = nlohmann::json::array();
      for (int j = 0; j < dims_; ++j) row.push_back(points_(i, j));
      jp.push_back(std::move(row));
    }
    std::vector<double> w(weights_.data(), weights_.data() + weights_.size());
    nlohmann::json j = {
        {"dims", dims_}, {"bounds", jb}, {"points", jp}, {"weights", w}};
    if (!axes_.empty()) {
      nlohmann::json ja = nlohmann::json::array();
      for (const auto& a : axes_) {
        std::vector<double> ap(a.points.data(), a.points.data() + a.points.size());
        std::vector<double> aw(a.weights.data(), a.weights.data() + a.weights.size());
        ja.push_back({{"points", ap},
                      {"weights", aw},
                      {"bounds", {a.bounds.lo, a.bounds.hi}}});
      }
      j["axes"] = ja;
    }
    return j;
  }

  static Grid from_json(const nlohmann::json& j) {
    if (j.contains("axes")) {
      std::vector<Axis> axes;
      for (const auto& ja : j.at("axes")) {
        Axis a;
        auto ap = ja.at("points").get<std::vector<double>>();
        auto aw = ja.at("weights").get<std::vector<double>>();
        a.points = Eigen::Map<const Vector>(ap.data(), ap.size());
        a.weights = Eigen::Map<const Vector>(aw.data(), aw.size());
        a.bounds = {ja.at("bounds")[0].get<double>(), ja.at("bounds")[1].get<double>()};
        axes.push_back(std::move(a));
      }
      return Grid(std::move(axes));
    }
    int dims = j.at("dims").get<int>();
    std::vector<Interval> bounds;
    for (const auto& jb : j.at("bounds"))
      bounds.push_back({jb[0].get<double>(), jb[1].get<double>()});
    const auto& jp = j.at("points");
    Matrix pts(jp.size(), dims);
    for (Eigen::Index i = 0; i < pts.rows(); ++i)
      for (int d = 0; d < dims; ++d) pts(i, d) = jp[i][d].get<double>();
    auto w = j.at("weights").get<std::vector<double>>();
    return Grid(dims, std::move(bounds), std::move(pts),
                Eigen::Map<const Vector>(w.data(), w.size()));
  }

 private:
  void build_from_axes() {
    dims_ = static_cast<int>(axes_.size());
    Eigen::Index m = 1;
    for (const auto& a : axes_) {
      bounds_.push_back(a.bounds);
      m *= a.points.size();
    }
    points_.resize(m, dims_);
    weights_.resize(m);
    // Row-major Cartesian product: last axis varies fastest.
    for (Eigen::Index idx = 0; idx < m; ++idx) {
      Eigen::Index rem = idx;
      double w = 1.0;
      for (int d = dims_ - 1; d >= 0; --d) {
        const Eigen::Index md = axes_[d].points.size();
        const Eigen::Index id = rem % md;
        rem /= md;
        points_(idx, d) = axes_[d].points[id];
        w *= axes_[d].weights[id];
      }
      weights_[idx] = w;
    }
  }

  int dims_ = 0;
  std::vector<Interval> bounds_;
  Matrix points_;
  Vector weights_;
  std::vector<Axis> axes_;
};

using GridPtr = std::shared_ptr<const Grid>;

/// m equispaced points spanning [a,b] inclusive, rectangle-rule weights
/// (b-a)/m each.
inline Grid make_uniform_grid(Interval bounds, int m) {
  if (m < 2) throw std::invalid_argument("make_uniform_grid: need m >= 2");
  if (!(bounds.hi > bounds.lo))
    throw std::invalid_argument("make_uniform_grid: empty interval");
  Grid::Axis a;
  a.bounds = bounds;
  a.points = Vector::LinSpaced(m, bounds.lo, bounds.hi);
  a.weights = Vector::Constant(m, bounds.length() / m);
  return Grid({std::move(a)});
}

/// m equispaced points on [a,b) excluding the right endpoint; used for
/// periodic parameter domains such as a flattened square boundary.
inline Grid make_periodic_grid(Interval bounds, int m) {
  if (m < 2) throw std::invalid_argument("make_periodic_grid: need m >= 2");
  Grid::Axis a;
  a.bounds = bounds;
  const double h = bounds.length() / m;
  a.points = Vector::LinSpaced(m, bounds.lo, bounds.hi - h);
  a.weights = Vector::Constant(m, h);
  return Grid({std::move(a)});
}

/// Cartesian product of one-dimensional grids, row-major point order.
inline Grid make_tensor_grid(const std::vector<Grid>& axes) {
  if (axes.empty())
    throw std::invalid_argument("make_tensor_grid: empty axis list");
  std::vector<Grid::Axis> out;
  for (const auto& g : axes) {
    if (g.dims() != 1)
      throw std::invalid_argument("make_tensor_grid: axes must be 1D");
    if (!g.has_axes())
      throw std::invalid_argument("make_tensor_grid: axis grid lacks axis data");
    out.push_back(g.axes()[0]);
  }
  return Grid(std::move(out));
}

}  // namespace greenfn
