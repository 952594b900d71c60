#pragma once

// Independent reference computations shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "hmtpf/dataio.hpp"
#include "hmtpf/physics.hpp"

namespace hmtpf::testing {

/// Every residual value of an analytic flow at step 0 (t = dt), flattened.
inline std::vector<double> analytic_residuals(const AnalyticFlow& flow, const std::vector<double>& xq, double h,
                                              double dt) {
  const std::vector<double> dx{h, h};
  const StencilFields s = analytic_stencil(flow, xq, 2, dt, stencil_offsets(dx));
  const ResidualField r = residuals_euler(s, EulerChannels::resolve(kEulerChannels, 2), dx, dt);
  std::vector<double> out;
  for (const Tensor& c : r.components()) out.insert(out.end(), c.data().begin(), c.data().end());
  return out;
}

inline double l2_norm(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

inline double l2_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

/// Spatial order by Richardson splitting at fixed dt: the time error is the
/// same at every level, so differences of successive levels carry only the
/// spatial error. `refinements` orders from refinements + 2 levels.
inline std::vector<double> spatial_orders(const AnalyticFlow& flow, const std::vector<double>& xq, double h0,
                                          double dt, int refinements) {
  std::vector<std::vector<double>> levels;
  double h = h0;
  for (int i = 0; i < refinements + 2; ++i, h /= 2) levels.push_back(analytic_residuals(flow, xq, h, dt));
  std::vector<double> orders;
  for (int i = 0; i < refinements; ++i) {
    const double coarse = l2_diff(levels[i], levels[i + 1]);
    const double fine = l2_diff(levels[i + 1], levels[i + 2]);
    orders.push_back(std::log2(coarse / fine));
  }
  return orders;
}

/// Temporal order at a spatial step small enough that the spatial error is
/// negligible against the time error.
inline std::vector<double> temporal_orders(const AnalyticFlow& flow, const std::vector<double>& xq, double dt0,
                                           double h, int refinements) {
  std::vector<double> norms;
  double dt = dt0;
  for (int i = 0; i < refinements + 1; ++i, dt /= 2) norms.push_back(l2_norm(analytic_residuals(flow, xq, h, dt)));
  std::vector<double> orders;
  for (int i = 0; i < refinements; ++i) orders.push_back(std::log2(norms[i] / norms[i + 1]));
  return orders;
}

/// Pointwise bound on the FD residuals of the advecting Gaussian from Taylor
/// remainders of the forward and central differences. Along any unit
/// direction the Gaussian's second derivative is at most 1/σ² and its third
/// at most c3/σ³, and ∂ₜ = −u·∇; momentum carries an extra factor u_a.
inline double gaussian_residual_bound(double dt, double dx, double ux, double uy, double sigma) {
  const double speed = std::hypot(ux, uy), c3 = 1.3806;
  const double time_err = 0.5 * dt * speed * speed / (sigma * sigma) +
                          dt * dt / 6.0 * std::pow(speed, 3) * c3 / std::pow(sigma, 3);
  const double space_err = dx * dx / 6.0 * (std::abs(ux) + std::abs(uy)) * c3 / std::pow(sigma, 3);
  return std::max(1.0, speed) * (time_err + space_err);
}

/// Points in [lo, hi]² from a seed.
inline std::vector<double> box_points(std::size_t n, std::uint64_t seed, double lo = 0.2, double hi = 0.8) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(lo, hi);
  std::vector<double> x(2 * n);
  for (double& v : x) v = unit(rng);
  return x;
}

}  // namespace hmtpf::testing
