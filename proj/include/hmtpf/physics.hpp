#pragma once

// Finite-difference derivatives of decoded fields, inviscid continuity and
// momentum residuals, and the paired MSE / residual evaluation report.

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hmtpf/dataio.hpp"
#include "hmtpf/model.hpp"

namespace hmtpf {

/// Spatial step per axis. Empty means 0.01 × the sample's bounding-box
/// diagonal on every axis; a single value applies to every axis.
struct FdConfig {
  std::vector<double> dx;
};

inline constexpr double kDefaultDxFraction = 0.01;

std::vector<double> default_dx(const FieldPack& pack);
std::vector<double> resolve_dx(const FdConfig& cfg, const FieldPack& pack);

/// {0, +dx₀e₀, −dx₀e₀, +dx₁e₁, −dx₁e₁, ...}: 1 + 2d offsets of width d.
std::vector<std::vector<double>> stencil_offsets(std::span<const double> dx);
inline constexpr std::size_t kCenter = 0;
inline std::size_t plus_offset(std::size_t axis) { return 1 + 2 * axis; }
inline std::size_t minus_offset(std::size_t axis) { return 2 + 2 * axis; }

/// Fields at every stencil offset: values [O × T × N_Q × N_phi].
struct StencilFields {
  Tensor values;
  std::size_t offsets = 0, t = 0, n_q = 0, n_phi = 0;

  /// One channel at one offset, [T × N_Q].
  Tensor channel_at(std::size_t channel, std::size_t offset) const;
  /// The unshifted prediction, [T × N_Q × N_phi].
  Tensor center() const;
};

/// Decodes fields at an arbitrary query set [M × d] into [T × M × N_phi].
using QueryDecoder = std::function<Tensor(const Tensor& x_q)>;

/// All offsets stacked into one query batch and decoded in a single call.
StencilFields query_with_offsets(const QueryDecoder& decode, std::span<const double> x_q, std::size_t d,
                                 const std::vector<std::vector<double>>& offsets);
StencilFields query_with_offsets(const Model& m, const Latents& lat, std::span<const double> x_q,
                                 const std::vector<std::vector<double>>& offsets);

/// Exact fields of an analytic flow on the same stencil, at t = (k+1)·dt.
StencilFields analytic_stencil(const AnalyticFlow& flow, std::span<const double> x_q, std::size_t t_steps, double dt,
                               const std::vector<std::vector<double>>& offsets);

double fd_spatial_first(double f_plus, double f_minus, double dx);
double fd_spatial_second(double f_plus, double f_center, double f_minus, double dx);
double fd_time(double f_t, double f_next, double dt);
Tensor fd_spatial_first(const Tensor& f_plus, const Tensor& f_minus, double dx);
Tensor fd_spatial_second(const Tensor& f_plus, const Tensor& f_center, const Tensor& f_minus, double dx);
Tensor fd_time(const Tensor& f_t, const Tensor& f_next, double dt);

/// Channel indices of velocity components, pressure and density.
struct EulerChannels {
  std::vector<std::size_t> u;  // one per axis
  std::size_t p = 0;
  std::size_t rho = 0;

  /// Looks up u_x, u_y (, u_z), p, rho by name; throws ConfigError.
  static EulerChannels resolve(const std::vector<std::string>& names, std::size_t d);
};

/// Continuity and per-axis momentum residuals, each [T' × N_Q] with T' = T − 1.
struct ResidualField {
  Tensor continuity;
  std::vector<Tensor> momentum;

  std::size_t steps() const { return continuity.dim(0); }
  std::size_t n_q() const { return continuity.dim(1); }
  /// Continuity first, then momentum by axis.
  std::vector<Tensor> components() const;
};

/// Flux form: products of fields are formed at each offset, then differenced.
/// Spatial terms use step k, the time difference uses steps k and k + 1.
/// Requires T ≥ 2.
ResidualField residuals_euler(const StencilFields& s, const EulerChannels& ch, std::span<const double> dx,
                              double dt);

/// Σ over components of mean(r²): the physics term of the fine-tune loss.
Tensor residual_loss(const ResidualField& res);

struct MseReport {
  std::vector<double> per_channel;
  double total = 0.0;  // sum over channels
};

/// pred and gt are [T × N_Q × N_phi].
MseReport mse_metric(const Tensor& pred, const Tensor& gt);

struct RReport {
  double continuity = 0.0;
  std::vector<double> momentum;  // per axis
  double momentum_mean = 0.0;
  double total = 0.0;  // mean over all 1 + d components
};

/// Each component is Σ r² / (N_Q · T').
RReport r_metric(const ResidualField& res);

struct MseRReport {
  std::vector<std::string> channel_names;
  std::optional<MseReport> mse;
  RReport r;
  std::size_t n_q = 0;
  std::size_t t = 0;
  std::vector<double> dx;
  double dt = 0.0;

  /// `key = value` lines; `mse = n/a` replaces the mse.* keys without ground truth.
  std::string render() const;
};

MseRReport mse_r_report(const Tensor& pred, const std::optional<Tensor>& gt,
                        const std::vector<std::string>& channel_names, const ResidualField& res,
                        std::vector<double> dx, double dt);

/// Prediction plus residuals of a model on one sample.
struct PhysicsEval {
  StencilFields stencil;
  ResidualField residuals;
  std::vector<double> dx;
};

PhysicsEval evaluate_physics(const Model& m, const FieldPack& pack, const FdConfig& fd);

}  // namespace hmtpf
