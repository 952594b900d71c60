#pragma once

// On-disk samples and analytic inviscid-flow datasets.
//
// A FieldPack directory holds `manifest.txt` (UTF-8, LF, `key = value`) and
// five row-major little-endian arrays: x_bd.f32, id.u8, phi0.f32, x_q.f32,
// phi.f32. Values are float64 in memory and float32 on disk.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace hmtpf {

inline constexpr int kFieldPackVersion = 1;

/// Id values carried by input points.
enum class PointKind : std::uint8_t { kBoundary = 0, kDomain = 1 };

struct FieldPack {
  std::size_t d = 2;
  std::size_t n_bd = 0;
  std::size_t n_q = 0;
  std::size_t t = 0;
  double dt = 1.0;
  std::vector<std::string> channel_names;

  std::vector<double> x_bd;        // [n_bd × d]
  std::vector<std::uint8_t> id;    // [n_bd]
  std::vector<double> phi0;        // [n_bd × n_phi]
  std::vector<double> x_q;         // [n_q × d]
  std::vector<double> phi;         // [t × n_q × n_phi]

  std::size_t n_phi() const { return channel_names.size(); }
  /// Throws ValidationError on any broken invariant.
  void validate() const;
  /// Index of a named channel, or throws ConfigError.
  std::size_t channel(const std::string& name) const;
};

void write_fieldpack(const FieldPack& sample, const std::filesystem::path& dir);
FieldPack read_fieldpack(const std::filesystem::path& dir);

/// Rounds every stored array through float32, i.e. what a write/read cycle yields.
FieldPack quantize_f32(FieldPack sample);

// ---------------------------------------------------------------------------
// Analytic solutions of the 2-D inviscid equations. State order (u_x,u_y,p,rho).
// ---------------------------------------------------------------------------

using FlowState = std::array<double, 4>;
inline const std::vector<std::string> kEulerChannels = {"u_x", "u_y", "p", "rho"};

class AnalyticFlow {
 public:
  virtual ~AnalyticFlow() = default;
  virtual FlowState eval(double x, double y, double t) const = 0;
};

struct UniformFlow final : AnalyticFlow {
  std::array<double, 2> u{0.5, 0.25};
  double p = 1.0;
  double rho = 1.0;

  FlowState eval(double x, double y, double t) const override;
};

/// rho = exp(−|x − x0 − u0 t|² / 2σ²), u ≡ u0, p ≡ p0.
struct AdvectingGaussian final : AnalyticFlow {
  std::array<double, 2> u0{0.5, 0.3};
  std::array<double, 2> x0{0.35, 0.4};
  double sigma = 0.15;
  double p0 = 1.0;

  FlowState eval(double x, double y, double t) const override;
};

/// Isentropic vortex in free stream (rho, p) = (1, 1), p = rho^gamma,
/// with core radius `radius` (coordinates and time scaled by it).
struct IsentropicVortex final : AnalyticFlow {
  double strength = 5.0;
  double gamma = 1.4;
  double radius = 0.1;
  std::array<double, 2> center{0.5, 0.5};
  std::array<double, 2> u_inf{0.5, 0.3};

  FlowState eval(double x, double y, double t) const override;
};

/// Points in the unit square from `seed`; the first min(n_bd, 4⌈√n_bd⌉)
/// input points are snapped to their nearest edge and tagged boundary.
/// phi0 is sampled at t = 0 and phi[i] at t = (i + 1)·dt.
FieldPack sample_flow(const AnalyticFlow& flow, std::size_t n_bd, std::size_t n_q, std::size_t t_steps,
                      double dt, std::uint64_t seed);

FieldPack gen_uniform_flow(std::size_t n_bd, std::size_t n_q, std::size_t t_steps, double dt,
                           std::uint64_t seed);
FieldPack gen_advecting_gaussian(std::size_t n_bd, std::size_t n_q, std::size_t t_steps, double dt,
                                 std::array<double, 2> u0, double sigma, std::uint64_t seed);
FieldPack gen_isentropic_vortex(std::size_t n_bd, std::size_t n_q, std::size_t t_steps, double dt,
                                double strength, double gamma, std::uint64_t seed);

}  // namespace hmtpf
