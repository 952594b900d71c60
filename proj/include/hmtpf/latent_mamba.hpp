#pragma once

// Latent time propagation: channelwise max-pool of G0 into z0, then an
// autoregressive stack of selective state-space (Mamba-style) layers.
//
// Per layer, for a token x:
//   x̂ = rms_norm(x)·gain,  u = silu(x̂ W_in),  g = silu(x̂ W_gate)
//   Δ = softplus(u W_Δ + b_Δ),  B = u W_B,  C = u W_C,  A = −exp(a_log)
//   h_t = exp(Δ_t A) ⊙ h_{t−1} + (Δ_t u_t) ⊗ B_t
//   y_t = h_t C_t + D ⊙ u_t
//   out = x + (y ⊙ g) W_out
// A < 0 and Δ > 0 keep every decay factor exp(Δ A) strictly inside (0, 1).

#include <vector>

#include "hmtpf/model_config.hpp"
#include "hmtpf/nn.hpp"

namespace hmtpf {

struct MambaLayer {
  Tensor norm_gain;  // [N_g]
  Tensor w_in;       // [N_g × E]
  Tensor w_gate;     // [N_g × E]
  Linear delta;      // [E × E]
  Tensor w_b;        // [E × N_s]
  Tensor w_c;        // [E × N_s]
  Tensor a_log;      // [E × N_s]
  Tensor d_skip;     // [E]
  Tensor w_out;      // [E × N_g]
};

struct MambaParams {
  std::vector<MambaLayer> layers;
  std::size_t n_g = 0;
  std::size_t n_s = 0;
  std::size_t inner = 0;  // E
};

/// Δ is initialised so softplus(b_Δ) is log-uniform in [kDeltaMin, kDeltaMax].
inline constexpr double kDeltaMin = 1e-3;
inline constexpr double kDeltaMax = 1e-1;
inline constexpr double kRmsEps = 1e-6;

MambaParams make_mamba(ParamSet& params, const ModelConfig& cfg, Rng& rng);

/// z0 = channelwise max over the rows of G0, as a [1 × N_g] row.
Tensor aggregate_z0(const Tensor& g0);

/// Fused selective scan. u, delta: [L×E]; a: [E×N_s]; b, c: [L×N_s]; d: [E].
/// Returns y [L×E] with a hand-derived backward.
Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c,
                      const Tensor& d);

/// Whole-sequence evaluation of the layer stack, tokens [L×N_g] → [L×N_g].
/// Causal: row t depends on rows 0..t only.
Tensor ssm_scan(const Tensor& tokens, const MambaParams& p);

/// Recurrent state carried between single-token steps.
struct SsmState {
  std::vector<Tensor> h;  // per layer [E × N_s]
};

SsmState initial_state(const MambaParams& p);
/// One token [1×N_g] through the stack, advancing `state`. Built from generic
/// tensor ops, independent of selective_scan.
Tensor ssm_step(const Tensor& token, SsmState& state, const MambaParams& p);
/// Token-by-token evaluation of a whole sequence via ssm_step.
Tensor ssm_scan_stepwise(const Tensor& tokens, const MambaParams& p);

struct LatentTrajectory {
  Tensor z0;  // [1 × N_g]
  Tensor z;   // [T × N_g], rows z_1..z_T

  std::size_t steps() const { return z.dim(0); }
  Tensor step(std::size_t i) const { return slice_rows(z, i, i + 1); }  // z_{i+1}
};

/// z_i = last output of the stack on (z0, ..., z_{i−1}), via the recurrent form: O(T).
LatentTrajectory rollout(const Tensor& z0, std::size_t t_steps, const MambaParams& p);
/// Same sequence by re-scanning the growing token list each step: O(T²).
LatentTrajectory rollout_rescan(const Tensor& z0, std::size_t t_steps, const MambaParams& p);

}  // namespace hmtpf
