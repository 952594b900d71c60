#pragma once

// Query encoding, recursive per-step fusion of point features with the latent
// trajectory, Galerkin cross-attention from queries and the shared FFN head.

#include <vector>

#include "hmtpf/latent_mamba.hpp"
#include "hmtpf/model_config.hpp"
#include "hmtpf/nn.hpp"

namespace hmtpf {

struct DecoderParams {
  Mlp mlp_query;                 // d → N_g
  Mlp mlp_fuse;                  // 2·N_g → N_g
  GalerkinAttention cross_attn;  // shared across steps
  Mlp ffn;                       // N_g → N_phi, shared across steps
};

DecoderParams make_decoder(ParamSet& params, const ModelConfig& cfg, Rng& rng);

/// h_q [N_Q × N_g] from query coordinates [N_Q × d].
Tensor encode_queries(const Tensor& x_q, const DecoderParams& p);

/// mlp_fuse(concat(h_prev[p], z_i)) for every point p; z_i is [1 × N_g].
Tensor fuse_step(const Tensor& h_prev, const Tensor& z_i, const DecoderParams& p);

Tensor galerkin_cross_attention(const Tensor& h_q, const Tensor& h_i, const DecoderParams& p);

/// Per-step cross-attended query features [N_Q × N_g], before any head.
/// Step i uses ℋ_i = fuse_step(ℋ_{i−1}, z_i) with ℋ_0 = G0.
std::vector<Tensor> decode_features(const LatentTrajectory& traj, const Tensor& g0, const Tensor& h_q,
                                    const DecoderParams& p);

/// Applies `head` to every step's features and stacks them into [T × N_Q × out].
Tensor apply_head(const std::vector<Tensor>& features, const Mlp& head);

/// FFN over decode_features: φ̂ [T × N_Q × N_phi].
Tensor decode_fields(const LatentTrajectory& traj, const Tensor& g0, const Tensor& h_q, const DecoderParams& p);

}  // namespace hmtpf
