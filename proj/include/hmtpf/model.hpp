#pragma once

// The stage-1 backbone: encoder, latent rollout and decoder sharing one
// parameter set.

#include "hmtpf/dataio.hpp"
#include "hmtpf/decoder.hpp"
#include "hmtpf/encoder.hpp"
#include "hmtpf/latent_mamba.hpp"

namespace hmtpf {

class Model {
 public:
  explicit Model(const ModelConfig& cfg);
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  const EncoderParams& encoder() const { return enc_; }
  const MambaParams& mamba() const { return mamba_; }
  const DecoderParams& decoder() const { return dec_; }

 private:
  void build();

  ModelConfig cfg_;
  ParamSet params_;
  EncoderParams enc_;
  MambaParams mamba_;
  DecoderParams dec_;
};

/// Query-independent part of a forward pass.
struct Latents {
  Tensor g0;
  LatentTrajectory traj;
};

Latents encode_and_rollout(const Model& m, const EncoderInputs& in, std::size_t t_steps);

struct ForwardResult {
  Latents latents;
  Tensor h_q;  // [N_Q × N_g]
  Tensor phi;  // [T × N_Q × N_phi]
};

ForwardResult forward(const Model& m, const EncoderInputs& in, const Tensor& x_q, std::size_t t_steps);
/// Forward pass on a sample's own queries and horizon.
ForwardResult forward(const Model& m, const FieldPack& pack);

/// Checks the sample's d and N_phi against the model; throws ConfigError.
void check_compatible(const Model& m, const FieldPack& pack);

}  // namespace hmtpf
