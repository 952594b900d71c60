#pragma once

#include <cstddef>
#include <cstdint>

namespace hmtpf {

/// Widths and depths of the backbone. Defaults are the desk-scale config.
struct ModelConfig {
  std::size_t d = 2;             // spatial dimension
  std::size_t n_phi = 4;         // field channels
  std::size_t n_c = 16;          // per-input embedding width
  std::size_t n_g = 64;          // latent width
  std::size_t heads = 4;         // attention heads (n_g % heads == 0)
  std::size_t attn_layers = 2;   // encoder self-attention layers
  std::size_t k = 8;             // KNN neighbours
  std::size_t mamba_layers = 2;  // selective-SSM layers
  std::size_t n_s = 16;          // SSM state width
  std::uint64_t init_seed = 0;

  bool operator==(const ModelConfig&) const = default;
};

/// Smaller widths used by the end-to-end toy runs (single desktop core).
inline ModelConfig toy_model_config() {
  ModelConfig c;
  c.n_g = 32;
  c.n_s = 8;
  return c;
}

}  // namespace hmtpf
