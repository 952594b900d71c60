#pragma once

// Point-set encoder: per-input embeddings, fusion, KNN edge features with
// max-pooling, and stacked Galerkin self-attention producing the global
// point features G0 [N_BD × N_g].

#include <span>
#include <vector>

#include "hmtpf/dataio.hpp"
#include "hmtpf/model_config.hpp"
#include "hmtpf/nn.hpp"

namespace hmtpf {

struct EncoderParams {
  Mlp mlp_xy;      // d → N_C
  Mlp mlp_id;      // 1 → N_C
  Mlp mlp_phi;     // N_phi → N_C
  Mlp mlp_fusion;  // 3·N_C → N_g
  Mlp edge_mlp;    // 2·N_g → N_g
  std::vector<GalerkinAttention> attn;
  std::size_t k = 8;
};

EncoderParams make_encoder(ParamSet& params, const ModelConfig& cfg, Rng& rng);

/// Per-sample encoder inputs as tensors: x_bd [N×d], id [N×1], phi0 [N×N_phi].
struct EncoderInputs {
  Tensor x_bd;
  Tensor id;
  Tensor phi0;
};

EncoderInputs encoder_inputs(const FieldPack& pack);

struct InputEmbeddings {
  Tensor y1, y2, y3;  // each [N × N_C]
};

InputEmbeddings embed_inputs(const EncoderInputs& in, const EncoderParams& p);
Tensor fuse(const InputEmbeddings& y, const EncoderParams& p);

/// Row-major [n × k] neighbour table.
struct NeighborIndex {
  std::size_t n = 0;
  std::size_t k = 0;
  std::vector<std::size_t> idx;

  std::span<const std::size_t> row(std::size_t i) const { return {idx.data() + i * k, k}; }
};

/// Exact brute-force KNN over rows of x [n×d], excluding the point itself;
/// equal distances resolve to the lower index. Requires 1 ≤ k ≤ n−1.
NeighborIndex knn_grouping(std::span<const double> x, std::size_t n, std::size_t d, std::size_t k);

/// Edge features concat(y(x_k) − y(x), y(x)) through edge_mlp, max-pooled over
/// each point's neighbours.
Tensor local_feature_embedding(const Tensor& y_fusion, const NeighborIndex& nbr, const EncoderParams& p);

/// Stacked residual Galerkin self-attention layers.
Tensor galerkin_self_attention(const Tensor& y_l, const EncoderParams& p);

/// embed → fuse → local feature embedding → self-attention. Returns G0.
Tensor encode(const EncoderInputs& in, const EncoderParams& p);

}  // namespace hmtpf
