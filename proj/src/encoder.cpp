#include "hmtpf/encoder.hpp"

#include <algorithm>
#include <numeric>

namespace hmtpf {

EncoderParams make_encoder(ParamSet& params, const ModelConfig& cfg, Rng& rng) {
  EncoderParams p;
  p.k = cfg.k;
  p.mlp_xy = make_mlp(params, "enc.mlp_xy", {cfg.d, cfg.n_c, cfg.n_c}, rng);
  p.mlp_id = make_mlp(params, "enc.mlp_id", {1, cfg.n_c, cfg.n_c}, rng);
  p.mlp_phi = make_mlp(params, "enc.mlp_phi", {cfg.n_phi, cfg.n_c, cfg.n_c}, rng);
  p.mlp_fusion = make_mlp(params, "enc.mlp_fusion", {3 * cfg.n_c, cfg.n_g, cfg.n_g}, rng);
  p.edge_mlp = make_mlp(params, "enc.edge_mlp", {2 * cfg.n_g, cfg.n_g, cfg.n_g}, rng);
  for (std::size_t l = 0; l < cfg.attn_layers; ++l) {
    p.attn.push_back(make_galerkin_attention(params, "enc.attn" + std::to_string(l), cfg.n_g, cfg.heads, rng));
  }
  return p;
}

EncoderInputs encoder_inputs(const FieldPack& pack) {
  EncoderInputs in;
  in.x_bd = Tensor::from({pack.n_bd, pack.d}, pack.x_bd);
  std::vector<double> ids(pack.id.begin(), pack.id.end());
  in.id = Tensor::from({pack.n_bd, 1}, std::move(ids));
  in.phi0 = Tensor::from({pack.n_bd, pack.n_phi()}, pack.phi0);
  return in;
}

InputEmbeddings embed_inputs(const EncoderInputs& in, const EncoderParams& p) {
  return {p.mlp_xy(in.x_bd), p.mlp_id(in.id), p.mlp_phi(in.phi0)};
}

Tensor fuse(const InputEmbeddings& y, const EncoderParams& p) {
  const std::size_t n = y.y1.dim(0);
  if (y.y2.dim(0) != n || y.y3.dim(0) != n) {
    throw DimensionError("fuse: row counts " + shape_str(y.y1.shape()) + ", " + shape_str(y.y2.shape()) +
                         ", " + shape_str(y.y3.shape()) + " differ");
  }
  return p.mlp_fusion(concat_cols({y.y1, y.y2, y.y3}));
}

NeighborIndex knn_grouping(std::span<const double> x, std::size_t n, std::size_t d, std::size_t k) {
  if (k < 1 || k >= n) {
    throw ConfigError("knn_grouping: need 1 <= k < N, got k=" + std::to_string(k) + ", N=" + std::to_string(n));
  }
  if (x.size() != n * d) throw DimensionError("knn_grouping: coordinate count does not match n×d");
  NeighborIndex out;
  out.n = n;
  out.k = k;
  out.idx.resize(n * k);
  std::vector<std::pair<double, std::size_t>> cand;
  cand.reserve(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    cand.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double dist = 0.0;
      for (std::size_t a = 0; a < d; ++a) {
        const double diff = x[i * d + a] - x[j * d + a];
        dist += diff * diff;
      }
      cand.emplace_back(dist, j);
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
    for (std::size_t r = 0; r < k; ++r) out.idx[i * k + r] = cand[r].second;
  }
  return out;
}

Tensor local_feature_embedding(const Tensor& y_fusion, const NeighborIndex& nbr, const EncoderParams& p) {
  const std::size_t n = y_fusion.dim(0);
  const std::size_t width = y_fusion.dim(1);
  if (nbr.n != n) throw DimensionError("local_feature_embedding: neighbour table built for a different point set");
  for (std::size_t v : nbr.idx)
    if (v >= n) throw DimensionError("local_feature_embedding: neighbour index " + std::to_string(v) + " out of range");
  const Linear& first = p.edge_mlp.layers.front();
  if (first.w.dim(0) != 2 * width) throw DimensionError("local_feature_embedding: edge_mlp input width mismatch");

  // The first edge layer acts on concat(y_k − y_i, y_i); split its weight so the
  // per-point products are formed once: y_k·W_top + y_i·(W_bot − W_top) + b.
  const Tensor w_top = slice_rows(first.w, 0, width);
  const Tensor w_bot = slice_rows(first.w, width, 2 * width);
  const Tensor from_neighbor = matmul(y_fusion, w_top);
  const Tensor from_center = matmul(y_fusion, sub(w_bot, w_top));

  std::vector<std::size_t> center(n * nbr.k);
  for (std::size_t i = 0; i < n; ++i) std::fill_n(center.begin() + static_cast<std::ptrdiff_t>(i * nbr.k), nbr.k, i);
  Tensor h = add(add(gather_rows(from_neighbor, nbr.idx), gather_rows(from_center, center)), first.b);
  for (std::size_t l = 1; l < p.edge_mlp.layers.size(); ++l) h = p.edge_mlp.layers[l](gelu(h));
  const std::size_t out_width = h.dim(1);
  return reduce_max(reshape(h, {n, nbr.k, out_width}), 1);
}

Tensor galerkin_self_attention(const Tensor& y_l, const EncoderParams& p) {
  Tensor x = y_l;
  for (const auto& layer : p.attn) x = galerkin_attention(x, x, layer);
  return x;
}

Tensor encode(const EncoderInputs& in, const EncoderParams& p) {
  const std::size_t n = in.x_bd.dim(0);
  const NeighborIndex nbr = knn_grouping(in.x_bd.data(), n, in.x_bd.dim(1), p.k);
  const Tensor y_fusion = fuse(embed_inputs(in, p), p);
  return galerkin_self_attention(local_feature_embedding(y_fusion, nbr, p), p);
}

}  // namespace hmtpf
