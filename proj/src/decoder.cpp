#include "hmtpf/decoder.hpp"

namespace hmtpf {

DecoderParams make_decoder(ParamSet& params, const ModelConfig& cfg, Rng& rng) {
  DecoderParams p;
  p.mlp_query = make_mlp(params, "dec.mlp_query", {cfg.d, cfg.n_g, cfg.n_g}, rng);
  p.mlp_fuse = make_mlp(params, "dec.mlp_fuse", {2 * cfg.n_g, cfg.n_g, cfg.n_g}, rng);
  p.cross_attn = make_galerkin_attention(params, "dec.cross_attn", cfg.n_g, cfg.heads, rng);
  p.ffn = make_mlp(params, "dec.ffn", {cfg.n_g, cfg.n_g, cfg.n_phi}, rng);
  return p;
}

Tensor encode_queries(const Tensor& x_q, const DecoderParams& p) {
  if (x_q.rank() != 2 || x_q.dim(1) != p.mlp_query.in_width()) {
    throw DimensionError("encode_queries: expected [N_Q × " + std::to_string(p.mlp_query.in_width()) + "], got " +
                         shape_str(x_q.shape()));
  }
  return p.mlp_query(x_q);
}

Tensor fuse_step(const Tensor& h_prev, const Tensor& z_i, const DecoderParams& p) {
  if (z_i.rank() != 2 || z_i.dim(0) != 1 || h_prev.rank() != 2 ||
      h_prev.dim(1) + z_i.dim(1) != p.mlp_fuse.in_width()) {
    throw DimensionError("fuse_step: widths " + shape_str(h_prev.shape()) + " and " + shape_str(z_i.shape()) +
                         " do not match mlp_fuse");
  }
  return p.mlp_fuse(concat_cols({h_prev, broadcast_rows(z_i, h_prev.dim(0))}));
}

Tensor galerkin_cross_attention(const Tensor& h_q, const Tensor& h_i, const DecoderParams& p) {
  return galerkin_attention(h_q, h_i, p.cross_attn);
}

std::vector<Tensor> decode_features(const LatentTrajectory& traj, const Tensor& g0, const Tensor& h_q,
                                    const DecoderParams& p) {
  std::vector<Tensor> out;
  Tensor h = g0;
  for (std::size_t i = 0; i < traj.steps(); ++i) {
    h = fuse_step(h, traj.step(i), p);
    out.push_back(galerkin_cross_attention(h_q, h, p));
  }
  return out;
}

Tensor apply_head(const std::vector<Tensor>& features, const Mlp& head) {
  if (features.empty()) throw DimensionError("apply_head: no time steps to decode");
  std::vector<Tensor> steps;
  steps.reserve(features.size());
  for (const Tensor& f : features) {
    const Tensor v = head(f);
    steps.push_back(reshape(v, {1, v.dim(0), v.dim(1)}));
  }
  return concat_rows(steps);
}

Tensor decode_fields(const LatentTrajectory& traj, const Tensor& g0, const Tensor& h_q, const DecoderParams& p) {
  return apply_head(decode_features(traj, g0, h_q, p), p.ffn);
}

}  // namespace hmtpf
