#include "hmtpf/model.hpp"

namespace hmtpf {

Model::Model(const ModelConfig& cfg) : cfg_(cfg) { build(); }

Model::Model(const Model& other) : cfg_(other.cfg_) {
  build();
  params_.load_values(other.params_);
}

Model& Model::operator=(const Model& other) {
  if (this != &other) *this = Model(other);
  return *this;
}

void Model::build() {
  if (cfg_.heads == 0 || cfg_.n_g % cfg_.heads != 0) {
    throw ConfigError("model: n_g=" + std::to_string(cfg_.n_g) + " is not divisible by heads=" +
                      std::to_string(cfg_.heads));
  }
  if (cfg_.d == 0 || cfg_.n_phi == 0 || cfg_.n_c == 0 || cfg_.n_s == 0 || cfg_.k == 0) {
    throw ConfigError("model: widths and k must be positive");
  }
  params_ = ParamSet{};
  Rng rng(cfg_.init_seed);
  enc_ = make_encoder(params_, cfg_, rng);
  mamba_ = make_mamba(params_, cfg_, rng);
  dec_ = make_decoder(params_, cfg_, rng);
}

Latents encode_and_rollout(const Model& m, const EncoderInputs& in, std::size_t t_steps) {
  Latents out;
  out.g0 = encode(in, m.encoder());
  out.traj = rollout(aggregate_z0(out.g0), t_steps, m.mamba());
  return out;
}

ForwardResult forward(const Model& m, const EncoderInputs& in, const Tensor& x_q, std::size_t t_steps) {
  ForwardResult r;
  r.latents = encode_and_rollout(m, in, t_steps);
  r.h_q = encode_queries(x_q, m.decoder());
  r.phi = decode_fields(r.latents.traj, r.latents.g0, r.h_q, m.decoder());
  return r;
}

void check_compatible(const Model& m, const FieldPack& pack) {
  if (pack.d != m.config().d || pack.n_phi() != m.config().n_phi) {
    throw ConfigError("sample has d=" + std::to_string(pack.d) + ", n_phi=" + std::to_string(pack.n_phi()) +
                      " but the model expects d=" + std::to_string(m.config().d) +
                      ", n_phi=" + std::to_string(m.config().n_phi));
  }
  if (m.config().k >= pack.n_bd) {
    throw ConfigError("sample has n_bd=" + std::to_string(pack.n_bd) + ", need more than k=" +
                      std::to_string(m.config().k) + " points");
  }
}

ForwardResult forward(const Model& m, const FieldPack& pack) {
  check_compatible(m, pack);
  return forward(m, encoder_inputs(pack), Tensor::from({pack.n_q, pack.d}, pack.x_q), pack.t);
}

}  // namespace hmtpf
