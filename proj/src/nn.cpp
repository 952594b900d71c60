#include "hmtpf/nn.hpp"

#include <cmath>

namespace hmtpf {

Tensor ParamSet::create(const std::string& name, Shape shape, Init init, Rng& rng) {
  if (contains(name)) throw ConfigError("ParamSet: duplicate parameter name " + name);
  Tensor t = Tensor::zeros(shape);
  auto values = t.mutable_data();
  switch (init) {
    case Init::kZeros: break;
    case Init::kOnes: std::fill(values.begin(), values.end(), 1.0); break;
    case Init::kFanIn: {
      const double fan_in = static_cast<double>(shape.empty() ? 1 : shape[0]);
      const double stddev = 1.0 / std::sqrt(fan_in);
      std::normal_distribution<double> normal(0.0, 1.0);
      for (double& v : values) {
        double z = normal(rng);
        while (std::fabs(z) > kInitTruncation) z = normal(rng);
        v = z * stddev;
      }
      break;
    }
  }
  t.set_requires_grad(true);
  entries_.push_back({name, t});
  return t;
}

std::vector<Tensor> ParamSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.value);
  return out;
}

const Tensor& ParamSet::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.value;
  throw ConfigError("ParamSet: no parameter named " + name);
}

bool ParamSet::contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

void ParamSet::set_requires_grad(bool flag) {
  for (auto& e : entries_) {
    e.value.set_requires_grad(flag);
    if (!flag) e.value.impl()->grad.clear();
  }
}

void ParamSet::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

double ParamSet::grad_norm() const {
  double acc = 0.0;
  for (const auto& e : entries_)
    for (double g : e.value.grad()) acc += g * g;
  return std::sqrt(acc);
}

std::vector<double> ParamSet::snapshot() const {
  std::vector<double> out;
  out.reserve(scalar_count());
  for (const auto& e : entries_) out.insert(out.end(), e.value.data().begin(), e.value.data().end());
  return out;
}

void ParamSet::load_values(const ParamSet& other) {
  if (other.entries_.size() != entries_.size()) {
    throw ConfigError("ParamSet::load_values: parameter count mismatch");
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& src = other.entries_[i];
    auto& dst = entries_[i];
    if (src.name != dst.name || src.value.shape() != dst.value.shape()) {
      throw ConfigError("ParamSet::load_values: mismatch at " + dst.name + " vs " + src.name);
    }
    std::copy(src.value.data().begin(), src.value.data().end(), dst.value.mutable_data().begin());
  }
}

Linear make_linear(ParamSet& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                   Init weight_init) {
  Linear l;
  l.w = params.create(name + ".w", {in, out}, weight_init, rng);
  l.b = params.create(name + ".b", {out}, Init::kZeros, rng);
  return l;
}

Tensor Mlp::operator()(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](h);
    if (i + 1 < layers.size()) h = gelu(h);
  }
  return h;
}

Mlp make_mlp(ParamSet& params, const std::string& name, const std::vector<std::size_t>& widths, Rng& rng,
             bool zero_final) {
  if (widths.size() < 2) throw ConfigError("make_mlp: need at least input and output widths");
  Mlp mlp;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = i + 2 == widths.size();
    mlp.layers.push_back(make_linear(params, name + "." + std::to_string(i), widths[i], widths[i + 1], rng,
                                     last && zero_final ? Init::kZeros : Init::kFanIn));
  }
  return mlp;
}

GalerkinAttention make_galerkin_attention(ParamSet& params, const std::string& name, std::size_t width,
                                          std::size_t heads, Rng& rng) {
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("galerkin attention: width " + std::to_string(width) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const std::size_t dh = width / heads;
  GalerkinAttention attn;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::string p = name + ".h" + std::to_string(h);
    attn.wq.push_back(params.create(p + ".wq", {width, dh}, Init::kFanIn, rng));
    attn.wk.push_back(params.create(p + ".wk", {width, dh}, Init::kFanIn, rng));
    attn.wv.push_back(params.create(p + ".wv", {width, dh}, Init::kFanIn, rng));
  }
  attn.out = make_linear(params, name + ".out", width, width, rng);
  return attn;
}

Tensor galerkin_attention(const Tensor& queries, const Tensor& context, const GalerkinAttention& attn,
                          double eps) {
  if (queries.rank() != 2 || context.rank() != 2 || queries.shape()[1] != context.shape()[1]) {
    throw DimensionError("galerkin_attention: widths of " + shape_str(queries.shape()) + " and " +
                         shape_str(context.shape()) + " differ");
  }
  const double inv_n = 1.0 / static_cast<double>(context.shape()[0]);
  std::vector<Tensor> heads;
  heads.reserve(attn.heads());
  for (std::size_t h = 0; h < attn.heads(); ++h) {
    Tensor q = matmul(queries, attn.wq[h]);
    Tensor k = seq_norm(matmul(context, attn.wk[h]), eps);
    Tensor v = seq_norm(matmul(context, attn.wv[h]), eps);
    Tensor kv = scale(matmul(transpose(k), v), inv_n);  // d_h × d_h
    heads.push_back(matmul(q, kv));
  }
  Tensor mixed = heads.size() == 1 ? heads[0] : concat_cols(heads);
  return add(queries, attn.out(mixed));
}

}  // namespace hmtpf
