#include "hmtpf/latent_mamba.hpp"

#include <cmath>

namespace hmtpf {

MambaParams make_mamba(ParamSet& params, const ModelConfig& cfg, Rng& rng) {
  MambaParams p;
  p.n_g = cfg.n_g;
  p.n_s = cfg.n_s;
  p.inner = cfg.n_g;
  const std::size_t e = p.inner;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t l = 0; l < cfg.mamba_layers; ++l) {
    const std::string name = "mamba" + std::to_string(l);
    MambaLayer layer;
    layer.norm_gain = params.create(name + ".norm_gain", {cfg.n_g}, Init::kOnes, rng);
    layer.w_in = params.create(name + ".w_in", {cfg.n_g, e}, Init::kFanIn, rng);
    layer.w_gate = params.create(name + ".w_gate", {cfg.n_g, e}, Init::kFanIn, rng);
    layer.delta = make_linear(params, name + ".delta", e, e, rng);
    for (double& b : layer.delta.b.mutable_data()) {
      const double dt = std::exp(std::log(kDeltaMin) + unit(rng) * (std::log(kDeltaMax) - std::log(kDeltaMin)));
      b = std::log(std::expm1(dt));  // softplus⁻¹
    }
    layer.w_b = params.create(name + ".w_b", {e, cfg.n_s}, Init::kFanIn, rng);
    layer.w_c = params.create(name + ".w_c", {e, cfg.n_s}, Init::kFanIn, rng);
    layer.a_log = params.create(name + ".a_log", {e, cfg.n_s}, Init::kZeros, rng);
    auto a = layer.a_log.mutable_data();
    for (std::size_t i = 0; i < e; ++i)
      for (std::size_t s = 0; s < cfg.n_s; ++s) a[i * cfg.n_s + s] = std::log(static_cast<double>(s + 1));
    layer.d_skip = params.create(name + ".d_skip", {e}, Init::kOnes, rng);
    layer.w_out = params.create(name + ".w_out", {e, cfg.n_g}, Init::kFanIn, rng);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

Tensor aggregate_z0(const Tensor& g0) {
  if (g0.rank() != 2 || g0.dim(0) == 0) {
    throw DimensionError("aggregate_z0: need a non-empty [N × N_g] matrix, got " + shape_str(g0.shape()));
  }
  return reshape(reduce_max(g0, 0), {1, g0.dim(1)});
}

Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c,
                      const Tensor& d) {
  const std::size_t len = u.dim(0), e = u.dim(1), ns = a.dim(1);
  if (delta.shape() != u.shape() || a.dim(0) != e || b.shape() != Shape{len, ns} || c.shape() != b.shape() ||
      d.size() != e) {
    throw DimensionError("selective_scan: inconsistent shapes u" + shape_str(u.shape()) + " delta" +
                         shape_str(delta.shape()) + " a" + shape_str(a.shape()) + " b" + shape_str(b.shape()) +
                         " c" + shape_str(c.shape()) + " d" + shape_str(d.shape()));
  }
  // States h_0..h_L (h_0 = 0) kept for the backward pass.
  auto states = std::make_shared<std::vector<double>>((len + 1) * e * ns, 0.0);
  std::vector<double> y(len * e);
  const double* pu = u.data().data();
  const double* pd = delta.data().data();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  const double* pc = c.data().data();
  const double* pskip = d.data().data();
  for (std::size_t t = 0; t < len; ++t) {
    const double* hp = states->data() + t * e * ns;
    double* hn = states->data() + (t + 1) * e * ns;
    for (std::size_t i = 0; i < e; ++i) {
      const double dl = pd[t * e + i];
      const double ut = pu[t * e + i];
      double acc = 0.0;
      for (std::size_t s = 0; s < ns; ++s) {
        const double h = std::exp(dl * pa[i * ns + s]) * hp[i * ns + s] + dl * ut * pb[t * ns + s];
        hn[i * ns + s] = h;
        acc += h * pc[t * ns + s];
      }
      y[t * e + i] = acc + pskip[i] * ut;
    }
  }
  TensorImpl *ui = u.impl(), *di = delta.impl(), *ai = a.impl(), *bi = b.impl(), *ci = c.impl(), *si = d.impl();
  return autodiff::make_result({len, e}, std::move(y), {u, delta, a, b, c, d},
                               [=](const TensorImpl& out) {
    const std::vector<double>& gy = out.grad;
    std::vector<double> gu(len * e, 0.0), gdl(len * e, 0.0), ga(e * ns, 0.0), gb(len * ns, 0.0),
        gc(len * ns, 0.0), gskip(e, 0.0);
    std::vector<double> gh(e * ns, 0.0);  // dL/dh_t flowing back from later steps
    const double* pu = ui->data.data();
    const double* pd = di->data.data();
    const double* pa = ai->data.data();
    const double* pb = bi->data.data();
    const double* pc = ci->data.data();
    const double* pskip = si->data.data();
    for (std::size_t tt = len; tt-- > 0;) {
      const double* hp = states->data() + tt * e * ns;
      const double* hn = states->data() + (tt + 1) * e * ns;
      for (std::size_t i = 0; i < e; ++i) {
        const double g = gy[tt * e + i];
        const double dl = pd[tt * e + i];
        const double ut = pu[tt * e + i];
        gskip[i] += g * ut;
        gu[tt * e + i] += g * pskip[i];
        for (std::size_t s = 0; s < ns; ++s) {
          const std::size_t is = i * ns + s;
          gc[tt * ns + s] += g * hn[is];
          const double ght = gh[is] + g * pc[tt * ns + s];
          const double decay = std::exp(dl * pa[is]);
          const double gdecay = ght * hp[is] * decay;  // through exp(Δ·A)
          gdl[tt * e + i] += gdecay * pa[is] + ght * pb[tt * ns + s] * ut;
          ga[is] += gdecay * dl;
          gb[tt * ns + s] += ght * dl * ut;
          gu[tt * e + i] += ght * dl * pb[tt * ns + s];
          gh[is] = ght * decay;
        }
      }
    }
    autodiff::accumulate(ui, gu);
    autodiff::accumulate(di, gdl);
    autodiff::accumulate(ai, ga);
    autodiff::accumulate(bi, gb);
    autodiff::accumulate(ci, gc);
    autodiff::accumulate(si, gskip);
  });
}

namespace {

struct LayerInputs {
  Tensor u, gate, delta, b, c, a;
};

LayerInputs project(const Tensor& x, const MambaLayer& layer) {
  const Tensor xn = rms_norm(x, layer.norm_gain, kRmsEps);
  LayerInputs in;
  in.u = silu(matmul(xn, layer.w_in));
  in.gate = silu(matmul(xn, layer.w_gate));
  in.delta = softplus(layer.delta(in.u));
  in.b = matmul(in.u, layer.w_b);
  in.c = matmul(in.u, layer.w_c);
  in.a = scale(exp(layer.a_log), -1.0);
  return in;
}

}  // namespace

Tensor ssm_scan(const Tensor& tokens, const MambaParams& p) {
  if (tokens.rank() != 2 || tokens.dim(1) != p.n_g) {
    throw DimensionError("ssm_scan: expected [L × " + std::to_string(p.n_g) + "], got " + shape_str(tokens.shape()));
  }
  Tensor x = tokens;
  for (const auto& layer : p.layers) {
    const LayerInputs in = project(x, layer);
    const Tensor y = selective_scan(in.u, in.delta, in.a, in.b, in.c, layer.d_skip);
    x = add(x, matmul(mul(y, in.gate), layer.w_out));
  }
  return x;
}

SsmState initial_state(const MambaParams& p) {
  SsmState s;
  for (std::size_t l = 0; l < p.layers.size(); ++l) s.h.push_back(Tensor::zeros({p.inner, p.n_s}));
  return s;
}

Tensor ssm_step(const Tensor& token, SsmState& state, const MambaParams& p) {
  if (token.rank() != 2 || token.dim(0) != 1 || token.dim(1) != p.n_g) {
    throw DimensionError("ssm_step: expected [1 × " + std::to_string(p.n_g) + "], got " + shape_str(token.shape()));
  }
  Tensor x = token;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const MambaLayer& layer = p.layers[l];
    const LayerInputs in = project(x, layer);
    const Tensor decay = exp(mul(transpose(in.delta), in.a));                 // [E × N_s]
    const Tensor drive = matmul(transpose(mul(in.delta, in.u)), in.b);        // [E × N_s]
    state.h[l] = add(mul(decay, state.h[l]), drive);
    const Tensor read = transpose(matmul(state.h[l], transpose(in.c)));       // [1 × E]
    const Tensor y = add(read, mul(in.u, layer.d_skip));
    x = add(x, matmul(mul(y, in.gate), layer.w_out));
  }
  return x;
}

Tensor ssm_scan_stepwise(const Tensor& tokens, const MambaParams& p) {
  SsmState state = initial_state(p);
  std::vector<Tensor> rows;
  for (std::size_t t = 0; t < tokens.dim(0); ++t) rows.push_back(ssm_step(slice_rows(tokens, t, t + 1), state, p));
  if (rows.empty()) return Tensor::zeros({0, p.n_g});
  return concat_rows(rows);
}

LatentTrajectory rollout(const Tensor& z0, std::size_t t_steps, const MambaParams& p) {
  LatentTrajectory traj;
  traj.z0 = z0;
  if (t_steps == 0) {
    traj.z = Tensor::zeros({0, p.n_g});
    return traj;
  }
  SsmState state = initial_state(p);
  std::vector<Tensor> rows;
  Tensor token = z0;
  for (std::size_t i = 0; i < t_steps; ++i) {
    token = ssm_step(token, state, p);
    rows.push_back(token);
  }
  traj.z = concat_rows(rows);
  return traj;
}

LatentTrajectory rollout_rescan(const Tensor& z0, std::size_t t_steps, const MambaParams& p) {
  LatentTrajectory traj;
  traj.z0 = z0;
  std::vector<Tensor> tokens{z0};
  std::vector<Tensor> rows;
  for (std::size_t i = 0; i < t_steps; ++i) {
    const Tensor out = ssm_scan(concat_rows(tokens), p);
    const Tensor next = slice_rows(out, out.dim(0) - 1, out.dim(0));
    rows.push_back(next);
    tokens.push_back(next);
  }
  traj.z = rows.empty() ? Tensor::zeros({0, p.n_g}) : concat_rows(rows);
  return traj;
}

}  // namespace hmtpf
