#include "hmtpf/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "hmtpf/errors.hpp"
#include "hmtpf/util.hpp"

namespace hmtpf {

FinetuneParams::FinetuneParams(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) { build(); }

FinetuneParams::FinetuneParams(const FinetuneParams& other) : cfg_(other.cfg_), seed_(other.seed_) {
  build();
  params_.load_values(other.params_);
}

FinetuneParams& FinetuneParams::operator=(const FinetuneParams& other) {
  if (this != &other) *this = FinetuneParams(other);
  return *this;
}

void FinetuneParams::build() {
  params_ = ParamSet{};
  Rng rng(seed_);
  const std::size_t stats = 3 * (1 + cfg_.d);
  e3_ = make_mlp(params_, "ft.e3", {stats, cfg_.n_g, cfg_.n_g}, rng, /*zero_final=*/true);
  ffn_ft_ = make_mlp(params_, "ft.ffn", {cfg_.n_g, cfg_.n_g, cfg_.n_phi}, rng, /*zero_final=*/true);
}

MaskSpec make_masks(std::vector<double> xi, std::size_t n_phi, std::size_t t, std::size_t n_q, std::uint64_t seed) {
  if (xi.size() == 1) xi.assign(n_phi, xi.front());
  if (xi.size() != n_phi) {
    throw ConfigError("finetune.xi: expected 1 or " + std::to_string(n_phi) + " values, got " +
                      std::to_string(xi.size()));
  }
  for (double x : xi)
    if (!(x > 0.0 && x <= 1.0)) throw ConfigError("finetune.xi: every proportion must lie in (0, 1]");
  MaskSpec spec;
  spec.xi = xi;
  spec.seed = seed;
  const std::size_t cells = t * n_q;
  Rng rng(seed);
  std::vector<std::size_t> idx(cells);
  for (std::size_t c = 0; c < n_phi; ++c) {
    const auto keep = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(xi[c] * static_cast<double>(cells))), 1, cells);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::uint8_t> m(cells, 0);
    for (std::size_t i = 0; i < keep; ++i) m[idx[i]] = 1;
    spec.masks.push_back(std::move(m));
  }
  return spec;
}

void FinetuneConfig::validate() const {
  if (!(lambda_phi >= 0.0) || !(lambda_r >= 0.0)) throw ConfigError("finetune: loss weights must be non-negative");
  if (!(optim.lr > 0.0)) throw ConfigError("finetune.lr must be positive");
  if (xi.empty()) throw ConfigError("finetune.xi: no proportion given");
  for (double x : xi) {
    if (x == 0.0) throw ConfigError("finetune.xi: a proportion of 0 would divide the self-supervision term by zero");
    if (!(x > 0.0 && x <= 1.0)) throw ConfigError("finetune.xi: every proportion must lie in (0, 1]");
  }
}

Tensor residual_statistics(const ResidualField& res) {
  std::vector<Tensor> cols;
  const std::size_t steps = res.steps();
  for (const Tensor& r : res.components()) {
    cols.push_back(reshape(reduce_mean(r, 1), {steps, 1}));
    cols.push_back(reshape(reduce_mean(mul(r, r), 1), {steps, 1}));
    cols.push_back(reshape(reduce_max(abs(r), 1), {steps, 1}));
  }
  return concat_cols(cols);
}

Tensor encode_residuals(const ResidualField& res, std::size_t t_steps, const FinetuneParams& ft) {
  const std::size_t width = ft.residual_encoder().out_width();
  const std::size_t rows = res.continuity.defined() ? res.steps() : 0;
  if (rows == 0) return Tensor::zeros({t_steps, width});
  if (res.momentum.size() != ft.config().d) {
    throw DimensionError("encode_residuals: residuals carry " + std::to_string(res.momentum.size()) +
                         " momentum axes, expected " + std::to_string(ft.config().d));
  }
  const Tensor per_row = ft.residual_encoder()(residual_statistics(res));
  std::vector<std::size_t> pick(t_steps);
  for (std::size_t i = 0; i < t_steps; ++i) pick[i] = std::min(i, rows - 1);
  return gather_rows(per_row, pick);
}

LatentTrajectory apply_correction(const LatentTrajectory& traj, const Tensor& delta_z) {
  if (delta_z.shape() != traj.z.shape()) {
    throw DimensionError("apply_correction: δz " + shape_str(delta_z.shape()) + " vs z " + shape_str(traj.z.shape()));
  }
  return {traj.z0, add(traj.z, delta_z)};
}

Tensor decode_finetuned(const LatentTrajectory& z_tilde, const Tensor& g0, const Tensor& h_q, const Model& m,
                        const FinetuneParams& ft) {
  const std::vector<Tensor> features = decode_features(z_tilde, g0, h_q, m.decoder());
  return add(apply_head(features, m.decoder().ffn), apply_head(features, ft.head()));
}

FinetuneLoss loss_l2(const Tensor& phi_tilde, const Tensor& phi_hat, const MaskSpec& masks,
                     const ResidualField& res_tilde, const FinetuneConfig& cfg) {
  if (phi_tilde.shape() != phi_hat.shape() || phi_tilde.rank() != 3) {
    throw DimensionError("loss_l2: predictions " + shape_str(phi_tilde.shape()) + " and " +
                         shape_str(phi_hat.shape()) + " must match and be [T × N_Q × N_phi]");
  }
  const std::size_t t = phi_tilde.dim(0), n_q = phi_tilde.dim(1), n_phi = phi_tilde.dim(2);
  if (masks.masks.size() != n_phi || masks.xi.size() != n_phi) {
    throw DimensionError("loss_l2: masks cover " + std::to_string(masks.masks.size()) + " channels, need " +
                         std::to_string(n_phi));
  }
  std::vector<double> weight(t * n_q * n_phi);
  for (std::size_t c = 0; c < n_phi; ++c) {
    if (masks.xi[c] == 0.0) throw ConfigError("loss_l2: ξ = 0 for channel " + std::to_string(c));
    if (masks.masks[c].size() != t * n_q) throw DimensionError("loss_l2: mask extent differs from T × N_Q");
    const double norm = 1.0 / (static_cast<double>(n_q * t) * masks.xi[c]);
    for (std::size_t i = 0; i < t * n_q; ++i) weight[i * n_phi + c] = masks.masks[c][i] ? norm : 0.0;
  }
  const Tensor diff = sub(phi_tilde, phi_hat);
  FinetuneLoss out;
  out.self_supervised = sum(mul(Tensor::from(phi_tilde.shape(), std::move(weight)), mul(diff, diff)));
  out.physics = residual_loss(res_tilde);
  out.total = add(scale(out.self_supervised, cfg.lambda_phi), scale(out.physics, cfg.lambda_r));
  return out;
}

std::string render_finetune_history(const std::vector<FinetuneHistoryRow>& rows) {
  std::string out = "step,loss,l_selfsup,r_continuity";
  const std::size_t axes = rows.empty() ? 2 : rows.front().r_momentum.size();
  const char* names[] = {"x", "y", "z"};
  for (std::size_t a = 0; a < axes; ++a) out += std::string(",r_momentum_") + (a < 3 ? names[a] : std::to_string(a));
  const bool gt = !rows.empty() && rows.front().mse_vs_gt.has_value();
  if (gt) out += ",mse_vs_gt";
  out += "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + format_double(r.loss) + "," + format_double(r.l_selfsup) + "," +
           format_double(r.r_continuity);
    for (double m : r.r_momentum) out += "," + format_double(m);
    if (gt) out += "," + format_double(r.mse_vs_gt.value_or(0.0));
    out += "\n";
  }
  return out;
}

namespace {

/// Backbone quantities that stay fixed while only the fine-tune set moves.
struct FrozenContext {
  Latents latents;
  Tensor h_q_stencil;  // encoded stencil queries, [O·N_Q × N_g]
  std::vector<std::vector<double>> offsets;
  Tensor phi_hat;
  ResidualField res_hat;
  EulerChannels channels;
  std::vector<double> dx;
};

FrozenContext freeze_backbone_outputs(const Model& m, const FieldPack& pack, const FdConfig& fd) {
  check_compatible(m, pack);
  NoGradScope no_grad;
  FrozenContext c;
  c.dx = resolve_dx(fd, pack);
  c.offsets = stencil_offsets(c.dx);
  c.channels = EulerChannels::resolve(pack.channel_names, pack.d);
  c.latents = encode_and_rollout(m, encoder_inputs(pack), pack.t);
  const StencilFields base = query_with_offsets(
      [&](const Tensor& xq) {
        c.h_q_stencil = encode_queries(xq, m.decoder());
        return decode_fields(c.latents.traj, c.latents.g0, c.h_q_stencil, m.decoder());
      },
      pack.x_q, pack.d, c.offsets);
  c.phi_hat = base.center();
  c.res_hat = residuals_euler(base, c.channels, c.dx, pack.dt);
  return c;
}

struct CorrectedPass {
  Tensor phi_tilde;
  ResidualField res_tilde;
};

CorrectedPass corrected_pass(const Model& m, const FinetuneParams& ft, const FrozenContext& c, const FieldPack& pack) {
  const Tensor dz = encode_residuals(c.res_hat, pack.t, ft);
  const LatentTrajectory z_tilde = apply_correction(c.latents.traj, dz);
  const StencilFields s = query_with_offsets(
      [&](const Tensor&) { return decode_finetuned(z_tilde, c.latents.g0, c.h_q_stencil, m, ft); }, pack.x_q,
      pack.d, c.offsets);
  return {s.center(), residuals_euler(s, c.channels, c.dx, pack.dt)};
}

class FreezeGuard {
 public:
  explicit FreezeGuard(ParamSet& p) : p_(p) { p_.set_requires_grad(false); }
  ~FreezeGuard() { p_.set_requires_grad(true); }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  ParamSet& p_;
};

}  // namespace

FinetunedEval evaluate_finetuned(const Model& m, const FinetuneParams& ft, const FieldPack& pack, const FdConfig& fd) {
  const FrozenContext c = freeze_backbone_outputs(m, pack, fd);
  NoGradScope no_grad;
  CorrectedPass p = corrected_pass(m, ft, c, pack);
  return {c.phi_hat, p.phi_tilde, c.res_hat, p.res_tilde, c.dx};
}

std::vector<FinetuneHistoryRow> finetune_loop(Model& backbone, FinetuneParams& ft, const FieldPack& sample,
                                              const FinetuneConfig& cfg, bool has_gt) {
  cfg.validate();
  const std::vector<double> before = backbone.params().snapshot();
  std::vector<FinetuneHistoryRow> history;
  {
    FreezeGuard freeze(backbone.params());
    const FrozenContext c = freeze_backbone_outputs(backbone, sample, cfg.fd);
    const MaskSpec masks = make_masks(cfg.xi, sample.n_phi(), sample.t, sample.n_q, cfg.seed);
    const Tensor gt = has_gt ? Tensor::from({sample.t, sample.n_q, sample.n_phi()}, sample.phi) : Tensor{};
    AdamState optim = make_adam_state(ft.params());
    for (std::size_t step = 0; step <= cfg.steps; ++step) {
      ft.params().zero_grad();
      Tape tape;
      TapeScope scope(tape);
      const CorrectedPass p = corrected_pass(backbone, ft, c, sample);
      const FinetuneLoss loss = loss_l2(p.phi_tilde, c.phi_hat, masks, p.res_tilde, cfg);
      FinetuneHistoryRow row;
      row.step = step;
      row.loss = loss.total.item();
      row.l_selfsup = loss.self_supervised.item();
      const RReport r = r_metric(p.res_tilde);
      row.r_continuity = r.continuity;
      row.r_momentum = r.momentum;
      row.r_total = r.total;
      if (has_gt) row.mse_vs_gt = mse_metric(p.phi_tilde, gt).total;
      history.push_back(row);
      if (!std::isfinite(row.loss)) {
        throw NumericError("fine-tune loss is not finite at step " + std::to_string(step));
      }
      if (step == cfg.steps) break;
      tape.backward(loss.total);
      adamw_step(ft.params(), optim, cfg.optim);
    }
  }
  if (backbone.params().snapshot() != before) throw std::logic_error("fine-tuning modified backbone parameters");
  return history;
}

Checkpoint make_finetune_checkpoint(const FinetuneParams& ft, std::string config) {
  Checkpoint ck;
  ck.kind = "finetune";
  ck.config = std::move(config);
  ck.tensors = checkpoint_entries(ft.params(), nullptr);
  return ck;
}

void restore_finetune(const Checkpoint& ck, FinetuneParams& ft) {
  if (ck.kind != "finetune") throw ConfigError("expected a fine-tune checkpoint, got kind '" + ck.kind + "'");
  restore_entries(ck.tensors, ft.params(), nullptr);
}

}  // namespace hmtpf
