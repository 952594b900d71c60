#pragma once

// Physics-informed fine-tuning: a residual encoder proposes latent
// corrections δz, a second head adds to the frozen one, and the loss anchors
// the corrected prediction to the backbone's on masked points while
// penalizing continuity and momentum residuals. Ground truth never enters the
// loss.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hmtpf/model.hpp"
#include "hmtpf/physics.hpp"
#include "hmtpf/train.hpp"

namespace hmtpf {

/// Residual encoder and the extra decoding head. Both final layers start at
/// zero, so a fresh set leaves the backbone prediction untouched.
class FinetuneParams {
 public:
  FinetuneParams(const ModelConfig& cfg, std::uint64_t seed);
  FinetuneParams(const FinetuneParams& other);
  FinetuneParams& operator=(const FinetuneParams& other);
  FinetuneParams(FinetuneParams&&) noexcept = default;
  FinetuneParams& operator=(FinetuneParams&&) noexcept = default;

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  const Mlp& residual_encoder() const { return e3_; }
  const Mlp& head() const { return ffn_ft_; }
  std::uint64_t seed() const { return seed_; }
  const ModelConfig& config() const { return cfg_; }

 private:
  void build();

  ModelConfig cfg_;
  std::uint64_t seed_ = 0;
  ParamSet params_;
  Mlp e3_;      // 3·(1+d) pooled statistics → N_g
  Mlp ffn_ft_;  // N_g → N_phi
};

/// Per-channel binary masks [T × N_Q]; channel c keeps round(ξ_c·T·N_Q)
/// entries drawn without replacement.
struct MaskSpec {
  std::vector<double> xi;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::uint8_t>> masks;
};

/// `xi` holds one value per channel, or one value for all channels.
MaskSpec make_masks(std::vector<double> xi, std::size_t n_phi, std::size_t t, std::size_t n_q, std::uint64_t seed);

struct FinetuneConfig {
  double lambda_phi = 1.0;
  double lambda_r = 1.0;
  std::size_t steps = 200;
  AdamConfig optim{1e-3, 0.9, 0.999, 0.0, 1e-8};
  std::vector<double> xi{0.5};
  std::uint64_t seed = 0;
  FdConfig fd;

  bool operator==(const FinetuneConfig& o) const {
    return lambda_phi == o.lambda_phi && lambda_r == o.lambda_r && steps == o.steps && optim == o.optim &&
           xi == o.xi && seed == o.seed && fd.dx == o.fd.dx;
  }
  void validate() const;
};

/// Pooled residual statistics per step: mean, mean of squares and max |r|
/// over query points for each component, [T' × 3·(1+d)].
Tensor residual_statistics(const ResidualField& res);

/// δz [T × N_g]. Step i reads residual row min(i, T'−1); zero when T' = 0.
Tensor encode_residuals(const ResidualField& res, std::size_t t_steps, const FinetuneParams& ft);

/// z̃ = z + δz; z0 is carried over unchanged.
LatentTrajectory apply_correction(const LatentTrajectory& traj, const Tensor& delta_z);

/// FFN(𝒟(z̃)) + FFN_FT(𝒟(z̃)) from one decoder pass, [T × N_Q × N_phi].
Tensor decode_finetuned(const LatentTrajectory& z_tilde, const Tensor& g0, const Tensor& h_q, const Model& m,
                        const FinetuneParams& ft);

struct FinetuneLoss {
  Tensor total;
  Tensor self_supervised;  // Σ_c 1/(N_Q·T·ξ_c) Σ M_c ⊙ (φ̃_c − φ̂_c)²
  Tensor physics;          // Σ over residual components of mean(r²)
};

FinetuneLoss loss_l2(const Tensor& phi_tilde, const Tensor& phi_hat, const MaskSpec& masks,
                     const ResidualField& res_tilde, const FinetuneConfig& cfg);

struct FinetuneHistoryRow {
  std::size_t step = 0;
  double loss = 0.0;
  double l_selfsup = 0.0;
  double r_continuity = 0.0;
  std::vector<double> r_momentum;
  double r_total = 0.0;
  std::optional<double> mse_vs_gt;
};

std::string render_finetune_history(const std::vector<FinetuneHistoryRow>& rows);

/// Corrected prediction of a model + fine-tune set on one sample.
struct FinetunedEval {
  Tensor phi_hat;
  Tensor phi_tilde;
  ResidualField res_hat;
  ResidualField res_tilde;
  std::vector<double> dx;
};

FinetunedEval evaluate_finetuned(const Model& m, const FinetuneParams& ft, const FieldPack& pack, const FdConfig& fd);

/// Runs cfg.steps AdamW updates on `ft` only. The history has cfg.steps + 1
/// rows: row k describes the state after k updates. `has_gt` adds the
/// diagnostic mse_vs_gt column. Throws NumericError with the step index on a
/// non-finite loss, and std::logic_error if the backbone changed.
std::vector<FinetuneHistoryRow> finetune_loop(Model& backbone, FinetuneParams& ft, const FieldPack& sample,
                                              const FinetuneConfig& cfg, bool has_gt = true);

Checkpoint make_finetune_checkpoint(const FinetuneParams& ft, std::string config);
void restore_finetune(const Checkpoint& ck, FinetuneParams& ft);

}  // namespace hmtpf
