#pragma once

// Stage-1 supervised training: the field reconstruction loss, AdamW, the
// per-sample training loop and versioned binary checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "hmtpf/dataio.hpp"
#include "hmtpf/model.hpp"

namespace hmtpf {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-4;
  double eps = 1e-8;

  bool operator==(const AdamConfig&) const = default;
};

/// First and second moments per parameter tensor, in ParamSet order.
struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t step = 0;
};

AdamState make_adam_state(const ParamSet& params);

/// Decoupled weight decay: w ← w − lr·(m̂ / (√v̂ + eps) + wd·w), with
/// bias-corrected moments. Parameters with requires_grad off are skipped.
void adamw_step(ParamSet& params, AdamState& state, const AdamConfig& cfg);

struct TrainConfig {
  AdamConfig optim;
  std::size_t epochs = 100;
  std::size_t batch_size = 1;   // samples per optimizer step
  std::uint64_t seed = 0;
  double sampling_rate = 1.0;   // fraction of query points in the loss
  std::size_t max_steps = 0;    // 0: no cap beyond epochs

  bool operator==(const TrainConfig&) const = default;
  void validate() const;
};

/// Σ over channels of the mean squared error over (T, N_Q); [T × N_Q × N_phi] inputs.
Tensor loss_l1(const Tensor& pred, const Tensor& gt);

/// The ⌈rate·N_Q⌉ query indices (sorted) a sample contributes to the loss.
/// Fixed for the whole run: a function of (seed, sample index) only.
std::vector<std::size_t> sample_queries(std::size_t n_q, double rate, std::uint64_t seed, std::size_t sample_index);

/// Everything needed to continue a run exactly where it stopped.
struct TrainState {
  AdamState optim;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::uint64_t position = 0;        // next index into `order`
  std::vector<std::uint64_t> order;  // sample order of the current epoch
  Rng rng;                           // draws each epoch's order
};

TrainState make_train_state(const Model& m, const TrainConfig& cfg);

struct TrainLogRow {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double loss = 0.0;
};

/// Runs optimizer steps until `cfg.epochs` are complete, `cfg.max_steps` is
/// reached, or `stop_after` more steps have run (0 = no limit). Throws
/// NumericError naming the step if the loss stops being finite.
std::vector<TrainLogRow> train_loop(Model& m, const std::vector<FieldPack>& data, const TrainConfig& cfg,
                                    TrainState& state, std::uint64_t stop_after = 0);

std::string render_train_log(const std::vector<TrainLogRow>& rows);

// ---------------------------------------------------------------------------
// Checkpoints: "HMTPFCKP" magic, u32 version, then length-prefixed fields.
// Integers are u64 and reals f64, all little-endian.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<double> value, m, v;  // m and v empty when no optimizer state
  };

  std::string kind;    // "train" or "finetune"
  std::string config;  // run configuration echo
  std::uint64_t step = 0, epoch = 0, position = 0, adam_step = 0;
  std::vector<std::uint64_t> order;
  std::string rng_state;
  std::vector<Entry> tensors;
};

std::string encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::string_view bytes, const std::string& origin);
void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
/// Throws MissingFileError, UnsupportedVersionError or CorruptFileError.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameter values plus optional optimizer moments.
std::vector<Checkpoint::Entry> checkpoint_entries(const ParamSet& params, const AdamState* optim);
/// Loads values (and moments into `optim` when given); names and shapes must match.
void restore_entries(const std::vector<Checkpoint::Entry>& entries, ParamSet& params, AdamState* optim);

Checkpoint make_train_checkpoint(const Model& m, const TrainState& state, std::string config);
void restore_train_state(const Checkpoint& ck, Model& m, TrainState& state);

}  // namespace hmtpf
