#include "hmtpf/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "hmtpf/errors.hpp"
#include "hmtpf/util.hpp"

namespace hmtpf {

AdamState make_adam_state(const ParamSet& params) {
  AdamState s;
  for (const auto& e : params.entries()) {
    s.m.emplace_back(e.value.size(), 0.0);
    s.v.emplace_back(e.value.size(), 0.0);
  }
  return s;
}

void adamw_step(ParamSet& params, AdamState& state, const AdamConfig& cfg) {
  const auto& entries = params.entries();
  if (state.m.size() != entries.size()) throw DimensionError("adamw_step: optimizer state does not match parameters");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t p = 0; p < entries.size(); ++p) {
    Tensor w = entries[p].value;
    if (!w.requires_grad()) continue;
    auto values = w.mutable_data();
    const auto grad = w.grad();
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad.empty() ? 0.0 : grad[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
      values[i] -= cfg.lr * (update + cfg.weight_decay * values[i]);
    }
  }
}

void TrainConfig::validate() const {
  if (!(optim.lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (!(sampling_rate > 0.0 && sampling_rate <= 1.0)) throw ConfigError("train.sampling_rate must be in (0, 1]");
  if (batch_size == 0) throw ConfigError("train.batch_size must be at least 1");
  if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0 && optim.beta2 >= 0.0 && optim.beta2 < 1.0)) {
    throw ConfigError("train.beta1 and train.beta2 must be in [0, 1)");
  }
}

Tensor loss_l1(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape() || pred.rank() != 3) {
    throw DimensionError("loss_l1: shapes " + shape_str(pred.shape()) + " and " + shape_str(gt.shape()) +
                         " must match and be [T × N_Q × N_phi]");
  }
  const Tensor diff = sub(pred, gt);
  const double rows = static_cast<double>(pred.dim(0) * pred.dim(1));
  return scale(sum(mul(diff, diff)), 1.0 / rows);
}

std::vector<std::size_t> sample_queries(std::size_t n_q, double rate, std::uint64_t seed, std::size_t sample_index) {
  if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("sampling rate must be in (0, 1]");
  std::vector<std::size_t> idx(n_q);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto count = std::min<std::size_t>(
      n_q, static_cast<std::size_t>(std::ceil(rate * static_cast<double>(n_q) - 1e-9)));
  if (count == n_q) return idx;
  Rng rng(seed ^ (0x9E3779B97F4A7C15ull * (sample_index + 1)));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

TrainState make_train_state(const Model& m, const TrainConfig& cfg) {
  TrainState s;
  s.optim = make_adam_state(m.params());
  s.rng.seed(cfg.seed);
  return s;
}

namespace {

struct PreparedSample {
  EncoderInputs inputs;
  Tensor x_q;  // sampled queries
  Tensor gt;   // [T × n_sampled × N_phi]
  std::size_t t = 0;
};

PreparedSample prepare(const Model& m, const FieldPack& pack, const TrainConfig& cfg, std::size_t index) {
  check_compatible(m, pack);
  PreparedSample s;
  s.inputs = encoder_inputs(pack);
  s.t = pack.t;
  const auto picked = sample_queries(pack.n_q, cfg.sampling_rate, cfg.seed, index);
  const std::size_t d = pack.d, n_phi = pack.n_phi();
  std::vector<double> xq, gt;
  for (std::size_t q : picked) xq.insert(xq.end(), pack.x_q.begin() + q * d, pack.x_q.begin() + (q + 1) * d);
  for (std::size_t k = 0; k < pack.t; ++k)
    for (std::size_t q : picked) {
      const auto at = pack.phi.begin() + static_cast<std::ptrdiff_t>((k * pack.n_q + q) * n_phi);
      gt.insert(gt.end(), at, at + static_cast<std::ptrdiff_t>(n_phi));
    }
  s.x_q = Tensor::from({picked.size(), d}, std::move(xq));
  s.gt = Tensor::from({pack.t, picked.size(), n_phi}, std::move(gt));
  return s;
}

void new_epoch_order(TrainState& state, std::size_t n) {
  state.order.resize(n);
  std::iota(state.order.begin(), state.order.end(), std::uint64_t{0});
  std::shuffle(state.order.begin(), state.order.end(), state.rng);
  state.position = 0;
}

}  // namespace

std::vector<TrainLogRow> train_loop(Model& m, const std::vector<FieldPack>& data, const TrainConfig& cfg,
                                    TrainState& state, std::uint64_t stop_after) {
  cfg.validate();
  if (data.empty()) throw ConfigError("train_loop: need at least one training sample");
  std::vector<PreparedSample> prepared;
  for (std::size_t i = 0; i < data.size(); ++i) prepared.push_back(prepare(m, data[i], cfg, i));
  if (state.optim.m.size() != m.params().entries().size()) state.optim = make_adam_state(m.params());

  std::vector<TrainLogRow> log;
  std::uint64_t ran = 0;
  for (;;) {
    if (cfg.max_steps != 0 && state.step >= cfg.max_steps) break;
    if (stop_after != 0 && ran >= stop_after) break;
    if (state.order.size() != data.size() || state.position >= state.order.size()) {
      if (!state.order.empty() && state.position >= state.order.size()) ++state.epoch;
      if (state.epoch >= cfg.epochs) break;
      new_epoch_order(state, data.size());
    }
    const std::size_t end = std::min<std::size_t>(state.order.size(), state.position + cfg.batch_size);
    m.params().zero_grad();
    Tape tape;
    double loss_value = 0.0;
    {
      TapeScope scope(tape);
      Tensor total;
      for (std::size_t b = state.position; b < end; ++b) {
        const PreparedSample& s = prepared[state.order[b]];
        const ForwardResult fr = forward(m, s.inputs, s.x_q, s.t);
        const Tensor l = loss_l1(fr.phi, s.gt);
        total = total.defined() ? add(total, l) : l;
      }
      total = scale(total, 1.0 / static_cast<double>(end - state.position));
      loss_value = total.item();
      if (!std::isfinite(loss_value)) {
        throw NumericError("training loss is not finite at step " + std::to_string(state.step) + " (epoch " +
                           std::to_string(state.epoch) + ")");
      }
      tape.backward(total);
    }
    adamw_step(m.params(), state.optim, cfg.optim);
    log.push_back({state.step, state.epoch, loss_value});
    ++state.step;
    ++ran;
    state.position = end;
  }
  return log;
}

std::string render_train_log(const std::vector<TrainLogRow>& rows) {
  std::string out = "step,epoch,loss\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + format_double(r.loss) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'H', 'M', 'T', 'P', 'F', 'C', 'K', 'P'};

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out_ += static_cast<char>((v >> (8 * b)) & 0xFFu);
  }
  void u64(std::uint64_t v) {
    for (int b = 0; b < 8; ++b) out_ += static_cast<char>((v >> (8 * b)) & 0xFFu);
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u64(s.size());
    out_.append(s);
  }
  void reals(const std::vector<double>& v) {
    u64(v.size());
    for (double x : v) f64(x);
  }
  void raw(std::string_view s) { out_.append(s); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(std::string_view in, std::string origin) : in_(in), origin_(std::move(origin)) {}

  std::uint64_t byte(std::size_t i) const { return static_cast<unsigned char>(in_[pos_ + i]); }
  void need(std::uint64_t n) const {
    if (n > in_.size() - pos_) throw CorruptFileError("checkpoint is truncated", origin_);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(byte(b)) << (8 * b);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= byte(b) << (8 * b);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s(in_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::vector<double> reals() {
    const std::uint64_t n = u64();
    need(n * 8);
    std::vector<double> v(n);
    for (auto& x : v) x = f64();
    return v;
  }
  std::string_view raw(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }
  const std::string& origin() const { return origin_; }

 private:
  std::string_view in_;
  std::size_t pos_ = 0;
  std::string origin_;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ck) {
  Writer w;
  w.raw(std::string_view(kMagic, sizeof kMagic));
  w.u32(kCheckpointVersion);
  w.str(ck.kind);
  w.str(ck.config);
  w.u64(ck.step);
  w.u64(ck.epoch);
  w.u64(ck.position);
  w.u64(ck.adam_step);
  w.u64(ck.order.size());
  for (auto v : ck.order) w.u64(v);
  w.str(ck.rng_state);
  w.u64(ck.tensors.size());
  for (const auto& e : ck.tensors) {
    w.str(e.name);
    w.u64(e.shape.size());
    for (auto s : e.shape) w.u64(s);
    w.reals(e.value);
    w.reals(e.m);
    w.reals(e.v);
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes, const std::string& origin) {
  Reader r(bytes, origin);
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CorruptFileError("not a checkpoint (bad magic)", origin);
  }
  r.raw(sizeof kMagic);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw UnsupportedVersionError("unsupported checkpoint version " + std::to_string(version), origin);
  }
  Checkpoint ck;
  ck.kind = r.str();
  ck.config = r.str();
  ck.step = r.u64();
  ck.epoch = r.u64();
  ck.position = r.u64();
  ck.adam_step = r.u64();
  const std::uint64_t n_order = r.u64();
  r.need(n_order * 8);
  for (std::uint64_t i = 0; i < n_order; ++i) ck.order.push_back(r.u64());
  ck.rng_state = r.str();
  const std::uint64_t n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    Checkpoint::Entry e;
    e.name = r.str();
    const std::uint64_t rank = r.u64();
    if (rank > 8) throw CorruptFileError("implausible tensor rank in checkpoint", origin);
    for (std::uint64_t a = 0; a < rank; ++a) e.shape.push_back(r.u64());
    e.value = r.reals();
    e.m = r.reals();
    e.v = r.reals();
    const std::size_t expect = shape_size(e.shape);
    if (e.value.size() != expect || (!e.m.empty() && e.m.size() != expect) || e.m.size() != e.v.size()) {
      throw CorruptFileError("tensor '" + e.name + "' has inconsistent extents", origin);
    }
    ck.tensors.push_back(std::move(e));
  }
  if (!r.done()) throw CorruptFileError("trailing bytes after checkpoint payload", origin);
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(ck));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingFileError("checkpoint not found", path.string());
  return decode_checkpoint(read_file(path), path.string());
}

std::vector<Checkpoint::Entry> checkpoint_entries(const ParamSet& params, const AdamState* optim) {
  std::vector<Checkpoint::Entry> out;
  const auto& entries = params.entries();
  for (std::size_t p = 0; p < entries.size(); ++p) {
    Checkpoint::Entry e;
    e.name = entries[p].name;
    e.shape = entries[p].value.shape();
    const auto values = entries[p].value.data();
    e.value.assign(values.begin(), values.end());
    if (optim) {
      e.m = optim->m.at(p);
      e.v = optim->v.at(p);
    }
    out.push_back(std::move(e));
  }
  return out;
}

void restore_entries(const std::vector<Checkpoint::Entry>& entries, ParamSet& params, AdamState* optim) {
  const auto& mine = params.entries();
  if (entries.size() != mine.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(entries.size()) + " tensors, model has " +
                      std::to_string(mine.size()));
  }
  if (optim) *optim = make_adam_state(params);
  for (std::size_t p = 0; p < mine.size(); ++p) {
    const auto& e = entries[p];
    if (e.name != mine[p].name || e.shape != mine[p].value.shape()) {
      throw ConfigError("checkpoint tensor '" + e.name + "' " + shape_str(e.shape) + " does not match '" +
                        mine[p].name + "' " + shape_str(mine[p].value.shape()));
    }
    Tensor t = mine[p].value;
    std::copy(e.value.begin(), e.value.end(), t.mutable_data().begin());
    if (optim && !e.m.empty()) {
      optim->m[p] = e.m;
      optim->v[p] = e.v;
    }
  }
}

Checkpoint make_train_checkpoint(const Model& m, const TrainState& state, std::string config) {
  Checkpoint ck;
  ck.kind = "train";
  ck.config = std::move(config);
  ck.step = state.step;
  ck.epoch = state.epoch;
  ck.position = state.position;
  ck.adam_step = state.optim.step;
  ck.order = state.order;
  std::ostringstream rng;
  rng << state.rng;
  ck.rng_state = rng.str();
  ck.tensors = checkpoint_entries(m.params(), &state.optim);
  return ck;
}

void restore_train_state(const Checkpoint& ck, Model& m, TrainState& state) {
  restore_entries(ck.tensors, m.params(), &state.optim);
  state.optim.step = ck.adam_step;
  state.step = ck.step;
  state.epoch = ck.epoch;
  state.position = ck.position;
  state.order = ck.order;
  std::istringstream rng(ck.rng_state);
  rng >> state.rng;
  if (rng.fail()) throw CorruptFileError("checkpoint RNG state is unreadable", "<" + ck.kind + " checkpoint>");
}

}  // namespace hmtpf
