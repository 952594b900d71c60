#include <doctest.h>

#include <fstream>

#include "helpers.hpp"
#include "hmtpf/errors.hpp"
#include "hmtpf/train.hpp"

using namespace hmtpf;
using hmtpf::testing::bitwise_equal;
using hmtpf::testing::random_tensor;
using hmtpf::testing::scratch_dir;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_c = 8;
  c.n_g = 16;
  c.n_s = 4;
  c.k = 4;
  c.init_seed = 5;
  return c;
}

std::vector<FieldPack> small_data() {
  return {gen_advecting_gaussian(20, 12, 3, 0.05, {0.5, 0.3}, 0.15, 1),
          gen_advecting_gaussian(24, 12, 3, 0.05, {0.2, -0.4}, 0.2, 2),
          gen_isentropic_vortex(18, 12, 3, 0.05, 1.0, 1.4, 3)};
}

TrainConfig quick(std::size_t steps) {
  TrainConfig cfg;
  cfg.seed = 11;
  cfg.max_steps = steps;
  cfg.epochs = 1000;
  return cfg;
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("loss_l1 examples") {
  const Tensor phi = random_tensor({3, 5, 4}, 1);
  CHECK(loss_l1(phi, phi).item() == 0.0);
  std::vector<double> moved(phi.data().begin(), phi.data().end());
  for (std::size_t i = 1; i < moved.size(); i += 4) moved[i] += 0.3;
  CHECK(loss_l1(Tensor::from({3, 5, 4}, moved), phi).item() == doctest::Approx(0.09).epsilon(1e-12));
  CHECK_THROWS_AS(loss_l1(phi, random_tensor({3, 4, 4}, 2)), DimensionError);
}

TEST_CASE("loss_l1 against a loop oracle") {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Tensor a = random_tensor({4, 7, 4}, s), b = random_tensor({4, 7, 4}, s + 100);
    double total = 0.0;
    for (std::size_t c = 0; c < 4; ++c) {
      double acc = 0.0;
      for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t q = 0; q < 7; ++q) {
          const std::size_t i = (t * 7 + q) * 4 + c;
          acc += (a.at(i) - b.at(i)) * (a.at(i) - b.at(i));
        }
      total += acc / 28.0;
    }
    CHECK(std::abs(loss_l1(a, b).item() - total) <= 1e-12);
  }
}

TEST_CASE("adamw examples") {
  Rng rng(0);
  ParamSet ps;
  Tensor w = ps.create("w", {3}, Init::kOnes, rng);
  AdamConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  AdamState st = make_adam_state(ps);
  adamw_step(ps, st, cfg);  // no gradient recorded: pure decay
  for (double v : w.data()) CHECK(v == doctest::Approx(1.0 - 0.1 * 0.5).epsilon(1e-15));

  // One step on f(w) = w² from w = 1.
  ParamSet q;
  Tensor x = q.create("x", {1}, Init::kOnes, rng);
  AdamState sq = make_adam_state(q);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(mul(x, x)));
  }
  adamw_step(q, sq, AdamConfig{});
  CHECK(x.at(0) * x.at(0) < 1.0);
}

TEST_CASE("adamw converges on a 2-d quadratic") {
  Rng rng(0);
  ParamSet ps;
  Tensor w = ps.create("w", {2}, Init::kOnes, rng);
  w.mutable_data()[1] = -2.0;
  const Tensor scales = Tensor::from({2}, {1.0, 4.0});
  AdamConfig cfg;
  cfg.lr = 0.05;
  AdamState st = make_adam_state(ps);
  for (int i = 0; i < 500; ++i) {
    ps.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(mul(scales, mul(w, w))));
    adamw_step(ps, st, cfg);
  }
  CHECK(std::hypot(w.at(0), w.at(1)) < 1e-3);
}

TEST_CASE("adamw skips frozen tensors") {
  Rng rng(0);
  ParamSet ps;
  Tensor w = ps.create("w", {2}, Init::kOnes, rng);
  ps.set_requires_grad(false);
  AdamState st = make_adam_state(ps);
  adamw_step(ps, st, AdamConfig{});
  CHECK(w.at(0) == 1.0);
}

TEST_CASE("query sampling is fixed and exactly sized") {
  for (double rate : {0.1, 0.25, 0.5, 1.0}) {
    const auto a = sample_queries(37, rate, 3, 1);
    CHECK(a.size() == static_cast<std::size_t>(std::ceil(rate * 37)));
    CHECK(std::is_sorted(a.begin(), a.end()));
    CHECK(std::adjacent_find(a.begin(), a.end()) == a.end());
    CHECK(a == sample_queries(37, rate, 3, 1));
  }
  CHECK(sample_queries(100, 0.1, 3, 0).size() == 10);
  CHECK(sample_queries(100, 0.1, 3, 0) != sample_queries(100, 0.1, 3, 1));
  CHECK_THROWS_AS(sample_queries(10, 0.0, 0, 0), ConfigError);
  TrainConfig bad;
  bad.sampling_rate = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.sampling_rate = 1.0;
  bad.optim.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("every parameter tensor receives gradient") {
  Model m(small_config());
  // 30 points: 24 snapped to the boundary, 6 in the domain. With every id
  // zero the id MLP input and its first hidden layer are exactly zero.
  const FieldPack pack = gen_advecting_gaussian(30, 12, 3, 0.05, {0.5, 0.3}, 0.15, 1);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(loss_l1(forward(m, pack).phi, Tensor::from({pack.t, pack.n_q, 4}, pack.phi)));
  }
  for (const auto& e : m.params().entries()) {
    double norm = 0.0;
    for (double g : e.value.grad()) norm += g * g;
    INFO(e.name);
    CHECK(norm > 0.0);
  }
}

TEST_CASE("training is deterministic and reduces the loss") {
  const auto data = small_data();
  Model a(small_config()), b(small_config());
  TrainState sa = make_train_state(a, quick(60)), sb = make_train_state(b, quick(60));
  const auto la = train_loop(a, data, quick(60), sa);
  const auto lb = train_loop(b, data, quick(60), sb);
  REQUIRE(la.size() == 60);
  for (std::size_t i = 0; i < la.size(); ++i) CHECK(la[i].loss == lb[i].loss);
  CHECK(a.params().snapshot() == b.params().snapshot());
  CHECK(la.back().epoch == 19);
  CHECK(render_train_log(la).rfind("step,epoch,loss\n", 0) == 0);
}

TEST_CASE("loss trend on a single sample") {
  const std::vector<FieldPack> one{small_data()[0]};
  Model m(small_config());
  TrainConfig cfg = quick(400);
  TrainState st = make_train_state(m, cfg);
  const auto log = train_loop(m, one, cfg, st);
  std::vector<double> block;
  for (std::size_t b = 0; b < 4; ++b) {
    double acc = 0.0;
    for (std::size_t i = 100 * b; i < 100 * (b + 1); ++i) acc += log[i].loss;
    block.push_back(acc / 100);
  }
  // Warmup is the first block.
  for (std::size_t b = 2; b < 4; ++b) CHECK(block[b] <= block[b - 1]);
  CHECK(block[3] < block[0]);
}

TEST_CASE("resume matches an uninterrupted run") {
  const auto data = small_data();
  const TrainConfig cfg = quick(20);
  Model full(small_config());
  TrainState sf = make_train_state(full, cfg);
  const auto lf = train_loop(full, data, cfg, sf);

  Model first(small_config());
  TrainState s1 = make_train_state(first, cfg);
  const auto l1 = train_loop(first, data, cfg, s1, 10);
  REQUIRE(l1.size() == 10);
  const auto path = scratch_dir("resume") / "mid.ckpt";
  save_checkpoint(make_train_checkpoint(first, s1, "echo"), path);

  Model second(small_config());
  TrainState s2 = make_train_state(second, cfg);
  restore_train_state(load_checkpoint(path), second, s2);
  const auto l2 = train_loop(second, data, cfg, s2);
  REQUIRE(l2.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(l1[i].loss == lf[i].loss);
    CHECK(l2[i].loss == lf[10 + i].loss);
    CHECK(l2[i].step == lf[10 + i].step);
  }
  CHECK(second.params().snapshot() == full.params().snapshot());
}

TEST_CASE("checkpoint round trip and errors") {
  Model m(small_config());
  TrainState st = make_train_state(m, quick(3));
  train_loop(m, small_data(), quick(3), st);
  const Checkpoint ck = make_train_checkpoint(m, st, "model.n_g = 16");
  const std::string bytes = encode_checkpoint(ck);
  CHECK(bytes.rfind("HMTPFCKP", 0) == 0);
  const Checkpoint back = decode_checkpoint(bytes, "memory");
  CHECK(back.config == "model.n_g = 16");
  CHECK(back.step == 3);
  CHECK(encode_checkpoint(back) == bytes);
  Model other(small_config());
  TrainState so = make_train_state(other, quick(3));
  restore_train_state(back, other, so);
  CHECK(bitwise_equal(other.params().snapshot(), m.params().snapshot()));
  CHECK(so.optim.m == st.optim.m);
  CHECK(so.optim.v == st.optim.v);

  std::string wrong = bytes;
  wrong[8] = 2;
  CHECK_THROWS_AS(decode_checkpoint(wrong, "memory"), UnsupportedVersionError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 5), "memory"), CorruptFileError);
  CHECK_THROWS_AS(decode_checkpoint("NOTACKPT", "memory"), CorruptFileError);
  CHECK_THROWS_AS(load_checkpoint(scratch_dir("ckpt") / "absent.ckpt"), MissingFileError);

  ModelConfig wider = small_config();
  wider.n_g = 32;
  Model mismatched(wider);
  TrainState sw = make_train_state(mismatched, quick(3));
  CHECK_THROWS_AS(restore_train_state(back, mismatched, sw), ConfigError);
}

TEST_CASE("non-finite loss aborts with the step") {
  Model m(small_config());
  Tensor w = m.decoder().ffn.layers.back().b;
  w.mutable_data()[0] = std::numeric_limits<double>::infinity();
  TrainState st = make_train_state(m, quick(5));
  CHECK_THROWS_WITH_AS(train_loop(m, small_data(), quick(5), st), doctest::Contains("step 0"), NumericError);
}

}  // TEST_SUITE
