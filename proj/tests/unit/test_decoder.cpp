#include <doctest.h>

#include "helpers.hpp"
#include "hmtpf/decoder.hpp"
#include "hmtpf/model.hpp"

using namespace hmtpf;
using hmtpf::testing::bitwise_equal;
using hmtpf::testing::max_abs_diff;
using hmtpf::testing::random_permutation;
using hmtpf::testing::random_tensor;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_c = 8;
  c.n_g = 16;
  c.n_s = 4;
  c.k = 4;
  return c;
}

struct Fixture {
  ParamSet ps;
  DecoderParams dec;
  MambaParams mamba;
  Tensor g0;
  LatentTrajectory traj;

  explicit Fixture(std::uint64_t seed, std::size_t n_bd = 10, std::size_t t = 4) {
    Rng rng(seed);
    dec = make_decoder(ps, small_config(), rng);
    mamba = make_mamba(ps, small_config(), rng);
    g0 = random_tensor({n_bd, 16}, seed + 1);
    traj = rollout(aggregate_z0(g0), t, mamba);
  }
};

}  // namespace

TEST_SUITE("decoder") {

TEST_CASE("query encoding is per-point and handles one query") {
  Fixture f(1);
  const Tensor xq = random_tensor({7, 2}, 2, 0.0, 1.0);
  const Tensor h = encode_queries(xq, f.dec);
  CHECK(h.shape() == Shape{7, 16});
  const auto perm = random_permutation(7, 3);
  CHECK(bitwise_equal(encode_queries(gather_rows(xq, perm), f.dec).data(), gather_rows(h, perm).data()));
  CHECK(encode_queries(slice_rows(xq, 0, 1), f.dec).shape() == Shape{1, 16});
  CHECK_THROWS_AS(encode_queries(random_tensor({3, 3}, 4), f.dec), DimensionError);
  const Tensor w = random_tensor({7, 16}, 5);
  CHECK(grad_check([&](const Tensor& x) { return sum(mul(encode_queries(x, f.dec), w)); }, xq, 1e-6) < 1e-5);
}

TEST_CASE("fuse_step examples") {
  Fixture f(6);
  const Tensor z = random_tensor({1, 16}, 7);
  const Tensor rows = broadcast_rows(random_tensor({16}, 8), 4);
  const Tensor out = fuse_step(rows, z, f.dec);
  CHECK(out.shape() == Shape{4, 16});
  for (std::size_t i = 1; i < 4; ++i)
    CHECK(bitwise_equal(slice_rows(out, i, i + 1).data(), slice_rows(out, 0, 1).data()));
  const auto perm = random_permutation(10, 9);
  CHECK(bitwise_equal(fuse_step(gather_rows(f.g0, perm), z, f.dec).data(),
                      gather_rows(fuse_step(f.g0, z, f.dec), perm).data()));
  for (auto& l : f.dec.mlp_fuse.layers) {
    for (double& v : l.w.mutable_data()) v = 0.0;
    for (double& v : l.b.mutable_data()) v = 0.0;
  }
  const Tensor zeroed = fuse_step(f.g0, z, f.dec);
  for (double v : zeroed.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(fuse_step(f.g0, random_tensor({1, 15}, 1), f.dec), DimensionError);
}

TEST_CASE("cross-attention equals the explicit oracle") {
  Fixture f(10, 5);
  const Tensor hq = random_tensor({3, 16}, 11);
  const Tensor out = galerkin_cross_attention(hq, f.g0, f.dec);
  CHECK(max_abs_diff(out.data(), hmtpf::testing::brute_attention(hq, f.g0, f.dec.cross_attn, kSeqNormEps)) <=
        1e-12);
}

TEST_CASE("cross-attention rows depend only on their own query") {
  Fixture f(12);
  const Tensor hq = random_tensor({9, 16}, 13);
  const Tensor full = galerkin_cross_attention(hq, f.g0, f.dec);
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::size_t> subset;
    for (std::size_t i = 0; i < 9; ++i)
      if (rng() % 2) subset.push_back(i);
    if (subset.empty()) subset.push_back(trial % 9);
    const Tensor part = galerkin_cross_attention(gather_rows(hq, subset), f.g0, f.dec);
    CHECK(bitwise_equal(part.data(), gather_rows(full, subset).data()));
  }
  const auto perm = random_permutation(9, 15);
  CHECK(bitwise_equal(galerkin_cross_attention(gather_rows(hq, perm), f.g0, f.dec).data(),
                      gather_rows(full, perm).data()));
}

TEST_CASE("decode_fields shapes") {
  Fixture f(16, 10, 1);
  const Tensor hq = encode_queries(random_tensor({1, 2}, 17, 0.0, 1.0), f.dec);
  CHECK(decode_fields(f.traj, f.g0, hq, f.dec).shape() == Shape{1, 1, 4});
  Fixture g(18, 10, 3);
  const Tensor hq5 = encode_queries(random_tensor({5, 2}, 19, 0.0, 1.0), g.dec);
  const std::vector<Tensor> feats = decode_features(g.traj, g.g0, hq5, g.dec);
  CHECK(feats.size() == 3);
  CHECK(apply_head(feats, g.dec.ffn).shape() == Shape{3, 5, 4});
}

TEST_CASE("query permutation permutes axis 1 only") {
  Fixture f(20);
  const Tensor xq = random_tensor({6, 2}, 21, 0.0, 1.0);
  const auto perm = random_permutation(6, 22);
  const Tensor a = decode_fields(f.traj, f.g0, encode_queries(xq, f.dec), f.dec);
  const Tensor b = decode_fields(f.traj, f.g0, encode_queries(gather_rows(xq, perm), f.dec), f.dec);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t q = 0; q < 6; ++q)
      for (std::size_t c = 0; c < 4; ++c) CHECK(b.at((t * 6 + q) * 4 + c) == a.at((t * 6 + perm[q]) * 4 + c));
}

TEST_CASE("step i ignores later latents") {
  Fixture f(23, 10, 5);
  const Tensor hq = encode_queries(random_tensor({4, 2}, 24, 0.0, 1.0), f.dec);
  const Tensor full = decode_fields(f.traj, f.g0, hq, f.dec);
  for (std::size_t i = 1; i <= 5; ++i) {
    LatentTrajectory cut{f.traj.z0, slice_rows(f.traj.z, 0, i)};
    const Tensor part = decode_fields(cut, f.g0, hq, f.dec);
    CHECK(bitwise_equal(part.data(), slice_rows(full, 0, i).data()));
  }
  // Perturbing z_5 leaves steps 1..4 bitwise unchanged.
  Tensor z = f.traj.z.detach();
  for (std::size_t j = 0; j < 16; ++j) z.mutable_data()[4 * 16 + j] += 1.0;
  const Tensor bumped = decode_fields({f.traj.z0, z}, f.g0, hq, f.dec);
  CHECK(bitwise_equal(slice_rows(bumped, 0, 4).data(), slice_rows(full, 0, 4).data()));
}

TEST_CASE("every step shares one parameter set") {
  ParamSet one, five;
  Rng r1(1), r2(1);
  make_decoder(one, small_config(), r1);
  make_decoder(five, small_config(), r2);
  CHECK(one.entries().size() == five.entries().size());
  // The head tensor is the same object at every step: its gradient collects
  // contributions from all steps.
  Fixture f(25, 10, 3);
  const Tensor hq = encode_queries(random_tensor({4, 2}, 26, 0.0, 1.0), f.dec);
  Tensor w = f.dec.ffn.layers.back().w;
  w.set_requires_grad(true);
  std::vector<double> per_step_total(w.size(), 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    w.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(slice_rows(decode_fields(f.traj, f.g0, hq, f.dec), i, i + 1)));
    for (std::size_t j = 0; j < w.size(); ++j) per_step_total[j] += w.grad()[j];
  }
  w.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(decode_fields(f.traj, f.g0, hq, f.dec)));
  }
  CHECK(max_abs_diff(w.grad(), per_step_total) <= 1e-12);
  w.set_requires_grad(false);
}

TEST_CASE("decoder gradient against FD on a 10-point sample") {
  Fixture f(27, 10, 3);
  const Tensor xq = random_tensor({5, 2}, 28, 0.0, 1.0);
  std::vector<Tensor> dec_params;
  for (const auto& e : f.ps.entries())
    if (e.name.rfind("dec.", 0) == 0) dec_params.push_back(e.value);
  REQUIRE_FALSE(dec_params.empty());
  const auto r = grad_check_params([&] { return sum(decode_fields(f.traj, f.g0, encode_queries(xq, f.dec), f.dec)); },
                                   dec_params, 1e-6, 8, 29);
  INFO("worst " << r.worst);
  CHECK(r.max_rel_error < 1e-4);
}

}  // TEST_SUITE
