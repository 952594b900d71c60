#include <doctest.h>

#include "helpers.hpp"
#include "hmtpf/encoder.hpp"

using namespace hmtpf;
using hmtpf::testing::bitwise_equal;
using hmtpf::testing::brute_attention;
using hmtpf::testing::max_abs_diff;
using hmtpf::testing::random_permutation;
using hmtpf::testing::random_tensor;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_c = 8;
  c.n_g = 16;
  c.k = 4;
  return c;
}

EncoderInputs random_inputs(std::size_t n, std::uint64_t seed) {
  EncoderInputs in;
  in.x_bd = random_tensor({n, 2}, seed, 0.0, 1.0);
  std::vector<double> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = i % 3 == 0 ? 0.0 : 1.0;
  in.id = Tensor::from({n, 1}, ids);
  in.phi0 = random_tensor({n, 4}, seed + 1);
  return in;
}

Tensor permute_rows(const Tensor& t, const std::vector<std::size_t>& perm) { return gather_rows(t, perm); }

void zero_mlp(Mlp& m) {
  for (auto& l : m.layers) {
    for (double& v : l.w.mutable_data()) v = 0.0;
    for (double& v : l.b.mutable_data()) v = 0.0;
  }
}

}  // namespace

TEST_SUITE("encoder") {

TEST_CASE("zero embedding MLPs give zero embeddings") {
  ParamSet ps;
  Rng rng(1);
  EncoderParams p = make_encoder(ps, small_config(), rng);
  zero_mlp(p.mlp_xy);
  zero_mlp(p.mlp_id);
  zero_mlp(p.mlp_phi);
  const InputEmbeddings y = embed_inputs(random_inputs(6, 2), p);
  for (const Tensor* t : {&y.y1, &y.y2, &y.y3})
    for (double v : t->data()) CHECK(v == 0.0);
}

TEST_CASE("embeddings and fusion are per-point") {
  ParamSet ps;
  Rng rng(2);
  const EncoderParams p = make_encoder(ps, small_config(), rng);
  const EncoderInputs in = random_inputs(9, 3);
  const auto perm = random_permutation(9, 4);
  const EncoderInputs pin{permute_rows(in.x_bd, perm), permute_rows(in.id, perm), permute_rows(in.phi0, perm)};
  const InputEmbeddings a = embed_inputs(in, p), b = embed_inputs(pin, p);
  CHECK(bitwise_equal(permute_rows(a.y1, perm).data(), b.y1.data()));
  CHECK(bitwise_equal(permute_rows(a.y2, perm).data(), b.y2.data()));
  CHECK(bitwise_equal(permute_rows(a.y3, perm).data(), b.y3.data()));
  CHECK(p.mlp_fusion.in_width() == 3 * small_config().n_c);

  // Duplicate rows fuse to duplicate rows.
  const std::vector<std::size_t> dup{0, 1, 0};
  const Tensor f = fuse({gather_rows(a.y1, dup), gather_rows(a.y2, dup), gather_rows(a.y3, dup)}, p);
  CHECK(bitwise_equal(slice_rows(f, 0, 1).data(), slice_rows(f, 2, 3).data()));
  CHECK_THROWS_AS(fuse({a.y1, slice_rows(a.y2, 0, 3), a.y3}, p), DimensionError);
}

TEST_CASE("embedding MLP width mismatch") {
  ParamSet ps;
  Rng rng(3);
  const EncoderParams p = make_encoder(ps, small_config(), rng);
  EncoderInputs in = random_inputs(5, 1);
  in.phi0 = random_tensor({5, 3}, 2);
  CHECK_THROWS_AS(embed_inputs(in, p), DimensionError);
}

TEST_CASE("embedding and fusion gradients against FD") {
  ParamSet ps;
  Rng rng(4);
  const EncoderParams p = make_encoder(ps, small_config(), rng);
  const EncoderInputs in = random_inputs(6, 5);
  std::vector<Tensor> mlp_params;
  for (const Mlp* m : {&p.mlp_xy, &p.mlp_id, &p.mlp_phi})
    for (const auto& l : m->layers) {
      mlp_params.push_back(l.w);
      mlp_params.push_back(l.b);
    }
  const auto r = grad_check_params(
      [&] {
        const InputEmbeddings y = embed_inputs(in, p);
        return sum(add(add(y.y1, y.y2), y.y3));
      },
      mlp_params, 1e-6);
  CHECK(r.max_rel_error < 1e-5);

  const InputEmbeddings y = embed_inputs(in, p);
  const Tensor w = random_tensor({6, 16}, 6);
  CHECK(grad_check([&](const Tensor& y1) { return sum(mul(fuse({y1, y.y2, y.y3}, p), w)); }, y.y1, 1e-6) < 1e-5);
}

TEST_CASE("knn examples") {
  const std::vector<double> line{0, 0, 1, 0, 3, 0};
  const NeighborIndex k1 = knn_grouping(line, 3, 2, 1);
  CHECK(k1.idx == std::vector<std::size_t>{1, 0, 1});
  const NeighborIndex k2 = knn_grouping(line, 3, 2, 2);
  CHECK(k2.idx == std::vector<std::size_t>{1, 2, 0, 2, 1, 0});
  CHECK_THROWS_AS(knn_grouping(line, 3, 2, 3), ConfigError);
  CHECK_THROWS_AS(knn_grouping(line, 3, 2, 0), ConfigError);
  // Equidistant neighbours resolve to the lower index.
  const std::vector<double> cross{0, 0, 1, 0, -1, 0, 0, 1};
  CHECK(knn_grouping(cross, 4, 2, 1).idx[0] == 1);
}

TEST_CASE("knn matches a full-sort oracle") {
  const Tensor x = random_tensor({100, 2}, 7, 0.0, 1.0);
  const NeighborIndex got = knn_grouping(x.data(), 100, 2, 5);
  for (std::size_t i = 0; i < 100; ++i) {
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t j = 0; j < 100; ++j) {
      if (j == i) continue;
      const double dx = x.at(i, 0) - x.at(j, 0), dy = x.at(i, 1) - x.at(j, 1);
      all.emplace_back(dx * dx + dy * dy, j);
    }
    std::sort(all.begin(), all.end());
    for (std::size_t r = 0; r < 5; ++r) CHECK(got.row(i)[r] == all[r].second);
  }
}

TEST_CASE("local embedding special cases") {
  ParamSet ps;
  Rng rng(8);
  ModelConfig cfg = small_config();
  const EncoderParams p = make_encoder(ps, cfg, rng);
  const Tensor same = broadcast_rows(random_tensor({16}, 9), 5);
  const NeighborIndex nbr = knn_grouping(random_tensor({5, 2}, 10).data(), 5, 2, 3);
  const Tensor out = local_feature_embedding(same, nbr, p);
  // Every difference is zero: each row is edge_mlp(concat(0, y)).
  const Tensor expect = p.edge_mlp(concat_cols({Tensor::zeros({1, 16}), slice_rows(same, 0, 1)}));
  for (std::size_t i = 0; i < 5; ++i) CHECK(max_abs_diff(slice_rows(out, i, i + 1).data(), expect.data()) <= 1e-14);

  // k = 1 is one edge through the MLP.
  const Tensor y = random_tensor({5, 16}, 11);
  const NeighborIndex one = knn_grouping(random_tensor({5, 2}, 12).data(), 5, 2, 1);
  const Tensor single = local_feature_embedding(y, one, p);
  for (std::size_t i = 0; i < 5; ++i) {
    const Tensor yi = slice_rows(y, i, i + 1);
    const Tensor yk = slice_rows(y, one.idx[i], one.idx[i] + 1);
    const Tensor e = p.edge_mlp(concat_cols({sub(yk, yi), yi}));
    CHECK(max_abs_diff(slice_rows(single, i, i + 1).data(), e.data()) <= 1e-12);
  }

  NeighborIndex bad = one;
  bad.idx[0] = 99;
  CHECK_THROWS_AS(local_feature_embedding(y, bad, p), DimensionError);
}

TEST_CASE("neighbour order inside a row does not matter") {
  ParamSet ps;
  Rng rng(13);
  const EncoderParams p = make_encoder(ps, small_config(), rng);
  const Tensor y = random_tensor({12, 16}, 14);
  const NeighborIndex nbr = knn_grouping(random_tensor({12, 2}, 15).data(), 12, 2, 4);
  const Tensor base = local_feature_embedding(y, nbr, p);
  for (std::uint64_t s = 0; s < 10; ++s) {
    NeighborIndex shuffled = nbr;
    std::mt19937_64 g(s);
    for (std::size_t i = 0; i < 12; ++i)
      std::shuffle(shuffled.idx.begin() + static_cast<std::ptrdiff_t>(i * 4),
                   shuffled.idx.begin() + static_cast<std::ptrdiff_t>(i * 4 + 4), g);
    CHECK(bitwise_equal(local_feature_embedding(y, shuffled, p).data(), base.data()));
  }
}

TEST_CASE("attention with zero value weights is the identity") {
  ParamSet ps;
  Rng rng(16);
  EncoderParams p = make_encoder(ps, small_config(), rng);
  for (auto& layer : p.attn)
    for (auto& wv : layer.wv)
      for (double& v : wv.mutable_data()) v = 0.0;
  const Tensor y = random_tensor({7, 16}, 17);
  CHECK(bitwise_equal(galerkin_self_attention(y, p).data(), y.data()));
}

TEST_CASE("attention equals the explicit n×n oracle") {
  for (std::size_t n : {1u, 2u, 4u, 8u}) {
    ParamSet ps;
    Rng rng(18 + n);
    const GalerkinAttention attn = make_galerkin_attention(ps, "a", 16, 4, rng);
    const Tensor ctx = random_tensor({n, 16}, 19 + n);
    const Tensor q = random_tensor({3, 16}, 20 + n);
    CHECK(max_abs_diff(galerkin_attention(ctx, ctx, attn).data(), brute_attention(ctx, ctx, attn, kSeqNormEps)) <=
          1e-12);
    CHECK(max_abs_diff(galerkin_attention(q, ctx, attn).data(), brute_attention(q, ctx, attn, kSeqNormEps)) <=
          1e-12);
  }
}

TEST_CASE("attention term stays O(1) as n doubles") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    ParamSet ps;
    Rng rng(seed);
    const GalerkinAttention attn = make_galerkin_attention(ps, "a", 16, 4, rng);
    std::vector<double> rms;
    for (std::size_t n : {64u, 128u, 256u, 512u}) {
      const Tensor x = random_tensor({n, 16}, 100 * seed + n);
      const Tensor delta = sub(galerkin_attention(x, x, attn), x);
      double acc = 0.0;
      for (double v : delta.data()) acc += v * v;
      rms.push_back(std::sqrt(acc / static_cast<double>(delta.size())));
    }
    for (std::size_t i = 1; i < rms.size(); ++i) {
      CHECK(rms[i] / rms[i - 1] > 0.5);
      CHECK(rms[i] / rms[i - 1] < 2.0);
    }
  }
}

TEST_CASE("encode shape, finiteness and permutation equivariance") {
  ParamSet ps;
  Rng rng(21);
  const EncoderParams p = make_encoder(ps, small_config(), rng);
  const EncoderInputs in = random_inputs(20, 22);
  const Tensor g0 = encode(in, p);
  CHECK(g0.shape() == Shape{20, 16});
  check_finite(g0, "g0");
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto perm = random_permutation(20, 30 + s);
    const EncoderInputs pin{permute_rows(in.x_bd, perm), permute_rows(in.id, perm), permute_rows(in.phi0, perm)};
    CHECK(max_abs_diff(encode(pin, p).data(), permute_rows(g0, perm).data()) <= 1e-10);
  }
}

TEST_CASE("encode gradient against FD over all encoder parameters") {
  ParamSet ps;
  Rng rng(23);
  const EncoderParams p = make_encoder(ps, small_config(), rng);
  const EncoderInputs in = random_inputs(10, 24);
  const auto r = grad_check_params([&] { return sum(encode(in, p)); }, ps.tensors(), 1e-6, 6, 25);
  INFO("worst " << r.worst);
  CHECK(r.max_rel_error < 1e-4);
}

}  // TEST_SUITE
