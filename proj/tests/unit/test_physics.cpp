#include <doctest.h>

#include "helpers.hpp"
#include "oracles.hpp"
#include "hmtpf/physics.hpp"

using namespace hmtpf;
using hmtpf::testing::bitwise_equal;
using hmtpf::testing::max_abs_diff;
using hmtpf::testing::random_tensor;

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

// Stencil with ρ and p from arbitrary fields and u ≡ 0, so only ∂tρ and ∇p survive.
StencilFields still_fluid(const Tensor& rho, const Tensor& p, std::size_t offsets, std::size_t t, std::size_t n_q) {
  std::vector<double> v(offsets * t * n_q * 4, 0.0);
  for (std::size_t i = 0; i < offsets * t * n_q; ++i) {
    v[i * 4 + 2] = p.at(i);
    v[i * 4 + 3] = rho.at(i);
  }
  StencilFields s;
  s.values = Tensor::from({offsets, t, n_q, 4}, std::move(v));
  s.offsets = offsets;
  s.t = t;
  s.n_q = n_q;
  s.n_phi = 4;
  return s;
}

}  // namespace

TEST_SUITE("physics") {

TEST_CASE("first-derivative stencil examples") {
  auto sq = [](double x) { return x * x; };
  auto cube = [](double x) { return x * x * x; };
  CHECK(fd_spatial_first(sq(1.1), sq(0.9), 0.1) == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(fd_spatial_first(3.0, 3.0, 0.1) == 0.0);
  CHECK(fd_spatial_first(cube(1.1), cube(0.9), 0.1) == doctest::Approx(3.01).epsilon(1e-13));
}

TEST_CASE("second-derivative stencil examples") {
  for (double x : {-2.0, 0.0, 0.7, 5.0}) {
    CHECK(fd_spatial_second((x + 0.1) * (x + 0.1), x * x, (x - 0.1) * (x - 0.1), 0.1) ==
          doctest::Approx(2.0).epsilon(1e-12));
    CHECK(std::abs(fd_spatial_second(3 * (x + 0.1) + 1, 3 * x + 1, 3 * (x - 0.1) + 1, 0.1)) <= 1e-12);
  }
  CHECK(std::abs(fd_spatial_second(std::sin(0.1), std::sin(0.0), std::sin(-0.1), 0.1)) <= 1e-3);
}

TEST_CASE("time stencil examples") {
  CHECK(fd_time(1.0, 1.5, 0.5) == 1.0);
  CHECK(fd_time(4.0, 4.0, 0.1) == 0.0);
  CHECK(fd_time(1.0, 1.21, 0.1) == doctest::Approx(2.1).epsilon(1e-13));
}

TEST_CASE("stencils are exact on polynomials of their order") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> coef(-2.0, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    const double a = coef(rng), b = coef(rng), c = coef(rng), d = coef(rng), x = coef(rng);
    const double h = 0.05 + 0.1 * std::abs(coef(rng));
    auto quad = [&](double s) { return a + b * s + c * s * s; };
    auto cub = [&](double s) { return quad(s) + d * s * s * s; };
    CHECK(fd_spatial_first(quad(x + h), quad(x - h), h) == doctest::Approx(b + 2 * c * x).epsilon(1e-10));
    // The central second difference of a cubic is exact: odd terms cancel.
    CHECK(fd_spatial_second(cub(x + h), cub(x), cub(x - h), h) == doctest::Approx(2 * c + 6 * d * x).epsilon(1e-9));
    CHECK(fd_time(a + b * x, a + b * (x + h), h) == doctest::Approx(b).epsilon(1e-10));
  }
  // Tensor forms agree with the scalar forms.
  const Tensor fp = random_tensor({3, 4}, 2), fc = random_tensor({3, 4}, 3), fm = random_tensor({3, 4}, 4);
  const Tensor first = fd_spatial_first(fp, fm, 0.1), second = fd_spatial_second(fp, fc, fm, 0.1),
               time = fd_time(fm, fp, 0.1);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(first.at(i) == doctest::Approx(fd_spatial_first(fp.at(i), fm.at(i), 0.1)).epsilon(1e-14));
    CHECK(second.at(i) == doctest::Approx(fd_spatial_second(fp.at(i), fc.at(i), fm.at(i), 0.1)).epsilon(1e-14));
    CHECK(time.at(i) == doctest::Approx(fd_time(fm.at(i), fp.at(i), 0.1)).epsilon(1e-14));
  }
}

TEST_CASE("stencil offsets layout") {
  const std::vector<double> dx{0.1, 0.2};
  const auto off = stencil_offsets(dx);
  REQUIRE(off.size() == 5);
  CHECK(off[kCenter] == std::vector<double>{0, 0});
  CHECK(off[plus_offset(0)] == std::vector<double>{0.1, 0});
  CHECK(off[minus_offset(0)] == std::vector<double>{-0.1, 0});
  CHECK(off[plus_offset(1)] == std::vector<double>{0, 0.2});
  CHECK(off[minus_offset(1)] == std::vector<double>{0, -0.2});
}

TEST_CASE("dx resolution") {
  FieldPack p = gen_uniform_flow(10, 5, 2, 0.1, 1);
  p.x_bd[0] = 0.0;
  p.x_bd[1] = 0.0;
  p.x_q[0] = 1.0;
  p.x_q[1] = 1.0;
  const auto dx = default_dx(p);
  CHECK(dx.size() == 2);
  CHECK(dx[0] == doctest::Approx(0.01 * std::sqrt(2.0)).epsilon(1e-14));
  CHECK(resolve_dx({{0.003}}, p) == std::vector<double>{0.003, 0.003});
  CHECK(resolve_dx({{0.003, 0.004}}, p) == std::vector<double>{0.003, 0.004});
  CHECK_THROWS_AS(resolve_dx({{0.1, 0.2, 0.3}}, p), ConfigError);
  CHECK_THROWS_AS(resolve_dx({{-0.1}}, p), ConfigError);
}

TEST_CASE("offset queries: zero offset, layout and single pass") {
  Model m(small_config());
  const FieldPack pack = gen_advecting_gaussian(20, 6, 3, 0.05, {0.5, 0.3}, 0.15, 2);
  const Latents lat = encode_and_rollout(m, encoder_inputs(pack), pack.t);
  const Tensor xq = Tensor::from({6, 2}, pack.x_q);
  const Tensor plain = decode_fields(lat.traj, lat.g0, encode_queries(xq, m.decoder()), m.decoder());

  const StencilFields zero = query_with_offsets(m, lat, pack.x_q, {{0.0, 0.0}});
  CHECK(bitwise_equal(zero.center().data(), plain.data()));

  const std::vector<double> dx{0.01, 0.02};
  const auto offsets = stencil_offsets(dx);
  const StencilFields s = query_with_offsets(m, lat, pack.x_q, offsets);
  CHECK(s.values.shape() == Shape{5, 3, 6, 4});
  CHECK(bitwise_equal(s.center().data(), plain.data()));
  // One offset at a time, decoded separately.
  for (std::size_t o = 0; o < offsets.size(); ++o) {
    std::vector<double> shifted = pack.x_q;
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t a = 0; a < 2; ++a) shifted[i * 2 + a] += offsets[o][a];
    const Tensor sep =
        decode_fields(lat.traj, lat.g0, encode_queries(Tensor::from({6, 2}, shifted), m.decoder()), m.decoder());
    const Tensor block = slice_rows(s.values, o, o + 1);
    CHECK(bitwise_equal(block.data(), sep.data()));
    for (std::size_t c = 0; c < 4; ++c) {
      const Tensor ch = s.channel_at(c, o);
      for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t i = 0; i < 6; ++i) CHECK(ch.at(k, i) == sep.at((k * 6 + i) * 4 + c));
    }
  }
}

TEST_CASE("channel resolution by name") {
  const EulerChannels ch = EulerChannels::resolve({"rho", "p", "u_y", "u_x"}, 2);
  CHECK(ch.rho == 0);
  CHECK(ch.p == 1);
  CHECK(ch.u == std::vector<std::size_t>{3, 2});
  CHECK_THROWS_AS(EulerChannels::resolve({"u_x", "u_y", "p"}, 2), ConfigError);
}

TEST_CASE("residuals need two steps") {
  const std::vector<double> dx{0.01, 0.01};
  const StencilFields s = analytic_stencil(UniformFlow{}, hmtpf::testing::box_points(3, 1), 1, 0.1, stencil_offsets(dx));
  CHECK_THROWS_AS(residuals_euler(s, EulerChannels::resolve(kEulerChannels, 2), dx, 0.1), ConfigError);
}

TEST_CASE("uniform state has zero residuals") {
  const std::vector<double> dx{0.01, 0.01};
  const StencilFields s = analytic_stencil(UniformFlow{}, hmtpf::testing::box_points(30, 2), 4, 0.1, stencil_offsets(dx));
  const ResidualField r = residuals_euler(s, EulerChannels::resolve(kEulerChannels, 2), dx, 0.1);
  CHECK(r.steps() == 3);
  CHECK(r.n_q() == 30);
  CHECK(r.momentum.size() == 2);
  for (const Tensor& c : r.components())
    for (double v : c.data()) CHECK(v == 0.0);
}

TEST_CASE("residuals against a hand-written flux-form oracle") {
  const std::vector<double> dx{0.02, 0.03};
  const double dt = 0.05;
  const IsentropicVortex flow;
  const std::vector<double> xq = hmtpf::testing::box_points(8, 3);
  const StencilFields s = analytic_stencil(flow, xq, 3, dt, stencil_offsets(dx));
  const ResidualField r = residuals_euler(s, EulerChannels::resolve(kEulerChannels, 2), dx, dt);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < 8; ++i) {
      const double x = xq[2 * i], y = xq[2 * i + 1], t = (k + 1) * dt;
      auto st = [&](double ox, double oy, double tt) { return flow.eval(x + ox, y + oy, tt); };
      const FlowState c = st(0, 0, t), n = st(0, 0, t + dt);
      const FlowState xp = st(dx[0], 0, t), xm = st(-dx[0], 0, t), yp = st(0, dx[1], t), ym = st(0, -dx[1], t);
      const double cont = (n[3] - c[3]) / dt + (xp[3] * xp[0] - xm[3] * xm[0]) / (2 * dx[0]) +
                          (yp[3] * yp[1] - ym[3] * ym[1]) / (2 * dx[1]);
      CHECK(r.continuity.at(k, i) == doctest::Approx(cont).epsilon(1e-10));
      for (std::size_t a = 0; a < 2; ++a) {
        const double mom = (n[3] * n[a] - c[3] * c[a]) / dt +
                           (xp[3] * xp[a] * xp[0] - xm[3] * xm[a] * xm[0]) / (2 * dx[0]) +
                           (yp[3] * yp[a] * yp[1] - ym[3] * ym[a] * ym[1]) / (2 * dx[1]) +
                           (a == 0 ? (xp[2] - xm[2]) / (2 * dx[0]) : (yp[2] - ym[2]) / (2 * dx[1]));
        CHECK(r.momentum[a].at(k, i) == doctest::Approx(mom).epsilon(1e-10));
      }
    }
}

TEST_CASE("density-rate and pressure-gradient terms superpose") {
  const std::size_t o = 5, t = 3, n = 4;
  const std::vector<double> dx{0.1, 0.1};
  const auto ch = EulerChannels::resolve(kEulerChannels, 2);
  const Tensor rho_a = random_tensor({o * t * n}, 1), rho_b = random_tensor({o * t * n}, 2);
  const Tensor p_a = random_tensor({o * t * n}, 3), p_b = random_tensor({o * t * n}, 4);
  const ResidualField ra = residuals_euler(still_fluid(rho_a, p_a, o, t, n), ch, dx, 0.2);
  const ResidualField rb = residuals_euler(still_fluid(rho_b, p_b, o, t, n), ch, dx, 0.2);
  const ResidualField rs = residuals_euler(still_fluid(add(rho_a, rho_b), add(p_a, p_b), o, t, n), ch, dx, 0.2);
  const auto ca = ra.components(), cb = rb.components(), cs = rs.components();
  for (std::size_t c = 0; c < cs.size(); ++c) CHECK(max_abs_diff(cs[c].data(), add(ca[c], cb[c]).data()) <= 1e-12);
}

TEST_CASE("analytic residuals converge at the stencil orders") {
  const std::vector<double> xq = hmtpf::testing::box_points(40, 7);
  for (double order : hmtpf::testing::spatial_orders(IsentropicVortex{}, xq, 0.02, 0.01, 3)) CHECK(order >= 1.9);
  for (double order : hmtpf::testing::temporal_orders(IsentropicVortex{}, xq, 0.01, 1e-4, 3)) CHECK(order >= 0.9);
  for (double order : hmtpf::testing::spatial_orders(AdvectingGaussian{}, xq, 0.02, 0.01, 3)) CHECK(order >= 1.9);
}

TEST_CASE("gaussian ground truth stays within the convergence bound") {
  const FieldPack pack = gen_advecting_gaussian(20, 50, 4, 0.05, {0.5, 0.3}, 0.15, 9);
  const std::vector<double> dx{0.01, 0.01};
  const StencilFields s = analytic_stencil(AdvectingGaussian{}, pack.x_q, pack.t, pack.dt, stencil_offsets(dx));
  const ResidualField r = residuals_euler(s, EulerChannels::resolve(kEulerChannels, 2), dx, pack.dt);
  const double bound = hmtpf::testing::gaussian_residual_bound(pack.dt, 0.01, 0.5, 0.3, 0.15);
  for (const Tensor& c : r.components())
    for (double v : c.data()) CHECK(std::abs(v) <= bound);
}

TEST_CASE("mse metric examples and oracle") {
  const Tensor gt = random_tensor({3, 5, 2}, 1);
  CHECK(mse_metric(gt, gt).total == 0.0);
  std::vector<double> shifted(gt.data().begin(), gt.data().end());
  for (std::size_t i = 1; i < shifted.size(); i += 2) shifted[i] += 1.0;
  const MseReport one = mse_metric(Tensor::from({3, 5, 2}, shifted), gt);
  CHECK(one.per_channel[0] == 0.0);
  CHECK(one.per_channel[1] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(one.total == doctest::Approx(1.0).epsilon(1e-14));

  const Tensor pred = random_tensor({3, 5, 2}, 2);
  const MseReport got = mse_metric(pred, gt);
  double total = 0.0;
  for (std::size_t c = 0; c < 2; ++c) {
    double acc = 0.0;
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t q = 0; q < 5; ++q) {
        const double e = pred.at((t * 5 + q) * 2 + c) - gt.at((t * 5 + q) * 2 + c);
        acc += e * e;
      }
    acc /= 15.0;
    CHECK(std::abs(got.per_channel[c] - acc) <= 1e-12);
    total += acc;
  }
  CHECK(std::abs(got.total - total) <= 1e-12);
  CHECK_THROWS_AS(mse_metric(pred, random_tensor({3, 4, 2}, 3)), DimensionError);
}

TEST_CASE("r metric examples and oracle") {
  ResidualField zero{Tensor::zeros({2, 3}), {Tensor::zeros({2, 3}), Tensor::zeros({2, 3})}};
  CHECK(r_metric(zero).total == 0.0);

  ResidualField one = zero;
  one.momentum[1] = Tensor::from({2, 3}, {0, 0, 0, 0, 0.7, 0});
  const RReport rep = r_metric(one);
  CHECK(rep.momentum[1] == doctest::Approx(0.49 / 6.0).epsilon(1e-14));
  CHECK(rep.continuity == 0.0);
  CHECK(rep.momentum[0] == 0.0);

  ResidualField rnd{random_tensor({4, 7}, 1), {random_tensor({4, 7}, 2), random_tensor({4, 7}, 3)}};
  const RReport got = r_metric(rnd);
  std::vector<double> per;
  for (const Tensor& c : rnd.components()) {
    double acc = 0.0;
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t q = 0; q < 7; ++q) acc += c.at(k, q) * c.at(k, q);
    per.push_back(acc / 28.0);
  }
  CHECK(std::abs(got.continuity - per[0]) <= 1e-12);
  CHECK(std::abs(got.momentum[0] - per[1]) <= 1e-12);
  CHECK(std::abs(got.momentum[1] - per[2]) <= 1e-12);
  CHECK(std::abs(got.momentum_mean - (per[1] + per[2]) / 2) <= 1e-12);
  CHECK(std::abs(got.total - (per[0] + per[1] + per[2]) / 3) <= 1e-12);
  // The loss term sums the same per-component means.
  CHECK(std::abs(residual_loss(rnd).item() - (per[0] + per[1] + per[2])) <= 1e-12);
}

TEST_CASE("report rendering") {
  MseRReport rep;
  rep.channel_names = {"u_x", "u_y", "p", "rho"};
  rep.mse = MseReport{{0.1, 0.2, 0.0432, 0.1}, 0.4432};
  rep.r.continuity = 1e-3;
  rep.r.momentum = {2e-3, 3e-3};
  rep.r.momentum_mean = 2.5e-3;
  rep.r.total = 2e-3;
  rep.n_q = 100;
  rep.t = 5;
  rep.dx = {0.01, 0.01};
  rep.dt = 0.05;
  const std::string text = rep.render();
  CHECK(text.find("mse.total = 0.4432\n") != std::string::npos);
  for (const char* key : {"mse.u_x", "mse.rho", "r.total", "r.continuity", "r.momentum_x", "r.momentum_y", "n_q = 100",
                          "t = 5", "dx = 0.01,0.01", "dt = 0.05"})
    CHECK(text.find(key) != std::string::npos);
  CHECK(text == rep.render());

  rep.mse.reset();
  const std::string no_gt = rep.render();
  CHECK(no_gt.find("mse = n/a\n") != std::string::npos);
  CHECK(no_gt.find("mse.") == std::string::npos);
  CHECK(no_gt.find("r.total") != std::string::npos);
}

TEST_CASE("report from tensors is deterministic") {
  const Tensor pred = random_tensor({3, 5, 4}, 1), gt = random_tensor({3, 5, 4}, 2);
  ResidualField res{random_tensor({2, 5}, 3), {random_tensor({2, 5}, 4), random_tensor({2, 5}, 5)}};
  const auto a = mse_r_report(pred, gt, kEulerChannels, res, {0.01, 0.01}, 0.1).render();
  const auto b = mse_r_report(pred, gt, kEulerChannels, res, {0.01, 0.01}, 0.1).render();
  CHECK(a == b);
  const auto none = mse_r_report(pred, std::nullopt, kEulerChannels, res, {0.01, 0.01}, 0.1);
  CHECK_FALSE(none.mse.has_value());
}

TEST_CASE("evaluate_physics matches the stencil pipeline") {
  Model m(small_config());
  const FieldPack pack = gen_advecting_gaussian(20, 6, 3, 0.05, {0.5, 0.3}, 0.15, 2);
  const PhysicsEval ev = evaluate_physics(m, pack, {});
  CHECK(ev.dx == default_dx(pack));
  const ForwardResult fr = forward(m, pack);
  CHECK(bitwise_equal(ev.stencil.center().data(), fr.phi.data()));
  CHECK(ev.residuals.steps() == 2);
  check_finite(ev.residuals.continuity, "continuity");
}

}  // TEST_SUITE
