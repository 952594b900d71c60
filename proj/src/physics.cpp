#include "hmtpf/physics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "hmtpf/errors.hpp"

namespace hmtpf {

namespace {

const char* const kAxisNames[] = {"x", "y", "z"};

std::string axis_name(std::size_t a) { return a < 3 ? kAxisNames[a] : std::to_string(a); }

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

std::vector<double> default_dx(const FieldPack& pack) {
  std::vector<double> lo(pack.d, std::numeric_limits<double>::infinity());
  std::vector<double> hi(pack.d, -std::numeric_limits<double>::infinity());
  auto extend = [&](const std::vector<double>& pts) {
    for (std::size_t i = 0; i + pack.d <= pts.size(); i += pack.d) {
      for (std::size_t a = 0; a < pack.d; ++a) {
        lo[a] = std::min(lo[a], pts[i + a]);
        hi[a] = std::max(hi[a], pts[i + a]);
      }
    }
  };
  extend(pack.x_bd);
  extend(pack.x_q);
  double diag2 = 0.0;
  for (std::size_t a = 0; a < pack.d; ++a) diag2 += (hi[a] - lo[a]) * (hi[a] - lo[a]);
  const double diag = std::sqrt(diag2);
  if (!(diag > 0.0)) throw ConfigError("default_dx: sample has a degenerate bounding box");
  return std::vector<double>(pack.d, kDefaultDxFraction * diag);
}

std::vector<double> resolve_dx(const FdConfig& cfg, const FieldPack& pack) {
  std::vector<double> dx;
  if (cfg.dx.empty()) {
    dx = default_dx(pack);
  } else if (cfg.dx.size() == 1) {
    dx.assign(pack.d, cfg.dx.front());
  } else if (cfg.dx.size() == pack.d) {
    dx = cfg.dx;
  } else {
    throw ConfigError("fd.dx: expected 1 or " + std::to_string(pack.d) + " values, got " +
                      std::to_string(cfg.dx.size()));
  }
  for (double h : dx)
    if (!(h > 0.0) || !std::isfinite(h)) throw ConfigError("fd.dx: step must be positive and finite");
  return dx;
}

std::vector<std::vector<double>> stencil_offsets(std::span<const double> dx) {
  const std::size_t d = dx.size();
  std::vector<std::vector<double>> out(1 + 2 * d, std::vector<double>(d, 0.0));
  for (std::size_t a = 0; a < d; ++a) {
    out[plus_offset(a)][a] = dx[a];
    out[minus_offset(a)][a] = -dx[a];
  }
  return out;
}

Tensor StencilFields::channel_at(std::size_t channel, std::size_t offset) const {
  if (channel >= n_phi || offset >= offsets) throw DimensionError("StencilFields: channel or offset out of range");
  const Tensor block = reshape(slice_rows(values, offset, offset + 1), {t * n_q, n_phi});
  return reshape(slice_cols(block, channel, channel + 1), {t, n_q});
}

Tensor StencilFields::center() const { return reshape(slice_rows(values, kCenter, kCenter + 1), {t, n_q, n_phi}); }

StencilFields query_with_offsets(const QueryDecoder& decode, std::span<const double> x_q, std::size_t d,
                                 const std::vector<std::vector<double>>& offsets) {
  if (d == 0 || x_q.size() % d != 0) throw DimensionError("query_with_offsets: coordinate count not a multiple of d");
  const std::size_t n_q = x_q.size() / d;
  const std::size_t n_off = offsets.size();
  if (n_off == 0) throw DimensionError("query_with_offsets: no offsets");
  std::vector<double> stacked;
  stacked.reserve(n_off * x_q.size());
  for (const auto& off : offsets) {
    if (off.size() != d) throw DimensionError("query_with_offsets: offset width differs from d");
    for (std::size_t i = 0; i < n_q; ++i)
      for (std::size_t a = 0; a < d; ++a) stacked.push_back(x_q[i * d + a] + off[a]);
  }
  const Tensor fields = decode(Tensor::from({n_off * n_q, d}, std::move(stacked)));  // [T × O·N_Q × N_phi]
  if (fields.rank() != 3 || fields.dim(1) != n_off * n_q) {
    throw DimensionError("query_with_offsets: decoder returned " + shape_str(fields.shape()));
  }
  StencilFields s;
  s.offsets = n_off;
  s.t = fields.dim(0);
  s.n_q = n_q;
  s.n_phi = fields.dim(2);
  // Reorder row blocks from (t, o) to (o, t).
  std::vector<std::size_t> order(n_off * s.t);
  for (std::size_t o = 0; o < n_off; ++o)
    for (std::size_t k = 0; k < s.t; ++k) order[o * s.t + k] = k * n_off + o;
  const Tensor blocks = reshape(fields, {s.t * n_off, n_q * s.n_phi});
  s.values = reshape(gather_rows(blocks, order), {n_off, s.t, n_q, s.n_phi});
  return s;
}

StencilFields query_with_offsets(const Model& m, const Latents& lat, std::span<const double> x_q,
                                 const std::vector<std::vector<double>>& offsets) {
  const QueryDecoder decode = [&](const Tensor& xq) {
    return decode_fields(lat.traj, lat.g0, encode_queries(xq, m.decoder()), m.decoder());
  };
  return query_with_offsets(decode, x_q, m.config().d, offsets);
}

StencilFields analytic_stencil(const AnalyticFlow& flow, std::span<const double> x_q, std::size_t t_steps, double dt,
                               const std::vector<std::vector<double>>& offsets) {
  constexpr std::size_t d = 2;
  if (x_q.size() % d != 0) throw DimensionError("analytic_stencil: analytic flows are two-dimensional");
  StencilFields s;
  s.offsets = offsets.size();
  s.t = t_steps;
  s.n_q = x_q.size() / d;
  s.n_phi = kEulerChannels.size();
  std::vector<double> v;
  v.reserve(s.offsets * s.t * s.n_q * s.n_phi);
  for (const auto& off : offsets) {
    if (off.size() != d) throw DimensionError("analytic_stencil: offset width differs from 2");
    for (std::size_t k = 0; k < t_steps; ++k) {
      const double time = static_cast<double>(k + 1) * dt;
      for (std::size_t i = 0; i < s.n_q; ++i) {
        const FlowState st = flow.eval(x_q[i * d] + off[0], x_q[i * d + 1] + off[1], time);
        v.insert(v.end(), st.begin(), st.end());
      }
    }
  }
  s.values = Tensor::from({s.offsets, s.t, s.n_q, s.n_phi}, std::move(v));
  return s;
}

double fd_spatial_first(double f_plus, double f_minus, double dx) { return (f_plus - f_minus) / (2.0 * dx); }

double fd_spatial_second(double f_plus, double f_center, double f_minus, double dx) {
  return (f_plus - 2.0 * f_center + f_minus) / (dx * dx);
}

double fd_time(double f_t, double f_next, double dt) { return (f_next - f_t) / dt; }

Tensor fd_spatial_first(const Tensor& f_plus, const Tensor& f_minus, double dx) {
  return scale(sub(f_plus, f_minus), 1.0 / (2.0 * dx));
}

Tensor fd_spatial_second(const Tensor& f_plus, const Tensor& f_center, const Tensor& f_minus, double dx) {
  return scale(add(sub(f_plus, scale(f_center, 2.0)), f_minus), 1.0 / (dx * dx));
}

Tensor fd_time(const Tensor& f_t, const Tensor& f_next, double dt) { return scale(sub(f_next, f_t), 1.0 / dt); }

EulerChannels EulerChannels::resolve(const std::vector<std::string>& names, std::size_t d) {
  auto find = [&](const std::string& name) {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw ConfigError("physics: channel '" + name + "' is missing from the sample");
  };
  EulerChannels ch;
  for (std::size_t a = 0; a < d; ++a) ch.u.push_back(find("u_" + axis_name(a)));
  ch.p = find("p");
  ch.rho = find("rho");
  return ch;
}

std::vector<Tensor> ResidualField::components() const {
  std::vector<Tensor> out{continuity};
  out.insert(out.end(), momentum.begin(), momentum.end());
  return out;
}

ResidualField residuals_euler(const StencilFields& s, const EulerChannels& ch, std::span<const double> dx,
                              double dt) {
  const std::size_t d = ch.u.size();
  if (dx.size() != d) throw DimensionError("residuals_euler: dx has " + std::to_string(dx.size()) + " axes, need " +
                                           std::to_string(d));
  if (s.offsets != 1 + 2 * d) throw DimensionError("residuals_euler: stencil needs 1 + 2d offsets");
  if (s.t < 2) throw ConfigError("residuals_euler: need at least two time steps, got " + std::to_string(s.t));
  if (!(dt > 0.0)) throw ConfigError("residuals_euler: dt must be positive");

  // Every channel column at every offset, [T × N_Q].
  const Tensor flat = reshape(s.values, {s.offsets * s.t * s.n_q, s.n_phi});
  auto column = [&](std::size_t c) { return reshape(slice_cols(flat, c, c + 1), {s.offsets * s.t, s.n_q}); };
  const Tensor rho_all = column(ch.rho);
  const Tensor p_all = column(ch.p);
  std::vector<Tensor> u_all;
  for (std::size_t a = 0; a < d; ++a) u_all.push_back(column(ch.u[a]));
  auto at = [&](const Tensor& col, std::size_t o) { return slice_rows(col, o * s.t, (o + 1) * s.t); };
  auto early = [&](const Tensor& f) { return slice_rows(f, 0, s.t - 1); };
  auto late = [&](const Tensor& f) { return slice_rows(f, 1, s.t); };

  // Per offset: ρ, ρu_a, ρu_a u_b.
  std::vector<Tensor> rho(s.offsets), p(s.offsets);
  std::vector<std::vector<Tensor>> mom(s.offsets, std::vector<Tensor>(d));
  for (std::size_t o = 0; o < s.offsets; ++o) {
    rho[o] = at(rho_all, o);
    p[o] = at(p_all, o);
    for (std::size_t a = 0; a < d; ++a) mom[o][a] = mul(rho[o], at(u_all[a], o));
  }
  auto flux_u = [&](std::size_t o, std::size_t a, std::size_t b) { return mul(mom[o][a], at(u_all[b], o)); };
  auto ddx = [&](const Tensor& f_plus, const Tensor& f_minus, std::size_t axis) {
    return fd_spatial_first(early(f_plus), early(f_minus), dx[axis]);
  };
  auto ddt = [&](const Tensor& f) { return fd_time(early(f), late(f), dt); };

  ResidualField res;
  Tensor cont = ddt(rho[kCenter]);
  for (std::size_t b = 0; b < d; ++b) cont = add(cont, ddx(mom[plus_offset(b)][b], mom[minus_offset(b)][b], b));
  res.continuity = cont;
  for (std::size_t a = 0; a < d; ++a) {
    Tensor r = ddt(mom[kCenter][a]);
    for (std::size_t b = 0; b < d; ++b)
      r = add(r, ddx(flux_u(plus_offset(b), a, b), flux_u(minus_offset(b), a, b), b));
    r = add(r, ddx(p[plus_offset(a)], p[minus_offset(a)], a));
    res.momentum.push_back(r);
  }
  return res;
}

Tensor residual_loss(const ResidualField& res) {
  Tensor total;
  for (const Tensor& r : res.components()) {
    const Tensor term = mean(mul(r, r));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

MseReport mse_metric(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape() || pred.rank() != 3) {
    throw DimensionError("mse_metric: shapes " + shape_str(pred.shape()) + " and " + shape_str(gt.shape()) +
                         " must match and be [T × N_Q × N_phi]");
  }
  const std::size_t rows = pred.dim(0) * pred.dim(1), n_phi = pred.dim(2);
  MseReport r;
  r.per_channel.assign(n_phi, 0.0);
  const auto a = pred.data();
  const auto b = gt.data();
  for (std::size_t c = 0; c < n_phi; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      const double e = a[i * n_phi + c] - b[i * n_phi + c];
      acc += e * e;
    }
    r.per_channel[c] = acc / static_cast<double>(rows);
    r.total += r.per_channel[c];
  }
  return r;
}

RReport r_metric(const ResidualField& res) {
  auto component = [](const Tensor& r) {
    double acc = 0.0;
    for (double v : r.data()) acc += v * v;
    return r.size() == 0 ? 0.0 : acc / static_cast<double>(r.size());
  };
  RReport out;
  out.continuity = component(res.continuity);
  double sum = out.continuity;
  for (const Tensor& m : res.momentum) {
    out.momentum.push_back(component(m));
    out.momentum_mean += out.momentum.back();
    sum += out.momentum.back();
  }
  if (!out.momentum.empty()) out.momentum_mean /= static_cast<double>(out.momentum.size());
  out.total = sum / static_cast<double>(1 + out.momentum.size());
  return out;
}

std::string MseRReport::render() const {
  std::string s;
  auto line = [&](const std::string& key, const std::string& value) { s += key + " = " + value + "\n"; };
  if (mse) {
    line("mse.total", fmt(mse->total));
    for (std::size_t c = 0; c < mse->per_channel.size(); ++c) line("mse." + channel_names.at(c), fmt(mse->per_channel[c]));
  } else {
    line("mse", "n/a");
  }
  line("r.total", fmt(r.total));
  line("r.continuity", fmt(r.continuity));
  for (std::size_t a = 0; a < r.momentum.size(); ++a) line("r.momentum_" + axis_name(a), fmt(r.momentum[a]));
  line("r.momentum", fmt(r.momentum_mean));
  line("n_q", std::to_string(n_q));
  line("t", std::to_string(t));
  std::string dxs;
  for (std::size_t a = 0; a < dx.size(); ++a) dxs += (a ? "," : "") + fmt(dx[a]);
  line("dx", dxs);
  line("dt", fmt(dt));
  return s;
}

MseRReport mse_r_report(const Tensor& pred, const std::optional<Tensor>& gt,
                        const std::vector<std::string>& channel_names, const ResidualField& res,
                        std::vector<double> dx, double dt) {
  if (pred.rank() != 3 || pred.dim(2) != channel_names.size()) {
    throw DimensionError("mse_r_report: prediction " + shape_str(pred.shape()) + " does not match " +
                         std::to_string(channel_names.size()) + " channels");
  }
  MseRReport rep;
  rep.channel_names = channel_names;
  if (gt) rep.mse = mse_metric(pred, *gt);
  rep.r = r_metric(res);
  rep.n_q = pred.dim(1);
  rep.t = pred.dim(0);
  rep.dx = std::move(dx);
  rep.dt = dt;
  return rep;
}

PhysicsEval evaluate_physics(const Model& m, const FieldPack& pack, const FdConfig& fd) {
  check_compatible(m, pack);
  PhysicsEval ev;
  ev.dx = resolve_dx(fd, pack);
  const Latents lat = encode_and_rollout(m, encoder_inputs(pack), pack.t);
  ev.stencil = query_with_offsets(m, lat, pack.x_q, stencil_offsets(ev.dx));
  ev.residuals = residuals_euler(ev.stencil, EulerChannels::resolve(pack.channel_names, pack.d), ev.dx, pack.dt);
  return ev;
}

}  // namespace hmtpf
