#include "hmtpf/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <ostream>
#include <sstream>
#include <thread>

#include "hmtpf/analysis.hpp"
#include "hmtpf/dataio.hpp"
#include "hmtpf/errors.hpp"
#include "hmtpf/finetune.hpp"
#include "hmtpf/physics.hpp"
#include "hmtpf/run_config.hpp"
#include "hmtpf/train.hpp"
#include "hmtpf/util.hpp"

namespace hmtpf {

namespace fs = std::filesystem;

const std::array<Rgb, 256>& viridis_table() {
  static const std::array<Rgb, 256> table = [] {
    constexpr std::array<Rgb, 10> anchors = {{{0x44, 0x01, 0x54},
                                              {0x48, 0x28, 0x78},
                                              {0x3E, 0x4A, 0x89},
                                              {0x31, 0x68, 0x8E},
                                              {0x26, 0x82, 0x8E},
                                              {0x1F, 0x9E, 0x89},
                                              {0x35, 0xB7, 0x79},
                                              {0x6D, 0xCD, 0x59},
                                              {0xB4, 0xDE, 0x2C},
                                              {0xFD, 0xE7, 0x25}}};
    std::array<Rgb, 256> t{};
    for (std::size_t i = 0; i < 256; ++i) {
      const double pos = static_cast<double>(i) / 255.0 * 9.0;
      const auto lo = std::min<std::size_t>(static_cast<std::size_t>(pos), 8);
      const double f = pos - static_cast<double>(lo);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = anchors[lo][c] + f * (anchors[lo + 1][c] - anchors[lo][c]);
        t[i][c] = static_cast<std::uint8_t>(std::lround(v));
      }
    }
    return t;
  }();
  return table;
}

std::string render_ppm(const std::vector<double>& xy, const std::vector<double>& values, std::size_t width,
                       std::size_t height) {
  const std::size_t n = values.size();
  if (n == 0 || xy.size() != 2 * n) throw DimensionError("render_ppm: need one 2-D point per value");
  double x0 = xy[0], x1 = xy[0], y0 = xy[1], y1 = xy[1];
  for (std::size_t i = 0; i < n; ++i) {
    x0 = std::min(x0, xy[2 * i]);
    x1 = std::max(x1, xy[2 * i]);
    y0 = std::min(y0, xy[2 * i + 1]);
    y1 = std::max(y1, xy[2 * i + 1]);
  }
  const auto [vmin_it, vmax_it] = std::minmax_element(values.begin(), values.end());
  const double vmin = *vmin_it, span = *vmax_it - *vmin_it;
  std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  const auto& lut = viridis_table();
  for (std::size_t r = 0; r < height; ++r) {
    const double y = y1 - (static_cast<double>(r) + 0.5) / static_cast<double>(height) * (y1 - y0);
    for (std::size_t c = 0; c < width; ++c) {
      const double x = x0 + (static_cast<double>(c) + 0.5) / static_cast<double>(width) * (x1 - x0);
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i) {
        const double dx = xy[2 * i] - x, dy = xy[2 * i + 1] - y;
        const double d = dx * dx + dy * dy;
        if (d < best_d) {
          best_d = d;
          best = i;
        }
      }
      const double norm = span > 0.0 ? (values[best] - vmin) / span : 0.5;
      const Rgb& rgb = lut[static_cast<std::size_t>(std::lround(std::clamp(norm, 0.0, 1.0) * 255.0))];
      out.append(reinterpret_cast<const char*>(rgb.data()), 3);
    }
  }
  return out;
}

namespace {

struct LoadedModel {
  RunConfig cfg;
  Model model;
};

LoadedModel load_model(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.kind != "train") throw ConfigError(path + " is a '" + ck.kind + "' checkpoint, expected a trained model");
  RunConfig cfg = parse_run_config(ck.config);
  LoadedModel out{cfg, Model(cfg.model)};
  TrainState state;
  restore_train_state(ck, out.model, state);
  return out;
}

FinetuneParams load_finetune(const std::string& path, const ModelConfig& model) {
  const Checkpoint ck = load_checkpoint(path);
  const RunConfig cfg = parse_run_config(ck.config);
  if (!(cfg.model == model)) throw ConfigError(path + " was fine-tuned for a different model configuration");
  FinetuneParams ft(model, cfg.finetune.seed);
  restore_finetune(ck, ft);
  return ft;
}

std::vector<std::string> split_dirs(const std::vector<std::string>& raw) {
  std::vector<std::string> out;
  for (const auto& r : raw)
    for (const auto& part : split(r, ','))
      if (!trim(part).empty()) out.push_back(trim(part));
  return out;
}

/// Runs f(i) for i in [0, n) on up to `threads` workers; results land by index.
template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F f) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) f(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::string csv_row(const std::vector<std::string>& cells) { return join(cells, ",") + "\n"; }

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string kind, out;
  std::uint64_t seed = 0;
  std::size_t n_bd = 200, n_q = 100, t = 5;
  double dt = 0.05;
  std::vector<double> u0{0.5, 0.3};
  double sigma = 0.15, strength = 5.0, gamma = 1.4;
};

int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  FieldPack pack;
  if (a.kind == "uniform") {
    pack = gen_uniform_flow(a.n_bd, a.n_q, a.t, a.dt, a.seed);
  } else if (a.kind == "gaussian") {
    if (a.u0.size() != 2) throw ConfigError("--u0 takes two comma-separated values");
    pack = gen_advecting_gaussian(a.n_bd, a.n_q, a.t, a.dt, {a.u0[0], a.u0[1]}, a.sigma, a.seed);
  } else {
    pack = gen_isentropic_vortex(a.n_bd, a.n_q, a.t, a.dt, a.strength, a.gamma, a.seed);
  }
  write_fieldpack(pack, a.out);
  out << "wrote " << a.kind << " sample to " << a.out << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::vector<std::string> data;
  std::string config, out, log, resume;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const RunConfig cfg = load_run_config(a.config);
  std::vector<FieldPack> data;
  for (const auto& dir : split_dirs(a.data)) data.push_back(read_fieldpack(dir));
  if (data.empty()) throw ConfigError("--data names no sample directories");
  Model model(cfg.model);
  TrainState state = make_train_state(model, cfg.train);
  if (!a.resume.empty()) {
    const Checkpoint ck = load_checkpoint(a.resume);
    if (!(parse_run_config(ck.config).model == cfg.model)) {
      throw ConfigError("--resume checkpoint was trained with a different model configuration");
    }
    restore_train_state(ck, model, state);
  }
  const auto log = train_loop(model, data, cfg.train, state);
  const std::string log_path = a.log.empty() ? a.out + ".log.csv" : a.log;
  save_checkpoint(make_train_checkpoint(model, state, render_run_config(cfg)), a.out);
  write_file_atomic(log_path, render_train_log(log));
  out << "trained " << log.size() << " steps";
  if (!log.empty()) out << ", loss " << format_double(log.front().loss) << " -> " << format_double(log.back().loss);
  out << "\nwrote " << a.out << " and " << log_path << "\n";
  return kExitOk;
}

struct FinetuneArgs {
  std::string ckpt, data, config, out, history;
  bool no_gt = false;
};

int cmd_finetune(const FinetuneArgs& a, std::ostream& out) {
  LoadedModel lm = load_model(a.ckpt);
  RunConfig cfg = lm.cfg;
  if (!a.config.empty()) {
    const RunConfig given = load_run_config(a.config);
    cfg.finetune = given.finetune;
    cfg.fd = given.fd;
  }
  const FieldPack pack = read_fieldpack(a.data);
  FinetuneParams ft(cfg.model, cfg.finetune.seed);
  const auto history = finetune_loop(lm.model, ft, pack, cfg.finetune, !a.no_gt);
  const std::string hist_path = a.history.empty() ? a.out + ".history.csv" : a.history;
  save_checkpoint(make_finetune_checkpoint(ft, render_run_config(cfg)), a.out);
  write_file_atomic(hist_path, render_finetune_history(history));
  out << "fine-tuned " << cfg.finetune.steps << " steps, r.total " << format_double(history.front().r_total)
      << " -> " << format_double(history.back().r_total) << "\nwrote " << a.out << " and " << hist_path << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string ckpt, ft, data, out;
  bool no_gt = false;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const LoadedModel lm = load_model(a.ckpt);
  const FieldPack pack = read_fieldpack(a.data);
  Tensor pred;
  ResidualField res;
  std::vector<double> dx;
  if (!a.ft.empty()) {
    const FinetuneParams ft = load_finetune(a.ft, lm.cfg.model);
    const FinetunedEval ev = evaluate_finetuned(lm.model, ft, pack, lm.cfg.fd);
    pred = ev.phi_tilde;
    res = ev.res_tilde;
    dx = ev.dx;
  } else {
    NoGradScope no_grad;
    const PhysicsEval ev = evaluate_physics(lm.model, pack, lm.cfg.fd);
    pred = ev.stencil.center();
    res = ev.residuals;
    dx = ev.dx;
  }
  std::optional<Tensor> gt;
  if (!a.no_gt) gt = Tensor::from({pack.t, pack.n_q, pack.n_phi()}, pack.phi);
  const std::string text = mse_r_report(pred, gt, pack.channel_names, res, dx, pack.dt).render();
  if (!a.out.empty()) write_file_atomic(a.out, text);
  out << text;
  return kExitOk;
}

struct AnalyzeArgs {
  std::string ckpt, out;
  std::vector<std::string> data;
  std::size_t k_min = 2, k_max = 10, segment = 16, restarts = 10;
  std::uint64_t seed = 0;
};

int cmd_analyze(const AnalyzeArgs& a, std::size_t threads, std::ostream& out) {
  const LoadedModel lm = load_model(a.ckpt);
  const auto dirs = split_dirs(a.data);
  if (dirs.size() < 2) throw ConfigError("analyze needs at least two samples");
  std::vector<FieldPack> packs;
  for (const auto& d : dirs) packs.push_back(read_fieldpack(d));
  std::vector<LatentTrajectory> trajs(packs.size());
  parallel_for(packs.size(), threads, [&](std::size_t i) {
    check_compatible(lm.model, packs[i]);
    NoGradScope no_grad;
    trajs[i] = encode_and_rollout(lm.model, encoder_inputs(packs[i]), packs[i].t).traj;
  });
  Matrix z0(packs.size(), lm.cfg.model.n_g);
  for (std::size_t i = 0; i < packs.size(); ++i) {
    const auto v = trajs[i].z0.data();
    std::copy(v.begin(), v.end(), z0.data.begin() + static_cast<std::ptrdiff_t>(i * z0.cols));
  }
  const PcaResult p = pca(z0);
  const std::size_t dims = std::min<std::size_t>(3, z0.cols);
  const Matrix scores = project(z0, p, dims);
  const Matrix features = trajectory_features(trajs, p, dims);

  fs::create_directories(a.out);
  std::string evr = "component,evr\n";
  for (std::size_t c = 0; c < p.evr.size(); ++c) evr += csv_row({std::to_string(c + 1), format_double(p.evr[c])});
  write_file_atomic(fs::path(a.out) / "evr.csv", evr);

  std::vector<std::size_t> labels(packs.size(), 0);
  std::string sil = "k,silhouette\n";
  if (packs.size() >= 3) {
    const KSelection sel = select_k(features, a.k_min, a.k_max, a.seed, a.restarts);
    for (const auto& [k, s] : sel.scores) sil += csv_row({std::to_string(k), format_double(s)});
    labels = sel.best.assignments;
    out << "silhouette-selected k = " << sel.best_k << "\n";
  }
  write_file_atomic(fs::path(a.out) / "silhouette.csv", sil);
  std::string clusters = "sample_id,p1,p2,p3,cluster\n";
  for (std::size_t i = 0; i < packs.size(); ++i) {
    std::vector<std::string> row{std::to_string(i)};
    for (std::size_t c = 0; c < 3; ++c) row.push_back(c < dims ? format_double(scores(i, c)) : "0");
    row.push_back(std::to_string(labels[i]));
    clusters += csv_row(row);
  }
  write_file_atomic(fs::path(a.out) / "clusters.csv", clusters);

  // Segment ablation on the first sample.
  const FieldPack& first = packs.front();
  const std::size_t seg = std::max<std::size_t>(1, a.segment);
  std::vector<std::string> header{"segment_begin", "segment_end", "step", "query", "x", "y"};
  for (const auto& name : first.channel_names) header.push_back(name);
  std::string abl = csv_row(header);
  for (std::size_t b = 0; b < lm.cfg.model.n_g; b += seg) {
    const std::size_t e = std::min(lm.cfg.model.n_g, b + seg);
    const Tensor fields = segment_ablation(lm.model, first, b, e);
    const auto v = fields.data();
    for (std::size_t k = 0; k < first.t; ++k)
      for (std::size_t q = 0; q < first.n_q; ++q) {
        std::vector<std::string> row{std::to_string(b), std::to_string(e), std::to_string(k), std::to_string(q),
                                     format_double(first.x_q[q * first.d]),
                                     format_double(first.d > 1 ? first.x_q[q * first.d + 1] : 0.0)};
        for (std::size_t c = 0; c < first.n_phi(); ++c)
          row.push_back(format_double(v[(k * first.n_q + q) * first.n_phi() + c]));
        abl += csv_row(row);
      }
  }
  write_file_atomic(fs::path(a.out) / "ablation.csv", abl);
  out << "wrote evr.csv, silhouette.csv, clusters.csv, ablation.csv to " << a.out << "\n";
  return kExitOk;
}

struct ExportArgs {
  std::string ckpt, ft, data, channel, out;
  std::size_t step = 0;
};

int cmd_export(const ExportArgs& a, std::ostream& out) {
  const LoadedModel lm = load_model(a.ckpt);
  const FieldPack pack = read_fieldpack(a.data);
  const std::size_t channel = pack.channel(a.channel);
  if (a.step >= pack.t) {
    throw ConfigError("--step " + std::to_string(a.step) + " is outside [0, " + std::to_string(pack.t) + ")");
  }
  Tensor pred;
  if (!a.ft.empty()) {
    pred = evaluate_finetuned(lm.model, load_finetune(a.ft, lm.cfg.model), pack, lm.cfg.fd).phi_tilde;
  } else {
    NoGradScope no_grad;
    pred = forward(lm.model, pack).phi;
  }
  std::vector<double> values(pack.n_q);
  const auto v = pred.data();
  for (std::size_t q = 0; q < pack.n_q; ++q) values[q] = v[(a.step * pack.n_q + q) * pack.n_phi() + channel];
  const std::string ext = fs::path(a.out).extension().string();
  if (ext == ".csv") {
    std::string text = "x,y," + a.channel + "\n";
    for (std::size_t q = 0; q < pack.n_q; ++q) {
      text += csv_row({format_double(pack.x_q[q * pack.d]),
                       format_double(pack.d > 1 ? pack.x_q[q * pack.d + 1] : 0.0), format_double(values[q])});
    }
    write_file_atomic(a.out, text);
  } else if (ext == ".ppm") {
    if (pack.d != 2) throw ConfigError("PPM export needs two-dimensional samples");
    write_file_atomic(a.out, render_ppm(pack.x_q, values));
  } else {
    throw ConfigError("--out must end in .csv or .ppm");
  }
  out << "wrote " << a.out << "\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Point-cloud spatiotemporal field generator with physics fine-tuning"};
  app.footer("\n" + run_config_help());
  app.require_subcommand(1);
  std::size_t threads = 1;
  app.add_option("--threads", threads, "worker threads for per-sample evaluation")->check(CLI::PositiveNumber);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "write an analytic FieldPack");
  gen_cmd->add_option("--case", gen.kind, "uniform | gaussian | vortex")
      ->required()
      ->check(CLI::IsMember({"uniform", "gaussian", "vortex"}));
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "point sampling seed");
  gen_cmd->add_option("--n-bd", gen.n_bd, "input points")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--n-q", gen.n_q, "query points")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--t", gen.t, "time steps")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--dt", gen.dt, "time spacing")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--u0", gen.u0, "gaussian advection velocity")->delimiter(',')->expected(2);
  gen_cmd->add_option("--sigma", gen.sigma, "gaussian width");
  gen_cmd->add_option("--strength", gen.strength, "vortex strength");
  gen_cmd->add_option("--gamma", gen.gamma, "vortex heat-capacity ratio");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "stage-1 supervised training");
  train_cmd->add_option("--data", tr.data, "sample directories (comma-separated or repeated)")->required();
  train_cmd->add_option("--config", tr.config, "run configuration file")->required();
  train_cmd->add_option("--out", tr.out, "checkpoint to write")->required();
  train_cmd->add_option("--log", tr.log, "training log CSV (default OUT.log.csv)");
  train_cmd->add_option("--resume", tr.resume, "continue from this checkpoint");

  FinetuneArgs fa;
  auto* ft_cmd = app.add_subcommand("finetune", "physics-informed fine-tuning on one sample");
  ft_cmd->add_option("--ckpt", fa.ckpt, "trained model checkpoint")->required();
  ft_cmd->add_option("--data", fa.data, "sample directory")->required();
  ft_cmd->add_option("--config", fa.config, "finetune.* and fd.* settings (default: the checkpoint's)");
  ft_cmd->add_option("--out", fa.out, "fine-tune checkpoint to write")->required();
  ft_cmd->add_option("--history", fa.history, "history CSV (default OUT.history.csv)");
  ft_cmd->add_flag("--no-gt", fa.no_gt, "omit the mse_vs_gt diagnostic column");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "MSE and residual report");
  eval_cmd->add_option("--ckpt", ev.ckpt, "trained model checkpoint")->required();
  eval_cmd->add_option("--ft", ev.ft, "fine-tune checkpoint");
  eval_cmd->add_option("--data", ev.data, "sample directory")->required();
  eval_cmd->add_option("--out", ev.out, "also write the report here");
  eval_cmd->add_flag("--no-gt", ev.no_gt, "report residuals only");

  AnalyzeArgs an;
  auto* an_cmd = app.add_subcommand("analyze", "PCA, clustering and segment ablation of latents");
  an_cmd->add_option("--ckpt", an.ckpt, "trained model checkpoint")->required();
  an_cmd->add_option("--data", an.data, "sample directories")->required();
  an_cmd->add_option("--out", an.out, "output directory")->required();
  an_cmd->add_option("--k-min", an.k_min, "smallest cluster count tried");
  an_cmd->add_option("--k-max", an.k_max, "largest cluster count tried");
  an_cmd->add_option("--restarts", an.restarts, "k-means restarts");
  an_cmd->add_option("--seed", an.seed, "k-means seed");
  an_cmd->add_option("--segment", an.segment, "z0 components per ablation segment");

  ExportArgs ex;
  auto* ex_cmd = app.add_subcommand("export", "write one predicted channel as CSV or PPM");
  ex_cmd->add_option("--ckpt", ex.ckpt, "trained model checkpoint")->required();
  ex_cmd->add_option("--ft", ex.ft, "fine-tune checkpoint");
  ex_cmd->add_option("--data", ex.data, "sample directory")->required();
  ex_cmd->add_option("--channel", ex.channel, "channel name")->required();
  ex_cmd->add_option("--step", ex.step, "time step index, from 0")->required();
  ex_cmd->add_option("--out", ex.out, "FILE.csv or FILE.ppm")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen_cmd->parsed()) return cmd_gen_data(gen, out);
    if (train_cmd->parsed()) return cmd_train(tr, out);
    if (ft_cmd->parsed()) return cmd_finetune(fa, out);
    if (eval_cmd->parsed()) return cmd_eval(ev, out);
    if (an_cmd->parsed()) return cmd_analyze(an, threads, out);
    if (ex_cmd->parsed()) return cmd_export(ex, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  err << "error: no subcommand\n";
  return kExitUsage;
}

}  // namespace hmtpf
