#include "hmtpf/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "hmtpf/errors.hpp"

namespace hmtpf {

Matrix Matrix::from_tensor(const Tensor& t) {
  if (t.rank() != 2) throw DimensionError("Matrix::from_tensor: need rank 2, got " + shape_str(t.shape()));
  Matrix m(t.dim(0), t.dim(1));
  const auto d = t.data();
  std::copy(d.begin(), d.end(), m.data.begin());
  return m;
}

SymmetricEigen jacobi_eigen(const Matrix& input, double tol, std::size_t max_sweeps) {
  if (input.rows != input.cols) throw DimensionError("jacobi_eigen: matrix is not square");
  const std::size_t n = input.rows;
  Matrix a = input;
  Matrix v(n, n);
  for (std::size_t i = 0; i < n; ++i) v(i, i) = 1.0;
  double frob = 0.0;
  for (double x : a.data) frob += x * x;
  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off <= tol * tol * frob || off == 0.0) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });
  SymmetricEigen out;
  out.vectors = Matrix(n, n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t col = order[r];
    out.values.push_back(a(col, col));
    for (std::size_t k = 0; k < n; ++k) out.vectors(r, k) = v(k, col);
  }
  return out;
}

PcaResult pca(const Matrix& x) {
  if (x.rows < 2) throw DimensionError("pca: need at least 2 vectors, got " + std::to_string(x.rows));
  const std::size_t n = x.rows, m = x.cols;
  PcaResult r;
  r.mean.assign(m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) r.mean[j] += x(i, j);
  for (double& v : r.mean) v /= static_cast<double>(n);
  Matrix cov(m, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < m; ++a) {
      const double da = x(i, a) - r.mean[a];
      for (std::size_t b = a; b < m; ++b) cov(a, b) += da * (x(i, b) - r.mean[b]);
    }
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = a; b < m; ++b) {
      cov(a, b) /= static_cast<double>(n - 1);
      cov(b, a) = cov(a, b);
    }
  SymmetricEigen eig = jacobi_eigen(cov);
  r.components = std::move(eig.vectors);
  double total = 0.0;
  for (double& v : eig.values) {
    v = std::max(v, 0.0);
    total += v;
  }
  if (!(total > 0.0)) throw NumericError("pca: vectors have zero total variance");
  r.variances = eig.values;
  for (double v : eig.values) r.evr.push_back(v / total);
  for (std::size_t c = 0; c < m; ++c) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < m; ++j)
      if (std::abs(r.components(c, j)) > std::abs(r.components(c, arg))) arg = j;
    if (r.components(c, arg) < 0.0)
      for (std::size_t j = 0; j < m; ++j) r.components(c, j) = -r.components(c, j);
  }
  return r;
}

Matrix project(const Matrix& x, const PcaResult& p, std::size_t m) {
  if (m > p.components.rows) throw DimensionError("project: asked for more components than exist");
  if (x.cols != p.mean.size()) throw DimensionError("project: vector width differs from the fitted PCA");
  Matrix out(x.rows, m);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t c = 0; c < m; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < x.cols; ++j) acc += (x(i, j) - p.mean[j]) * p.components(c, j);
      out(i, c) = acc;
    }
  return out;
}

Matrix inverse_project(const Matrix& scores, const PcaResult& p) {
  if (scores.cols > p.components.rows) throw DimensionError("inverse_project: too many score columns");
  const std::size_t w = p.mean.size();
  Matrix out(scores.rows, w);
  for (std::size_t i = 0; i < scores.rows; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      double acc = p.mean[j];
      for (std::size_t c = 0; c < scores.cols; ++c) acc += scores(i, c) * p.components(c, j);
      out(i, j) = acc;
    }
  return out;
}

namespace {

double dist2(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

struct LloydRun {
  std::vector<std::size_t> assign;
  Matrix centroids;
  double inertia = 0.0;
  std::vector<double> history;
};

Matrix kmeanspp(const Matrix& x, std::size_t k, Rng& rng) {
  const std::size_t n = x.rows;
  Matrix c(k, x.cols);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::size_t first = pick(rng);
  std::copy_n(x.row(first).begin(), x.cols, c.data.begin());
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  for (std::size_t j = 1; j < k; ++j) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], dist2(x.row(i), c.row(j - 1)));
      total += d2[i];
    }
    std::size_t chosen = 0;
    if (total > 0.0) {
      double target = unit(rng) * total;
      chosen = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        if (target < d2[i]) {
          chosen = i;
          break;
        }
        target -= d2[i];
      }
    } else {
      chosen = pick(rng);
    }
    std::copy_n(x.row(chosen).begin(), x.cols, c.data.begin() + static_cast<std::ptrdiff_t>(j * x.cols));
  }
  return c;
}

LloydRun lloyd(const Matrix& x, Matrix centroids, std::size_t max_iter) {
  const std::size_t n = x.rows, k = centroids.rows, w = x.cols;
  LloydRun run;
  run.assign.assign(n, k);
  std::vector<double> best_d(n);
  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t arg = 0;
      double best = dist2(x.row(i), centroids.row(0));
      for (std::size_t c = 1; c < k; ++c) {
        const double d = dist2(x.row(i), centroids.row(c));
        if (d < best) {
          best = d;
          arg = c;
        }
      }
      best_d[i] = best;
      if (run.assign[i] != arg) changed = true;
      run.assign[i] = arg;
    }
    // An empty cluster takes the point farthest from its centroid.
    std::vector<std::size_t> count(k, 0);
    for (auto a : run.assign) ++count[a];
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] != 0) continue;
      std::size_t far = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (best_d[i] > best_d[far] && count[run.assign[i]] > 1) far = i;
      if (count[run.assign[far]] <= 1) continue;
      --count[run.assign[far]];
      run.assign[far] = c;
      ++count[c];
      best_d[far] = 0.0;
      std::copy_n(x.row(far).begin(), w, centroids.data.begin() + static_cast<std::ptrdiff_t>(c * w));
      changed = true;
    }
    run.history.push_back(std::accumulate(best_d.begin(), best_d.end(), 0.0));
    if (!changed && iter > 0) break;
    Matrix next(k, w);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) next(run.assign[i], j) += x(i, j);
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t j = 0; j < w; ++j) next(c, j) /= static_cast<double>(count[c]);
    centroids = std::move(next);
  }
  run.centroids = std::move(centroids);
  run.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) run.inertia += dist2(x.row(i), run.centroids.row(run.assign[i]));
  return run;
}

}  // namespace

ClusterResult kmeans(const Matrix& x, std::size_t k, std::uint64_t seed, std::size_t restarts, std::size_t max_iter) {
  if (k < 1 || k > x.rows) {
    throw ConfigError("kmeans: need 1 <= k <= n, got k=" + std::to_string(k) + ", n=" + std::to_string(x.rows));
  }
  restarts = std::max<std::size_t>(restarts, 1);
  LloydRun best;
  bool have = false;
  for (std::size_t r = 0; r < restarts; ++r) {
    Rng rng(seed + r);
    LloydRun run = lloyd(x, kmeanspp(x, k, rng), max_iter);
    if (!have || run.inertia < best.inertia) {
      best = std::move(run);
      have = true;
    }
  }
  ClusterResult out;
  out.k = k;
  out.assignments = std::move(best.assign);
  out.centroids = std::move(best.centroids);
  out.inertia = best.inertia;
  out.inertia_history = std::move(best.history);
  if (k >= 2) out.silhouette = silhouette(x, out.assignments);
  return out;
}

double silhouette(const Matrix& x, const std::vector<std::size_t>& assignments) {
  if (assignments.size() != x.rows) throw DimensionError("silhouette: one label per point is required");
  const std::size_t labels = assignments.empty() ? 0 : *std::max_element(assignments.begin(), assignments.end()) + 1;
  std::vector<std::size_t> size(labels, 0);
  for (auto a : assignments) ++size[a];
  const auto clusters = static_cast<std::size_t>(std::count_if(size.begin(), size.end(), [](auto s) { return s > 0; }));
  if (clusters < 2) throw ConfigError("silhouette: need at least two non-empty clusters");
  const std::size_t n = x.rows;
  double total = 0.0;
  std::vector<double> sums(labels);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t own = assignments[i];
    if (size[own] == 1) continue;  // singleton scores 0
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) sums[assignments[j]] += std::sqrt(dist2(x.row(i), x.row(j)));
    const double a = sums[own] / static_cast<double>(size[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < labels; ++c)
      if (c != own && size[c] > 0) b = std::min(b, sums[c] / static_cast<double>(size[c]));
    const double denom = std::max(a, b);
    total += denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(n);
}

KSelection select_k(const Matrix& x, std::size_t k_min, std::size_t k_max, std::uint64_t seed, std::size_t restarts) {
  k_min = std::max<std::size_t>(k_min, 2);
  if (x.rows < 3) throw ConfigError("select_k: need at least 3 points");
  k_max = std::min(k_max, x.rows - 1);
  if (k_min > k_max) throw ConfigError("select_k: empty range of cluster counts");
  KSelection sel;
  for (std::size_t k = k_min; k <= k_max; ++k) {
    ClusterResult c = kmeans(x, k, seed, restarts);
    const double s = *c.silhouette;
    sel.scores.emplace_back(k, s);
    if (sel.best_k == 0 || s > *sel.best.silhouette) {
      sel.best_k = k;
      sel.best = std::move(c);
    }
  }
  return sel;
}

Matrix trajectory_features(const std::vector<LatentTrajectory>& trajs, const PcaResult& z0_pca, std::size_t dims) {
  if (trajs.empty()) throw DimensionError("trajectory_features: no trajectories");
  const std::size_t steps = trajs.front().steps() + 1;
  Matrix out(trajs.size(), steps * dims);
  for (std::size_t s = 0; s < trajs.size(); ++s) {
    if (trajs[s].steps() + 1 != steps) throw DimensionError("trajectory_features: trajectories differ in length");
    Matrix rows = Matrix::from_tensor(concat_rows({trajs[s].z0, trajs[s].z}));
    const Matrix p = project(rows, z0_pca, dims);
    std::copy(p.data.begin(), p.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(s * steps * dims));
  }
  return out;
}

Tensor ablate_segment(const Tensor& z0, std::size_t begin, std::size_t end) {
  if (begin >= end) throw ConfigError("segment ablation: empty range [" + std::to_string(begin) + ", " +
                                      std::to_string(end) + ")");
  if (end > z0.size()) throw DimensionError("segment ablation: range ends past N_g=" + std::to_string(z0.size()));
  std::vector<double> v(z0.data().begin(), z0.data().end());
  for (std::size_t i = 0; i < v.size(); ++i)
    if (i < begin || i >= end) v[i] = 0.0;
  return Tensor::from(z0.shape(), std::move(v));
}

Tensor segment_ablation(const Model& m, const FieldPack& pack, std::size_t begin, std::size_t end) {
  check_compatible(m, pack);
  NoGradScope no_grad;
  const Tensor g0 = encode(encoder_inputs(pack), m.encoder());
  const Tensor z0 = ablate_segment(aggregate_z0(g0), begin, end);
  const LatentTrajectory traj = rollout(z0, pack.t, m.mamba());
  const Tensor h_q = encode_queries(Tensor::from({pack.n_q, pack.d}, pack.x_q), m.decoder());
  return decode_fields(traj, g0, h_q, m.decoder());
}

}  // namespace hmtpf
