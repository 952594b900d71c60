#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "hmtpf/nn.hpp"
#include "hmtpf/tensor.hpp"

namespace hmtpf::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

inline std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

/// Fresh empty directory under the test's working directory.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::current_path() / "scratch" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Plain loops: per head, A = Q·K̃ᵀ/n as an explicit n_q × n matrix, then A·Ṽ.
inline std::vector<double> brute_attention(const Tensor& queries, const Tensor& context, const GalerkinAttention& attn,
                                    double eps) {
  const std::size_t nq = queries.dim(0), n = context.dim(0), w = queries.dim(1);
  const std::size_t heads = attn.heads(), dh = w / heads;
  auto project = [](const Tensor& x, const Tensor& wm) {
    const std::size_t r = x.dim(0), in = wm.dim(0), out = wm.dim(1);
    std::vector<double> y(r * out, 0.0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < out; ++j)
        for (std::size_t l = 0; l < in; ++l) y[i * out + j] += x.at(i, l) * wm.at(l, j);
    return y;
  };
  auto normalize = [&](std::vector<double> y) {
    for (std::size_t j = 0; j < dh; ++j) {
      double mu = 0.0, var = 0.0;
      for (std::size_t i = 0; i < n; ++i) mu += y[i * dh + j];
      mu /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) var += (y[i * dh + j] - mu) * (y[i * dh + j] - mu);
      var /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) y[i * dh + j] = (y[i * dh + j] - mu) / std::sqrt(var + eps);
    }
    return y;
  };
  std::vector<double> mixed(nq * w, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto q = project(queries, attn.wq[h]);
    const auto k = normalize(project(context, attn.wk[h]));
    const auto v = normalize(project(context, attn.wv[h]));
    std::vector<double> a(nq * n, 0.0);
    for (std::size_t i = 0; i < nq; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t l = 0; l < dh; ++l) a[i * n + j] += q[i * dh + l] * k[j * dh + l];
        a[i * n + j] /= static_cast<double>(n);
      }
    for (std::size_t i = 0; i < nq; ++i)
      for (std::size_t l = 0; l < dh; ++l) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += a[i * n + j] * v[j * dh + l];
        mixed[i * w + h * dh + l] = acc;
      }
  }
  std::vector<double> out(nq * w);
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      double acc = attn.out.b.at(j);
      for (std::size_t l = 0; l < w; ++l) acc += mixed[i * w + l] * attn.out.w.at(l, j);
      out[i * w + j] = queries.at(i, j) + acc;
    }
  return out;
}

}  // namespace hmtpf::testing
