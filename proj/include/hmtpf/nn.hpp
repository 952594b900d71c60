#pragma once

// Parameter storage and the small layers every block is assembled from.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "hmtpf/tensor.hpp"

namespace hmtpf {

using Rng = std::mt19937_64;

enum class Init {
  kFanIn,  // truncated normal, std = 1/sqrt(fan_in), cut at ±2 std
  kZeros,
  kOnes,
};

/// Truncation point (in standard deviations) of the fan-in initializer.
inline constexpr double kInitTruncation = 2.0;

/// Named, ordered collection of leaf tensors. Iteration order is creation
/// order, which fixes checkpoint layout and optimizer state layout.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor value;
  };

  Tensor create(const std::string& name, Shape shape, Init init, Rng& rng);

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Tensor> tensors() const;
  /// Throws ConfigError if absent.
  const Tensor& find(const std::string& name) const;
  bool contains(const std::string& name) const;

  void set_requires_grad(bool flag);
  void zero_grad();
  std::size_t scalar_count() const;
  double grad_norm() const;

  /// Flat copy of every value, used for bitwise freeze checks.
  std::vector<double> snapshot() const;
  /// Overwrites values from `other`; names and shapes must match exactly.
  void load_values(const ParamSet& other);

 private:
  std::vector<Entry> entries_;
};

struct Linear {
  Tensor w;  // [in × out]
  Tensor b;  // [out]

  Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
};

Linear make_linear(ParamSet& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                   Init weight_init = Init::kFanIn);

/// Linear layers with GELU between them; the last layer is linear.
struct Mlp {
  std::vector<Linear> layers;

  Tensor operator()(const Tensor& x) const;
  std::size_t in_width() const { return layers.front().w.shape()[0]; }
  std::size_t out_width() const { return layers.back().w.shape()[1]; }
};

/// widths = {in, hidden..., out}. `zero_final` zero-initializes the last weight.
Mlp make_mlp(ParamSet& params, const std::string& name, const std::vector<std::size_t>& widths, Rng& rng,
             bool zero_final = false);

/// Softmax-free attention with sequence-normalized keys and values.
struct GalerkinAttention {
  std::vector<Tensor> wq, wk, wv;  // per head, [width × width/heads]
  Linear out;                      // [width × width]

  std::size_t heads() const { return wq.size(); }
};

GalerkinAttention make_galerkin_attention(ParamSet& params, const std::string& name, std::size_t width,
                                          std::size_t heads, Rng& rng);

inline constexpr double kSeqNormEps = 1e-5;

/// queries + W_O·concat_h(Q_h (K̃_hᵀ Ṽ_h) / n), with Q_h from `queries`,
/// K̃_h, Ṽ_h = seq_norm of projections of `context` over its n rows.
/// The d_h×d_h product K̃ᵀṼ is formed once per head, so cost is linear in
/// both row counts and no n×n matrix is ever built.
Tensor galerkin_attention(const Tensor& queries, const Tensor& context, const GalerkinAttention& attn,
                          double eps = kSeqNormEps);

}  // namespace hmtpf
