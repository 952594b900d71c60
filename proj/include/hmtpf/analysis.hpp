#pragma once

// Latent-space analysis: PCA of initial aggregation vectors, K-means with
// silhouette-based selection of the cluster count, and segment ablation of z0.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hmtpf/model.hpp"

namespace hmtpf {

/// Dense row-major matrix for the analysis routines (no autodiff).
struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

  static Matrix from_tensor(const Tensor& t);
};

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Eigenvalues descending; eigenvectors are the rows of `vectors`.
struct SymmetricEigen {
  std::vector<double> values;
  Matrix vectors;
};
SymmetricEigen jacobi_eigen(const Matrix& a, double tol = 1e-15, std::size_t max_sweeps = 100);

struct PcaResult {
  std::vector<double> mean;
  Matrix components;  // orthonormal rows, by decreasing variance
  std::vector<double> variances;
  std::vector<double> evr;  // explained-variance ratios, sum to 1
};

/// Centered-covariance PCA; each component's largest-magnitude coordinate is
/// made positive (first one on ties). Needs n ≥ 2 and nonzero total variance.
PcaResult pca(const Matrix& x);
/// Centered scores on the top m components, [n × m].
Matrix project(const Matrix& x, const PcaResult& p, std::size_t m);
/// mean + scores·components[:m].
Matrix inverse_project(const Matrix& scores, const PcaResult& p);

struct ClusterResult {
  std::size_t k = 0;
  std::vector<std::size_t> assignments;
  Matrix centroids;
  double inertia = 0.0;
  std::vector<double> inertia_history;  // per Lloyd iteration of the winning restart
  std::optional<double> silhouette;     // absent for k = 1
};

/// k-means++ seeding, Lloyd iterations, best of `restarts` by inertia (ties
/// to the lowest restart index). Restart r draws from a generator seeded
/// with seed + r.
ClusterResult kmeans(const Matrix& x, std::size_t k, std::uint64_t seed, std::size_t restarts = 10,
                     std::size_t max_iter = 300);

/// Mean of (b − a)/max(a, b); points in singleton clusters score 0.
double silhouette(const Matrix& x, const std::vector<std::size_t>& assignments);

struct KSelection {
  std::size_t best_k = 0;
  std::vector<std::pair<std::size_t, double>> scores;  // (k, silhouette)
  ClusterResult best;
};

/// Clusters for every k in [k_min, min(k_max, n−1)] and keeps the highest silhouette.
KSelection select_k(const Matrix& x, std::size_t k_min, std::size_t k_max, std::uint64_t seed,
                    std::size_t restarts = 10);

/// Each sample's (z0, z1..z_T) projected onto the top-3 z0 components and
/// flattened into one row of width 3·(T+1).
Matrix trajectory_features(const std::vector<LatentTrajectory>& trajs, const PcaResult& z0_pca,
                           std::size_t dims = 3);

/// Copy of z0 [1 × N_g] with every component outside [begin, end) zeroed.
Tensor ablate_segment(const Tensor& z0, std::size_t begin, std::size_t end);

/// Rolls out and decodes the sample from the ablated z0, keeping G0.
Tensor segment_ablation(const Model& m, const FieldPack& pack, std::size_t begin, std::size_t end);

}  // namespace hmtpf
