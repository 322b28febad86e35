#include "pser/kmeans.hpp"

#include "pser/rng.hpp"

#include <limits>

namespace pser {

namespace {

int nearest_centroid(const Matrix& centroids, int k, const Eigen::RowVectorXd& p,
                     double* dist_out) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int c = 0; c < k; ++c) {
    double d = (centroids.row(c) - p).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  if (dist_out) *dist_out = best_d;
  return best;
}

}  // namespace

KmeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iters) {
  const Eigen::Index n = points.rows();
  if (n == 0) throw ValidationError("kmeans: no points");
  if (k < 1) throw ValidationError("kmeans: k must be positive");
  if (k > n) throw ValidationError("kmeans: k exceeds point count");

  RngStream rng(seed, "kmeans-init");
  Matrix centroids(k, points.cols());

  // k-means++ seeding.
  centroids.row(0) = points.row(rng.uniform_int(static_cast<int>(n)));
  std::vector<double> d2(static_cast<size_t>(n));
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double d;
      nearest_centroid(centroids, c, points.row(i), &d);
      d2[static_cast<size_t>(i)] = d;
      total += d;
    }
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      double acc = 0.0;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[static_cast<size_t>(i)];
        if (u < acc) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.uniform_int(static_cast<int>(n));
    }
    centroids.row(c) = points.row(pick);
  }

  std::vector<int> assignment(static_cast<size_t>(n), -1);
  int iter = 0;
  for (; iter < max_iters; ++iter) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      int a = nearest_centroid(centroids, k, points.row(i), nullptr);
      if (a != assignment[static_cast<size_t>(i)]) {
        assignment[static_cast<size_t>(i)] = a;
        changed = true;
      }
    }
    if (!changed) break;

    Matrix sums = Matrix::Zero(k, points.cols());
    std::vector<int> counts(static_cast<size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assignment[static_cast<size_t>(i)]) += points.row(i);
      ++counts[static_cast<size_t>(assignment[static_cast<size_t>(i)])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] > 0) {
        centroids.row(c) = sums.row(c) / counts[static_cast<size_t>(c)];
      } else {
        // Re-seed an emptied cluster with the point farthest from its
        // assigned centroid.
        Eigen::Index far_i = 0;
        double far_d = -1.0;
        for (Eigen::Index i = 0; i < n; ++i) {
          double d =
              (points.row(i) - centroids.row(assignment[static_cast<size_t>(i)])).squaredNorm();
          if (d > far_d) {
            far_d = d;
            far_i = i;
          }
        }
        centroids.row(c) = points.row(far_i);
      }
    }
  }

  KmeansResult out;
  out.centroids = std::move(centroids);
  out.iterations = iter;
  out.inertia = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double d;
    assignment[static_cast<size_t>(i)] = nearest_centroid(out.centroids, k, points.row(i), &d);
    out.inertia += d;
  }
  out.assignment = std::move(assignment);
  return out;
}

}  // namespace pser
