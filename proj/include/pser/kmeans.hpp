#pragma once

#include "pser/common.hpp"

#include <cstdint>
#include <vector>

namespace pser {

struct KmeansResult {
  Matrix centroids;             // k x d
  std::vector<int> assignment;  // one cluster id per input row
  double inertia = 0.0;         // sum of squared distances to assigned centroids
  int iterations = 0;
};

// Lloyd's algorithm with k-means++ seeding. Deterministic given the seed:
// ties in assignment go to the lowest cluster index, an emptied cluster is
// re-seeded with the point farthest from its current centroid. Stops on a
// stable assignment or after max_iters rounds.
KmeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iters = 100);

}  // namespace pser
