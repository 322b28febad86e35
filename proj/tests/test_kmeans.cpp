#include <doctest.h>

#include <set>

#include "pser/kmeans.hpp"
#include "pser/rng.hpp"

#include "helpers.hpp"

using namespace pser;

TEST_CASE("k=1 assigns everything to cluster 0 with the mean centroid") {
  RngStream rng(21);
  Matrix pts = test::random_matrix(rng, 20, 3);
  KmeansResult r = kmeans(pts, 1, 0);
  REQUIRE(r.centroids.rows() == 1);
  for (int lab : r.assignment) CHECK(lab == 0);
  for (int j = 0; j < 3; ++j) CHECK(r.centroids(0, j) == doctest::Approx(pts.col(j).mean()));
  double inertia = 0.0;
  for (int i = 0; i < pts.rows(); ++i) inertia += (pts.row(i) - r.centroids.row(0)).squaredNorm();
  CHECK(r.inertia == doctest::Approx(inertia).epsilon(1e-10));
}

TEST_CASE("k=n on distinct points is a bijection with zero inertia") {
  RngStream rng(22);
  Matrix pts = test::random_matrix(rng, 8, 2);
  KmeansResult r = kmeans(pts, 8, 3);
  CHECK(r.inertia == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
  std::set<int> used(r.assignment.begin(), r.assignment.end());
  CHECK(used.size() == 8);
  for (size_t i = 0; i < r.assignment.size(); ++i) {
    CHECK((pts.row(int(i)) - r.centroids.row(r.assignment[i])).norm() ==
          doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
  }
}

TEST_CASE("two planted blobs are separated") {
  RngStream rng(23);
  const int per = 30;
  Matrix pts(2 * per, 2);
  for (int i = 0; i < per; ++i) {
    pts(i, 0) = -5.0 + 0.3 * rng.normal();
    pts(i, 1) = 0.0 + 0.3 * rng.normal();
    pts(per + i, 0) = 5.0 + 0.3 * rng.normal();
    pts(per + i, 1) = 0.0 + 0.3 * rng.normal();
  }
  KmeansResult r = kmeans(pts, 2, 7);
  int first = r.assignment[0];
  for (int i = 0; i < per; ++i) CHECK(r.assignment[size_t(i)] == first);
  for (int i = per; i < 2 * per; ++i) CHECK(r.assignment[size_t(i)] == 1 - first);
  CHECK(std::abs(r.centroids(first, 0) + 5.0) < 0.5);
  CHECK(std::abs(r.centroids(1 - first, 0) - 5.0) < 0.5);
}

TEST_CASE("kmeans is seed-deterministic") {
  RngStream rng(24);
  Matrix pts = test::random_matrix(rng, 40, 4);
  KmeansResult a = kmeans(pts, 5, 11);
  KmeansResult b = kmeans(pts, 5, 11);
  CHECK(a.assignment == b.assignment);
  CHECK(a.centroids == b.centroids);
  CHECK(a.inertia == b.inertia);
  CHECK(a.iterations == b.iterations);
}

TEST_CASE("bad k is rejected") {
  Matrix pts = Matrix::Ones(3, 2);
  CHECK_THROWS_AS(kmeans(pts, 0, 0), ValidationError);
  CHECK_THROWS_AS(kmeans(pts, 4, 0), ValidationError);
  Matrix none(0, 2);
  CHECK_THROWS_AS(kmeans(none, 1, 0), ValidationError);
}
