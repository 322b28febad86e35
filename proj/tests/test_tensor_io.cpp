#include <doctest.h>

#include <sstream>

#include "pser/common.hpp"
#include "pser/tensor_file.hpp"

#include "helpers.hpp"

using namespace pser;

TEST_CASE("tensor stream round-trip preserves dims and payload") {
  TensorBlob t;
  t.dims = {2, 3};
  t.data = {0.5f, -2.25f, 1.0f, 0.0f, 4.0f, -0.125f};

  std::stringstream buf;
  write_tensor(buf, t);
  TensorBlob back = read_tensor(buf);

  CHECK(back.dims == t.dims);
  CHECK(back.data == t.data);
}

TEST_CASE("tensor file round-trip for matrices and vectors") {
  auto dir = test::tmp_dir("tensor_io");
  RngStream rng(11);
  Matrix m = test::random_matrix(rng, 5, 7);
  Vector v(4);
  v << 1.5, -3.0, 0.25, 8.0;

  write_tensor_file(dir / "m.pser", to_blob(m));
  write_tensor_file(dir / "v.pser", to_blob(v));

  Matrix m2 = blob_to_matrix(read_tensor_file(dir / "m.pser"));
  Vector v2 = blob_to_vector(read_tensor_file(dir / "v.pser"));

  REQUIRE(m2.rows() == 5);
  REQUIRE(m2.cols() == 7);
  // Storage is f32, so round-tripped values match the float cast exactly.
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 7; ++j) CHECK(m2(i, j) == static_cast<double>(static_cast<float>(m(i, j))));
  CHECK(v2(0) == 1.5);
  CHECK(v2(3) == 8.0);
}

TEST_CASE("exactly representable values survive unchanged") {
  Matrix m(1, 3);
  m << 0.5, -2.25, 1024.0;
  Matrix back = blob_to_matrix(to_blob(m));
  CHECK(back == m);
}

TEST_CASE("matrix payload is row-major") {
  Matrix m(2, 2);
  m << 1.0, 2.0, 3.0, 4.0;
  TensorBlob t = to_blob(m);
  REQUIRE(t.data.size() == 4);
  CHECK(t.data[0] == 1.0f);
  CHECK(t.data[1] == 2.0f);
  CHECK(t.data[2] == 3.0f);
  CHECK(t.data[3] == 4.0f);
}

TEST_CASE("element_count multiplies dims") {
  TensorBlob t;
  t.dims = {3, 4, 5};
  CHECK(t.element_count() == 60);
}

TEST_CASE("bad magic rejected") {
  std::stringstream buf;
  buf << "NOPE" << std::string(16, '\0');
  CHECK_THROWS_AS(read_tensor(buf), ParseError);
}

TEST_CASE("truncated stream rejected") {
  TensorBlob t;
  t.dims = {2, 2};
  t.data = {1.f, 2.f, 3.f, 4.f};
  std::stringstream buf;
  write_tensor(buf, t);
  std::string full = buf.str();

  for (size_t cut : {size_t(2), size_t(6), full.size() - 3}) {
    std::stringstream trunc(full.substr(0, cut));
    CHECK_THROWS_AS(read_tensor(trunc), ParseError);
  }
}

TEST_CASE("payload size must match dims on write") {
  TensorBlob t;
  t.dims = {2, 3};
  t.data = {1.f, 2.f};
  std::stringstream buf;
  CHECK_THROWS_AS(write_tensor(buf, t), ShapeError);
}

TEST_CASE("rank mismatch on conversion") {
  TensorBlob t;
  t.dims = {6};
  t.data.assign(6, 1.f);
  CHECK_THROWS_AS(blob_to_matrix(t), ShapeError);

  TensorBlob t2;
  t2.dims = {2, 3};
  t2.data.assign(6, 1.f);
  CHECK_THROWS_AS(blob_to_vector(t2), ShapeError);
}
