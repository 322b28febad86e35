#include "pser/tensor_file.hpp"

#include <bit>
#include <fstream>
#include <istream>
#include <ostream>

namespace pser {

namespace {

constexpr char kMagic[4] = {'P', 'S', 'E', 'R'};
constexpr uint8_t kVersion = 1;

void put_u32le(std::ostream& out, uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

uint32_t get_u32le(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw ParseError("tensor: truncated while reading u32");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

size_t TensorBlob::element_count() const {
  size_t n = 1;
  for (uint32_t d : dims) n *= d;
  return dims.empty() ? 0 : n;
}

void write_tensor(std::ostream& out, const TensorBlob& t) {
  if (t.dims.empty() || t.dims.size() > 255) throw ShapeError("tensor: rank must be in [1, 255]");
  if (t.data.size() != t.element_count()) throw ShapeError("tensor: payload size does not match dims");
  out.write(kMagic, 4);
  out.put(static_cast<char>(kVersion));
  out.put(static_cast<char>(t.dims.size()));
  for (uint32_t d : t.dims) put_u32le(out, d);
  for (float f : t.data) put_u32le(out, std::bit_cast<uint32_t>(f));
  if (!out) throw std::runtime_error("tensor: write failed");
}

TensorBlob read_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || magic[0] != 'P' || magic[1] != 'S' || magic[2] != 'E' || magic[3] != 'R') {
    throw ParseError("tensor: bad magic, expected PSER");
  }
  int version = in.get();
  if (version != kVersion) throw ParseError("tensor: unsupported version " + std::to_string(version));
  int rank = in.get();
  if (rank <= 0 || !in) throw ParseError("tensor: bad rank");
  TensorBlob t;
  t.dims.resize(rank);
  for (int i = 0; i < rank; ++i) t.dims[i] = get_u32le(in);
  size_t n = t.element_count();
  t.data.resize(n);
  for (size_t i = 0; i < n; ++i) t.data[i] = std::bit_cast<float>(get_u32le(in));
  return t;
}

void write_tensor_file(const std::filesystem::path& path, const TensorBlob& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  write_tensor(out, t);
}

TensorBlob read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
  return read_tensor(in);
}

TensorBlob to_blob(const Matrix& m) {
  TensorBlob t;
  t.dims = {static_cast<uint32_t>(m.rows()), static_cast<uint32_t>(m.cols())};
  t.data.reserve(m.size());
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.data.push_back(static_cast<float>(m(r, c)));
  return t;
}

TensorBlob to_blob(const Vector& v) {
  TensorBlob t;
  t.dims = {static_cast<uint32_t>(v.size())};
  t.data.reserve(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) t.data.push_back(static_cast<float>(v(i)));
  return t;
}

Matrix blob_to_matrix(const TensorBlob& t) {
  if (t.dims.size() != 2) throw ShapeError("tensor: expected rank 2");
  Matrix m(t.dims[0], t.dims[1]);
  size_t i = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = t.data[i++];
  return m;
}

Vector blob_to_vector(const TensorBlob& t) {
  if (t.dims.size() != 1) throw ShapeError("tensor: expected rank 1");
  Vector v(t.dims[0]);
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = t.data[i];
  return v;
}

}  // namespace pser
