#pragma once

#include "pser/common.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

namespace pser {

// Binary tensor container used for waveforms, pseudo-labels, speaker vectors
// and checkpoints. Layout: magic "PSER", version u8 = 1, rank u8, dims as u32
// little-endian, payload f32 little-endian in row-major order.
struct TensorBlob {
  std::vector<uint32_t> dims;
  std::vector<float> data;

  size_t element_count() const;
};

void write_tensor(std::ostream& out, const TensorBlob& t);
TensorBlob read_tensor(std::istream& in);

void write_tensor_file(const std::filesystem::path& path, const TensorBlob& t);
TensorBlob read_tensor_file(const std::filesystem::path& path);

// Eigen adapters. Matrices are stored as rank-2 row-major, vectors as rank-1.
TensorBlob to_blob(const Matrix& m);
TensorBlob to_blob(const Vector& v);
Matrix blob_to_matrix(const TensorBlob& t);
Vector blob_to_vector(const TensorBlob& t);

}  // namespace pser
