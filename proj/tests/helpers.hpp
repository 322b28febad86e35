#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

#include "pser/corpus.hpp"
#include "pser/encoder.hpp"
#include "pser/rng.hpp"

namespace pser::test {

// Small encoder used by most suites: one conv layer, one transformer block.
inline EncoderConfig tiny_config() {
  EncoderConfig c;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.conv_channels = {8};
  c.conv_kernels = {8};
  c.conv_strides = {4};
  c.ffn_hidden = 16;
  c.interpreter_hidden = {8};
  c.k_pseudo = 4;
  c.dropout = 0.1;
  return c;
}

// Strictly linear path end to end: no attention blocks, pointwise conv
// without GELU, no hidden interpreter layers.  Gradients here should match
// finite differences to near machine precision.
inline EncoderConfig linear_config() {
  EncoderConfig c = tiny_config();
  c.n_layers = 0;
  c.conv_gelu = false;
  c.conv_kernels = {1};
  c.conv_strides = {1};
  c.interpreter_hidden = {};
  c.dropout = 0.0;
  return c;
}

inline SyntheticSpec tiny_spec(std::uint64_t seed = 1) {
  SyntheticSpec spec;
  spec.n_speakers_per_split = {{Split::train, 4},
                               {Split::validation, 2},
                               {Split::test_a, 2},
                               {Split::test_b, 2},
                               {Split::test_c, 1}};
  spec.utterances_per_speaker = 3;
  spec.t_raw = 64;
  spec.seed = seed;
  return spec;
}

inline Corpus tiny_corpus(std::uint64_t seed = 1) { return generate_synthetic(tiny_spec(seed)); }

// Fresh scratch directory per call site; removed and recreated on reuse.
inline std::filesystem::path tmp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("pser_tests_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline Matrix random_matrix(RngStream& rng, int rows, int cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

}  // namespace pser::test
