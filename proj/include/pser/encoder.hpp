#pragma once

#include "pser/autodiff.hpp"
#include "pser/common.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace pser {

class RngStream;

// Where the speaker embedding enters the encoder.
//   Last:   added to every frame after the final transformer layer
//   First:  added to every frame before the first transformer layer
//   Prefix: prepended as an extra frame before the first layer, dropped
//           from the output so T matches the other modes
//   None:   speaker ignored
enum class Fusion { Last, First, Prefix, None };

std::string fusion_name(Fusion f);
Fusion fusion_from_name(const std::string& name);

struct EncoderConfig {
  int d_model = 32;
  int n_layers = 2;  // transformer layers; 0 gives a conv-only linear probe
  int n_heads = 4;
  std::vector<int> conv_channels{16, 32};  // last entry must equal d_model
  std::vector<int> conv_kernels{8, 8};
  std::vector<int> conv_strides{4, 4};
  Fusion fusion = Fusion::Last;
  int n_speakers = 1;
  int k_pseudo = 16;
  double dropout = 0.1;  // interpreter only
  int ffn_hidden = 64;
  std::vector<int> interpreter_hidden{128, 32};
  bool conv_gelu = true;  // false makes the conv front-end purely linear

  void validate() const;
  int frames_for(int t_raw) const;  // post-conv frame count; ShapeError if too short
  int min_input_length() const;

  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
};

// Parameters are shared autodiff leaves so one model can back several training
// graphs. Batch-norm running statistics are plain buffers.
struct EncoderModel {
  EncoderConfig config;
  std::vector<std::string> speaker_ids;  // ordinal order, rows of speaker_table

  std::vector<ad::NodePtr> conv_w;  // (kernel*C_in) x C_out
  std::vector<ad::NodePtr> conv_b;  // 1 x C_out
  ad::NodePtr mask_emb;             // 1 x d_model, replaces masked conv frames

  struct Layer {
    ad::NodePtr ln1_g, ln1_b;
    ad::NodePtr wq, bq, wk, bk, wv, bv, wo, bo;
    ad::NodePtr ln2_g, ln2_b;
    ad::NodePtr w1, b1, w2, b2;
  };
  std::vector<Layer> layers;
  ad::NodePtr lnf_g, lnf_b;  // final layer norm; absent when n_layers == 0

  ad::NodePtr speaker_table;          // n_speakers x d_model
  ad::NodePtr pseudo_w, pseudo_b;     // d_model x k_pseudo, 1 x k_pseudo

  struct InterpLayer {
    ad::NodePtr w, b;        // in x out, 1 x out
    ad::NodePtr bn_g, bn_b;  // 1 x out
    Matrix bn_rmean, bn_rvar;  // 1 x out running stats for inference
  };
  std::vector<InterpLayer> interp;
  ad::NodePtr out_w, out_b;  // last_hidden x 1, 1 x 1

  std::unordered_map<std::string, int> speaker_lookup;

  // Copies are deep: parameter nodes are cloned, so a copied model trains
  // without touching the original.
  EncoderModel() = default;
  EncoderModel(const EncoderModel& other);
  EncoderModel& operator=(const EncoderModel& other);
  EncoderModel(EncoderModel&&) = default;
  EncoderModel& operator=(EncoderModel&&) = default;

  std::vector<std::pair<std::string, ad::NodePtr>> named_parameters() const;
  int speaker_ordinal(const std::string& id) const;  // LookupError if unknown
};

EncoderModel init_model(const EncoderConfig& config, std::vector<std::string> speaker_ids,
                        std::uint64_t seed);

Matrix sinusoidal_positions(int t, int d);

// Conv front-end output alone (the clustering features for pseudo-labels).
Matrix conv_features(const EncoderModel& model, const Vector& samples);

// Full encoder as a graph node. mask_rows lists post-conv frames replaced by
// the mask embedding before positions are added.
ad::NodePtr forward_features_node(const EncoderModel& model, const Vector& samples,
                                  std::optional<int> speaker,
                                  const std::vector<int>& mask_rows = {});
Matrix forward_features(const EncoderModel& model, const Vector& samples,
                        std::optional<int> speaker);

ad::NodePtr pseudo_logits_node(const EncoderModel& model, const ad::NodePtr& features);
Matrix pseudo_logits(const EncoderModel& model, const Matrix& features);

// Regression head over a batch of pooled feature vectors (B x d_model).
// training=true uses batch statistics (appending each layer's mean/var to
// batch_stats when given) and applies dropout when a generator is supplied;
// training=false uses running statistics and no dropout.
ad::NodePtr interpreter_forward(const EncoderModel& model, const ad::NodePtr& pooled,
                                bool training, RngStream* dropout_rng = nullptr,
                                std::vector<std::pair<Vector, Vector>>* batch_stats = nullptr);

double predict_emotion(const EncoderModel& model, const Vector& samples,
                       std::optional<int> speaker);

void save_checkpoint(const EncoderModel& model, const std::filesystem::path& path);
EncoderModel load_checkpoint(const std::filesystem::path& path);

}  // namespace pser
