#pragma once

#include "pser/corpus.hpp"
#include "pser/encoder.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace pser {

// Per-frame K-means cluster ids, one sequence per utterance, aligned with the
// post-conv frame count.
struct PseudoLabelSet {
  int k = 0;
  std::map<std::string, std::vector<int>> labels;
};

// Frame indices (sorted, unique) to mask per utterance.
struct MaskPlan {
  std::map<std::string, std::vector<int>> masked;
};

struct PretrainConfig {
  int epochs = 10;
  double warmup_fraction = 0.05;
  double lr_max = 1e-5;  // paper-scale default; toy corpora train with 1e-3
  int batch_size = 8;
  double mask_prob = 0.08;  // per-frame span start probability
  int span = 10;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static PretrainConfig from_json(const nlohmann::json& j);
};

// Lloyd's K-means over the conv front-end output of the (untrained) model,
// pooled across every utterance of the corpus.
PseudoLabelSet make_pseudo_labels(const EncoderModel& model, const Corpus& corpus, int k,
                                  std::uint64_t seed);

void write_pseudo_labels(const std::filesystem::path& dir, const PseudoLabelSet& set);
PseudoLabelSet read_pseudo_labels(const std::filesystem::path& dir);

// Independent span starts with probability mask_prob, clipped at the end,
// union over overlaps; an utterance that drew no span gets one forced span.
MaskPlan plan_masks(const std::map<std::string, int>& lengths, const PretrainConfig& config,
                    std::uint64_t seed);

// Masked-frame cross-entropy summed over the batch. Differentiable; divide by
// the total masked-frame count for a per-frame mean.
ad::NodePtr papt_loss(const EncoderModel& model, const std::vector<const UtteranceRecord*>& batch,
                      const PseudoLabelSet& labels, const MaskPlan& plan);

struct PretrainHistory {
  std::vector<double> train_loss;  // per masked frame, each epoch
  std::vector<double> val_loss;
  int best_epoch = -1;  // index into val_loss of the restored checkpoint
};

// Adaptive pre-training on train + validation + test_b, validated on test_a
// with a fixed mask plan. The model is left at the best-validation state.
PretrainHistory run_papt(EncoderModel& model, const Corpus& corpus, const PseudoLabelSet& labels,
                         const PretrainConfig& config);

}  // namespace pser
