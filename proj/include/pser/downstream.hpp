#pragma once

#include "pser/corpus.hpp"
#include "pser/encoder.hpp"

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace pser {

// Lin's concordance correlation with population (1/N) moments:
// 2 cov / (var x + var y + (mean x - mean y)^2).
double ccc(const std::vector<double>& x, const std::vector<double>& y);

// 1 - CCC over a batch of predictions (B x 1 node) against fixed truth.
ad::NodePtr ccc_loss(const ad::NodePtr& pred, const Vector& truth);

// Which affect dimension the corpus labels represent. Purely descriptive:
// a corpus carries one label stream chosen at generation time.
enum class Target { arousal, valence };
std::string target_name(Target t);
Target target_from_name(const std::string& name);

struct FinetuneConfig {
  int epochs_max = 10;
  double lr = 5e-5;
  int patience = 2;  // epochs without validation improvement before stopping
  int batch_size = 8;
  double clip_norm = 0.0;  // global gradient-norm cap; 0 disables clipping
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static FinetuneConfig from_json(const nlohmann::json& j);
};

struct FinetuneHistory {
  std::vector<double> train_loss;  // mean batch L_CCC per epoch
  std::vector<double> val_ccc;     // validation O-CCC per epoch
  int best_epoch = -1;             // index into val_ccc of the restored state
  int epochs_run = 0;
};

// Patience-based stopping on a higher-is-better metric. update() returns true
// once `patience` consecutive epochs fail to strictly improve on the best.
struct EarlyStopper {
  int patience = 2;
  double best = -std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  int bad_epochs = 0;

  bool update(double value, int epoch) {
    if (value > best) {
      best = value;
      best_epoch = epoch;
      bad_epochs = 0;
      return false;
    }
    return ++bad_epochs >= patience;
  }
  bool improved(int epoch) const { return best_epoch == epoch; }
};

// CCC-loss fine-tuning on the labeled train split, early-stopped on the
// validation split's O-CCC. The model is left at the best-validation state
// (parameters and batch-norm statistics).
FinetuneHistory finetune(EncoderModel& model, const Corpus& corpus, const FinetuneConfig& config,
                         Target target = Target::valence);

// Same, over explicit record lists (the experiment harnesses train on
// speaker subsets that are not corpus splits).
FinetuneHistory finetune(EncoderModel& model, const std::vector<const UtteranceRecord*>& train_set,
                         const std::vector<const UtteranceRecord*>& val_set,
                         const FinetuneConfig& config, Target target = Target::valence);

struct PredictionEntry {
  std::string id;
  std::string speaker_id;
  double pred = 0.0;
  std::optional<double> truth;
};

struct PredictionSet {
  std::vector<PredictionEntry> entries;

  // speaker_id -> indices into entries, in entry order.
  std::map<std::string, std::vector<size_t>> by_speaker() const;
};

struct PredictOptions {
  bool use_speaker = true;
  // unseen speaker_id -> training speaker_id whose embedding stands in
  std::map<std::string, std::string> proxies;
};

PredictionSet predict_all(const EncoderModel& model, const Corpus& corpus, Split split,
                          const PredictOptions& options = {});

void write_predictions(const PredictionSet& preds, const std::filesystem::path& path);
PredictionSet read_predictions(const std::filesystem::path& path);

}  // namespace pser
