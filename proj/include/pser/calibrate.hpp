#pragma once

#include "pser/corpus.hpp"
#include "pser/downstream.hpp"
#include "pser/encoder.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace pser {

struct SpeakerProfile {
  std::string speaker_id;
  Vector vector;  // mean of mean-pooled utterance representations
  int n_utterances = 0;
  // Label statistics; present for training speakers only.
  std::optional<double> label_mu;
  std::optional<double> label_sigma;
};

enum class ShiftMode { none, mu_only, sigma_only, both };

std::string shift_mode_name(ShiftMode m);
ShiftMode shift_mode_from_name(const std::string& name);  // none|mu|sigma|both

struct CalibrationConfig {
  int top_k = 5;
  ShiftMode mode = ShiftMode::both;
  double sigma_floor = 1e-6;

  void validate() const;
};

// Mean of mean-pooled encoder outputs over a speaker's utterances. The
// speaker ordinal (own or proxy) personalizes the representation; pass
// nullopt for a base, speaker-free embedding.
Vector speaker_vector(const EncoderModel& model,
                      const std::vector<const UtteranceRecord*>& utterances,
                      std::optional<int> speaker);

// Training-speaker ids in descending cosine similarity to target, ties broken
// by ascending id. Requires nonzero vectors and k <= |profiles|.
std::vector<std::string> topk_similar(const Vector& target,
                                      const std::vector<SpeakerProfile>& train_profiles, int k);

// Unweighted means of the retrieved speakers' label statistics.
std::pair<double, double> estimate_stats(const std::vector<SpeakerProfile>& retrieved);

// Label-distribution shift: y_tilde = (y - mu)/sigma * sigma_bar + mu_bar with
// mu/sigma taken from preds themselves. mu_only keeps sigma, sigma_only keeps
// mu, none is the identity. If sigma < sigma_floor the scale is left alone
// (pure mean shift, or identity for sigma_only).
std::vector<double> calibrate(const std::vector<double>& preds, double mu_bar, double sigma_bar,
                              ShiftMode mode, double sigma_floor = 1e-6);

// Training speaker whose base-encoder vector is most similar to the unseen
// speaker's. The returned id stands in for the unseen speaker downstream.
std::string proxy_speaker(const std::vector<const UtteranceRecord*>& unseen_utterances,
                          const EncoderModel& base_model,
                          const std::vector<SpeakerProfile>& train_profiles_base);

struct CalibrationResult {
  PredictionSet preds;
  std::vector<std::string> skipped_speakers;  // too few predictions to calibrate
};

// Per-test-speaker PLDC over a prediction set. Speakers absent from the
// model's table take their ordinal from `proxies`.
CalibrationResult calibrate_prediction_set(const EncoderModel& model, const Corpus& corpus,
                                           const PredictionSet& preds,
                                           const std::vector<SpeakerProfile>& train_profiles,
                                           const CalibrationConfig& config,
                                           const std::map<std::string, std::string>& proxies = {});

// One profile per training-split speaker: vector, utterance count, and label
// mean/std (population). use_speaker=false builds base-encoder profiles for
// proxy selection.
std::vector<SpeakerProfile> build_train_profiles(const EncoderModel& model, const Corpus& corpus,
                                                 bool use_speaker = true);

// NDJSON index with per-speaker vectors in PSER files next to it.
void write_profiles(const std::vector<SpeakerProfile>& profiles,
                    const std::filesystem::path& path);
std::vector<SpeakerProfile> read_profiles(const std::filesystem::path& path);

}  // namespace pser
