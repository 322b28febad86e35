#pragma once

#include "pser/common.hpp"
#include "pser/rng.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace pser {

enum class Split { train, validation, test_a, test_b, test_c };

const char* split_name(Split s);
Split split_from_name(const std::string& name);  // throws ValidationError on unknown tag

constexpr double kLabelMin = 1.0;
constexpr double kLabelMax = 7.0;

struct UtteranceRecord {
  std::string id;
  std::string speaker_id;
  Split split = Split::train;
  std::optional<double> label;  // arousal- or valence-like value in [1, 7]
  Vector samples;               // unit-less synthetic waveform

  bool operator==(const UtteranceRecord& o) const;
};

struct Corpus {
  std::vector<UtteranceRecord> records;
  std::map<std::string, int> speaker_index;  // speaker_id -> ordinal in [0, S)

  void rebuild_speaker_index();
  void validate() const;

  std::vector<const UtteranceRecord*> split_records(Split s) const;
  std::vector<std::string> speakers_of(Split s) const;  // sorted, unique
  // Speakers visible during training-time stages: train + validation + test_a + test_b.
  std::vector<std::string> seen_speakers() const;

  bool operator==(const Corpus& o) const;
};

struct SyntheticSpec {
  std::map<Split, int> n_speakers_per_split;
  int utterances_per_speaker = 8;
  int t_raw = 400;
  double feature_shift_scale = 0.5;
  double label_mu_lo = 3.0, label_mu_hi = 5.0;
  double label_sigma_lo = 0.5, label_sigma_hi = 1.0;
  uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

// Per-speaker latent state. The waveform bias (dc, amp) and the label
// distribution (mu, sigma) are driven by the same two latent draws, so
// feature shift and label shift are coupled the way the analysis module
// expects to detect.
struct SpeakerLatents {
  double bias_dc = 0.0;    // constant offset added to every sample
  double bias_amp = 0.0;   // amplitude of the slow speaker carrier
  double label_mu = 4.0;
  double label_sigma = 1.0;
};

Corpus generate_synthetic(const SyntheticSpec& spec);
Corpus generate_synthetic(const SyntheticSpec& spec,
                          std::map<std::string, SpeakerLatents>* latents_out);

// Builds extra utterances for one speaker from explicit latents. Used to plant
// unseen speakers that duplicate a training speaker's characteristics.
std::vector<UtteranceRecord> synth_utterances(const SpeakerLatents& latents,
                                              const std::string& speaker_id, Split split,
                                              int count, int t_raw, RngStream& rng);

// NDJSON manifest (header line + one record per line) with per-utterance
// waveforms in PSER tensor files under <manifest dir>/waves/.
void write_manifest(const Corpus& corpus, const std::filesystem::path& manifest_path);
Corpus read_manifest(const std::filesystem::path& manifest_path);

}  // namespace pser
