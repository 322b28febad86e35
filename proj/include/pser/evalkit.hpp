#pragma once

#include "pser/corpus.hpp"
#include "pser/downstream.hpp"
#include "pser/encoder.hpp"
#include "pser/pretrain.hpp"

#include <map>
#include <string>
#include <vector>

namespace pser {

struct EvalReport {
  double o_ccc = 0.0;   // CCC of the concatenated predictions
  double a_ccc = 0.0;   // mean of per-speaker CCCs
  double a_ccc_std = 0.0;  // population std across speakers
  std::map<std::string, double> per_speaker_ccc;
  std::vector<std::string> excluded_speakers;  // degenerate (constant pred and truth)
};

EvalReport evaluate(const PredictionSet& preds);

// KL(N(mu0, sigma0^2) || N(mu1, sigma1^2)).
double kl_gaussian(double mu0, double sigma0, double mu1, double sigma1);

// Diagonal-Gaussian KL between two feature samples (rows = utterances),
// summed over dimensions. Zero-variance dimensions are floored at 1e-6 and
// reported through `floored`.
double feature_kl(const Matrix& speaker_feats, const Matrix& train_feats,
                  bool* floored = nullptr);

double pearson(const std::vector<double>& x, const std::vector<double>& y);

struct SpeakerShift {
  double feature_kl = 0.0;
  double label_kl = 0.0;
  double ccc = 0.0;
};

struct ShiftReport {
  std::map<std::string, SpeakerShift> per_speaker;
  double pcc_feature_perf = 0.0;
  double pcc_label_perf = 0.0;
  double pcc_feature_label = 0.0;
  std::vector<std::string> excluded_speakers;
  bool kl_floored = false;
};

// Per-speaker feature/label KL against the training aggregate and the
// correlations between shift magnitudes and per-speaker performance.
// Features are speaker-free pooled encoder outputs.
ShiftReport shift_analysis(const EncoderModel& model, const Corpus& corpus,
                           const PredictionSet& preds);

struct GapOptions {
  EncoderConfig encoder;
  FinetuneConfig ft;
  std::optional<PretrainConfig> pt;  // if set, all cells fine-tune from one shared PAPT base
  std::uint64_t seed = 0;   // model init and speaker-subset permutation
  int n_removed = -1;       // speakers dropped for the dependent cell; -1 = |test_a speakers|
  bool include_test_a = true;
  Target target = Target::valence;
};

struct GapRow {
  int k = 0;
  double ccc_dependent = 0.0;
  double ccc_independent = 0.0;
};

// Speaker-dependent vs speaker-independent fine-tuning at nested training
// speaker subsets of the given sizes; both cells are evaluated on test_b.
std::vector<GapRow> personalization_gap(const Corpus& corpus, const std::vector<int>& k_values,
                                        const GapOptions& options);

struct AblateOptions {
  EncoderConfig encoder;  // fusion is overridden per row
  PretrainConfig pt;
  FinetuneConfig ft;
  std::uint64_t seed = 0;
  Target target = Target::valence;
};

struct FusionRow {
  Fusion fusion = Fusion::Last;
  double l_pt_val = 0.0;  // best validation pre-training loss per masked frame
  double a_ccc = 0.0;     // on test_b after fine-tuning
};

// Pre-train + fine-tune once per fusion position with shared seeds and shared
// pseudo-labels.
std::vector<FusionRow> ablate_fusion(const Corpus& corpus, const PseudoLabelSet& labels,
                                     const AblateOptions& options);

// Report serialization: NDJSON (header line + rows) and aligned text tables.
std::string eval_report_ndjson(const EvalReport& r);
std::string eval_report_table(const EvalReport& r);
std::string shift_report_ndjson(const ShiftReport& r);
std::string shift_report_table(const ShiftReport& r);
std::string gap_report_ndjson(const std::vector<GapRow>& rows);
std::string gap_report_table(const std::vector<GapRow>& rows);
std::string fusion_report_ndjson(const std::vector<FusionRow>& rows);
std::string fusion_report_table(const std::vector<FusionRow>& rows);

}  // namespace pser
