#include "pser/calibrate.hpp"

#include "pser/tensor_file.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace pser {

std::string shift_mode_name(ShiftMode m) {
  switch (m) {
    case ShiftMode::none: return "none";
    case ShiftMode::mu_only: return "mu";
    case ShiftMode::sigma_only: return "sigma";
    case ShiftMode::both: return "both";
  }
  throw ValidationError("shift_mode_name: bad enum value");
}

ShiftMode shift_mode_from_name(const std::string& name) {
  if (name == "none") return ShiftMode::none;
  if (name == "mu") return ShiftMode::mu_only;
  if (name == "sigma") return ShiftMode::sigma_only;
  if (name == "both") return ShiftMode::both;
  throw ValidationError("unknown shift mode: " + name);
}

void CalibrationConfig::validate() const {
  if (top_k < 1) throw ConfigError("top_k must be positive");
  if (!(sigma_floor > 0.0)) throw ConfigError("sigma_floor must be positive");
}

Vector speaker_vector(const EncoderModel& model,
                      const std::vector<const UtteranceRecord*>& utterances,
                      std::optional<int> speaker) {
  if (utterances.empty()) throw ValidationError("speaker_vector: no utterances");
  Vector sum = Vector::Zero(model.config.d_model);
  for (const UtteranceRecord* rec : utterances) {
    Matrix feats = forward_features(model, rec->samples, speaker);
    sum += feats.colwise().mean().transpose();
  }
  return sum / static_cast<double>(utterances.size());
}

std::vector<std::string> topk_similar(const Vector& target,
                                      const std::vector<SpeakerProfile>& train_profiles, int k) {
  if (k < 1) throw ValidationError("topk_similar: k must be positive");
  if (k > static_cast<int>(train_profiles.size())) {
    throw ValidationError("topk_similar: k exceeds the number of training profiles");
  }
  double tn = target.norm();
  if (tn == 0.0) throw ValidationError("topk_similar: zero-norm target vector");
  std::vector<std::pair<double, std::string>> scored;
  scored.reserve(train_profiles.size());
  for (const auto& p : train_profiles) {
    double pn = p.vector.norm();
    if (pn == 0.0) {
      throw ValidationError("topk_similar: zero-norm vector for speaker " + p.speaker_id);
    }
    scored.emplace_back(target.dot(p.vector) / (tn * pn), p.speaker_id);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<std::string> out;
  out.reserve(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) out.push_back(scored[static_cast<size_t>(i)].second);
  return out;
}

std::pair<double, double> estimate_stats(const std::vector<SpeakerProfile>& retrieved) {
  if (retrieved.empty()) throw ValidationError("estimate_stats: no retrieved profiles");
  double mu = 0.0, sigma = 0.0;
  for (const auto& p : retrieved) {
    if (!p.label_mu || !p.label_sigma) {
      throw ValidationError("estimate_stats: profile for " + p.speaker_id +
                            " has no label statistics");
    }
    mu += *p.label_mu;
    sigma += *p.label_sigma;
  }
  double n = static_cast<double>(retrieved.size());
  return {mu / n, sigma / n};
}

std::vector<double> calibrate(const std::vector<double>& preds, double mu_bar, double sigma_bar,
                              ShiftMode mode, double sigma_floor) {
  if (preds.size() < 2) {
    throw ValidationError("calibrate: need at least 2 predictions to estimate sigma");
  }
  if (mode == ShiftMode::none) return preds;

  double mu = 0.0;
  for (double y : preds) mu += y;
  mu /= static_cast<double>(preds.size());
  double var = 0.0;
  for (double y : preds) var += (y - mu) * (y - mu);
  var /= static_cast<double>(preds.size());
  double sigma = std::sqrt(var);

  double target_mu = (mode == ShiftMode::sigma_only) ? mu : mu_bar;
  double target_sigma = (mode == ShiftMode::mu_only) ? sigma : sigma_bar;

  std::vector<double> out;
  out.reserve(preds.size());
  if (sigma < sigma_floor) {
    for (double y : preds) out.push_back(y - mu + target_mu);
    return out;
  }
  for (double y : preds) out.push_back((y - mu) / sigma * target_sigma + target_mu);
  return out;
}

std::string proxy_speaker(const std::vector<const UtteranceRecord*>& unseen_utterances,
                          const EncoderModel& base_model,
                          const std::vector<SpeakerProfile>& train_profiles_base) {
  if (train_profiles_base.empty()) throw ValidationError("proxy_speaker: no training profiles");
  Vector v = speaker_vector(base_model, unseen_utterances, std::nullopt);
  return topk_similar(v, train_profiles_base, 1).front();
}

CalibrationResult calibrate_prediction_set(const EncoderModel& model, const Corpus& corpus,
                                           const PredictionSet& preds,
                                           const std::vector<SpeakerProfile>& train_profiles,
                                           const CalibrationConfig& config,
                                           const std::map<std::string, std::string>& proxies) {
  config.validate();
  if (config.top_k > static_cast<int>(train_profiles.size())) {
    throw ConfigError("top_k exceeds the number of training speakers");
  }
  std::map<std::string, const UtteranceRecord*> by_id;
  for (const auto& rec : corpus.records) by_id.emplace(rec.id, &rec);

  std::map<std::string, SpeakerProfile> profile_by_id;
  for (const auto& p : train_profiles) profile_by_id.emplace(p.speaker_id, p);

  CalibrationResult result;
  result.preds = preds;
  for (const auto& [speaker_id, indices] : preds.by_speaker()) {
    if (indices.size() < 2) {
      result.skipped_speakers.push_back(speaker_id);
      continue;
    }
    std::vector<const UtteranceRecord*> utts;
    utts.reserve(indices.size());
    for (size_t i : indices) {
      auto it = by_id.find(preds.entries[i].id);
      if (it == by_id.end()) {
        throw LookupError("prediction for unknown utterance " + preds.entries[i].id);
      }
      utts.push_back(it->second);
    }
    std::optional<int> ordinal;
    auto own = model.speaker_lookup.find(speaker_id);
    if (own != model.speaker_lookup.end()) {
      ordinal = own->second;
    } else {
      auto proxy = proxies.find(speaker_id);
      if (proxy == proxies.end()) {
        throw LookupError("speaker " + speaker_id +
                          " is not in the model's speaker table and no proxy was supplied");
      }
      ordinal = model.speaker_ordinal(proxy->second);
    }
    Vector v = speaker_vector(model, utts, ordinal);
    std::vector<std::string> ids = topk_similar(v, train_profiles, config.top_k);
    std::vector<SpeakerProfile> retrieved;
    retrieved.reserve(ids.size());
    for (const auto& id : ids) retrieved.push_back(profile_by_id.at(id));
    auto [mu_bar, sigma_bar] = estimate_stats(retrieved);

    std::vector<double> before;
    before.reserve(indices.size());
    for (size_t i : indices) before.push_back(preds.entries[i].pred);
    std::vector<double> after = calibrate(before, mu_bar, sigma_bar, config.mode,
                                          config.sigma_floor);
    for (size_t j = 0; j < indices.size(); ++j) {
      result.preds.entries[indices[j]].pred = after[j];
    }
  }
  return result;
}

std::vector<SpeakerProfile> build_train_profiles(const EncoderModel& model, const Corpus& corpus,
                                                 bool use_speaker) {
  std::map<std::string, std::vector<const UtteranceRecord*>> by_speaker;
  for (const auto& rec : corpus.records) {
    if (rec.split == Split::train) by_speaker[rec.speaker_id].push_back(&rec);
  }
  if (by_speaker.empty()) throw ValidationError("no training utterances to profile");

  std::vector<SpeakerProfile> out;
  out.reserve(by_speaker.size());
  for (const auto& [speaker_id, utts] : by_speaker) {
    std::optional<int> ordinal;
    if (use_speaker) ordinal = model.speaker_ordinal(speaker_id);
    SpeakerProfile p;
    p.speaker_id = speaker_id;
    p.vector = speaker_vector(model, utts, ordinal);
    p.n_utterances = static_cast<int>(utts.size());
    double mu = 0.0;
    int n = 0;
    for (const UtteranceRecord* rec : utts) {
      if (!rec->label) throw ValidationError("unlabeled training utterance " + rec->id);
      mu += *rec->label;
      ++n;
    }
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (const UtteranceRecord* rec : utts) var += (*rec->label - mu) * (*rec->label - mu);
    var /= static_cast<double>(n);
    p.label_mu = mu;
    p.label_sigma = std::sqrt(var);
    out.push_back(std::move(p));
  }
  return out;
}

void write_profiles(const std::vector<SpeakerProfile>& profiles,
                    const std::filesystem::path& path) {
  std::filesystem::path dir = path.parent_path();
  std::filesystem::path vec_dir = dir / "vectors";
  std::filesystem::create_directories(vec_dir);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open profiles for writing: " + path.string());
  out << nlohmann::json{{"format", "pser-profiles"}, {"version", 1}}.dump() << "\n";
  for (const auto& p : profiles) {
    std::string rel = "vectors/" + p.speaker_id + ".pser";
    write_tensor_file(dir / rel, to_blob(p.vector));
    nlohmann::json j{{"speaker_id", p.speaker_id},
                     {"n_utterances", p.n_utterances},
                     {"vector_path", rel}};
    j["mu"] = p.label_mu ? nlohmann::json(*p.label_mu) : nlohmann::json(nullptr);
    j["sigma"] = p.label_sigma ? nlohmann::json(*p.label_sigma) : nlohmann::json(nullptr);
    out << j.dump() << "\n";
  }
  if (!out) throw ParseError("failed writing profiles: " + path.string());
}

std::vector<SpeakerProfile> read_profiles(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open profiles: " + path.string());
  std::filesystem::path dir = path.parent_path();
  std::string line;
  int line_no = 0;
  if (!std::getline(in, line)) throw ParseError("empty profiles file", 1);
  ++line_no;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad profiles header: ") + e.what(), line_no);
  }
  if (header.value("format", "") != "pser-profiles" || header.value("version", 0) != 1) {
    throw ParseError("not a profiles file: " + path.string(), 1);
  }
  std::vector<SpeakerProfile> out;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      nlohmann::json j = nlohmann::json::parse(line);
      SpeakerProfile p;
      p.speaker_id = j.at("speaker_id").get<std::string>();
      p.n_utterances = j.at("n_utterances").get<int>();
      if (!j.at("mu").is_null()) p.label_mu = j.at("mu").get<double>();
      if (!j.at("sigma").is_null()) p.label_sigma = j.at("sigma").get<double>();
      p.vector = blob_to_vector(read_tensor_file(dir / j.at("vector_path").get<std::string>()));
      if (!seen.insert(p.speaker_id).second) {
        throw ParseError("duplicate profile for speaker " + p.speaker_id, line_no);
      }
      out.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("bad profile record: ") + e.what(), line_no);
    }
  }
  return out;
}

}  // namespace pser
