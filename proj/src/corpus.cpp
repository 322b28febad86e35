#include "pser/corpus.hpp"

#include "pser/tensor_file.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace pser {

using nlohmann::json;

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test_a: return "test_a";
    case Split::test_b: return "test_b";
    case Split::test_c: return "test_c";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  for (Split s : {Split::train, Split::validation, Split::test_a, Split::test_b, Split::test_c}) {
    if (name == split_name(s)) return s;
  }
  throw ValidationError("unknown split tag: '" + name + "'");
}

bool UtteranceRecord::operator==(const UtteranceRecord& o) const {
  return id == o.id && speaker_id == o.speaker_id && split == o.split && label == o.label &&
         samples.size() == o.samples.size() && samples == o.samples;
}

void Corpus::rebuild_speaker_index() {
  speaker_index.clear();
  std::set<std::string> ids;
  for (const auto& r : records) ids.insert(r.speaker_id);
  int ord = 0;
  for (const auto& id : ids) speaker_index[id] = ord++;
}

void Corpus::validate() const {
  std::set<std::string> seen_ids;
  for (const auto& r : records) {
    if (!seen_ids.insert(r.id).second) throw ValidationError("duplicate utterance id: " + r.id);
    if (r.label && (*r.label < kLabelMin || *r.label > kLabelMax)) {
      throw ValidationError("label out of [1,7] for utterance " + r.id);
    }
    if (r.samples.size() < 1) throw ValidationError("empty waveform for utterance " + r.id);
    if (!speaker_index.count(r.speaker_id)) {
      throw ValidationError("speaker_id not in speaker_index: " + r.speaker_id);
    }
  }
  auto train_spk = speakers_of(Split::train);
  auto unseen_spk = speakers_of(Split::test_c);
  for (const auto& s : unseen_spk) {
    if (std::binary_search(train_spk.begin(), train_spk.end(), s)) {
      throw ValidationError("test_c speaker also appears in train: " + s);
    }
  }
}

std::vector<const UtteranceRecord*> Corpus::split_records(Split s) const {
  std::vector<const UtteranceRecord*> out;
  for (const auto& r : records) {
    if (r.split == s) out.push_back(&r);
  }
  return out;
}

std::vector<std::string> Corpus::speakers_of(Split s) const {
  std::set<std::string> ids;
  for (const auto& r : records) {
    if (r.split == s) ids.insert(r.speaker_id);
  }
  return {ids.begin(), ids.end()};
}

std::vector<std::string> Corpus::seen_speakers() const {
  std::set<std::string> ids;
  for (const auto& r : records) {
    if (r.split != Split::test_c) ids.insert(r.speaker_id);
  }
  return {ids.begin(), ids.end()};
}

bool Corpus::operator==(const Corpus& o) const {
  return records == o.records && speaker_index == o.speaker_index;
}

void SyntheticSpec::validate() const {
  if (n_speakers_per_split.empty()) throw ConfigError("synthetic spec: no splits requested");
  for (const auto& [split, n] : n_speakers_per_split) {
    if (n < 0) throw ConfigError("synthetic spec: negative speaker count for " + std::string(split_name(split)));
  }
  auto ta = n_speakers_per_split.find(Split::test_a);
  auto tb = n_speakers_per_split.find(Split::test_b);
  int na = ta == n_speakers_per_split.end() ? 0 : ta->second;
  int nb = tb == n_speakers_per_split.end() ? 0 : tb->second;
  if (na != nb && na != 0 && nb != 0) {
    throw ConfigError("synthetic spec: test_a and test_b must request the same speakers");
  }
  if (utterances_per_speaker < 1) throw ConfigError("synthetic spec: utterances_per_speaker < 1");
  if (t_raw < 64) throw ConfigError("synthetic spec: t_raw must be >= 64 (speaker carrier period)");
  if (feature_shift_scale < 0) throw ConfigError("synthetic spec: feature_shift_scale < 0");
  if (label_mu_lo > label_mu_hi || label_mu_lo < kLabelMin || label_mu_hi > kLabelMax) {
    throw ConfigError("synthetic spec: label mu range must be non-empty within [1,7]");
  }
  if (label_sigma_lo > label_sigma_hi || label_sigma_lo <= 0) {
    throw ConfigError("synthetic spec: label sigma range must be non-empty and positive");
  }
}

namespace {

constexpr double kNoiseSigma = 0.25;
constexpr double kSpeakerCarrierPeriod = 64.0;
constexpr double kLabelCarrierPeriod = 16.0;
constexpr double kLabelCarrierGain = 0.5;

double quantize_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

std::string speaker_prefix(Split s) {
  switch (s) {
    case Split::train: return "tr";
    case Split::validation: return "va";
    case Split::test_a:
    case Split::test_b: return "te";
    case Split::test_c: return "un";
  }
  return "xx";
}

std::string format_id(const std::string& prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%03d", prefix.c_str(), i);
  return buf;
}

UtteranceRecord make_utterance(const SpeakerLatents& lat, const std::string& speaker_id,
                               Split split, int index, int t_raw, RngStream& rng) {
  UtteranceRecord r;
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%s_%s_%04d", speaker_id.c_str(), split_name(split), index);
  r.id = buf;
  r.speaker_id = speaker_id;
  r.split = split;

  double y = rng.normal(lat.label_mu, lat.label_sigma);
  y = std::clamp(y, kLabelMin, kLabelMax);
  r.label = y;

  // Waveform = noise + speaker signature + a label-scaled carrier, so speaker
  // identity and the label are both recoverable from sample statistics.
  double label_coef = kLabelCarrierGain * (y - 4.0) / 3.0;
  r.samples.resize(t_raw);
  for (int t = 0; t < t_raw; ++t) {
    double v = kNoiseSigma * rng.normal() + lat.bias_dc +
               lat.bias_amp * std::sin(2.0 * std::numbers::pi * t / kSpeakerCarrierPeriod) +
               label_coef * std::sin(2.0 * std::numbers::pi * t / kLabelCarrierPeriod);
    r.samples(t) = quantize_f32(v);
  }
  return r;
}

}  // namespace

std::vector<UtteranceRecord> synth_utterances(const SpeakerLatents& latents,
                                              const std::string& speaker_id, Split split,
                                              int count, int t_raw, RngStream& rng) {
  std::vector<UtteranceRecord> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    out.push_back(make_utterance(latents, speaker_id, split, i, t_raw, rng));
  }
  return out;
}

Corpus generate_synthetic(const SyntheticSpec& spec) { return generate_synthetic(spec, nullptr); }

Corpus generate_synthetic(const SyntheticSpec& spec,
                          std::map<std::string, SpeakerLatents>* latents_out) {
  spec.validate();

  auto count_for = [&](Split s) {
    auto it = spec.n_speakers_per_split.find(s);
    return it == spec.n_speakers_per_split.end() ? 0 : it->second;
  };

  RngStream latent_rng(spec.seed, "speaker-latents");
  auto draw_latents = [&]() {
    double z1 = latent_rng.uniform();
    double z2 = latent_rng.uniform();
    SpeakerLatents lat;
    lat.bias_dc = spec.feature_shift_scale * (2.0 * z1 - 1.0);
    lat.bias_amp = spec.feature_shift_scale * (2.0 * z2 - 1.0);
    lat.label_mu = spec.label_mu_lo + z1 * (spec.label_mu_hi - spec.label_mu_lo);
    lat.label_sigma = spec.label_sigma_lo + z2 * (spec.label_sigma_hi - spec.label_sigma_lo);
    return lat;
  };

  Corpus corpus;
  int utt_stream = 0;
  auto emit_speaker = [&](const std::string& speaker_id, const SpeakerLatents& lat,
                          std::initializer_list<Split> splits) {
    if (latents_out) (*latents_out)[speaker_id] = lat;
    for (Split split : splits) {
      RngStream rng(spec.seed, "utterances", static_cast<uint64_t>(utt_stream++));
      auto recs = synth_utterances(lat, speaker_id, split, spec.utterances_per_speaker,
                                   spec.t_raw, rng);
      corpus.records.insert(corpus.records.end(), recs.begin(), recs.end());
    }
  };

  for (int i = 0; i < count_for(Split::train); ++i) {
    emit_speaker(format_id(speaker_prefix(Split::train), i), draw_latents(), {Split::train});
  }
  for (int i = 0; i < count_for(Split::validation); ++i) {
    emit_speaker(format_id(speaker_prefix(Split::validation), i), draw_latents(), {Split::validation});
  }
  int n_test = std::max(count_for(Split::test_a), count_for(Split::test_b));
  for (int i = 0; i < n_test; ++i) {
    emit_speaker(format_id(speaker_prefix(Split::test_a), i), draw_latents(),
                 {Split::test_a, Split::test_b});
  }
  for (int i = 0; i < count_for(Split::test_c); ++i) {
    emit_speaker(format_id(speaker_prefix(Split::test_c), i), draw_latents(), {Split::test_c});
  }

  corpus.rebuild_speaker_index();
  corpus.validate();
  return corpus;
}

void write_manifest(const Corpus& corpus, const std::filesystem::path& manifest_path) {
  namespace fs = std::filesystem;
  fs::path dir = manifest_path.parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  fs::create_directories(dir / "waves");

  std::ofstream out(manifest_path);
  if (!out) throw std::runtime_error("cannot open manifest for writing: " + manifest_path.string());

  json header = {{"format", "pser-manifest"}, {"version", 1}};
  out << header.dump() << "\n";
  for (const auto& r : corpus.records) {
    std::string rel = "waves/" + r.id + ".pser";
    write_tensor_file(dir / "waves" / (r.id + ".pser"), to_blob(Vector(r.samples)));
    json line = {{"id", r.id},
                 {"speaker_id", r.speaker_id},
                 {"split", split_name(r.split)},
                 {"label", r.label ? json(*r.label) : json(nullptr)},
                 {"samples_path", rel}};
    out << line.dump() << "\n";
  }
  if (!out) throw std::runtime_error("manifest write failed: " + manifest_path.string());
}

Corpus read_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open manifest: " + manifest_path.string());
  std::filesystem::path dir = manifest_path.parent_path();

  Corpus corpus;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(std::string("manifest: ") + e.what(), line_no);
    }
    if (line_no == 1) {
      if (!j.is_object() || j.value("format", "") != "pser-manifest") {
        throw ParseError("manifest: missing pser-manifest header", line_no);
      }
      continue;
    }
    try {
      UtteranceRecord r;
      r.id = j.at("id").get<std::string>();
      r.speaker_id = j.at("speaker_id").get<std::string>();
      r.split = split_from_name(j.at("split").get<std::string>());
      const auto& lab = j.at("label");
      if (!lab.is_null()) r.label = lab.get<double>();
      auto rel = j.at("samples_path").get<std::string>();
      r.samples = blob_to_vector(read_tensor_file(dir / rel));
      corpus.records.push_back(std::move(r));
    } catch (const ValidationError&) {
      throw;
    } catch (const json::exception& e) {
      throw ParseError(std::string("manifest: ") + e.what(), line_no);
    }
  }
  if (line_no == 0) throw ParseError("manifest: empty file, expected header line", 1);
  corpus.rebuild_speaker_index();
  corpus.validate();
  return corpus;
}

}  // namespace pser
