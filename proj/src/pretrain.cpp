#include "pser/pretrain.hpp"

#include "pser/kmeans.hpp"
#include "pser/optimizer.hpp"
#include "pser/rng.hpp"
#include "pser/tensor_file.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace pser {

void PretrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) {
    throw ConfigError("warmup_fraction must be in (0, 1)");
  }
  if (lr_max < 0.0) throw ConfigError("lr_max must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(mask_prob >= 0.0 && mask_prob <= 1.0)) throw ConfigError("mask_prob must be in [0, 1]");
  if (span < 1) throw ConfigError("span must be at least 1");
}

nlohmann::json PretrainConfig::to_json() const {
  return nlohmann::json{{"epochs", epochs},       {"warmup_fraction", warmup_fraction},
                        {"lr_max", lr_max},       {"batch_size", batch_size},
                        {"mask_prob", mask_prob}, {"span", span},
                        {"seed", seed}};
}

PretrainConfig PretrainConfig::from_json(const nlohmann::json& j) {
  PretrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.lr_max = j.value("lr_max", c.lr_max);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.mask_prob = j.value("mask_prob", c.mask_prob);
  c.span = j.value("span", c.span);
  c.seed = j.value("seed", c.seed);
  return c;
}

PseudoLabelSet make_pseudo_labels(const EncoderModel& model, const Corpus& corpus, int k,
                                  std::uint64_t seed) {
  if (corpus.records.empty()) throw ValidationError("cannot cluster an empty corpus");
  if (k < 1) throw ValidationError("k must be positive");

  std::vector<Matrix> feats;
  feats.reserve(corpus.records.size());
  Eigen::Index total = 0;
  for (const auto& rec : corpus.records) {
    feats.push_back(conv_features(model, rec.samples));
    total += feats.back().rows();
  }
  if (static_cast<Eigen::Index>(k) > total) {
    throw ValidationError("k exceeds the corpus frame count");
  }
  Matrix all(total, model.config.d_model);
  Eigen::Index r = 0;
  for (const auto& f : feats) {
    all.middleRows(r, f.rows()) = f;
    r += f.rows();
  }
  KmeansResult km = kmeans(all, k, mix_seed(seed, "pseudo-labels"));

  PseudoLabelSet set;
  set.k = k;
  size_t at = 0;
  for (size_t i = 0; i < corpus.records.size(); ++i) {
    std::vector<int> seq(static_cast<size_t>(feats[i].rows()));
    for (auto& v : seq) v = km.assignment[at++];
    set.labels.emplace(corpus.records[i].id, std::move(seq));
  }
  return set;
}

void write_pseudo_labels(const std::filesystem::path& dir, const PseudoLabelSet& set) {
  std::filesystem::create_directories(dir);
  nlohmann::json index;
  index["format"] = "pser-pseudo-labels";
  index["version"] = 1;
  index["k"] = set.k;
  std::vector<std::string> ids;
  ids.reserve(set.labels.size());
  for (const auto& [id, seq] : set.labels) {
    ids.push_back(id);
    TensorBlob blob;
    blob.dims = {static_cast<uint32_t>(seq.size())};
    blob.data.reserve(seq.size());
    for (int v : seq) blob.data.push_back(static_cast<float>(v));
    write_tensor_file(dir / (id + ".pser"), blob);
  }
  index["ids"] = ids;
  std::ofstream out(dir / "index.json", std::ios::binary);
  if (!out) throw ParseError("cannot write pseudo-label index in " + dir.string());
  out << index.dump() << "\n";
}

PseudoLabelSet read_pseudo_labels(const std::filesystem::path& dir) {
  std::ifstream in(dir / "index.json", std::ios::binary);
  if (!in) throw ParseError("missing pseudo-label index: " + (dir / "index.json").string());
  nlohmann::json index;
  try {
    in >> index;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad pseudo-label index: ") + e.what());
  }
  if (index.value("format", "") != "pser-pseudo-labels" || index.value("version", 0) != 1) {
    throw ParseError("not a pseudo-label index: " + (dir / "index.json").string());
  }
  PseudoLabelSet set;
  set.k = index.at("k").get<int>();
  for (const auto& id : index.at("ids").get<std::vector<std::string>>()) {
    TensorBlob blob = read_tensor_file(dir / (id + ".pser"));
    if (blob.dims.size() != 1) throw ParseError("pseudo-label tensor for " + id + " must be rank 1");
    std::vector<int> seq;
    seq.reserve(blob.data.size());
    for (float v : blob.data) {
      int lab = static_cast<int>(std::lround(v));
      if (lab < 0 || lab >= set.k) throw ValidationError("pseudo-label out of range for " + id);
      seq.push_back(lab);
    }
    set.labels.emplace(id, std::move(seq));
  }
  return set;
}

MaskPlan plan_masks(const std::map<std::string, int>& lengths, const PretrainConfig& config,
                    std::uint64_t seed) {
  config.validate();
  MaskPlan plan;
  for (const auto& [id, t] : lengths) {
    if (t < config.span) {
      throw ShapeError("utterance " + id + " has " + std::to_string(t) +
                       " frames, shorter than the mask span");
    }
    RngStream rng(seed, "mask:" + id);
    std::vector<bool> masked(static_cast<size_t>(t), false);
    for (int f = 0; f < t; ++f) {
      if (rng.uniform() < config.mask_prob) {
        for (int j = f; j < std::min(t, f + config.span); ++j) masked[static_cast<size_t>(j)] = true;
      }
    }
    std::vector<int> rows;
    for (int f = 0; f < t; ++f) {
      if (masked[static_cast<size_t>(f)]) rows.push_back(f);
    }
    if (rows.empty()) {
      int start = rng.uniform_int(t - config.span + 1);
      for (int j = start; j < start + config.span; ++j) rows.push_back(j);
    }
    plan.masked.emplace(id, std::move(rows));
  }
  return plan;
}

ad::NodePtr papt_loss(const EncoderModel& model, const std::vector<const UtteranceRecord*>& batch,
                      const PseudoLabelSet& labels, const MaskPlan& plan) {
  if (batch.empty()) throw ValidationError("papt_loss: empty batch");
  std::vector<ad::NodePtr> terms;
  terms.reserve(batch.size());
  for (const UtteranceRecord* rec : batch) {
    auto lab_it = labels.labels.find(rec->id);
    if (lab_it == labels.labels.end()) {
      throw LookupError("missing pseudo-labels for utterance " + rec->id);
    }
    auto mask_it = plan.masked.find(rec->id);
    if (mask_it == plan.masked.end() || mask_it->second.empty()) {
      throw ValidationError("empty mask for utterance " + rec->id);
    }
    int speaker = model.speaker_ordinal(rec->speaker_id);
    ad::NodePtr feats = forward_features_node(model, rec->samples, speaker, mask_it->second);
    ad::NodePtr logits = pseudo_logits_node(model, feats);
    terms.push_back(ad::cross_entropy_rows(logits, lab_it->second, mask_it->second));
  }
  ad::NodePtr total = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  return total;
}

namespace {

long masked_count(const MaskPlan& plan, const std::vector<const UtteranceRecord*>& batch) {
  long m = 0;
  for (const UtteranceRecord* rec : batch) {
    m += static_cast<long>(plan.masked.at(rec->id).size());
  }
  return m;
}

}  // namespace

PretrainHistory run_papt(EncoderModel& model, const Corpus& corpus, const PseudoLabelSet& labels,
                         const PretrainConfig& config) {
  config.validate();
  if (labels.k != model.config.k_pseudo) {
    throw ConfigError("pseudo-label vocabulary does not match the model's k_pseudo");
  }

  std::vector<const UtteranceRecord*> train_set, val_set;
  for (const auto& rec : corpus.records) {
    switch (rec.split) {
      case Split::train:
      case Split::validation:
      case Split::test_b:
        train_set.push_back(&rec);
        break;
      case Split::test_a:
        val_set.push_back(&rec);
        break;
      case Split::test_c:
        break;
    }
  }
  if (train_set.empty()) throw ValidationError("no pre-training utterances");
  if (val_set.empty()) throw ValidationError("no validation (test_a) utterances");
  for (const UtteranceRecord* rec : train_set) model.speaker_ordinal(rec->speaker_id);
  for (const UtteranceRecord* rec : val_set) model.speaker_ordinal(rec->speaker_id);

  std::map<std::string, int> train_lengths, val_lengths;
  for (const UtteranceRecord* rec : train_set) {
    train_lengths[rec->id] = model.config.frames_for(static_cast<int>(rec->samples.size()));
  }
  for (const UtteranceRecord* rec : val_set) {
    val_lengths[rec->id] = model.config.frames_for(static_cast<int>(rec->samples.size()));
  }
  MaskPlan val_plan = plan_masks(val_lengths, config, mix_seed(config.seed, "mask-val"));

  auto val_loss = [&]() {
    double sum = 0.0;
    long m = 0;
    for (const UtteranceRecord* rec : val_set) {
      sum += papt_loss(model, {rec}, labels, val_plan)->value(0, 0);
      m += static_cast<long>(val_plan.masked.at(rec->id).size());
    }
    return sum / static_cast<double>(m);
  };

  std::vector<ad::NodePtr> params;
  for (const auto& [name, node] : model.named_parameters()) params.push_back(node);
  Adam adam(params);

  long steps_per_epoch =
      (static_cast<long>(train_set.size()) + config.batch_size - 1) / config.batch_size;
  long total_steps = steps_per_epoch * config.epochs;

  PretrainHistory history;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<Matrix> best_state;

  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<const UtteranceRecord*> order = train_set;
    RngStream shuffle_rng(config.seed, "shuffle", static_cast<uint64_t>(epoch));
    shuffle_rng.shuffle(order);
    MaskPlan plan =
        plan_masks(train_lengths, config, mix_seed(config.seed, "mask-epoch", static_cast<uint64_t>(epoch)));

    double epoch_sum = 0.0;
    long epoch_m = 0;
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(config.batch_size)) {
      std::vector<const UtteranceRecord*> batch(
          order.begin() + static_cast<long>(at),
          order.begin() + static_cast<long>(std::min(order.size(),
                                                     at + static_cast<size_t>(config.batch_size))));
      long m = masked_count(plan, batch);
      ad::NodePtr loss = ad::scale(papt_loss(model, batch, labels, plan), 1.0 / static_cast<double>(m));
      double value = loss->value(0, 0);
      if (!std::isfinite(value)) {
        throw TrainingError("pre-training diverged at epoch " + std::to_string(epoch + 1) +
                            ": non-finite loss");
      }
      epoch_sum += value * static_cast<double>(m);
      epoch_m += m;
      ad::backward(loss);
      adam.step(scheduled_lr(step, total_steps, config.lr_max, config.warmup_fraction));
      adam.zero_grad();
      ++step;
    }
    history.train_loss.push_back(epoch_sum / static_cast<double>(epoch_m));

    double v = val_loss();
    if (!std::isfinite(v)) {
      throw TrainingError("pre-training diverged at epoch " + std::to_string(epoch + 1) +
                          ": non-finite validation loss");
    }
    history.val_loss.push_back(v);
    if (v < best_val) {
      best_val = v;
      history.best_epoch = epoch;
      best_state.clear();
      for (const auto& p : params) best_state.push_back(p->value);
    }
  }

  for (size_t i = 0; i < params.size(); ++i) params[i]->value = best_state[i];
  return history;
}

}  // namespace pser
