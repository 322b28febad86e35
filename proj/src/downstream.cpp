#include "pser/downstream.hpp"

#include "pser/optimizer.hpp"
#include "pser/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>

namespace pser {

namespace {

struct Moments {
  double mean = 0.0;
  double var = 0.0;  // population
};

Moments moments(const std::vector<double>& v) {
  Moments m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  for (double x : v) m.var += (x - m.mean) * (x - m.mean);
  m.var /= static_cast<double>(v.size());
  return m;
}

}  // namespace

double ccc(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ValidationError("ccc: sequences differ in length");
  if (x.size() < 2) throw ValidationError("ccc: need at least 2 values");
  Moments mx = moments(x), my = moments(y);
  if (mx.var == 0.0 && my.var == 0.0) {
    throw ValidationError("ccc: both sequences are constant");
  }
  double cov = 0.0;
  for (size_t i = 0; i < x.size(); ++i) cov += (x[i] - mx.mean) * (y[i] - my.mean);
  cov /= static_cast<double>(x.size());
  double d = mx.mean - my.mean;
  return 2.0 * cov / (mx.var + my.var + d * d);
}

ad::NodePtr ccc_loss(const ad::NodePtr& pred, const Vector& truth) {
  if (pred->value.cols() != 1) throw ShapeError("ccc_loss: predictions must be a column");
  Eigen::Index n = pred->value.rows();
  if (n != truth.size()) throw ValidationError("ccc_loss: prediction/truth length mismatch");
  if (n < 2) throw ValidationError("ccc_loss: need at least 2 values");

  double my = truth.mean();
  Vector yc = truth.array() - my;
  double vy = yc.squaredNorm() / static_cast<double>(n);
  Vector pc = pred->value.col(0).array() - pred->value.col(0).mean();
  if (vy == 0.0 && pc.squaredNorm() == 0.0) {
    throw ValidationError("ccc_loss: predictions and truth are both constant");
  }

  ad::NodePtr mx = ad::mean_all(pred);
  ad::NodePtr xc = ad::sub_bcast(pred, mx);
  Matrix yc_m(n, 1);
  yc_m.col(0) = yc;
  ad::NodePtr cov = ad::mean_all(ad::mul(xc, ad::constant(std::move(yc_m))));
  ad::NodePtr varx = ad::mean_all(ad::mul(xc, xc));
  Matrix my_m(1, 1);
  my_m(0, 0) = my;
  ad::NodePtr diff = ad::sub_bcast(mx, ad::constant(std::move(my_m)));
  Matrix vy_m(1, 1);
  vy_m(0, 0) = vy;
  ad::NodePtr denom = ad::add(ad::add(varx, ad::constant(std::move(vy_m))), ad::mul(diff, diff));
  ad::NodePtr concordance = ad::div(ad::scale(cov, 2.0), denom);
  return ad::sub(ad::constant(Matrix::Ones(1, 1)), concordance);
}

std::string target_name(Target t) { return t == Target::arousal ? "arousal" : "valence"; }

Target target_from_name(const std::string& name) {
  if (name == "arousal") return Target::arousal;
  if (name == "valence") return Target::valence;
  throw ValidationError("unknown target: " + name);
}

void FinetuneConfig::validate() const {
  if (epochs_max < 1) throw ConfigError("epochs_max must be at least 1");
  if (lr < 0.0) throw ConfigError("lr must be non-negative");
  if (patience < 1) throw ConfigError("patience must be at least 1");
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2 for a batch CCC");
  if (clip_norm < 0.0) throw ConfigError("clip_norm must be non-negative");
}

nlohmann::json FinetuneConfig::to_json() const {
  return nlohmann::json{{"epochs_max", epochs_max},
                        {"lr", lr},
                        {"patience", patience},
                        {"batch_size", batch_size},
                        {"clip_norm", clip_norm},
                        {"seed", seed}};
}

FinetuneConfig FinetuneConfig::from_json(const nlohmann::json& j) {
  FinetuneConfig c;
  c.epochs_max = j.value("epochs_max", c.epochs_max);
  c.lr = j.value("lr", c.lr);
  c.patience = j.value("patience", c.patience);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

// Pooled encoder outputs for a batch, one row per utterance.
ad::NodePtr pooled_batch(const EncoderModel& model,
                         const std::vector<const UtteranceRecord*>& batch) {
  std::vector<ad::NodePtr> rows;
  rows.reserve(batch.size());
  for (const UtteranceRecord* rec : batch) {
    int speaker = model.speaker_ordinal(rec->speaker_id);
    rows.push_back(ad::mean_rows(forward_features_node(model, rec->samples, speaker)));
  }
  return ad::concat_rows(rows);
}

std::vector<std::vector<const UtteranceRecord*>> make_batches(
    const std::vector<const UtteranceRecord*>& order, int batch_size) {
  std::vector<std::vector<const UtteranceRecord*>> batches;
  for (size_t at = 0; at < order.size(); at += static_cast<size_t>(batch_size)) {
    size_t end = std::min(order.size(), at + static_cast<size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<long>(at),
                         order.begin() + static_cast<long>(end));
  }
  // A singleton tail has no batch variance; fold it into the previous batch.
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back()[0]);
    batches.pop_back();
  }
  return batches;
}

// Deterministic re-estimation of batch-norm running statistics: a fixed-order
// pass over the training batches so the buffers are a pure function of the
// current parameters and data.
void estimate_bn_stats(EncoderModel& model,
                       const std::vector<std::vector<const UtteranceRecord*>>& batches,
                       double momentum) {
  if (model.interp.empty()) return;
  bool first = true;
  for (const auto& batch : batches) {
    ad::NodePtr pooled = pooled_batch(model, batch);
    std::vector<std::pair<Vector, Vector>> stats;
    interpreter_forward(model, pooled, true, nullptr, &stats);
    for (size_t i = 0; i < model.interp.size(); ++i) {
      Matrix mean = stats[i].first.transpose();
      Matrix var = stats[i].second.transpose();
      if (first) {
        model.interp[i].bn_rmean = mean;
        model.interp[i].bn_rvar = var;
      } else {
        model.interp[i].bn_rmean = (1.0 - momentum) * model.interp[i].bn_rmean + momentum * mean;
        model.interp[i].bn_rvar = (1.0 - momentum) * model.interp[i].bn_rvar + momentum * var;
      }
    }
    first = false;
  }
}

double validation_o_ccc(const EncoderModel& model,
                        const std::vector<const UtteranceRecord*>& val_set) {
  std::vector<double> pred, truth;
  pred.reserve(val_set.size());
  truth.reserve(val_set.size());
  for (const UtteranceRecord* rec : val_set) {
    int speaker = model.speaker_ordinal(rec->speaker_id);
    pred.push_back(predict_emotion(model, rec->samples, speaker));
    truth.push_back(*rec->label);
  }
  return ccc(pred, truth);
}

}  // namespace

FinetuneHistory finetune(EncoderModel& model, const std::vector<const UtteranceRecord*>& train_set,
                         const std::vector<const UtteranceRecord*>& val_set,
                         const FinetuneConfig& config, Target) {
  config.validate();
  if (train_set.size() < 2) {
    throw ValidationError("fine-tuning needs at least 2 labeled training utterances");
  }
  if (val_set.size() < 2) {
    throw ValidationError("fine-tuning needs at least 2 labeled validation utterances");
  }
  for (const UtteranceRecord* rec : train_set) {
    if (!rec->label) throw ValidationError("unlabeled training utterance " + rec->id);
  }
  for (const UtteranceRecord* rec : val_set) {
    if (!rec->label) throw ValidationError("unlabeled validation utterance " + rec->id);
  }

  std::vector<ad::NodePtr> params;
  for (const auto& [name, node] : model.named_parameters()) params.push_back(node);
  Adam adam(params);
  RngStream dropout_rng(config.seed, "dropout");

  FinetuneHistory history;
  EarlyStopper stopper{config.patience};
  std::vector<Matrix> best_params;
  std::vector<std::pair<Matrix, Matrix>> best_bn;

  std::vector<std::vector<const UtteranceRecord*>> fixed_batches =
      make_batches(train_set, config.batch_size);

  for (int epoch = 0; epoch < config.epochs_max; ++epoch) {
    std::vector<const UtteranceRecord*> order = train_set;
    RngStream shuffle_rng(config.seed, "ft-shuffle", static_cast<uint64_t>(epoch));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    long n_batches = 0;
    for (const auto& batch : make_batches(order, config.batch_size)) {
      Vector truth(batch.size());
      for (size_t i = 0; i < batch.size(); ++i) truth(static_cast<Eigen::Index>(i)) = *batch[i]->label;
      ad::NodePtr pooled = pooled_batch(model, batch);
      ad::NodePtr preds = interpreter_forward(model, pooled, true, &dropout_rng);
      ad::NodePtr loss = ccc_loss(preds, truth);
      double value = loss->value(0, 0);
      if (!std::isfinite(value)) {
        throw TrainingError("fine-tuning diverged at epoch " + std::to_string(epoch + 1) +
                            ": non-finite loss");
      }
      loss_sum += value;
      ++n_batches;
      ad::backward(loss);
      if (config.clip_norm > 0.0) clip_grad_norm(params, config.clip_norm);
      adam.step(config.lr);
      adam.zero_grad();
    }
    history.train_loss.push_back(loss_sum / static_cast<double>(n_batches));

    estimate_bn_stats(model, fixed_batches, 0.1);
    double v = validation_o_ccc(model, val_set);
    if (!std::isfinite(v)) {
      throw TrainingError("fine-tuning diverged at epoch " + std::to_string(epoch + 1) +
                          ": non-finite validation metric");
    }
    history.val_ccc.push_back(v);
    history.epochs_run = epoch + 1;

    const bool stop = stopper.update(v, epoch);
    if (stopper.improved(epoch)) {
      history.best_epoch = epoch;
      best_params.clear();
      for (const auto& p : params) best_params.push_back(p->value);
      best_bn.clear();
      for (const auto& il : model.interp) best_bn.emplace_back(il.bn_rmean, il.bn_rvar);
    }
    if (stop) break;
  }

  for (size_t i = 0; i < params.size(); ++i) params[i]->value = best_params[i];
  for (size_t i = 0; i < model.interp.size(); ++i) {
    model.interp[i].bn_rmean = best_bn[i].first;
    model.interp[i].bn_rvar = best_bn[i].second;
  }
  return history;
}

FinetuneHistory finetune(EncoderModel& model, const Corpus& corpus, const FinetuneConfig& config,
                         Target target) {
  std::vector<const UtteranceRecord*> train_set, val_set;
  for (const auto& rec : corpus.records) {
    if (rec.split == Split::train && rec.label) train_set.push_back(&rec);
    if (rec.split == Split::validation && rec.label) val_set.push_back(&rec);
  }
  if (train_set.empty()) throw ValidationError("no labeled training data");
  return finetune(model, train_set, val_set, config, target);
}

std::map<std::string, std::vector<size_t>> PredictionSet::by_speaker() const {
  std::map<std::string, std::vector<size_t>> out;
  for (size_t i = 0; i < entries.size(); ++i) out[entries[i].speaker_id].push_back(i);
  return out;
}

PredictionSet predict_all(const EncoderModel& model, const Corpus& corpus, Split split,
                          const PredictOptions& options) {
  PredictionSet out;
  for (const auto& rec : corpus.records) {
    if (rec.split != split) continue;
    std::optional<int> speaker;
    if (options.use_speaker) {
      auto it = model.speaker_lookup.find(rec.speaker_id);
      if (it != model.speaker_lookup.end()) {
        speaker = it->second;
      } else {
        auto proxy = options.proxies.find(rec.speaker_id);
        if (proxy == options.proxies.end()) {
          throw LookupError("speaker " + rec.speaker_id +
                            " is not in the model's speaker table and no proxy was supplied; "
                            "select one with proxy_speaker");
        }
        speaker = model.speaker_ordinal(proxy->second);
      }
    }
    PredictionEntry e;
    e.id = rec.id;
    e.speaker_id = rec.speaker_id;
    e.pred = predict_emotion(model, rec.samples, speaker);
    e.truth = rec.label;
    out.entries.push_back(std::move(e));
  }
  return out;
}

void write_predictions(const PredictionSet& preds, const std::filesystem::path& path) {
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open predictions for writing: " + path.string());
  out << nlohmann::json{{"format", "pser-predictions"}, {"version", 1}}.dump() << "\n";
  for (const auto& e : preds.entries) {
    nlohmann::json j{{"id", e.id}, {"speaker_id", e.speaker_id}, {"pred", e.pred}};
    if (e.truth) {
      j["truth"] = *e.truth;
    } else {
      j["truth"] = nullptr;
    }
    out << j.dump() << "\n";
  }
  if (!out) throw ParseError("failed writing predictions: " + path.string());
}

PredictionSet read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open predictions: " + path.string());
  std::string line;
  int line_no = 0;
  if (!std::getline(in, line)) throw ParseError("empty predictions file", 1);
  ++line_no;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad predictions header: ") + e.what(), line_no);
  }
  if (header.value("format", "") != "pser-predictions" || header.value("version", 0) != 1) {
    throw ParseError("not a predictions file: " + path.string(), 1);
  }
  PredictionSet out;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      PredictionEntry e;
      e.id = j.at("id").get<std::string>();
      e.speaker_id = j.at("speaker_id").get<std::string>();
      e.pred = j.at("pred").get<double>();
      if (!j.at("truth").is_null()) e.truth = j.at("truth").get<double>();
      if (!seen.insert(e.id).second) {
        throw ParseError("duplicate prediction id " + e.id, line_no);
      }
      out.entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("bad prediction record: ") + e.what(), line_no);
    }
  }
  return out;
}

}  // namespace pser
