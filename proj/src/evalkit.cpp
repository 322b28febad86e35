#include "pser/evalkit.hpp"

#include "pser/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include <json.hpp>

namespace pser {

namespace {

using nlohmann::json;

double vec_mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double vec_pop_std(const std::vector<double>& v) {
  const double m = vec_mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

std::string fnum(double v, int prec = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return std::string(buf);
}

std::string render_table(const std::vector<std::string>& header,
                         const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());

  auto emit = [&](std::ostringstream& out, const std::vector<std::string>& row) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c > 0) out << "  ";
      if (c == 0)
        out << row[c] << std::string(width[c] - row[c].size(), ' ');
      else
        out << std::string(width[c] - row[c].size(), ' ') << row[c];
    }
    out << '\n';
  };

  std::ostringstream out;
  emit(out, header);
  std::ostringstream rule;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c > 0) rule << "  ";
    rule << std::string(width[c], '-');
  }
  out << rule.str() << '\n';
  for (const auto& row : rows) emit(out, row);
  return out.str();
}

struct SpeakerSeries {
  std::vector<double> pred;
  std::vector<double> truth;
};

// Groups labeled predictions by speaker, insisting on truth values and at
// least two predictions per speaker.
std::map<std::string, SpeakerSeries> grouped_series(const PredictionSet& preds) {
  if (preds.entries.empty()) throw ValidationError("no predictions to evaluate");
  std::map<std::string, SpeakerSeries> groups;
  for (const auto& e : preds.entries) {
    if (!e.truth)
      throw ValidationError("prediction for utterance '" + e.id + "' has no truth label");
    auto& g = groups[e.speaker_id];
    g.pred.push_back(e.pred);
    g.truth.push_back(*e.truth);
  }
  for (const auto& [sid, g] : groups) {
    if (g.pred.size() < 2)
      throw ValidationError("speaker '" + sid + "' has fewer than 2 labeled predictions");
  }
  return groups;
}

}  // namespace

EvalReport evaluate(const PredictionSet& preds) {
  const auto groups = grouped_series(preds);

  EvalReport report;
  std::vector<double> all_pred;
  std::vector<double> all_truth;
  std::vector<double> speaker_cccs;
  for (const auto& [sid, g] : groups) {
    all_pred.insert(all_pred.end(), g.pred.begin(), g.pred.end());
    all_truth.insert(all_truth.end(), g.truth.begin(), g.truth.end());
    try {
      const double c = ccc(g.pred, g.truth);
      report.per_speaker_ccc[sid] = c;
      speaker_cccs.push_back(c);
    } catch (const ValidationError&) {
      report.excluded_speakers.push_back(sid);
    }
  }
  report.o_ccc = ccc(all_pred, all_truth);
  if (speaker_cccs.empty())
    throw ValidationError("all speakers degenerate, A-CCC undefined");
  report.a_ccc = vec_mean(speaker_cccs);
  report.a_ccc_std = vec_pop_std(speaker_cccs);
  return report;
}

double kl_gaussian(double mu0, double sigma0, double mu1, double sigma1) {
  if (!(sigma0 > 0.0) || !(sigma1 > 0.0))
    throw ValidationError("kl_gaussian requires positive standard deviations");
  return std::log(sigma1 / sigma0) +
         (sigma0 * sigma0 + (mu0 - mu1) * (mu0 - mu1)) / (2.0 * sigma1 * sigma1) - 0.5;
}

double feature_kl(const Matrix& speaker_feats, const Matrix& train_feats, bool* floored) {
  if (speaker_feats.rows() < 2 || train_feats.rows() < 2)
    throw ValidationError("feature_kl needs at least 2 pooled vectors per side");
  if (speaker_feats.cols() != train_feats.cols())
    throw ShapeError("feature dimensionality mismatch in feature_kl");

  constexpr double kFloor = 1e-6;
  bool hit_floor = false;
  auto moments = [&](const Matrix& m, Eigen::Index c) {
    const double mu = m.col(c).mean();
    const double var = (m.col(c).array() - mu).square().mean();
    double sigma = std::sqrt(var);
    if (sigma < kFloor) {
      sigma = kFloor;
      hit_floor = true;
    }
    return std::pair<double, double>(mu, sigma);
  };

  double total = 0.0;
  for (Eigen::Index c = 0; c < speaker_feats.cols(); ++c) {
    const auto [mu0, s0] = moments(speaker_feats, c);
    const auto [mu1, s1] = moments(train_feats, c);
    total += kl_gaussian(mu0, s0, mu1, s1);
  }
  if (floored) *floored = hit_floor;
  return total;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ValidationError("pearson inputs differ in length");
  if (x.size() < 2) throw ValidationError("pearson needs at least 2 points");
  const double mx = vec_mean(x);
  const double my = vec_mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0)
    throw ValidationError("pearson undefined for constant input");
  return sxy / std::sqrt(sxx * syy);
}

ShiftReport shift_analysis(const EncoderModel& model, const Corpus& corpus,
                           const PredictionSet& preds) {
  const auto groups = grouped_series(preds);

  std::map<std::string, const UtteranceRecord*> by_id;
  for (const auto& rec : corpus.records) by_id[rec.id] = &rec;

  const auto train_records = corpus.split_records(Split::train);
  if (train_records.size() < 2)
    throw ValidationError("shift analysis needs at least 2 training utterances");
  Matrix train_feats(static_cast<Eigen::Index>(train_records.size()), model.config.d_model);
  std::vector<double> train_labels;
  for (std::size_t i = 0; i < train_records.size(); ++i) {
    const auto* rec = train_records[i];
    const Matrix feats = forward_features(model, rec->samples, std::nullopt);
    train_feats.row(static_cast<Eigen::Index>(i)) = feats.colwise().mean();
    if (!rec->label)
      throw ValidationError("training utterance '" + rec->id + "' has no label");
    train_labels.push_back(*rec->label);
  }
  const double train_mu = vec_mean(train_labels);
  double train_sigma = vec_pop_std(train_labels);

  ShiftReport report;
  constexpr double kFloor = 1e-6;
  if (train_sigma < kFloor) {
    train_sigma = kFloor;
    report.kl_floored = true;
  }

  // Per-speaker shift magnitudes and performance.
  std::map<std::string, std::vector<const PredictionEntry*>> by_speaker;
  for (const auto& e : preds.entries) by_speaker[e.speaker_id].push_back(&e);

  std::vector<double> fkls, lkls, cccs;
  for (const auto& [sid, entries] : by_speaker) {
    Matrix spk_feats(static_cast<Eigen::Index>(entries.size()), model.config.d_model);
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto it = by_id.find(entries[i]->id);
      if (it == by_id.end())
        throw LookupError("utterance '" + entries[i]->id + "' not present in corpus");
      const Matrix feats = forward_features(model, it->second->samples, std::nullopt);
      spk_feats.row(static_cast<Eigen::Index>(i)) = feats.colwise().mean();
    }
    bool fl = false;
    const double fkl = feature_kl(spk_feats, train_feats, &fl);
    report.kl_floored = report.kl_floored || fl;

    const auto& g = groups.at(sid);
    const double spk_mu = vec_mean(g.truth);
    double spk_sigma = vec_pop_std(g.truth);
    if (spk_sigma < kFloor) {
      spk_sigma = kFloor;
      report.kl_floored = true;
    }
    const double lkl = kl_gaussian(spk_mu, spk_sigma, train_mu, train_sigma);

    double c = 0.0;
    try {
      c = ccc(g.pred, g.truth);
    } catch (const ValidationError&) {
      report.excluded_speakers.push_back(sid);
      continue;
    }
    report.per_speaker[sid] = SpeakerShift{fkl, lkl, c};
    fkls.push_back(fkl);
    lkls.push_back(lkl);
    cccs.push_back(c);
  }

  if (fkls.size() < 2)
    throw ValidationError("shift analysis needs at least 2 non-degenerate speakers");
  report.pcc_feature_perf = pearson(fkls, cccs);
  report.pcc_label_perf = pearson(lkls, cccs);
  report.pcc_feature_label = pearson(fkls, lkls);
  return report;
}

namespace {

double o_ccc_on_split(const EncoderModel& model, const Corpus& corpus, Split split) {
  const PredictionSet preds = predict_all(model, corpus, split, PredictOptions{});
  std::vector<double> p, t;
  for (const auto& e : preds.entries) {
    if (!e.truth)
      throw ValidationError("utterance '" + e.id + "' has no label for evaluation");
    p.push_back(e.pred);
    t.push_back(*e.truth);
  }
  return ccc(p, t);
}

}  // namespace

std::vector<GapRow> personalization_gap(const Corpus& corpus, const std::vector<int>& k_values,
                                        const GapOptions& options) {
  if (k_values.empty()) throw ValidationError("no subset sizes given");
  for (std::size_t i = 0; i < k_values.size(); ++i) {
    if (k_values[i] < 1) throw ValidationError("subset sizes must be positive");
    if (i > 0 && k_values[i] <= k_values[i - 1])
      throw ValidationError("subset sizes must be strictly ascending");
  }

  std::vector<std::string> train_speakers = corpus.speakers_of(Split::train);
  if (k_values.back() > static_cast<int>(train_speakers.size()))
    throw ValidationError("subset size " + std::to_string(k_values.back()) +
                          " exceeds the " + std::to_string(train_speakers.size()) +
                          " available training speakers");
  RngStream perm_rng(options.seed, "gap-speakers");
  perm_rng.shuffle(train_speakers);

  int n_removed = options.n_removed;
  if (n_removed < 0) n_removed = static_cast<int>(corpus.speakers_of(Split::test_a).size());

  const auto speaker_ids = corpus.seen_speakers();
  const auto test_a_records = corpus.split_records(Split::test_a);

  EncoderModel base = init_model(options.encoder, speaker_ids, options.seed);
  if (options.pt) {
    const auto labels = make_pseudo_labels(base, corpus, base.config.k_pseudo, options.seed);
    run_papt(base, corpus, labels, *options.pt);
  }

  auto utterances_of = [&](const std::vector<std::string>& subset) {
    std::vector<const UtteranceRecord*> out;
    for (const auto& rec : corpus.records) {
      if (rec.split != Split::train) continue;
      if (std::find(subset.begin(), subset.end(), rec.speaker_id) != subset.end())
        out.push_back(&rec);
    }
    return out;
  };

  std::vector<GapRow> rows;
  for (int k : k_values) {
    const std::vector<std::string> subset(train_speakers.begin(), train_speakers.begin() + k);

    GapRow row;
    row.k = k;

    // Cells run a fixed epoch budget and select on their own training fit:
    // the shared validation speakers would penalize exactly the
    // target-speaker adaptation the dependent cell is meant to measure.
    auto run_cell = [&](std::vector<const UtteranceRecord*> train_set) {
      EncoderModel model = base;
      finetune(model, train_set, train_set, options.ft, options.target);
      return o_ccc_on_split(model, corpus, Split::test_b);
    };

    // Independent cell: the k-speaker subset alone.
    row.ccc_independent = run_cell(utterances_of(subset));

    // Dependent cell: drop the tail of the subset, add the target speakers'
    // adaptation data.
    {
      const int keep = std::max(0, k - n_removed);
      const std::vector<std::string> reduced(train_speakers.begin(), train_speakers.begin() + keep);
      auto train_set = utterances_of(reduced);
      if (options.include_test_a)
        train_set.insert(train_set.end(), test_a_records.begin(), test_a_records.end());
      row.ccc_dependent = run_cell(std::move(train_set));
    }

    rows.push_back(row);
  }
  return rows;
}

std::vector<FusionRow> ablate_fusion(const Corpus& corpus, const PseudoLabelSet& labels,
                                     const AblateOptions& options) {
  const auto speaker_ids = corpus.seen_speakers();
  std::vector<FusionRow> rows;
  for (Fusion fusion : {Fusion::Last, Fusion::First, Fusion::Prefix, Fusion::None}) {
    EncoderConfig cfg = options.encoder;
    cfg.fusion = fusion;
    EncoderModel model = init_model(cfg, speaker_ids, options.seed);
    const PretrainHistory pt = run_papt(model, corpus, labels, options.pt);

    FusionRow row;
    row.fusion = fusion;
    row.l_pt_val = pt.val_loss.at(static_cast<std::size_t>(pt.best_epoch));

    finetune(model, corpus, options.ft, options.target);
    const PredictionSet preds = predict_all(model, corpus, Split::test_b, PredictOptions{});
    row.a_ccc = evaluate(preds).a_ccc;
    rows.push_back(row);
  }
  return rows;
}

std::string eval_report_ndjson(const EvalReport& r) {
  std::ostringstream out;
  out << json{{"format", "pser-eval-report"}, {"version", 1}}.dump() << '\n';
  out << json{{"o_ccc", r.o_ccc},
              {"a_ccc", r.a_ccc},
              {"a_ccc_std", r.a_ccc_std},
              {"excluded_speakers", r.excluded_speakers}}
             .dump()
      << '\n';
  for (const auto& [sid, c] : r.per_speaker_ccc)
    out << json{{"speaker_id", sid}, {"ccc", c}}.dump() << '\n';
  return out.str();
}

std::string eval_report_table(const EvalReport& r) {
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"o_ccc", fnum(r.o_ccc)});
  rows.push_back({"a_ccc", fnum(r.a_ccc)});
  rows.push_back({"a_ccc_std", fnum(r.a_ccc_std)});
  for (const auto& [sid, c] : r.per_speaker_ccc) rows.push_back({"ccc[" + sid + "]", fnum(c)});
  for (const auto& sid : r.excluded_speakers) rows.push_back({"ccc[" + sid + "]", "excluded"});
  return render_table({"metric", "value"}, rows);
}

std::string shift_report_ndjson(const ShiftReport& r) {
  std::ostringstream out;
  out << json{{"format", "pser-shift-report"}, {"version", 1}}.dump() << '\n';
  out << json{{"pcc_feature_perf", r.pcc_feature_perf},
              {"pcc_label_perf", r.pcc_label_perf},
              {"pcc_feature_label", r.pcc_feature_label},
              {"excluded_speakers", r.excluded_speakers},
              {"kl_floored", r.kl_floored}}
             .dump()
      << '\n';
  for (const auto& [sid, s] : r.per_speaker)
    out << json{{"speaker_id", sid},
                {"feature_kl", s.feature_kl},
                {"label_kl", s.label_kl},
                {"ccc", s.ccc}}
               .dump()
        << '\n';
  return out.str();
}

std::string shift_report_table(const ShiftReport& r) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& [sid, s] : r.per_speaker)
    rows.push_back({sid, fnum(s.feature_kl), fnum(s.label_kl), fnum(s.ccc)});
  std::ostringstream out;
  out << render_table({"speaker", "feature_kl", "label_kl", "ccc"}, rows);
  out << '\n';
  std::vector<std::vector<std::string>> summary;
  summary.push_back({"pcc_feature_perf", fnum(r.pcc_feature_perf)});
  summary.push_back({"pcc_label_perf", fnum(r.pcc_label_perf)});
  summary.push_back({"pcc_feature_label", fnum(r.pcc_feature_label)});
  out << render_table({"correlation", "value"}, summary);
  return out.str();
}

std::string gap_report_ndjson(const std::vector<GapRow>& rows) {
  std::ostringstream out;
  out << json{{"format", "pser-gap-report"}, {"version", 1}}.dump() << '\n';
  for (const auto& row : rows)
    out << json{{"k", row.k},
                {"ccc_dependent", row.ccc_dependent},
                {"ccc_independent", row.ccc_independent},
                {"gap", row.ccc_dependent - row.ccc_independent}}
               .dump()
        << '\n';
  return out.str();
}

std::string gap_report_table(const std::vector<GapRow>& rows) {
  std::vector<std::vector<std::string>> body;
  for (const auto& row : rows)
    body.push_back({std::to_string(row.k), fnum(row.ccc_dependent), fnum(row.ccc_independent),
                    fnum(row.ccc_dependent - row.ccc_independent)});
  return render_table({"k", "ccc_dependent", "ccc_independent", "gap"}, body);
}

std::string fusion_report_ndjson(const std::vector<FusionRow>& rows) {
  std::ostringstream out;
  out << json{{"format", "pser-fusion-report"}, {"version", 1}}.dump() << '\n';
  for (const auto& row : rows)
    out << json{{"fusion", fusion_name(row.fusion)},
                {"l_pt_val", row.l_pt_val},
                {"a_ccc", row.a_ccc}}
               .dump()
        << '\n';
  return out.str();
}

std::string fusion_report_table(const std::vector<FusionRow>& rows) {
  std::vector<std::vector<std::string>> body;
  for (const auto& row : rows)
    body.push_back({fusion_name(row.fusion), fnum(row.l_pt_val), fnum(row.a_ccc)});
  return render_table({"fusion", "l_pt_val", "a_ccc"}, body);
}

}  // namespace pser
