#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "pser/downstream.hpp"
#include "pser/optimizer.hpp"
#include "pser/rng.hpp"

#include "helpers.hpp"

using namespace pser;

namespace {

// Independent CCC oracle written against the textbook definition.
double ccc_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  const size_t n = x.size();
  double mx = 0, my = 0;
  for (size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= double(n);
  my /= double(n);
  double vx = 0, vy = 0, cov = 0;
  for (size_t i = 0; i < n; ++i) {
    vx += (x[i] - mx) * (x[i] - mx);
    vy += (y[i] - my) * (y[i] - my);
    cov += (x[i] - mx) * (y[i] - my);
  }
  vx /= double(n);
  vy /= double(n);
  cov /= double(n);
  return 2.0 * cov / (vx + vy + (mx - my) * (mx - my));
}

std::map<std::string, double> snapshot(const EncoderModel& m) {
  std::map<std::string, double> out;
  for (auto& [name, p] : m.named_parameters()) out[name] = p->value.sum();
  return out;
}

}  // namespace

TEST_CASE("ccc oracles") {
  CHECK(ccc({1, 2, 3}, {1, 2, 3}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(ccc({1, 2, 3}, {4, 4, 4}) == doctest::Approx(0.0).scale(1.0).epsilon(1e-15));
  // hand-derived: means 2, 7/3; vars 2/3, 14/9; cov 1; shift (1/3)^2
  CHECK(ccc({1, 2, 3}, {1, 2, 4}) == doctest::Approx(6.0 / 7.0).epsilon(1e-12));
}

TEST_CASE("ccc agrees with an independent implementation on random pairs") {
  RngStream rng(61);
  for (int trial = 0; trial < 200; ++trial) {
    const size_t n = size_t(2 + rng.uniform_int(40));
    std::vector<double> x(n);
    std::vector<double> y(n);
    double scale = std::exp(rng.uniform(-2.0, 2.0));
    for (size_t i = 0; i < n; ++i) {
      x[i] = rng.normal(rng.uniform(-3, 3), scale);
      y[i] = 0.3 * x[i] + rng.normal();
    }
    double got = ccc(x, y);
    CHECK(got == doctest::Approx(ccc_oracle(x, y)).epsilon(1e-12));
    CHECK(std::abs(got) <= 1.0 + 1e-12);
    CHECK(ccc(y, x) == doctest::Approx(got).epsilon(1e-12));  // symmetric
  }
}

TEST_CASE("ccc is invariant to paired permutations") {
  RngStream rng(62);
  std::vector<double> x, y;
  for (int i = 0; i < 25; ++i) {
    x.push_back(rng.normal());
    y.push_back(rng.normal());
  }
  double base = ccc(x, y);
  std::vector<size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), size_t(0));
  rng.shuffle(idx);
  std::vector<double> xp, yp;
  for (size_t i : idx) {
    xp.push_back(x[i]);
    yp.push_back(y[i]);
  }
  CHECK(ccc(xp, yp) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("ccc input validation") {
  CHECK_THROWS_AS(ccc({1, 2}, {1, 2, 3}), ValidationError);
  CHECK_THROWS_AS(ccc({1}, {1}), ValidationError);
  CHECK_THROWS_AS(ccc({2, 2, 2}, {3, 3, 3}), ValidationError);  // both constant
}

TEST_CASE("ccc_loss is zero at perfect agreement and positive otherwise") {
  Vector truth(4);
  truth << 1, 2, 3, 4;
  Matrix pred = truth;
  auto l0 = ccc_loss(ad::constant(pred), truth);
  CHECK(l0->value(0, 0) == doctest::Approx(0.0).scale(1.0).epsilon(1e-14));

  Matrix degraded = 0.5 * truth.array() + 1.0;
  auto l1 = ccc_loss(ad::constant(degraded), truth);
  CHECK(l1->value(0, 0) > 0.05);
  CHECK(l1->value(0, 0) == doctest::Approx(1.0 - ccc({degraded(0), degraded(1), degraded(2),
                                                      degraded(3)},
                                                     {1, 2, 3, 4})).epsilon(1e-12));
}

TEST_CASE("ccc_loss gradient matches finite differences") {
  RngStream rng(63);
  const int B = 8;
  Vector truth(B);
  for (int i = 0; i < B; ++i) truth(i) = rng.uniform(1.0, 7.0);
  auto pred = ad::leaf(test::random_matrix(rng, B, 1, 1.5));
  pred->value.array() += 4.0;

  auto loss = ccc_loss(pred, truth);
  ad::backward(loss);
  Matrix grad = pred->grad;

  const double h = 1e-6;
  for (int i = 0; i < B; ++i) {
    double orig = pred->value(i, 0);
    pred->value(i, 0) = orig + h;
    double up = ccc_loss(pred, truth)->value(0, 0);
    pred->value(i, 0) = orig - h;
    double dn = ccc_loss(pred, truth)->value(0, 0);
    pred->value(i, 0) = orig;
    double fd = (up - dn) / (2 * h);
    CHECK(std::abs(fd - grad(i, 0)) / std::max(1.0, std::abs(fd)) < 1e-6);
  }
}

TEST_CASE("ccc_loss validation") {
  Vector truth(3);
  truth << 1, 2, 3;
  CHECK_THROWS_AS(ccc_loss(ad::constant(Matrix::Ones(3, 2)), truth), ShapeError);
  CHECK_THROWS_AS(ccc_loss(ad::constant(Matrix::Ones(2, 1)), truth), ValidationError);
  Vector flat = Vector::Constant(3, 2.0);
  CHECK_THROWS_AS(ccc_loss(ad::constant(Matrix::Constant(3, 1, 2.0)), flat), ValidationError);
}

TEST_CASE("early stopper follows the scripted trace") {
  EarlyStopper s;
  s.patience = 2;
  CHECK(!s.update(0.3, 0));
  CHECK(!s.update(0.4, 1));
  CHECK(!s.update(0.39, 2));
  CHECK(s.update(0.38, 3));  // second epoch without improvement
  CHECK(s.best_epoch == 1);
  CHECK(s.best == 0.4);
}

TEST_CASE("early stopper resets its counter on strict improvement") {
  EarlyStopper s;
  s.patience = 2;
  CHECK(!s.update(0.1, 0));
  CHECK(!s.update(0.05, 1));
  CHECK(!s.update(0.2, 2));  // reset
  CHECK(!s.update(0.15, 3));
  CHECK(s.update(0.15, 4));  // ties are not improvements
  CHECK(s.best_epoch == 2);
}

TEST_CASE("finetune config validation") {
  FinetuneConfig c;
  SUBCASE("epochs") {
    c.epochs_max = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }
  SUBCASE("batch floor") {
    c.batch_size = 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }
  SUBCASE("negative clip") {
    c.clip_norm = -1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }
  SUBCASE("json carries clip_norm") {
    c.clip_norm = 2.5;
    FinetuneConfig back = FinetuneConfig::from_json(c.to_json());
    CHECK(back.clip_norm == 2.5);
  }
}

TEST_CASE("gradient clipping caps the joint norm") {
  auto a = ad::leaf(Matrix::Ones(2, 2));
  auto b = ad::leaf(Matrix::Ones(1, 2));
  a->grad = Matrix::Constant(2, 2, 3.0);
  b->grad = Matrix::Constant(1, 2, 4.0);
  double norm = std::sqrt(4 * 9.0 + 2 * 16.0);

  double reported = clip_grad_norm({a, b}, 1.0);
  CHECK(reported == doctest::Approx(norm).epsilon(1e-12));
  double after = std::sqrt(a->grad.squaredNorm() + b->grad.squaredNorm());
  CHECK(after == doctest::Approx(1.0).epsilon(1e-12));

  // already inside the cap: untouched
  a->grad.setConstant(0.01);
  b->grad.setConstant(0.01);
  clip_grad_norm({a, b}, 1.0);
  CHECK(a->grad(0, 0) == 0.01);

  CHECK_THROWS_AS(clip_grad_norm({a, b}, 0.0), ConfigError);
}

TEST_CASE("zero learning rate leaves the model untouched") {
  Corpus corpus = test::tiny_corpus(71);
  EncoderModel model = init_model(test::tiny_config(), corpus.seen_speakers(), 71);
  FinetuneConfig fc;
  fc.epochs_max = 2;
  fc.patience = 5;
  fc.lr = 0.0;
  fc.batch_size = 4;

  auto before = snapshot(model);
  FinetuneHistory hist = finetune(model, corpus, fc);
  CHECK(snapshot(model) == before);
  REQUIRE(hist.val_ccc.size() >= 1);
  for (double v : hist.val_ccc) CHECK(v == hist.val_ccc[0]);
}

TEST_CASE("finetuning reduces the training loss and restores the best epoch") {
  Corpus corpus = test::tiny_corpus(72);
  EncoderModel model = init_model(test::tiny_config(), corpus.seen_speakers(), 72);
  FinetuneConfig fc;
  fc.epochs_max = 8;
  fc.patience = 8;  // no early exit; watch the full trace
  fc.lr = 1e-3;
  fc.batch_size = 4;
  fc.seed = 72;

  FinetuneHistory hist = finetune(model, corpus, fc);
  REQUIRE(hist.epochs_run >= 2);
  CHECK(hist.train_loss.back() < hist.train_loss.front());
  REQUIRE(hist.best_epoch >= 0);
  double best = *std::max_element(hist.val_ccc.begin(), hist.val_ccc.end());
  CHECK(hist.val_ccc[size_t(hist.best_epoch)] == doctest::Approx(best));
}

TEST_CASE("finetune is seed-deterministic") {
  FinetuneConfig fc;
  fc.epochs_max = 3;
  fc.patience = 3;
  fc.lr = 1e-3;
  fc.batch_size = 4;
  fc.seed = 5;

  Corpus corpus = test::tiny_corpus(73);
  EncoderModel a = init_model(test::tiny_config(), corpus.seen_speakers(), 73);
  EncoderModel b = init_model(test::tiny_config(), corpus.seen_speakers(), 73);
  FinetuneHistory ha = finetune(a, corpus, fc);
  FinetuneHistory hb = finetune(b, corpus, fc);
  CHECK(ha.train_loss == hb.train_loss);
  CHECK(ha.val_ccc == hb.val_ccc);
  CHECK(snapshot(a) == snapshot(b));
}

TEST_CASE("finetune validates its data") {
  Corpus corpus = test::tiny_corpus(74);
  EncoderModel model = init_model(test::tiny_config(), corpus.seen_speakers(), 74);
  FinetuneConfig fc;
  auto train = corpus.split_records(Split::train);
  std::vector<const UtteranceRecord*> one{train[0]};
  CHECK_THROWS_AS(finetune(model, one, train, fc), ValidationError);

  Corpus unlabeled = corpus;
  for (auto& r : unlabeled.records) r.label.reset();
  CHECK_THROWS_AS(finetune(model, unlabeled, fc), ValidationError);
}

TEST_CASE("predict_all covers the requested split in corpus order") {
  Corpus corpus = test::tiny_corpus(75);
  EncoderModel model = init_model(test::tiny_config(), corpus.seen_speakers(), 75);
  PredictionSet preds = predict_all(model, corpus, Split::test_b);
  auto recs = corpus.split_records(Split::test_b);
  REQUIRE(preds.entries.size() == recs.size());
  for (size_t i = 0; i < recs.size(); ++i) {
    CHECK(preds.entries[i].id == recs[i]->id);
    CHECK(preds.entries[i].speaker_id == recs[i]->speaker_id);
    CHECK(std::isfinite(preds.entries[i].pred));
    CHECK(preds.entries[i].truth == recs[i]->label);  // labels ride along when known
  }

  PredictionSet again = predict_all(model, corpus, Split::test_b);
  for (size_t i = 0; i < preds.entries.size(); ++i)
    CHECK(again.entries[i].pred == preds.entries[i].pred);
}

TEST_CASE("predict_all on unseen speakers needs proxies or no speaker path") {
  Corpus corpus = test::tiny_corpus(76);
  EncoderModel model = init_model(test::tiny_config(), corpus.seen_speakers(), 76);

  CHECK_THROWS_AS(predict_all(model, corpus, Split::test_c), LookupError);

  PredictOptions no_spk;
  no_spk.use_speaker = false;
  CHECK_NOTHROW(predict_all(model, corpus, Split::test_c, no_spk));

  PredictOptions proxied;
  proxied.proxies[corpus.speakers_of(Split::test_c)[0]] = corpus.speakers_of(Split::train)[0];
  CHECK_NOTHROW(predict_all(model, corpus, Split::test_c, proxied));
}

TEST_CASE("by_speaker groups entry indices in order") {
  PredictionSet set;
  set.entries = {{"u0", "a", 1.0, {}}, {"u1", "b", 2.0, {}}, {"u2", "a", 3.0, {}}};
  auto groups = set.by_speaker();
  REQUIRE(groups.size() == 2);
  CHECK(groups["a"] == std::vector<size_t>{0, 2});
  CHECK(groups["b"] == std::vector<size_t>{1});
}

TEST_CASE("prediction files round-trip") {
  auto dir = test::tmp_dir("preds_rt");
  PredictionSet set;
  set.entries = {{"u0", "a", 3.25, 3.5}, {"u1", "b", 4.0, std::nullopt}};
  write_predictions(set, dir / "preds.ndjson");
  PredictionSet back = read_predictions(dir / "preds.ndjson");
  REQUIRE(back.entries.size() == 2);
  CHECK(back.entries[0].id == "u0");
  CHECK(back.entries[0].pred == 3.25);
  CHECK(back.entries[0].truth == 3.5);
  CHECK(!back.entries[1].truth.has_value());
}

TEST_CASE("prediction parsing reports line numbers and duplicates") {
  auto dir = test::tmp_dir("preds_err");
  PredictionSet set;
  set.entries = {{"u0", "a", 3.0, {}}};
  write_predictions(set, dir / "preds.ndjson");

  std::ifstream in(dir / "preds.ndjson");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  in.close();

  {
    std::ofstream out(dir / "dup.ndjson");
    out << header << "\n" << row << "\n" << row << "\n";
  }
  try {
    read_predictions(dir / "dup.ndjson");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line == 3);
  }

  {
    std::ofstream out(dir / "bad.ndjson");
    out << header << "\n" << "{\"id\": \"u9\"}\n";
  }
  try {
    read_predictions(dir / "bad.ndjson");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line == 2);
  }
}
