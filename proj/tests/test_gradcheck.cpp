#include <doctest.h>

#include <cmath>

#include "pser/gradcheck.hpp"
#include "pser/rng.hpp"

#include "helpers.hpp"

using namespace pser;

namespace {

struct Fixture {
  Corpus corpus;
  EncoderModel model;
  std::vector<const UtteranceRecord*> batch;

  Fixture(const EncoderConfig& cfg, std::uint64_t seed) : corpus(test::tiny_corpus(seed)) {
    model = init_model(cfg, corpus.seen_speakers(), seed);
    auto train = corpus.split_records(Split::train);
    batch = {train[0], train[1], train[2]};
  }
};

}  // namespace

TEST_CASE("gradcheck agrees with backprop on a hand-built quadratic") {
  auto w = ad::leaf(Matrix::Constant(2, 2, 0.5));
  auto build = [&] { return ad::sum_all(ad::mul(w, w)); };
  auto report = gradcheck({{"w", w}}, build);
  CHECK(report.ok(1e-8));
  CHECK(report.rel_err.count("w") == 1);
}

TEST_CASE("linear model gradients are exact to near machine precision") {
  Fixture fx(test::linear_config(), 41);

  auto labels = make_pseudo_labels(fx.model, fx.corpus, fx.model.config.k_pseudo, 41);
  PretrainConfig pt;
  pt.mask_prob = 0.2;
  pt.span = 2;
  std::map<std::string, int> lengths;
  for (auto* rec : fx.batch)
    lengths[rec->id] = fx.model.config.frames_for(int(rec->samples.size()));
  MaskPlan plan = plan_masks(lengths, pt, 41);

  auto papt = gradcheck_papt(fx.model, fx.batch, labels, plan, 1e-6);
  INFO("papt max rel err ", papt.max_rel_err);
  CHECK(papt.ok(1e-7));

  auto ccc = gradcheck_ccc(fx.model, fx.batch, 1e-6);
  INFO("ccc max rel err ", ccc.max_rel_err);
  CHECK(ccc.ok(1e-7));
}

TEST_CASE("full tiny model passes both loss paths under 1e-4") {
  Fixture fx(test::tiny_config(), 42);
  REQUIRE(count_parameters(fx.model) <= 5000);

  auto labels = make_pseudo_labels(fx.model, fx.corpus, fx.model.config.k_pseudo, 42);
  PretrainConfig pt;
  pt.mask_prob = 0.2;
  pt.span = 2;
  std::map<std::string, int> lengths;
  for (auto* rec : fx.batch)
    lengths[rec->id] = fx.model.config.frames_for(int(rec->samples.size()));
  MaskPlan plan = plan_masks(lengths, pt, 42);

  auto papt = gradcheck_papt(fx.model, fx.batch, labels, plan);
  INFO("papt max rel err ", papt.max_rel_err);
  CHECK(papt.ok(1e-4));
  CHECK(papt.rel_err.size() > 10);

  auto ccc = gradcheck_ccc(fx.model, fx.batch);
  INFO("ccc max rel err ", ccc.max_rel_err);
  CHECK(ccc.ok(1e-4));
}

TEST_CASE("loss rebuild is deterministic") {
  Fixture fx(test::tiny_config(), 43);
  auto batch = fx.batch;
  auto pooled = [&] {
    std::vector<ad::NodePtr> rows;
    for (auto* rec : batch)
      rows.push_back(ad::mean_rows(forward_features_node(fx.model, rec->samples, std::nullopt)));
    return ad::concat_rows(rows);
  };
  auto a = interpreter_forward(fx.model, pooled(), true);
  auto b = interpreter_forward(fx.model, pooled(), true);
  CHECK(a->value == b->value);
}

TEST_CASE("non-finite gradients are reported by name") {
  auto w = ad::leaf(Matrix::Constant(1, 1, 0.0));
  // d/dw sqrt-like cusp: log(w) at w<=0 produces non-finite values
  auto build = [&] {
    Matrix v(1, 1);
    v(0, 0) = std::log(w->value(0, 0));
    auto n = std::make_shared<ad::Node>();
    n->value = v;
    n->inputs = {w};
    n->backprop = [](ad::Node& self) {
      self.inputs[0]->grad(0, 0) += self.grad(0, 0) / self.inputs[0]->value(0, 0);
    };
    return n;
  };
  auto report = gradcheck({{"w", w}}, build);
  CHECK(!report.failed.empty());
  CHECK(report.failed[0] == "w");
  CHECK(!report.ok(1e3));
}
