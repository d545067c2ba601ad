#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "pttt/heads.hpp"
#include "pttt/rng.hpp"
#include "pttt/scoring.hpp"

using namespace pttt;

namespace {

ModelConfig tiny_config(std::uint64_t seed = 41) {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.model_dim = 16;
  cfg.num_heads = 2;
  cfg.ffn_dim = 24;
  cfg.max_positions = 48;
  cfg.seed = seed;
  return cfg;
}

// With head_weight rows set to basis vectors, logit j minus bias j reads
// hidden-state component j straight through the MLM projection.
void make_probe_head(BackboneWeights<float>& weights) {
  weights.head_weight.setZero();
  for (int j = 0; j < weights.config.model_dim; ++j) {
    weights.head_weight(j, j) = 1.0f;
  }
}

}  // namespace

TEST_CASE("embed mean-pools the final hidden states") {
  auto weights = init_backbone<float>(tiny_config());
  make_probe_head(weights);
  Alphabet ab;

  TokenSequence one = tokenize("W", ab);
  Mat<float> e1 = embed(weights, nullptr, one);
  REQUIRE(e1.rows() == 1);
  REQUIRE(e1.cols() == weights.config.model_dim);
  auto logits = forward_logits(weights, nullptr, make_batch({one.ids}));
  for (int j = 0; j < weights.config.model_dim; ++j) {
    const float hidden = logits[0](1, j) - weights.head_bias(0, j);
    CHECK(e1(0, j) == doctest::Approx(hidden).epsilon(1e-6));
  }

  TokenSequence two = tokenize("WY", ab);
  Mat<float> e2 = embed(weights, nullptr, two);
  auto logits2 = forward_logits(weights, nullptr, make_batch({two.ids}));
  for (int j = 0; j < weights.config.model_dim; ++j) {
    const float h1 = logits2[0](1, j) - weights.head_bias(0, j);
    const float h2 = logits2[0](2, j) - weights.head_bias(0, j);
    CHECK(e2(0, j) == doctest::Approx(0.5f * (h1 + h2)).epsilon(1e-5));
  }
}

TEST_CASE("embed is deterministic and position sensitive") {
  auto weights = init_backbone<float>(tiny_config());
  Alphabet ab;
  TokenSequence x = tokenize("ACDEFG", ab);
  Mat<float> a = embed(weights, nullptr, x);
  Mat<float> b = embed(weights, nullptr, x);
  CHECK((a.array() == b.array()).all());

  TokenSequence swapped = tokenize("CADEFG", ab);
  Mat<float> c = embed(weights, nullptr, swapped);
  CHECK(((a - c).cwiseAbs().maxCoeff()) > 0.0f);
}

TEST_CASE("classify returns a softmax over classes") {
  ClassifierHead head;
  head.weight = Mat<float>::Zero(4, 16);
  head.bias = Mat<float>::Zero(1, 4);
  Mat<float> e = Mat<float>::Random(1, 16);
  Mat<float> probs = classify(head, e);
  REQUIRE(probs.cols() == 4);
  for (int c = 0; c < 4; ++c) {
    CHECK(probs(0, c) == doctest::Approx(0.25).epsilon(1e-6));
  }

  Rng rng(1);
  for (Eigen::Index r = 0; r < head.weight.rows(); ++r) {
    for (Eigen::Index c = 0; c < head.weight.cols(); ++c) {
      head.weight(r, c) = static_cast<float>(rng.normal());
    }
  }
  probs = classify(head, e);
  CHECK(std::abs(probs.sum() - 1.0f) < 1e-6f);
  CHECK((probs.array() > 0.0f).all());

  Mat<float> wrong = Mat<float>::Zero(1, 8);
  CHECK_THROWS(classify(head, wrong));
}

TEST_CASE("train_classifier_head separates clustered embeddings") {
  // Three well-separated clusters in a 6-dim space.
  Rng rng(2);
  std::vector<Mat<float>> embeddings;
  std::vector<int> labels;
  for (int n = 0; n < 30; ++n) {
    const int cls = n % 3;
    Mat<float> e = Mat<float>::Zero(1, 6);
    e(0, cls * 2) = 3.0f + static_cast<float>(0.2 * rng.normal());
    e(0, cls * 2 + 1) = -3.0f + static_cast<float>(0.2 * rng.normal());
    embeddings.push_back(e);
    labels.push_back(cls);
  }
  ClassifierHead head = train_classifier_head(embeddings, labels, 3);
  CHECK(head.num_classes() == 3);
  int correct = 0;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    Mat<float> probs = classify(head, embeddings[i]);
    Eigen::Index arg;
    probs.row(0).maxCoeff(&arg);
    if (static_cast<int>(arg) == labels[i]) ++correct;
  }
  CHECK(correct == 30);

  ClassifierHead again = train_classifier_head(embeddings, labels, 3);
  CHECK((again.weight.array() == head.weight.array()).all());
  CHECK((again.bias.array() == head.bias.array()).all());
  CHECK(head_hash(again) == head_hash(head));
}

TEST_CASE("head hash is content addressed") {
  ClassifierHead head;
  head.weight = Mat<float>::Zero(2, 4);
  head.bias = Mat<float>::Zero(1, 2);
  const std::string h0 = head_hash(head);
  CHECK(h0.size() == 64);
  ClassifierHead copy = head;
  CHECK(head_hash(copy) == h0);
  copy.weight(1, 3) = 1e-7f;
  CHECK(head_hash(copy) != h0);
}

TEST_CASE("confidence adapters match their definitions") {
  auto weights = init_backbone<float>(tiny_config());
  Alphabet ab;
  TokenSequence x = tokenize("ACDEFGHIKL", ab);

  ConfidenceAdapter neg_ppl;
  const double c = confidence(neg_ppl, weights, nullptr, x, nullptr);
  CHECK(c == -pseudo_perplexity(weights, nullptr, x));
  CHECK(c <= -1.0);

  ClassifierHead head;
  head.weight = Mat<float>::Random(3, weights.config.model_dim);
  head.bias = Mat<float>::Zero(1, 3);
  ConfidenceAdapter max_prob;
  max_prob.kind = ConfidenceAdapter::Kind::head_max_prob;
  const double p = confidence(max_prob, weights, nullptr, x, &head);
  CHECK(p > 0.0);
  CHECK(p <= 1.0);
  CHECK_THROWS(confidence(max_prob, weights, nullptr, x, nullptr));
}

TEST_CASE("confidence evaluation is pure") {
  auto weights = init_backbone<float>(tiny_config());
  const BackboneWeights<float> before = weights;
  Alphabet ab;
  TokenSequence x = tokenize("ACDEFGHIKL", ab);
  ConfidenceAdapter adapter;
  const double c1 = confidence(adapter, weights, nullptr, x, nullptr);
  const double c2 = confidence(adapter, weights, nullptr, x, nullptr);
  CHECK(c1 == c2);
  bool identical = true;
  std::vector<const Mat<float>*> lhs;
  before.visit(
      [&](const std::string&, const Mat<float>& t) { lhs.push_back(&t); });
  std::size_t i = 0;
  weights.visit([&](const std::string&, const Mat<float>& t) {
    if (!(lhs[i]->array() == t.array()).all()) identical = false;
    ++i;
  });
  CHECK(identical);
}
