#pragma once

#include <string>
#include <vector>

#include "pttt/backbone.hpp"

namespace pttt {

// Frozen downstream head h: linear over mean-pooled residue embeddings.
// Never touched by TTT; the hash invariant is checked against head_hash.
struct ClassifierHead {
  Mat<float> weight;  // num_classes x model_dim
  Mat<float> bias;    // 1 x num_classes

  int num_classes() const { return static_cast<int>(weight.rows()); }
};

// Mean over residue positions of the final encoder output (post final LN);
// bos/eos excluded.
Mat<float> embed(const BackboneWeights<float>& weights,
                 const LoraAdapter<float>* adapter, const TokenSequence& x);

// Softmax class probabilities, 1 x num_classes.
Mat<float> classify(const ClassifierHead& head, const Mat<float>& embedding);

// Multinomial logistic regression on frozen embeddings, full-batch gradient
// descent. Deterministic: no sampling involved.
ClassifierHead train_classifier_head(
    const std::vector<Mat<float>>& embeddings, const std::vector<int>& labels,
    int num_classes, double learning_rate = 0.5, int iterations = 300);

// SHA-256 over the head's parameter bytes; TTT must never change it.
std::string head_hash(const ClassifierHead& head);

struct ConfidenceAdapter {
  enum class Kind { neg_pseudo_perplexity, head_max_prob };
  Kind kind = Kind::neg_pseudo_perplexity;
};

// Pure: evaluation never mutates parameters. head may be null for
// neg_pseudo_perplexity; head_max_prob requires it.
double confidence(const ConfidenceAdapter& adapter,
                  const BackboneWeights<float>& weights,
                  const LoraAdapter<float>* adapter_lora,
                  const TokenSequence& x, const ClassifierHead* head);

}  // namespace pttt
