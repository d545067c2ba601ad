#include "pttt/heads.hpp"

#include <cmath>
#include <stdexcept>

#include "pttt/scoring.hpp"
#include "pttt/sha256.hpp"

namespace pttt {

Mat<float> embed(const BackboneWeights<float>& weights,
                 const LoraAdapter<float>* adapter, const TokenSequence& x) {
  if (x.raw_length < 1) {
    throw std::invalid_argument("cannot embed an empty sequence");
  }
  IdMatrix ids(1, static_cast<Eigen::Index>(x.ids.size()));
  for (std::size_t c = 0; c < x.ids.size(); ++c) {
    ids(0, static_cast<Eigen::Index>(c)) = x.ids[c];
  }
  std::vector<SequenceCache<float>> caches;
  forward_logits(weights, adapter, ids, &caches);
  const Mat<float>& hidden = caches[0].final_out;
  // Interior rows only: bos is row 0, eos the last valid row.
  Mat<float> pooled = Mat<float>::Zero(1, weights.config.model_dim);
  for (int i = 0; i < x.raw_length; ++i) {
    pooled.row(0) += hidden.row(1 + i);
  }
  pooled /= static_cast<float>(x.raw_length);
  return pooled;
}

Mat<float> classify(const ClassifierHead& head, const Mat<float>& embedding) {
  if (embedding.rows() != 1 || embedding.cols() != head.weight.cols()) {
    throw std::invalid_argument("embedding dim does not match head");
  }
  Mat<float> logits = embedding * head.weight.transpose();
  logits.row(0) += head.bias.row(0);
  const float row_max = logits.row(0).maxCoeff();
  Mat<float> probs = (logits.row(0).array() - row_max).exp().matrix();
  probs /= probs.row(0).sum();
  return probs;
}

ClassifierHead train_classifier_head(const std::vector<Mat<float>>& embeddings,
                                     const std::vector<int>& labels,
                                     int num_classes, double learning_rate,
                                     int iterations) {
  if (embeddings.empty() || embeddings.size() != labels.size()) {
    throw std::invalid_argument("embeddings/labels mismatch");
  }
  if (num_classes < 2) {
    throw std::invalid_argument("need at least 2 classes");
  }
  const Eigen::Index dim = embeddings.front().cols();
  for (const auto& e : embeddings) {
    if (e.rows() != 1 || e.cols() != dim) {
      throw std::invalid_argument("inconsistent embedding shapes");
    }
  }
  for (const int label : labels) {
    if (label < 0 || label >= num_classes) {
      throw std::invalid_argument("label outside [0, num_classes)");
    }
  }

  ClassifierHead head;
  head.weight = Mat<float>::Zero(num_classes, dim);
  head.bias = Mat<float>::Zero(1, num_classes);
  const float lr = static_cast<float>(learning_rate);
  const float inv_n = 1.0f / static_cast<float>(embeddings.size());

  for (int it = 0; it < iterations; ++it) {
    Mat<float> grad_w = Mat<float>::Zero(num_classes, dim);
    Mat<float> grad_b = Mat<float>::Zero(1, num_classes);
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
      Mat<float> probs = classify(head, embeddings[i]);
      probs(0, labels[i]) -= 1.0f;
      grad_w.noalias() += probs.transpose() * embeddings[i];
      grad_b.row(0) += probs.row(0);
    }
    head.weight -= lr * inv_n * grad_w;
    head.bias -= lr * inv_n * grad_b;
  }
  return head;
}

std::string head_hash(const ClassifierHead& head) {
  Sha256 hasher;
  const auto add = [&hasher](const Mat<float>& tensor) {
    const std::uint32_t rows = static_cast<std::uint32_t>(tensor.rows());
    const std::uint32_t cols = static_cast<std::uint32_t>(tensor.cols());
    hasher.update(&rows, sizeof(rows));
    hasher.update(&cols, sizeof(cols));
    hasher.update(tensor.data(), sizeof(float) * static_cast<std::size_t>(
                                                     tensor.rows()) *
                                     static_cast<std::size_t>(tensor.cols()));
  };
  add(head.weight);
  add(head.bias);
  return to_hex(hasher.finish());
}

double confidence(const ConfidenceAdapter& adapter,
                  const BackboneWeights<float>& weights,
                  const LoraAdapter<float>* adapter_lora,
                  const TokenSequence& x, const ClassifierHead* head) {
  switch (adapter.kind) {
    case ConfidenceAdapter::Kind::neg_pseudo_perplexity:
      return -pseudo_perplexity(weights, adapter_lora, x);
    case ConfidenceAdapter::Kind::head_max_prob: {
      if (head == nullptr) {
        throw std::invalid_argument("head_max_prob requires a classifier head");
      }
      const Mat<float> probs =
          classify(*head, embed(weights, adapter_lora, x));
      return static_cast<double>(probs.row(0).maxCoeff());
    }
  }
  throw std::logic_error("unreachable confidence kind");
}

}  // namespace pttt
