#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "pttt/alphabet.hpp"
#include "pttt/rng.hpp"

namespace pttt {

// Row-major so tensor bytes serialize directly; biases are 1 x n rows.
template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Token id batch, one sequence per row, pad ids on row tails only.
using IdMatrix =
    Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  int num_layers = 4;
  int model_dim = 128;
  int num_heads = 4;
  int ffn_dim = 256;
  int max_positions = 1026;
  int vocab_size = Alphabet::kVocabSize;
  std::uint64_t seed = 0;

  int head_dim() const { return model_dim / num_heads; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Pre-LN encoder block parameters. Projection weights are (out x in); a row
// activation x maps through x * W^T + b.
template <typename S>
struct LayerWeights {
  Mat<S> attn_ln_gain, attn_ln_bias;
  Mat<S> wq, bq, wk, bk, wv, bv, wo, bo;
  Mat<S> ffn_ln_gain, ffn_ln_bias;
  Mat<S> w1, b1, w2, b2;
};

// The full parameter set theta; snapshot/restore is plain value copy.
template <typename S>
struct BackboneWeights {
  static constexpr int kFormatVersion = 1;

  ModelConfig config;
  Mat<S> token_embedding;     // vocab x dim
  Mat<S> position_embedding;  // max_positions x dim
  std::vector<LayerWeights<S>> layers;
  Mat<S> final_ln_gain, final_ln_bias;
  Mat<S> head_weight;  // vocab x dim
  Mat<S> head_bias;    // 1 x vocab

  // Canonical enumeration order; checkpoint layout, SGD updates, and the
  // finite-difference harness all walk parameters through here.
  template <typename Fn>
  void visit(Fn&& fn) {
    fn("token_embedding", token_embedding);
    fn("position_embedding", position_embedding);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string prefix = "layers." + std::to_string(i) + ".";
      auto& layer = layers[i];
      fn(prefix + "attn_ln.gain", layer.attn_ln_gain);
      fn(prefix + "attn_ln.bias", layer.attn_ln_bias);
      fn(prefix + "attn.wq", layer.wq);
      fn(prefix + "attn.bq", layer.bq);
      fn(prefix + "attn.wk", layer.wk);
      fn(prefix + "attn.bk", layer.bk);
      fn(prefix + "attn.wv", layer.wv);
      fn(prefix + "attn.bv", layer.bv);
      fn(prefix + "attn.wo", layer.wo);
      fn(prefix + "attn.bo", layer.bo);
      fn(prefix + "ffn_ln.gain", layer.ffn_ln_gain);
      fn(prefix + "ffn_ln.bias", layer.ffn_ln_bias);
      fn(prefix + "ffn.w1", layer.w1);
      fn(prefix + "ffn.b1", layer.b1);
      fn(prefix + "ffn.w2", layer.w2);
      fn(prefix + "ffn.b2", layer.b2);
    }
    fn("final_ln.gain", final_ln_gain);
    fn("final_ln.bias", final_ln_bias);
    fn("head.weight", head_weight);
    fn("head.bias", head_bias);
  }

  template <typename Fn>
  void visit(Fn&& fn) const {
    const_cast<BackboneWeights*>(this)->visit(
        [&fn](const std::string& name, const Mat<S>& tensor) {
          fn(name, tensor);
        });
  }
};

// Low-rank additive deltas on the attention projections of every block.
// Contribution to a projection is (alpha / rank) * B * A; B starts at zero
// so a fresh adapter is an exact identity.
template <typename S>
struct LoraAdapter {
  struct FactorPair {
    Mat<S> a;  // rank x in_dim
    Mat<S> b;  // out_dim x rank
  };
  int rank = 0;
  S alpha = S(1);
  // Per layer: factor pairs for q, k, v, o in that order.
  std::vector<std::array<FactorPair, 4>> layers;

  S scale() const { return alpha / static_cast<S>(rank); }

  template <typename Fn>
  void visit(Fn&& fn) {
    static const char* kProj[4] = {"q", "k", "v", "o"};
    for (std::size_t i = 0; i < layers.size(); ++i) {
      for (int p = 0; p < 4; ++p) {
        const std::string prefix =
            "lora." + std::to_string(i) + "." + kProj[p] + ".";
        fn(prefix + "a", layers[i][p].a);
        fn(prefix + "b", layers[i][p].b);
      }
    }
  }

  template <typename Fn>
  void visit(Fn&& fn) const {
    const_cast<LoraAdapter*>(this)->visit(
        [&fn](const std::string& name, const Mat<S>& tensor) {
          fn(name, tensor);
        });
  }
};

struct TrainableSelection {
  enum class Mode { full_except_embeddings, lora_only, full };
  Mode mode = Mode::full_except_embeddings;
  // Open point in lora_only mode: layer norms and MLM head stay frozen by
  // default; flip to customize them alongside the factor pairs.
  bool lora_train_norms_and_head = false;
};

// Everything backward needs, captured per sequence during a cached forward.
// Pad tails are sliced off up front: arithmetic only ever sees the valid
// prefix, which makes pad-append invariance exact.
template <typename S>
struct LayerCache {
  Mat<S> input;                      // len x dim, residual stream pre-block
  Mat<S> ln1_xhat;                   // len x dim
  Mat<S> ln1_inv_std;                // len x 1
  Mat<S> q, k, v;                    // len x dim, heads packed contiguously
  std::vector<Mat<S>> probs;         // per head: len x len attention rows
  Mat<S> context;                    // len x dim, pre-wo head concat
  Mat<S> mid;                        // len x dim, post-attention residual
  Mat<S> ln2_xhat;                   // len x dim
  Mat<S> ln2_inv_std;                // len x 1
  Mat<S> ffn_pre;                    // len x ffn, pre-GELU
  Mat<S> ffn_act;                    // len x ffn, post-GELU
  std::array<Mat<S>, 4> lora_t;      // len x rank per projection, if adapted
};

template <typename S>
struct SequenceCache {
  int valid_len = 0;
  std::vector<int> ids;  // valid prefix only
  std::vector<LayerCache<S>> layers;
  Mat<S> final_input;     // len x dim
  Mat<S> final_xhat;      // len x dim
  Mat<S> final_inv_std;   // len x 1
  Mat<S> final_out;       // len x dim, post final LN
};

// Deterministic seeded initialization; equal configs give bit-equal weights.
template <typename S>
BackboneWeights<S> init_backbone(const ModelConfig& config);

// A ~ Gaussian(0, 1/rank), B = 0, over q/k/v/o of every block.
template <typename S>
LoraAdapter<S> init_lora(const ModelConfig& config, int rank, S alpha,
                         std::uint64_t seed);

// Folds (alpha/rank) * B * A into the projection weights.
template <typename S>
BackboneWeights<S> materialize_lora(const BackboneWeights<S>& weights,
                                    const LoraAdapter<S>& adapter);

// Logits for every row, one (cols x vocab) matrix per sequence. Pad-tail
// rows are excluded from all arithmetic and their logits are zero.
// adapter may be null. cache, when given, receives one entry per row.
template <typename S>
std::vector<Mat<S>> forward_logits(
    const BackboneWeights<S>& weights,
    std::type_identity_t<const LoraAdapter<S>*> adapter, const IdMatrix& ids,
    std::vector<SequenceCache<S>>* cache = nullptr);

// Rows padded to the longest sequence with the pad id.
IdMatrix make_batch(const std::vector<std::vector<int>>& rows);

}  // namespace pttt
