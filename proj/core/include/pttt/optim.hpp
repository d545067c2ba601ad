#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "pttt/backbone.hpp"

namespace pttt {

enum class LossKind {
  // Mean NLL over each sequence's masked positions, then mean over the
  // sequences that have any; the default.
  normalized_cross_entropy,
  // Single mean over all masked positions in the batch.
  normalized_global_cross_entropy,
  // NLL over every real token (bos/eos and unmasked included, pads
  // excluded), averaged across all tokens simultaneously.
  unnormalized_cross_entropy,
};

// Momentum and weight decay are structurally zero, so they are not fields.
struct OptimConfig {
  double learning_rate = 4e-4;
  int grad_accum_steps = 16;
  int micro_batch_size = 4;

  void validate() const;
};

// One micro-batch: padded ids plus aligned targets (-1 = unsupervised,
// otherwise the pre-corruption token id).
struct Batch {
  IdMatrix ids;
  IdMatrix targets;
};

// Assembles masked views (as produced by apply_mask_plan) into a Batch.
Batch make_training_batch(
    const std::vector<std::pair<TokenSequence, std::vector<int>>>& views);

template <typename S>
struct GradientBuffer {
  BackboneWeights<S> backbone;            // zero tensors, model shapes
  std::optional<LoraAdapter<S>> adapter;  // zero factors when adapted
  int micro_steps_seen = 0;

  void zero();
};

template <typename S>
GradientBuffer<S> make_gradient_buffer(const BackboneWeights<S>& weights,
                                       const LoraAdapter<S>* adapter);

// Forward + manual reverse pass. Returns the batch loss and accumulates
// gradients (sum over micro-batches) into buffer per the selection;
// parameters are never touched here. Throws if no sequence has a
// supervised position.
template <typename S>
double loss_and_grad(const BackboneWeights<S>& weights,
                     const LoraAdapter<S>* adapter, const Batch& batch,
                     LossKind loss_kind, const TrainableSelection& selection,
                     GradientBuffer<S>& buffer);

// theta <- theta - lr * (accumulated / grad_accum_steps); buffer zeroed.
// Errors unless exactly grad_accum_steps micro-batches were accumulated.
template <typename S>
void sgd_step(BackboneWeights<S>& weights, LoraAdapter<S>* adapter,
              GradientBuffer<S>& buffer, const OptimConfig& config,
              const TrainableSelection& selection);

}  // namespace pttt
