#pragma once

#include <vector>

#include "pttt/backbone.hpp"
#include "pttt/mutation.hpp"

namespace pttt {

enum class ScoringMode {
  masked_marginal_independent,
  masked_marginal_joint,
  wildtype_marginal,
};

struct ScoringOptions {
  // Probabilities come from the full-vocabulary softmax and are read at
  // residue tokens without renormalization. The renormalized-over-20
  // variant exists for sensitivity checks only.
  bool renormalize_residues = false;
  // Single-position-masked forwards are batched up to this many rows.
  int micro_batch_size = 32;
};

// Row i holds log p(token v | x with position i masked) for every vocab id
// v, one row per residue position of x. The workhorse shared by
// pseudo-perplexity and independent-mode scoring.
Mat<double> conditional_log_probs(const BackboneWeights<float>& weights,
                                  const LoraAdapter<float>* adapter,
                                  const TokenSequence& x,
                                  const ScoringOptions& options = {});

// exp of the mean leave-one-out NLL over interior positions; >= 1, equals
// 1 only for a model that is certain of every token.
double pseudo_perplexity(const BackboneWeights<float>& weights,
                         const LoraAdapter<float>* adapter,
                         const TokenSequence& x,
                         const ScoringOptions& options = {});

// Sum over mutated positions of log p(mutant) - log p(wild type) under the
// mode's conditioning. Empty mutation set scores exactly 0 in every mode.
double log_odds_score(const BackboneWeights<float>& weights,
                      const LoraAdapter<float>* adapter,
                      const TokenSequence& reference, const MutationSet& muts,
                      ScoringMode mode, const ScoringOptions& options = {});

// Pearson correlation of average ranks. Throws on length mismatch, length
// < 2, or an all-constant vector (never returns NaN).
double spearman(const std::vector<double>& pred,
                const std::vector<double>& truth);

struct AssayResult {
  double spearman = 0.0;
  int n = 0;
  std::vector<double> scores;  // per record, input order
};

AssayResult evaluate_assay(const BackboneWeights<float>& weights,
                           const LoraAdapter<float>* adapter,
                           const TokenSequence& reference,
                           const std::vector<MutationRecord>& records,
                           ScoringMode mode,
                           const ScoringOptions& options = {});

}  // namespace pttt
