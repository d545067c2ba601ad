#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "pttt/backbone.hpp"
#include "pttt/masking.hpp"
#include "pttt/optim.hpp"
#include "pttt/seqio.hpp"

namespace pttt {

// Confidence hook c over the current model state; higher = more confident.
// Must never mutate parameters.
using ConfidenceFn = std::function<double(const BackboneWeights<float>&,
                                          const LoraAdapter<float>*)>;

// Called after step 0 setup and after every optimizer step; used by the
// grid harness to compute per-step metrics without re-running sessions.
using StepObserver = std::function<void(int step,
                                        const BackboneWeights<float>&,
                                        const LoraAdapter<float>*)>;

struct LoraSpec {
  int rank = 8;
  float alpha = 16.0f;
};

struct TTTConfig {
  double learning_rate = 4e-4;
  int micro_batch_size = 4;
  int grad_accum_steps = 16;
  int steps = 30;
  MaskingStrategy masking;
  LossKind loss_kind = LossKind::normalized_cross_entropy;
  TrainableSelection trainable;
  std::optional<LoraSpec> lora;  // requires trainable.mode == lora_only
  std::uint64_t seed = 0;
  ConfidenceFn confidence;  // empty: select theta_T
  // Record pseudo-perplexity of the evaluation target at every step
  // (expensive: one leave-one-out sweep per step).
  bool record_perplexity = false;

  void validate() const;
};

struct TTTStepRecord {
  int step = 0;
  double loss = std::numeric_limits<double>::quiet_NaN();  // NaN at step 0
  std::optional<double> perplexity;
  std::optional<double> confidence;
  double wall_ms = 0.0;  // excluded from determinism comparisons
};

struct TTTTrace {
  std::vector<TTTStepRecord> steps;  // steps 0..T inclusive
  int selected_step = 0;
};

// Owns what reset needs: theta_0 (and the fresh adapter state when LoRA is
// active). The working model stays with the caller and is mutated in place.
struct TTTSession {
  BackboneWeights<float> base;
  std::optional<LoraAdapter<float>> base_adapter;
  std::optional<LoraAdapter<float>> adapter;  // working adapter state
  TTTTrace trace;
};

// Draws the sequence for one micro-batch element. Only this consumer may
// use the per-step data stream; masking draws come from a separate stream,
// which is what makes a one-row MSA reproduce the single-sequence
// trajectory exactly.
using ViewSampler = std::function<TokenSequence(Rng& data_rng)>;

// T optimizer steps of masked-LM customization on one sequence. On return
// the model (plus session.adapter) is in the theta_x state: the
// argmax-confidence step when a confidence hook is given (ties go to the
// earliest step), theta_T otherwise.
TTTSession ttt_single(BackboneWeights<float>& model, const TokenSequence& x,
                      const TTTConfig& cfg,
                      const StepObserver& observer = {});

// Row index for one homolog draw; uniform over rows by default.
using MsaSampler = std::function<int(const Msa&, Rng&)>;

int uniform_msa_sampler(const Msa& msa, Rng& rng);

// Same loop with micro-batch elements drawn from the MSA (degapped rows,
// target row included in the support).
TTTSession ttt_msa(BackboneWeights<float>& model, const Msa& msa,
                   const TTTConfig& cfg, const MsaSampler& sampler = {},
                   const StepObserver& observer = {});

// Restores the model (and adapter) to theta_0, bit-exactly. Idempotent.
void ttt_reset(BackboneWeights<float>& model, TTTSession& session);

struct PretrainConfig {
  double learning_rate = 0.3;
  int micro_batch_size = 8;
  int grad_accum_steps = 1;
  int epochs = 20;
  MaskingStrategy masking;
  LossKind loss_kind = LossKind::normalized_cross_entropy;
  std::uint64_t seed = 0;

  void validate() const;
};

// MLM training over the corpus with the same masking machinery, full
// selection. Returns the trained snapshot; 0 epochs returns init unchanged.
// An accumulation group left incomplete when the epochs run out is dropped.
BackboneWeights<float> pretrain(const BackboneWeights<float>& init,
                                const std::vector<TokenSequence>& corpus,
                                const PretrainConfig& cfg,
                                std::vector<double>* loss_curve = nullptr);

struct GridSpec {
  std::vector<double> learning_rates;
  std::vector<int> micro_batch_sizes;
  std::vector<int> grad_accum_steps;
  std::vector<MaskingStrategy> maskings;
  std::vector<LossKind> loss_kinds;
  int steps = 30;
  std::uint64_t seed = 0;
  // Global index of this spec's first cell. Seeds mix the global index, so
  // a sweep split into single-cell specs (one per worker) reproduces the
  // one-call sweep exactly.
  std::uint64_t first_cell_index = 0;
};

struct GridCellCurve {
  double learning_rate = 0.0;
  int micro_batch_size = 0;
  int grad_accum_steps = 0;
  MaskingStrategy masking;
  LossKind loss_kind = LossKind::normalized_cross_entropy;
  // Index t in [0, steps]: mean over targets at step t. Spearman entries
  // are NaN when no assays were supplied.
  std::vector<double> mean_perplexity;
  std::vector<double> mean_spearman;
  bool failed = false;
  std::string error;
};

struct GridReport {
  std::vector<GridCellCurve> cells;
};

// Called after each completed run with the session still in its theta_x
// state; lets callers persist per-run traces.
using GridRunHook =
    std::function<void(std::uint64_t cell_index, std::size_t target_index,
                       const TTTConfig&, const TTTSession&)>;

// Every cell runs every target from theta_0 (fresh model copy per run) with
// run seed mix(spec.seed, cell_index, target_index). Cell failures are
// recorded and the sweep continues. assays, when given, must align with
// targets and are scored in masked_marginal_independent mode from the same
// per-step conditionals as the perplexity column.
GridReport run_grid(const BackboneWeights<float>& base,
                    const std::vector<TokenSequence>& targets,
                    const std::vector<std::vector<MutationRecord>>& assays,
                    const GridSpec& spec, const GridRunHook& hook = {});

std::string masking_to_string(const MaskingStrategy& strategy);
std::string loss_kind_to_string(LossKind kind);

}  // namespace pttt
