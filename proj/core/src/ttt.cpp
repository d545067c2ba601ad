#include "pttt/ttt.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <utility>

#include "pttt/checkpoint.hpp"
#include "pttt/scoring.hpp"

namespace pttt {

namespace {

constexpr std::uint64_t kMaskStream = 0x6d61736bULL;
constexpr std::uint64_t kDataStream = 0x64617461ULL;
constexpr std::uint64_t kLoraStream = 0x6c6f7261ULL;

double now_ms() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double, std::milli>(
             clock::now().time_since_epoch())
      .count();
}

// Shared loop behind ttt_single and ttt_msa. Masking draws come from a
// per-step mask stream and sequence draws from a per-step data stream, so
// the realized corruption pattern is independent of how views are sourced.
TTTSession run_session(BackboneWeights<float>& model,
                       const ViewSampler& sample_view,
                       const TokenSequence& eval_target, const TTTConfig& cfg,
                       const StepObserver& observer) {
  cfg.validate();

  TTTSession session;
  session.base = model;
  LoraAdapter<float>* adapter = nullptr;
  if (cfg.lora.has_value()) {
    session.adapter = init_lora<float>(model.config, cfg.lora->rank,
                                       cfg.lora->alpha,
                                       Rng::mix(cfg.seed, kLoraStream));
    session.base_adapter = session.adapter;
    adapter = &*session.adapter;
  }

  GradientBuffer<float> buffer = make_gradient_buffer<float>(model, adapter);
  OptimConfig optim;
  optim.learning_rate = cfg.learning_rate;
  optim.grad_accum_steps = cfg.grad_accum_steps;
  optim.micro_batch_size = cfg.micro_batch_size;

  const bool track = static_cast<bool>(cfg.confidence);
  double best_confidence = 0.0;
  int best_step = 0;
  BackboneWeights<float> best_weights;
  std::optional<LoraAdapter<float>> best_adapter;

  auto evaluate_confidence = [&](int step) {
    double c = cfg.confidence(model, adapter);
    if (!std::isfinite(c)) {
      throw std::runtime_error("non-finite confidence at step " +
                               std::to_string(step));
    }
    return c;
  };

  {
    const double start = now_ms();
    TTTStepRecord rec;
    rec.step = 0;
    if (cfg.record_perplexity) {
      rec.perplexity = pseudo_perplexity(model, adapter, eval_target);
    }
    if (track) {
      rec.confidence = evaluate_confidence(0);
      best_confidence = *rec.confidence;
      best_weights = model;
      best_adapter = session.adapter;
    }
    rec.wall_ms = now_ms() - start;
    if (observer) observer(0, model, adapter);
    session.trace.steps.push_back(std::move(rec));
  }

  std::vector<std::pair<TokenSequence, std::vector<int>>> views;
  for (int t = 1; t <= cfg.steps; ++t) {
    const double start = now_ms();
    Rng mask_rng(Rng::mix(cfg.seed, static_cast<std::uint64_t>(t),
                          kMaskStream));
    Rng data_rng(Rng::mix(cfg.seed, static_cast<std::uint64_t>(t),
                          kDataStream));

    double loss_sum = 0.0;
    try {
      for (int g = 0; g < cfg.grad_accum_steps; ++g) {
        views.clear();
        for (int b = 0; b < cfg.micro_batch_size; ++b) {
          TokenSequence seq = sample_view(data_rng);
          MaskPlan plan = sample_mask_plan(seq, cfg.masking, mask_rng);
          views.push_back(apply_mask_plan(seq, plan));
        }
        loss_sum += loss_and_grad<float>(model, adapter,
                                         make_training_batch(views),
                                         cfg.loss_kind, cfg.trainable, buffer);
      }
    } catch (const std::exception& e) {
      throw std::runtime_error("ttt step " + std::to_string(t) + ": " +
                               e.what());
    }
    const double step_loss = loss_sum / cfg.grad_accum_steps;
    if (!std::isfinite(step_loss)) {
      throw std::runtime_error("non-finite loss at step " + std::to_string(t));
    }
    sgd_step<float>(model, adapter, buffer, optim, cfg.trainable);

    TTTStepRecord rec;
    rec.step = t;
    rec.loss = step_loss;
    if (cfg.record_perplexity) {
      rec.perplexity = pseudo_perplexity(model, adapter, eval_target);
    }
    if (track) {
      rec.confidence = evaluate_confidence(t);
      // Strict improvement only: ties resolve to the earliest step.
      if (*rec.confidence > best_confidence) {
        best_confidence = *rec.confidence;
        best_step = t;
        best_weights = model;
        best_adapter = session.adapter;
      }
    }
    rec.wall_ms = now_ms() - start;
    if (observer) observer(t, model, adapter);
    session.trace.steps.push_back(std::move(rec));
  }

  if (track) {
    session.trace.selected_step = best_step;
    if (best_step != cfg.steps) {
      restore(model, best_weights);
      session.adapter = std::move(best_adapter);
    }
  } else {
    session.trace.selected_step = cfg.steps;
  }
  return session;
}

}  // namespace

void TTTConfig::validate() const {
  if (!std::isfinite(learning_rate) || learning_rate < 0.0) {
    throw std::invalid_argument("learning_rate must be finite and >= 0");
  }
  if (micro_batch_size < 1) {
    throw std::invalid_argument("micro_batch_size must be >= 1");
  }
  if (grad_accum_steps < 1) {
    throw std::invalid_argument("grad_accum_steps must be >= 1");
  }
  if (steps < 1) throw std::invalid_argument("steps must be >= 1");
  masking.validate();
  const bool lora_mode = trainable.mode == TrainableSelection::Mode::lora_only;
  if (lora.has_value() != lora_mode) {
    throw std::invalid_argument(
        "lora adapter and lora_only selection must be set together");
  }
  if (lora.has_value()) {
    if (lora->rank < 1) throw std::invalid_argument("lora rank must be >= 1");
    if (!std::isfinite(lora->alpha) || lora->alpha <= 0.0f) {
      throw std::invalid_argument("lora alpha must be finite and > 0");
    }
  }
}

TTTSession ttt_single(BackboneWeights<float>& model, const TokenSequence& x,
                      const TTTConfig& cfg, const StepObserver& observer) {
  return run_session(
      model, [&x](Rng&) { return x; }, x, cfg, observer);
}

int uniform_msa_sampler(const Msa& msa, Rng& rng) {
  return rng.index(static_cast<int>(msa.rows.size()));
}

TTTSession ttt_msa(BackboneWeights<float>& model, const Msa& msa,
                   const TTTConfig& cfg, const MsaSampler& sampler,
                   const StepObserver& observer) {
  if (msa.rows.empty()) throw std::invalid_argument("MSA has no rows");
  if (msa.target_index < 0 ||
      msa.target_index >= static_cast<int>(msa.rows.size())) {
    throw std::invalid_argument("MSA target index out of range");
  }
  if (msa.rows[static_cast<std::size_t>(msa.target_index)].find('-') !=
      std::string::npos) {
    throw std::invalid_argument("MSA target row must be gap-free");
  }
  const Alphabet alphabet;
  std::vector<TokenSequence> rows;
  rows.reserve(msa.rows.size());
  for (std::size_t r = 0; r < msa.rows.size(); ++r) {
    rows.push_back(tokenize(degap(msa.rows[r]), alphabet,
                            "msa_row_" + std::to_string(r)));
  }
  const MsaSampler pick = sampler ? sampler : MsaSampler(uniform_msa_sampler);
  auto sample_view = [&](Rng& data_rng) {
    const int r = pick(msa, data_rng);
    if (r < 0 || r >= static_cast<int>(rows.size())) {
      throw std::out_of_range("MSA sampler returned row " + std::to_string(r));
    }
    return rows[static_cast<std::size_t>(r)];
  };
  return run_session(model, sample_view,
                     rows[static_cast<std::size_t>(msa.target_index)], cfg,
                     observer);
}

void ttt_reset(BackboneWeights<float>& model, TTTSession& session) {
  restore(model, session.base);
  session.adapter = session.base_adapter;
}

void PretrainConfig::validate() const {
  if (!std::isfinite(learning_rate) || learning_rate < 0.0) {
    throw std::invalid_argument("learning_rate must be finite and >= 0");
  }
  if (micro_batch_size < 1) {
    throw std::invalid_argument("micro_batch_size must be >= 1");
  }
  if (grad_accum_steps < 1) {
    throw std::invalid_argument("grad_accum_steps must be >= 1");
  }
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  masking.validate();
}

BackboneWeights<float> pretrain(const BackboneWeights<float>& init,
                                const std::vector<TokenSequence>& corpus,
                                const PretrainConfig& cfg,
                                std::vector<double>* loss_curve) {
  cfg.validate();
  if (loss_curve) loss_curve->clear();
  BackboneWeights<float> model = init;
  if (cfg.epochs == 0) return model;
  if (corpus.empty()) {
    throw std::invalid_argument("pretrain requires a non-empty corpus");
  }

  GradientBuffer<float> buffer = make_gradient_buffer<float>(model, nullptr);
  const TrainableSelection full{TrainableSelection::Mode::full, false};
  OptimConfig optim;
  optim.learning_rate = cfg.learning_rate;
  optim.grad_accum_steps = cfg.grad_accum_steps;
  optim.micro_batch_size = cfg.micro_batch_size;

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::vector<std::pair<TokenSequence, std::vector<int>>> views;
  double group_loss = 0.0;
  int group_micro = 0;
  int steps_done = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    for (std::size_t pos = 0; pos < order.size();
         pos += static_cast<std::size_t>(cfg.micro_batch_size)) {
      const std::size_t end =
          std::min(pos + static_cast<std::size_t>(cfg.micro_batch_size),
                   order.size());
      views.clear();
      for (std::size_t i = pos; i < end; ++i) {
        const TokenSequence& seq = corpus[order[i]];
        MaskPlan plan = sample_mask_plan(seq, cfg.masking, rng);
        views.push_back(apply_mask_plan(seq, plan));
      }
      group_loss += loss_and_grad<float>(model, nullptr,
                                         make_training_batch(views),
                                         cfg.loss_kind, full, buffer);
      if (++group_micro == cfg.grad_accum_steps) {
        const double step_loss = group_loss / cfg.grad_accum_steps;
        if (!std::isfinite(step_loss)) {
          throw std::runtime_error("non-finite loss at pretrain step " +
                                   std::to_string(steps_done + 1));
        }
        sgd_step<float>(model, nullptr, buffer, optim, full);
        if (loss_curve) loss_curve->push_back(step_loss);
        ++steps_done;
        group_loss = 0.0;
        group_micro = 0;
      }
    }
  }
  // A trailing group short of grad_accum_steps never becomes a step.
  if (group_micro != 0) buffer.zero();
  return model;
}

namespace {

// Pseudo-perplexity and independent-mode assay scores from one shared
// leave-one-out sweep.
void grid_step_metrics(const BackboneWeights<float>& weights,
                       const LoraAdapter<float>* adapter,
                       const TokenSequence& target,
                       const std::vector<MutationRecord>* records,
                       double& ppl_out, double& rho_out, bool& rho_ok) {
  const Mat<double> clp = conditional_log_probs(weights, adapter, target);
  double nll = 0.0;
  for (int i = 0; i < target.raw_length; ++i) {
    nll -= clp(i, target.ids[static_cast<std::size_t>(i) + 1]);
  }
  ppl_out = std::exp(nll / target.raw_length);

  rho_ok = false;
  rho_out = std::numeric_limits<double>::quiet_NaN();
  if (records == nullptr || records->size() < 2) return;
  std::vector<double> pred, truth;
  pred.reserve(records->size());
  truth.reserve(records->size());
  for (const MutationRecord& rec : *records) {
    double score = 0.0;
    for (const Mutation& m : rec.mutations.substitutions) {
      score += clp(m.position, m.mutant) - clp(m.position, m.wild_type);
    }
    pred.push_back(score);
    truth.push_back(rec.measured_fitness);
  }
  try {
    rho_out = spearman(pred, truth);
    rho_ok = true;
  } catch (const std::exception&) {
    // Degenerate (constant) score vector at this step: leave NaN.
  }
}

}  // namespace

GridReport run_grid(const BackboneWeights<float>& base,
                    const std::vector<TokenSequence>& targets,
                    const std::vector<std::vector<MutationRecord>>& assays,
                    const GridSpec& spec, const GridRunHook& hook) {
  if (targets.empty()) throw std::invalid_argument("grid needs targets");
  if (!assays.empty() && assays.size() != targets.size()) {
    throw std::invalid_argument("assays must align with targets");
  }
  if (spec.steps < 1) throw std::invalid_argument("grid steps must be >= 1");
  if (spec.learning_rates.empty() || spec.micro_batch_sizes.empty() ||
      spec.grad_accum_steps.empty() || spec.maskings.empty() ||
      spec.loss_kinds.empty()) {
    throw std::invalid_argument("every grid axis needs at least one value");
  }

  GridReport report;
  std::uint64_t cell_index = spec.first_cell_index;
  for (double lr : spec.learning_rates) {
    for (int micro : spec.micro_batch_sizes) {
      for (int accum : spec.grad_accum_steps) {
        for (const MaskingStrategy& masking : spec.maskings) {
          for (LossKind loss_kind : spec.loss_kinds) {
            GridCellCurve cell;
            cell.learning_rate = lr;
            cell.micro_batch_size = micro;
            cell.grad_accum_steps = accum;
            cell.masking = masking;
            cell.loss_kind = loss_kind;
            const int points = spec.steps + 1;
            std::vector<double> ppl_sum(static_cast<std::size_t>(points), 0.0);
            std::vector<double> rho_sum(static_cast<std::size_t>(points), 0.0);
            std::vector<int> rho_n(static_cast<std::size_t>(points), 0);
            try {
              for (std::size_t ti = 0; ti < targets.size(); ++ti) {
                TTTConfig cfg;
                cfg.learning_rate = lr;
                cfg.micro_batch_size = micro;
                cfg.grad_accum_steps = accum;
                cfg.steps = spec.steps;
                cfg.masking = masking;
                cfg.loss_kind = loss_kind;
                cfg.seed = Rng::mix(spec.seed, cell_index,
                                    static_cast<std::uint64_t>(ti));
                const std::vector<MutationRecord>* records =
                    assays.empty() ? nullptr : &assays[ti];
                StepObserver observe =
                    [&](int step, const BackboneWeights<float>& w,
                        const LoraAdapter<float>* ad) {
                      double ppl = 0.0, rho = 0.0;
                      bool rho_ok = false;
                      grid_step_metrics(w, ad, targets[ti], records, ppl, rho,
                                        rho_ok);
                      ppl_sum[static_cast<std::size_t>(step)] += ppl;
                      if (rho_ok) {
                        rho_sum[static_cast<std::size_t>(step)] += rho;
                        rho_n[static_cast<std::size_t>(step)] += 1;
                      }
                    };
                BackboneWeights<float> model = base;
                TTTSession session =
                    ttt_single(model, targets[ti], cfg, observe);
                if (hook) hook(cell_index, ti, cfg, session);
              }
              cell.mean_perplexity.resize(static_cast<std::size_t>(points));
              cell.mean_spearman.resize(static_cast<std::size_t>(points));
              for (int t = 0; t < points; ++t) {
                const auto s = static_cast<std::size_t>(t);
                cell.mean_perplexity[s] =
                    ppl_sum[s] / static_cast<double>(targets.size());
                cell.mean_spearman[s] =
                    rho_n[s] > 0
                        ? rho_sum[s] / rho_n[s]
                        : std::numeric_limits<double>::quiet_NaN();
              }
            } catch (const std::exception& e) {
              cell.failed = true;
              cell.error = e.what();
              cell.mean_perplexity.clear();
              cell.mean_spearman.clear();
            }
            report.cells.push_back(std::move(cell));
            ++cell_index;
          }
        }
      }
    }
  }
  return report;
}

std::string masking_to_string(const MaskingStrategy& strategy) {
  char buf[96];
  switch (strategy.kind) {
    case MaskingStrategy::Kind::fixed_ratio:
      std::snprintf(buf, sizeof(buf), "fixed(%g)", strategy.p);
      break;
    case MaskingStrategy::Kind::uniform_ratio_range:
      std::snprintf(buf, sizeof(buf), "uniform(%g,%g)", strategy.lo,
                    strategy.hi);
      break;
    case MaskingStrategy::Kind::beta_ratio:
      std::snprintf(buf, sizeof(buf), "beta(%g,%g)", strategy.a, strategy.b);
      break;
  }
  return buf;
}

std::string loss_kind_to_string(LossKind kind) {
  switch (kind) {
    case LossKind::normalized_cross_entropy:
      return "normalized_cross_entropy";
    case LossKind::normalized_global_cross_entropy:
      return "normalized_global_cross_entropy";
    case LossKind::unnormalized_cross_entropy:
      return "unnormalized_cross_entropy";
  }
  throw std::invalid_argument("unknown loss kind");
}

}  // namespace pttt
