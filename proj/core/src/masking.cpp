#include "pttt/masking.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace pttt {

void MaskingStrategy::validate() const {
  const double corruption_sum = p_mask + p_random + p_keep;
  if (p_mask < 0 || p_random < 0 || p_keep < 0 ||
      std::abs(corruption_sum - 1.0) > 1e-9) {
    throw std::invalid_argument("corruption probabilities must sum to 1");
  }
  switch (kind) {
    case Kind::fixed_ratio:
      if (!(p > 0.0 && p <= 1.0)) {
        throw std::invalid_argument("fixed_ratio p must be in (0, 1]");
      }
      break;
    case Kind::uniform_ratio_range:
      if (!(lo > 0.0 && lo <= hi && hi <= 1.0)) {
        throw std::invalid_argument(
            "uniform_ratio_range wants 0 < lo <= hi <= 1");
      }
      break;
    case Kind::beta_ratio:
      if (!(a > 0.0 && b > 0.0)) {
        throw std::invalid_argument("beta_ratio parameters must be positive");
      }
      break;
  }
  if (crop_window.has_value() && *crop_window < 1) {
    throw std::invalid_argument("crop_window must be >= 1");
  }
}

int sample_crop(const TokenSequence& seq, int window, Rng& rng) {
  if (window < 1) throw std::invalid_argument("crop window must be >= 1");
  if (seq.raw_length <= window) return 0;
  return static_cast<int>(
      rng.below(static_cast<std::uint64_t>(seq.raw_length - window) + 1));
}

MaskPlan sample_mask_plan(const TokenSequence& seq,
                          const MaskingStrategy& strategy, Rng& rng) {
  strategy.validate();
  if (seq.raw_length < 1) {
    throw std::invalid_argument("cannot mask an empty sequence");
  }

  MaskPlan plan;
  plan.seed_trace.draws_before = rng.draws();

  if (strategy.crop_window.has_value()) {
    plan.crop_start = sample_crop(seq, *strategy.crop_window, rng);
    plan.crop_len = std::min(seq.raw_length, *strategy.crop_window);
  } else {
    plan.crop_start = 0;
    plan.crop_len = seq.raw_length;
  }

  double ratio = 0.0;
  switch (strategy.kind) {
    case MaskingStrategy::Kind::fixed_ratio:
      ratio = strategy.p;
      break;
    case MaskingStrategy::Kind::uniform_ratio_range:
      ratio = strategy.lo + rng.uniform() * (strategy.hi - strategy.lo);
      break;
    case MaskingStrategy::Kind::beta_ratio:
      ratio = rng.beta(strategy.a, strategy.b);
      break;
  }

  const int num_masked = std::max(
      1, static_cast<int>(std::floor(ratio * plan.crop_len + 0.5)));

  // Partial Fisher-Yates over crop-relative indices.
  std::vector<int> indices(static_cast<std::size_t>(plan.crop_len));
  for (int i = 0; i < plan.crop_len; ++i) {
    indices[static_cast<std::size_t>(i)] = i;
  }
  for (int i = 0; i < num_masked; ++i) {
    const int j =
        i + static_cast<int>(rng.below(
                static_cast<std::uint64_t>(plan.crop_len - i)));
    std::swap(indices[static_cast<std::size_t>(i)],
              indices[static_cast<std::size_t>(j)]);
  }
  plan.positions.assign(indices.begin(), indices.begin() + num_masked);
  std::sort(plan.positions.begin(), plan.positions.end());

  plan.actions.resize(static_cast<std::size_t>(num_masked));
  plan.random_ids.assign(static_cast<std::size_t>(num_masked), -1);
  for (int i = 0; i < num_masked; ++i) {
    const double u = rng.uniform();
    if (u < strategy.p_mask) {
      plan.actions[static_cast<std::size_t>(i)] = MaskAction::to_mask_token;
    } else if (u < strategy.p_mask + strategy.p_random) {
      plan.actions[static_cast<std::size_t>(i)] = MaskAction::to_random_token;
      // Uniform over the 20 residues; drawing the original is allowed.
      plan.random_ids[static_cast<std::size_t>(i)] =
          Alphabet::kFirstResidue + rng.index(Alphabet::kNumResidues);
    } else {
      plan.actions[static_cast<std::size_t>(i)] = MaskAction::keep_original;
    }
  }

  plan.seed_trace.draws_after = rng.draws();
  return plan;
}

std::pair<TokenSequence, std::vector<int>> apply_mask_plan(
    const TokenSequence& seq, const MaskPlan& plan) {
  if (plan.crop_start < 0 || plan.crop_len < 1 ||
      plan.crop_start + plan.crop_len > seq.raw_length) {
    throw std::invalid_argument("mask plan crop does not fit the sequence");
  }
  if (plan.actions.size() != plan.positions.size() ||
      plan.random_ids.size() != plan.positions.size()) {
    throw std::invalid_argument("mask plan arrays disagree in length");
  }

  TokenSequence masked;
  masked.source_id = seq.source_id;
  masked.raw_length = plan.crop_len;
  masked.ids.resize(static_cast<std::size_t>(plan.crop_len) + 2);
  masked.ids.front() = Alphabet::kBos;
  masked.ids.back() = Alphabet::kEos;
  for (int i = 0; i < plan.crop_len; ++i) {
    masked.ids[static_cast<std::size_t>(i) + 1] =
        seq.ids[static_cast<std::size_t>(1 + plan.crop_start + i)];
  }

  std::vector<int> targets(masked.ids.size(), -1);
  for (std::size_t m = 0; m < plan.positions.size(); ++m) {
    const int pos = plan.positions[m];
    if (pos < 0 || pos >= plan.crop_len) {
      throw std::invalid_argument("mask plan position outside the crop");
    }
    if (m > 0 && pos <= plan.positions[m - 1]) {
      throw std::invalid_argument(
          "mask plan positions must be sorted and unique");
    }
    const std::size_t slot = static_cast<std::size_t>(pos) + 1;
    targets[slot] = masked.ids[slot];
    switch (plan.actions[m]) {
      case MaskAction::to_mask_token:
        masked.ids[slot] = Alphabet::kMask;
        break;
      case MaskAction::to_random_token:
        if (plan.random_ids[m] < Alphabet::kFirstResidue ||
            plan.random_ids[m] >= Alphabet::kVocabSize) {
          throw std::invalid_argument("mask plan random id not a residue");
        }
        masked.ids[slot] = plan.random_ids[m];
        break;
      case MaskAction::keep_original:
        break;
    }
  }
  return {std::move(masked), std::move(targets)};
}

}  // namespace pttt
