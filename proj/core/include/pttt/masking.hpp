#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "pttt/alphabet.hpp"
#include "pttt/rng.hpp"

namespace pttt {

struct MaskingStrategy {
  enum class Kind { fixed_ratio, uniform_ratio_range, beta_ratio };
  Kind kind = Kind::fixed_ratio;
  double p = 0.15;                  // fixed_ratio
  double lo = 0.05, hi = 0.50;      // uniform_ratio_range
  double a = 3.0, b = 9.0;          // beta_ratio ("beta30-like" default)
  double p_mask = 0.8, p_random = 0.1, p_keep = 0.1;
  std::optional<int> crop_window = 1024;

  void validate() const;
};

enum class MaskAction { to_mask_token, to_random_token, keep_original };

// One sampled corruption plan over one sequence's crop. positions are
// sorted residue indices relative to the crop (never bos/eos/pad).
struct MaskPlan {
  struct SeedTrace {
    std::uint64_t draws_before = 0;
    std::uint64_t draws_after = 0;
  };

  int crop_start = 0;
  int crop_len = 0;
  std::vector<int> positions;
  std::vector<MaskAction> actions;
  std::vector<int> random_ids;  // sampled residue id where action is
                                // to_random_token, -1 elsewhere
  SeedTrace seed_trace;
};

// crop_start = 0 when the sequence fits the window, else uniform over
// [0, raw_length - window].
int sample_crop(const TokenSequence& seq, int window, Rng& rng);

// Draw order is pinned for reproducibility: crop, ratio, position set
// (partial Fisher-Yates), then per-position action and replacement draws
// in ascending position order. |M| = max(1, round-half-up(ratio * crop_len)).
MaskPlan sample_mask_plan(const TokenSequence& seq,
                          const MaskingStrategy& strategy, Rng& rng);

// Corrupted view plus aligned targets. The view is re-framed with bos/eos
// around the crop and positions relabeled from zero. targets[i] is the
// pre-corruption id at masked positions and -1 elsewhere.
std::pair<TokenSequence, std::vector<int>> apply_mask_plan(
    const TokenSequence& seq, const MaskPlan& plan);

}  // namespace pttt
