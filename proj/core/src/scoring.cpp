#include "pttt/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace pttt {

namespace {

void check_reference(const TokenSequence& x) {
  if (x.raw_length < 1 || x.ids.size() != static_cast<std::size_t>(
                                              x.raw_length) + 2) {
    throw std::invalid_argument("malformed token sequence");
  }
}

// Full-vocab log-softmax of one logits row, in double; optionally
// renormalized over the 20 residue tokens.
Eigen::RowVectorXd log_softmax_row(
    const Eigen::Ref<const Eigen::RowVectorXf>& row, bool renormalize) {
  const Eigen::RowVectorXd logits = row.cast<double>();
  const double row_max = logits.maxCoeff();
  const Eigen::ArrayXd shifted = (logits.array() - row_max).transpose();
  if (!renormalize) {
    const double lse = std::log(shifted.exp().sum());
    return (shifted - lse).transpose().matrix();
  }
  double residue_sum = 0.0;
  for (int v = Alphabet::kFirstResidue; v < Alphabet::kVocabSize; ++v) {
    residue_sum += std::exp(shifted(v));
  }
  const double lse = std::log(residue_sum);
  Eigen::RowVectorXd out =
      Eigen::RowVectorXd::Constant(logits.size(),
                                   -std::numeric_limits<double>::infinity());
  for (int v = Alphabet::kFirstResidue; v < Alphabet::kVocabSize; ++v) {
    out(v) = shifted(v) - lse;
  }
  return out;
}

}  // namespace

Mat<double> conditional_log_probs(const BackboneWeights<float>& weights,
                                  const LoraAdapter<float>* adapter,
                                  const TokenSequence& x,
                                  const ScoringOptions& options) {
  check_reference(x);
  if (options.micro_batch_size < 1) {
    throw std::invalid_argument("scoring micro_batch_size must be >= 1");
  }
  const int n = x.raw_length;
  Mat<double> out(n, weights.config.vocab_size);

  for (int start = 0; start < n; start += options.micro_batch_size) {
    const int count = std::min(options.micro_batch_size, n - start);
    IdMatrix ids(count, static_cast<Eigen::Index>(x.ids.size()));
    for (int r = 0; r < count; ++r) {
      for (std::size_t c = 0; c < x.ids.size(); ++c) {
        ids(r, static_cast<Eigen::Index>(c)) = x.ids[c];
      }
      ids(r, 1 + start + r) = Alphabet::kMask;
    }
    const auto logits = forward_logits(weights, adapter, ids);
    for (int r = 0; r < count; ++r) {
      out.row(start + r) = log_softmax_row(
          logits[static_cast<std::size_t>(r)].row(1 + start + r),
          options.renormalize_residues);
    }
  }
  return out;
}

double pseudo_perplexity(const BackboneWeights<float>& weights,
                         const LoraAdapter<float>* adapter,
                         const TokenSequence& x,
                         const ScoringOptions& options) {
  check_reference(x);
  if (options.renormalize_residues) {
    for (int i = 0; i < x.raw_length; ++i) {
      if (x.ids[static_cast<std::size_t>(i) + 1] == Alphabet::kUnknown) {
        throw std::invalid_argument(
            "renormalized scoring requires an X-free sequence");
      }
    }
  }
  const Mat<double> clp = conditional_log_probs(weights, adapter, x, options);
  double nll = 0.0;
  for (int i = 0; i < x.raw_length; ++i) {
    nll -= clp(i, x.ids[static_cast<std::size_t>(i) + 1]);
  }
  return std::exp(nll / x.raw_length);
}

namespace {

void check_mutations(const TokenSequence& reference, const MutationSet& muts) {
  for (const auto& mut : muts.substitutions) {
    if (mut.position < 0 || mut.position >= reference.raw_length) {
      throw std::invalid_argument("mutation position " +
                                  std::to_string(mut.position + 1) +
                                  " out of range");
    }
    if (mut.mutant < Alphabet::kFirstResidue ||
        mut.mutant >= Alphabet::kVocabSize) {
      throw std::invalid_argument("mutant token is not a residue");
    }
    if (reference.ids[static_cast<std::size_t>(mut.position) + 1] !=
        mut.wild_type) {
      throw std::invalid_argument(
          "mutation wild type disagrees with the reference at position " +
          std::to_string(mut.position + 1));
    }
    for (const auto& other : muts.substitutions) {
      if (&other != &mut && other.position == mut.position) {
        throw std::invalid_argument("duplicate mutation position " +
                                    std::to_string(mut.position + 1));
      }
    }
  }
}

// Sum of per-position log-odds where row_for(position) supplies the
// conditioning distribution; summation runs in ascending position order so
// equal inputs reduce identically.
template <typename RowFn>
double sum_log_odds(const MutationSet& muts, RowFn&& row_for) {
  std::vector<const Mutation*> ordered;
  ordered.reserve(muts.substitutions.size());
  for (const auto& mut : muts.substitutions) ordered.push_back(&mut);
  std::sort(ordered.begin(), ordered.end(),
            [](const Mutation* a, const Mutation* b) {
              return a->position < b->position;
            });
  double score = 0.0;
  for (const Mutation* mut : ordered) {
    const Eigen::RowVectorXd row = row_for(mut->position);
    score += row(mut->mutant) - row(mut->wild_type);
  }
  return score;
}

}  // namespace

double log_odds_score(const BackboneWeights<float>& weights,
                      const LoraAdapter<float>* adapter,
                      const TokenSequence& reference, const MutationSet& muts,
                      ScoringMode mode, const ScoringOptions& options) {
  check_reference(reference);
  check_mutations(reference, muts);
  if (muts.substitutions.empty()) return 0.0;

  switch (mode) {
    case ScoringMode::masked_marginal_independent: {
      // One single-position-masked forward per mutated position.
      std::vector<int> positions;
      for (const auto& mut : muts.substitutions) {
        positions.push_back(mut.position);
      }
      std::sort(positions.begin(), positions.end());
      IdMatrix ids(static_cast<Eigen::Index>(positions.size()),
                   static_cast<Eigen::Index>(reference.ids.size()));
      for (std::size_t r = 0; r < positions.size(); ++r) {
        for (std::size_t c = 0; c < reference.ids.size(); ++c) {
          ids(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
              reference.ids[c];
        }
        ids(static_cast<Eigen::Index>(r), 1 + positions[r]) = Alphabet::kMask;
      }
      const auto logits = forward_logits(weights, adapter, ids);
      return sum_log_odds(muts, [&](int position) {
        const auto it =
            std::lower_bound(positions.begin(), positions.end(), position);
        const std::size_t r =
            static_cast<std::size_t>(it - positions.begin());
        return log_softmax_row(logits[r].row(1 + position),
                               options.renormalize_residues);
      });
    }
    case ScoringMode::masked_marginal_joint: {
      // One forward conditioned on x with every mutated position masked.
      IdMatrix ids(1, static_cast<Eigen::Index>(reference.ids.size()));
      for (std::size_t c = 0; c < reference.ids.size(); ++c) {
        ids(0, static_cast<Eigen::Index>(c)) = reference.ids[c];
      }
      for (const auto& mut : muts.substitutions) {
        ids(0, 1 + mut.position) = Alphabet::kMask;
      }
      const auto logits = forward_logits(weights, adapter, ids);
      return sum_log_odds(muts, [&](int position) {
        return log_softmax_row(logits[0].row(1 + position),
                               options.renormalize_residues);
      });
    }
    case ScoringMode::wildtype_marginal: {
      // One unmasked forward over the plain reference.
      IdMatrix ids(1, static_cast<Eigen::Index>(reference.ids.size()));
      for (std::size_t c = 0; c < reference.ids.size(); ++c) {
        ids(0, static_cast<Eigen::Index>(c)) = reference.ids[c];
      }
      const auto logits = forward_logits(weights, adapter, ids);
      return sum_log_odds(muts, [&](int position) {
        return log_softmax_row(logits[0].row(1 + position),
                               options.renormalize_residues);
      });
    }
  }
  throw std::logic_error("unreachable scoring mode");
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return values[a] < values[b];
  });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    // 1-based ranks; a tie group shares the mean of its span.
    const double shared = 0.5 * (static_cast<double>(i + 1) +
                                 static_cast<double>(j + 1));
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& pred,
                const std::vector<double>& truth) {
  if (pred.size() != truth.size()) {
    throw std::invalid_argument("spearman length mismatch");
  }
  if (pred.size() < 2) {
    throw std::invalid_argument("spearman needs at least 2 values");
  }
  for (const double v : pred) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument("spearman input is not finite");
    }
  }
  for (const double v : truth) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument("spearman input is not finite");
    }
  }

  const std::vector<double> ra = average_ranks(pred);
  const std::vector<double> rb = average_ranks(truth);
  const std::size_t n = ra.size();

  // Ranks are half-integers, so these identities are exact: equal rank
  // vectors mean rho = 1, mirrored ones mean rho = -1.
  bool all_equal = true;
  bool all_mirrored = true;
  for (std::size_t i = 0; i < n; ++i) {
    all_equal = all_equal && ra[i] == rb[i];
    all_mirrored =
        all_mirrored && ra[i] + rb[i] == static_cast<double>(n) + 1.0;
  }

  double mean_a = 0.0, mean_b = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mean_a += ra[i];
    mean_b += rb[i];
  }
  mean_a /= static_cast<double>(n);
  mean_b /= static_cast<double>(n);
  double sab = 0.0, sa = 0.0, sb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = ra[i] - mean_a;
    const double db = rb[i] - mean_b;
    sab += da * db;
    sa += da * da;
    sb += db * db;
  }
  if (sa == 0.0 || sb == 0.0) {
    throw std::invalid_argument(
        "spearman undefined for an all-constant vector");
  }
  if (all_equal) return 1.0;
  if (all_mirrored) return -1.0;
  return sab / std::sqrt(sa * sb);
}

AssayResult evaluate_assay(const BackboneWeights<float>& weights,
                           const LoraAdapter<float>* adapter,
                           const TokenSequence& reference,
                           const std::vector<MutationRecord>& records,
                           ScoringMode mode, const ScoringOptions& options) {
  check_reference(reference);
  if (records.size() < 2) {
    throw std::invalid_argument("assay needs at least 2 records");
  }

  AssayResult result;
  result.n = static_cast<int>(records.size());
  result.scores.reserve(records.size());

  if (mode == ScoringMode::masked_marginal_independent ||
      mode == ScoringMode::wildtype_marginal) {
    // Per-position conditionals are shared across records in these modes.
    Mat<double> rows;
    if (mode == ScoringMode::masked_marginal_independent) {
      rows = conditional_log_probs(weights, adapter, reference, options);
    } else {
      IdMatrix ids(1, static_cast<Eigen::Index>(reference.ids.size()));
      for (std::size_t c = 0; c < reference.ids.size(); ++c) {
        ids(0, static_cast<Eigen::Index>(c)) = reference.ids[c];
      }
      const auto logits = forward_logits(weights, adapter, ids);
      rows.resize(reference.raw_length, weights.config.vocab_size);
      for (int i = 0; i < reference.raw_length; ++i) {
        rows.row(i) = log_softmax_row(logits[0].row(1 + i),
                                      options.renormalize_residues);
      }
    }
    for (const auto& record : records) {
      check_mutations(reference, record.mutations);
      result.scores.push_back(sum_log_odds(
          record.mutations,
          [&](int position) -> Eigen::RowVectorXd {
            return rows.row(position);
          }));
    }
  } else {
    for (const auto& record : records) {
      result.scores.push_back(log_odds_score(weights, adapter, reference,
                                             record.mutations, mode, options));
    }
  }

  std::vector<double> truth;
  truth.reserve(records.size());
  for (const auto& record : records) truth.push_back(record.measured_fitness);
  result.spearman = spearman(result.scores, truth);
  return result;
}

}  // namespace pttt
