#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pttt/mutation.hpp"
#include "pttt/seqio.hpp"

namespace pttt {

struct SyntheticFamilySpec {
  int num_families = 3;  // includes the held-out family
  int consensus_length = 48;
  // One consensus per family; generated when empty. The held-out family's
  // consensus is derived from a held-in one with a fraction of positions
  // resampled, so held-out targets are related to the training data but
  // shifted away from it.
  std::vector<std::string> consensus;
  double substitution_rate = 0.10;  // per-position non-consensus mass
  int held_out_family = -1;         // -1: last family
  int members_per_family = 60;
  int num_targets = 20;
  int assay_records = 24;  // mutated rows per target assay, plus a WT row
  int max_mutations_per_record = 2;
  std::uint64_t seed = 0;

  void validate() const;
  int held_out() const {
    return held_out_family < 0 ? num_families - 1 : held_out_family;
  }
};

// Per-position residue distributions of one family. The log-probabilities
// double as the exact fitness oracle for assays on that family.
struct FamilyModel {
  std::string consensus;
  // One row per position, Alphabet::residues() order, each row sums to 1.
  std::vector<std::array<double, 20>> tables;
};

struct SyntheticAssay {
  std::string target_id;
  std::string target_sequence;  // reference the records mutate
  std::vector<MutationRecord> records;  // first row is WT with fitness 0
};

struct SyntheticCorpus {
  std::vector<FamilyModel> families;  // index = family id
  std::vector<FastaRecord> training;  // held-in members, "famF_memberM"
  std::vector<FastaRecord> targets;   // held-out draws, "target_T"
  std::vector<SyntheticAssay> assays;  // aligned with targets; empty when
                                       // substitution_rate is 0
};

// Deterministic per seed. The held-out consensus keeps an edit distance of
// at least 30% of the length from every held-in consensus.
SyntheticCorpus generate_corpus(const SyntheticFamilySpec& spec);

// Sum over mutations of log P(mutant) - log P(wild type) at the mutated
// positions; exactly 0 for the empty set.
double oracle_fitness(const FamilyModel& family, const std::string& reference,
                      const MutationSet& muts);

// Inverse of parse_mutations: WT rows have an empty mutant field, other
// rows reuse the record id as the mutant field.
std::string write_mutations_csv(const std::vector<MutationRecord>& records);

int edit_distance(const std::string& a, const std::string& b);

}  // namespace pttt
