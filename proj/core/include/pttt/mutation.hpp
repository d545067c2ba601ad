#pragma once

#include <string>
#include <vector>

namespace pttt {

// One substitution against a reference sequence. position is 0-based into
// the raw residue string; wild_type and mutant are residue token ids.
struct Mutation {
  int position = 0;
  int wild_type = 0;
  int mutant = 0;
};

// Positions are unique within one set. Empty set denotes the wild type.
struct MutationSet {
  std::vector<Mutation> substitutions;
};

struct MutationRecord {
  MutationSet mutations;
  double measured_fitness = 0.0;
  std::string id;
};

}  // namespace pttt
