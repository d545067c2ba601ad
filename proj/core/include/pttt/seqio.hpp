#pragma once

#include <string>
#include <vector>

#include "pttt/alphabet.hpp"
#include "pttt/mutation.hpp"

namespace pttt {

struct FastaRecord {
  std::string id;
  std::string sequence;
};

// Records in file order. Sequences may span multiple lines; interior
// whitespace is stripped. Characters outside the 20 canonical residues
// plus 'X' are rejected (gaps included: single sequences carry no '-').
std::vector<FastaRecord> parse_fasta(const std::string& text);

// Inverse of parse_fasta: parse_fasta(write_fasta(records)) == records.
std::string write_fasta(const std::vector<FastaRecord>& records,
                        int line_width = 60);

// Aligned rows over residue symbols plus gap '-'. Row 0 is the target and
// is gap-free; every row has the target's length.
struct Msa {
  std::vector<std::string> rows;
  int target_index = 0;
};

// A3M convention: lowercase letters are insertions relative to the target
// and are dropped; rows must match the target length afterwards.
Msa parse_a3m(const std::string& text);

// Strip '-' gaps from one aligned row.
std::string degap(const std::string& row);

// CSV with header `mutant,fitness`; ':'-joined multi-point mutants;
// positions are 1-based in the file. Lines starting with '#' are comments.
// An empty mutant field denotes the wild type (empty MutationSet).
std::vector<MutationRecord> parse_mutations(const std::string& csv,
                                            const TokenSequence& reference,
                                            const Alphabet& alphabet);

}  // namespace pttt
