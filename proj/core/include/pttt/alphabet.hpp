#pragma once

#include <string>
#include <vector>

namespace pttt {

// Fixed 25-token vocabulary: five specials followed by the 20 canonical
// residues in alphabetical order. Ids are dense and stable; every symbol
// round-trips through symbol_to_id / id_to_symbol.
class Alphabet {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kPad = 2;
  static constexpr int kMask = 3;
  static constexpr int kUnknown = 4;
  static constexpr int kFirstResidue = 5;
  static constexpr int kNumResidues = 20;
  static constexpr int kVocabSize = 25;

  // "ACDEFGHIKLMNPQRSTVWY"; index r maps to id kFirstResidue + r.
  static const std::string& residues();

  // Accepts the 20 residue symbols, 'X' (unknown), and the four
  // single-character special aliases '<' (bos), '>' (eos), '.' (pad),
  // '#' (mask). Throws std::invalid_argument otherwise.
  int symbol_to_id(char symbol) const;
  char id_to_symbol(int id) const;

  bool is_residue(int id) const {
    return id >= kFirstResidue && id < kVocabSize;
  }
  bool is_special(int id) const { return id >= 0 && id < kFirstResidue; }
};

// Token ids for one sequence, framed as [bos, residues..., eos].
// raw_length is the interior token count |x|.
struct TokenSequence {
  std::vector<int> ids;
  int raw_length = 0;
  std::string source_id;
};

// Residue string (plus 'X') to bos/eos-framed ids. Gap characters,
// lowercase, and special aliases are rejected: sequences carry residues only.
TokenSequence tokenize(const std::string& sequence, const Alphabet& alphabet,
                       std::string source_id = "");

// Inverse of tokenize for the interior tokens; unknown renders as 'X'.
std::string detokenize(const TokenSequence& tokens, const Alphabet& alphabet);

}  // namespace pttt
