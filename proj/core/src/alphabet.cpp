#include "pttt/alphabet.hpp"

#include <stdexcept>

namespace pttt {

const std::string& Alphabet::residues() {
  static const std::string kResidues = "ACDEFGHIKLMNPQRSTVWY";
  return kResidues;
}

int Alphabet::symbol_to_id(char symbol) const {
  switch (symbol) {
    case '<':
      return kBos;
    case '>':
      return kEos;
    case '.':
      return kPad;
    case '#':
      return kMask;
    case 'X':
      return kUnknown;
    default:
      break;
  }
  const auto pos = residues().find(symbol);
  if (pos == std::string::npos) {
    throw std::invalid_argument(std::string("invalid alphabet symbol '") +
                                symbol + "'");
  }
  return kFirstResidue + static_cast<int>(pos);
}

char Alphabet::id_to_symbol(int id) const {
  switch (id) {
    case kBos:
      return '<';
    case kEos:
      return '>';
    case kPad:
      return '.';
    case kMask:
      return '#';
    case kUnknown:
      return 'X';
    default:
      break;
  }
  if (!is_residue(id)) {
    throw std::invalid_argument("token id " + std::to_string(id) +
                                " outside vocabulary");
  }
  return residues()[id - kFirstResidue];
}

TokenSequence tokenize(const std::string& sequence, const Alphabet& alphabet,
                       std::string source_id) {
  if (sequence.empty()) {
    throw std::invalid_argument("cannot tokenize empty sequence" +
                                (source_id.empty() ? std::string()
                                                   : " (" + source_id + ")"));
  }
  TokenSequence out;
  out.source_id = std::move(source_id);
  out.ids.reserve(sequence.size() + 2);
  out.ids.push_back(Alphabet::kBos);
  for (const char symbol : sequence) {
    if (symbol == 'X') {
      out.ids.push_back(Alphabet::kUnknown);
      continue;
    }
    const int id = alphabet.symbol_to_id(symbol);
    if (!alphabet.is_residue(id)) {
      throw std::invalid_argument(std::string("invalid residue character '") +
                                  symbol + "' in sequence" +
                                  (out.source_id.empty()
                                       ? std::string()
                                       : " " + out.source_id));
    }
    out.ids.push_back(id);
  }
  out.ids.push_back(Alphabet::kEos);
  out.raw_length = static_cast<int>(out.ids.size()) - 2;
  return out;
}

std::string detokenize(const TokenSequence& tokens, const Alphabet& alphabet) {
  if (tokens.ids.size() < 2 || tokens.ids.front() != Alphabet::kBos ||
      tokens.ids.back() != Alphabet::kEos) {
    throw std::invalid_argument("token sequence is not bos/eos framed");
  }
  std::string out;
  out.reserve(tokens.ids.size() - 2);
  for (std::size_t i = 1; i + 1 < tokens.ids.size(); ++i) {
    const int id = tokens.ids[i];
    if (!alphabet.is_residue(id) && id != Alphabet::kUnknown) {
      throw std::invalid_argument("interior token id " + std::to_string(id) +
                                  " is not a residue or unknown");
    }
    out.push_back(alphabet.id_to_symbol(id));
  }
  return out;
}

}  // namespace pttt
