#include "pttt/seqio.hpp"

#include <cctype>
#include <sstream>
#include <stdexcept>

namespace pttt {

namespace {

bool is_canonical_residue(char symbol) {
  return Alphabet::residues().find(symbol) != std::string::npos;
}

std::string trim_right(std::string line) {
  while (!line.empty() &&
         (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) {
    line.pop_back();
  }
  return line;
}

// Shared FASTA scaffold walker; body validation differs per format.
template <typename BodyCharFn>
std::vector<FastaRecord> parse_fasta_like(const std::string& text,
                                          BodyCharFn&& accept_char,
                                          const char* format_name) {
  std::vector<FastaRecord> records;
  std::istringstream stream(text);
  std::string line;
  bool saw_header = false;
  while (std::getline(stream, line)) {
    line = trim_right(line);
    if (line.empty()) continue;
    if (line[0] == '>') {
      std::string id = line.substr(1);
      if (id.empty()) {
        throw std::invalid_argument(std::string(format_name) +
                                    ": malformed header with empty id");
      }
      if (saw_header && records.back().sequence.empty()) {
        throw std::invalid_argument(std::string(format_name) +
                                    ": empty sequence for record '" +
                                    records.back().id + "'");
      }
      records.push_back({std::move(id), ""});
      saw_header = true;
      continue;
    }
    if (!saw_header) {
      throw std::invalid_argument(std::string(format_name) +
                                  ": sequence data before first '>' header");
    }
    for (const char symbol : line) {
      if (symbol == ' ' || symbol == '\t') continue;
      if (!accept_char(symbol)) {
        throw std::invalid_argument(std::string(format_name) +
                                    ": invalid character '" + symbol +
                                    "' in record '" + records.back().id + "'");
      }
      records.back().sequence.push_back(symbol);
    }
  }
  if (records.empty()) {
    throw std::invalid_argument(std::string(format_name) +
                                ": no records in input");
  }
  if (records.back().sequence.empty()) {
    throw std::invalid_argument(std::string(format_name) +
                                ": empty sequence for record '" +
                                records.back().id + "'");
  }
  return records;
}

}  // namespace

std::vector<FastaRecord> parse_fasta(const std::string& text) {
  return parse_fasta_like(
      text,
      [](char symbol) { return is_canonical_residue(symbol) || symbol == 'X'; },
      "fasta");
}

std::string write_fasta(const std::vector<FastaRecord>& records,
                        int line_width) {
  if (line_width < 1) {
    throw std::invalid_argument("fasta line width must be positive");
  }
  std::string out;
  for (const auto& record : records) {
    out.push_back('>');
    out.append(record.id);
    out.push_back('\n');
    for (std::size_t offset = 0; offset < record.sequence.size();
         offset += static_cast<std::size_t>(line_width)) {
      out.append(record.sequence.substr(offset,
                                        static_cast<std::size_t>(line_width)));
      out.push_back('\n');
    }
  }
  return out;
}

std::string degap(const std::string& row) {
  std::string out;
  out.reserve(row.size());
  for (const char symbol : row) {
    if (symbol != '-') out.push_back(symbol);
  }
  return out;
}

Msa parse_a3m(const std::string& text) {
  const auto records = parse_fasta_like(
      text,
      [](char symbol) {
        return is_canonical_residue(symbol) || symbol == 'X' ||
               symbol == '-' ||
               (std::islower(static_cast<unsigned char>(symbol)) != 0);
      },
      "a3m");

  Msa msa;
  msa.target_index = 0;
  for (const auto& record : records) {
    std::string aligned;
    aligned.reserve(record.sequence.size());
    for (const char symbol : record.sequence) {
      if (std::islower(static_cast<unsigned char>(symbol)) != 0) continue;
      aligned.push_back(symbol);
    }
    if (msa.rows.empty()) {
      if (aligned.find('-') != std::string::npos) {
        throw std::invalid_argument("a3m: target row '" + record.id +
                                    "' contains gaps");
      }
    } else if (aligned.size() != msa.rows.front().size()) {
      throw std::invalid_argument(
          "a3m: row '" + record.id + "' has aligned length " +
          std::to_string(aligned.size()) + ", expected " +
          std::to_string(msa.rows.front().size()));
    }
    if (degap(aligned).empty()) {
      throw std::invalid_argument("a3m: row '" + record.id +
                                  "' contains no residues");
    }
    msa.rows.push_back(std::move(aligned));
  }
  return msa;
}

namespace {

Mutation parse_one_mutation(const std::string& token,
                            const TokenSequence& reference,
                            const Alphabet& alphabet) {
  if (token.size() < 3) {
    throw std::invalid_argument("mutation '" + token +
                                "' is too short (want e.g. A24G)");
  }
  const char wild_symbol = token.front();
  const char mutant_symbol = token.back();
  if (!is_canonical_residue(wild_symbol) ||
      !is_canonical_residue(mutant_symbol)) {
    throw std::invalid_argument("mutation '" + token +
                                "' has a non-residue endpoint");
  }
  const std::string digits = token.substr(1, token.size() - 2);
  for (const char c : digits) {
    if (std::isdigit(static_cast<unsigned char>(c)) == 0) {
      throw std::invalid_argument("mutation '" + token +
                                  "' has a malformed position");
    }
  }
  const long position_1b = std::stol(digits);
  if (position_1b < 1 || position_1b > reference.raw_length) {
    throw std::invalid_argument(
        "mutation '" + token + "' position out of range [1, " +
        std::to_string(reference.raw_length) + "]");
  }
  Mutation mut;
  mut.position = static_cast<int>(position_1b) - 1;
  mut.wild_type = alphabet.symbol_to_id(wild_symbol);
  mut.mutant = alphabet.symbol_to_id(mutant_symbol);
  const int reference_id = reference.ids[static_cast<std::size_t>(
      1 + mut.position)];
  if (reference_id != mut.wild_type) {
    throw std::invalid_argument(
        "mutation '" + token + "' wild type mismatch: reference has '" +
        std::string(1, alphabet.id_to_symbol(reference_id)) + "' at position " +
        std::to_string(position_1b));
  }
  return mut;
}

}  // namespace

std::vector<MutationRecord> parse_mutations(const std::string& csv,
                                            const TokenSequence& reference,
                                            const Alphabet& alphabet) {
  std::istringstream stream(csv);
  std::string line;
  bool saw_header = false;
  std::vector<MutationRecord> records;
  while (std::getline(stream, line)) {
    line = trim_right(line);
    if (line.empty() || line[0] == '#') continue;
    if (!saw_header) {
      if (line != "mutant,fitness") {
        throw std::invalid_argument(
            "mutation csv: expected header 'mutant,fitness', got '" + line +
            "'");
      }
      saw_header = true;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos || line.find(',', comma + 1) !=
                                          std::string::npos) {
      throw std::invalid_argument("mutation csv: want 2 fields, got '" + line +
                                  "'");
    }
    MutationRecord record;
    const std::string mutant_field = line.substr(0, comma);
    const std::string fitness_field = line.substr(comma + 1);
    std::size_t consumed = 0;
    record.measured_fitness = std::stod(fitness_field, &consumed);
    if (consumed != fitness_field.size()) {
      throw std::invalid_argument("mutation csv: malformed fitness '" +
                                  fitness_field + "'");
    }
    record.id = mutant_field.empty() ? "WT" : mutant_field;
    std::size_t start = 0;
    while (start < mutant_field.size()) {
      auto colon = mutant_field.find(':', start);
      if (colon == std::string::npos) colon = mutant_field.size();
      const std::string token = mutant_field.substr(start, colon - start);
      const Mutation mut = parse_one_mutation(token, reference, alphabet);
      for (const auto& prior : record.mutations.substitutions) {
        if (prior.position == mut.position) {
          throw std::invalid_argument("mutation '" + mutant_field +
                                      "' repeats position " +
                                      std::to_string(mut.position + 1));
        }
      }
      record.mutations.substitutions.push_back(mut);
      start = colon + 1;
    }
    records.push_back(std::move(record));
  }
  if (!saw_header) {
    throw std::invalid_argument("mutation csv: empty input");
  }
  return records;
}

}  // namespace pttt
