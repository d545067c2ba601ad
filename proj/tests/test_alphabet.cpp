#include <stdexcept>

#include "doctest.h"
#include "pttt/alphabet.hpp"

using namespace pttt;

TEST_CASE("alphabet ids are dense, disjoint, and round-trip") {
  Alphabet ab;
  CHECK(Alphabet::kVocabSize == 25);
  CHECK(Alphabet::residues().size() == 20);
  for (int id = 0; id < Alphabet::kVocabSize; ++id) {
    char sym = ab.id_to_symbol(id);
    CHECK(ab.symbol_to_id(sym) == id);
    CHECK(ab.is_residue(id) != ab.is_special(id));
  }
  for (int r = 0; r < Alphabet::kNumResidues; ++r) {
    CHECK(ab.symbol_to_id(Alphabet::residues()[r]) ==
          Alphabet::kFirstResidue + r);
  }
  CHECK(ab.symbol_to_id('X') == Alphabet::kUnknown);
  CHECK_THROWS_AS(ab.symbol_to_id('Z'), std::invalid_argument);
  CHECK_THROWS_AS(ab.symbol_to_id('1'), std::invalid_argument);
  CHECK_THROWS_AS(ab.symbol_to_id('a'), std::invalid_argument);
}

TEST_CASE("tokenize frames with bos/eos and counts raw length") {
  Alphabet ab;
  TokenSequence t = tokenize("ACDE", ab, "t");
  REQUIRE(t.ids.size() == 6);
  CHECK(t.ids.front() == Alphabet::kBos);
  CHECK(t.ids.back() == Alphabet::kEos);
  CHECK(t.ids[1] == ab.symbol_to_id('A'));
  CHECK(t.ids[2] == ab.symbol_to_id('C'));
  CHECK(t.ids[3] == ab.symbol_to_id('D'));
  CHECK(t.ids[4] == ab.symbol_to_id('E'));
  CHECK(t.raw_length == 4);
  CHECK(t.source_id == "t");
}

TEST_CASE("tokenize maps X to unknown and rejects bad input") {
  Alphabet ab;
  TokenSequence t = tokenize("AXC", ab);
  CHECK(t.ids[1] == ab.symbol_to_id('A'));
  CHECK(t.ids[2] == Alphabet::kUnknown);
  CHECK(t.ids[3] == ab.symbol_to_id('C'));
  CHECK_THROWS(tokenize("", ab));
  CHECK_THROWS(tokenize("AC-E", ab));
  CHECK_THROWS(tokenize("acde", ab));
  CHECK_THROWS(tokenize("AC#", ab));
}

TEST_CASE("detokenize inverts tokenize, unknown renders as X") {
  Alphabet ab;
  CHECK(detokenize(tokenize("ACDEFGHIKLMNPQRSTVWY", ab), ab) ==
        "ACDEFGHIKLMNPQRSTVWY");
  CHECK(detokenize(tokenize("AXC", ab), ab) == "AXC");
}
