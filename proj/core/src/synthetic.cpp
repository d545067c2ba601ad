#include "pttt/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <stdexcept>
#include <string>

#include "pttt/alphabet.hpp"
#include "pttt/rng.hpp"

namespace pttt {

namespace {

constexpr std::uint64_t kConsensusStream = 0x636f6e73ULL;
constexpr std::uint64_t kTableStream = 0x7461626cULL;
constexpr std::uint64_t kMemberStream = 0x6d656d62ULL;
constexpr std::uint64_t kTargetStream = 0x74617267ULL;
constexpr std::uint64_t kAssayStream = 0x61737361ULL;

int residue_index(char symbol) {
  const std::string& residues = Alphabet::residues();
  const auto at = residues.find(symbol);
  if (at == std::string::npos) {
    throw std::invalid_argument(std::string("non-residue symbol '") + symbol +
                                "'");
  }
  return static_cast<int>(at);
}

char residue_symbol(int index) { return Alphabet::residues()[index]; }

int sample_residue(const std::array<double, 20>& row, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  int last_positive = -1;
  for (int r = 0; r < 20; ++r) {
    if (row[r] > 0.0) last_positive = r;
    cum += row[r];
    if (u < cum) return r;
  }
  // Rounding can leave cum marginally below 1; u landed in that sliver.
  return last_positive;
}

std::string random_sequence(int length, Rng& rng) {
  std::string out(static_cast<std::size_t>(length), 'A');
  for (int i = 0; i < length; ++i) {
    out[static_cast<std::size_t>(i)] = residue_symbol(rng.index(20));
  }
  return out;
}

std::string format_double(double value) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  return buf;
}

}  // namespace

void SyntheticFamilySpec::validate() const {
  if (num_families < 2) {
    throw std::invalid_argument("need at least one held-in family plus the "
                                "held-out one");
  }
  if (consensus_length < 8) {
    throw std::invalid_argument("consensus_length must be >= 8");
  }
  if (!consensus.empty()) {
    if (static_cast<int>(consensus.size()) != num_families) {
      throw std::invalid_argument("consensus list must cover every family");
    }
    for (const std::string& c : consensus) {
      if (static_cast<int>(c.size()) != consensus_length) {
        throw std::invalid_argument("consensus length mismatch");
      }
      for (char s : c) residue_index(s);
    }
  }
  if (!(substitution_rate >= 0.0) || substitution_rate >= 1.0) {
    throw std::invalid_argument("substitution_rate must be in [0, 1)");
  }
  if (held_out_family < -1 || held_out_family >= num_families) {
    throw std::invalid_argument("held_out_family out of range");
  }
  if (members_per_family < 1) {
    throw std::invalid_argument("members_per_family must be >= 1");
  }
  if (num_targets < 0) throw std::invalid_argument("num_targets must be >= 0");
  if (assay_records < 1) {
    throw std::invalid_argument("assay_records must be >= 1");
  }
  if (max_mutations_per_record < 1 ||
      max_mutations_per_record > consensus_length) {
    throw std::invalid_argument("max_mutations_per_record out of range");
  }
}

int edit_distance(const std::string& a, const std::string& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<int> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= m; ++j) {
      const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double oracle_fitness(const FamilyModel& family, const std::string& reference,
                      const MutationSet& muts) {
  if (family.tables.size() != reference.size()) {
    throw std::invalid_argument("family tables do not cover the reference");
  }
  std::set<int> seen;
  double total = 0.0;
  for (const Mutation& m : muts.substitutions) {
    if (m.position < 0 || m.position >= static_cast<int>(reference.size())) {
      throw std::out_of_range("mutation position out of range");
    }
    if (!seen.insert(m.position).second) {
      throw std::invalid_argument("duplicate mutation position");
    }
    const int wt = m.wild_type - Alphabet::kFirstResidue;
    const int mut = m.mutant - Alphabet::kFirstResidue;
    if (wt < 0 || wt >= 20 || mut < 0 || mut >= 20) {
      throw std::invalid_argument("mutation tokens must be residues");
    }
    const std::size_t pos = static_cast<std::size_t>(m.position);
    if (residue_index(reference[pos]) != wt) {
      throw std::invalid_argument("wild type disagrees with the reference");
    }
    const auto& row = family.tables[pos];
    total += std::log(row[static_cast<std::size_t>(mut)]) -
             std::log(row[static_cast<std::size_t>(wt)]);
  }
  return total;
}

std::string write_mutations_csv(const std::vector<MutationRecord>& records) {
  std::string out = "mutant,fitness\n";
  for (const MutationRecord& rec : records) {
    const bool wild = rec.mutations.substitutions.empty();
    if (wild != (rec.id == "WT")) {
      throw std::invalid_argument("record id inconsistent with mutation set");
    }
    const std::string& field = wild ? "" : rec.id;
    if (field.find_first_of(",\n") != std::string::npos) {
      throw std::invalid_argument("mutant field must not contain ',' or "
                                  "newlines");
    }
    out += field;
    out += ',';
    out += format_double(rec.measured_fitness);
    out += '\n';
  }
  return out;
}

SyntheticCorpus generate_corpus(const SyntheticFamilySpec& spec) {
  spec.validate();
  const int L = spec.consensus_length;
  const int ho = spec.held_out();
  const int min_distance = (3 * L + 9) / 10;  // ceil(0.30 * L)

  SyntheticCorpus corpus;
  corpus.families.resize(static_cast<std::size_t>(spec.num_families));

  std::vector<std::string> consensus = spec.consensus;
  if (consensus.empty()) {
    consensus.resize(static_cast<std::size_t>(spec.num_families));
    Rng c_rng(Rng::mix(spec.seed, kConsensusStream));
    int base = -1;
    for (int f = 0; f < spec.num_families; ++f) {
      if (f == ho) continue;
      consensus[static_cast<std::size_t>(f)] = random_sequence(L, c_rng);
      if (base < 0) base = f;
    }
    const int resample = (35 * L + 99) / 100;  // ceil(0.35 * L)
    std::vector<int> order(static_cast<std::size_t>(L));
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      std::string cand = consensus[static_cast<std::size_t>(base)];
      for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = static_cast<int>(i);
      }
      c_rng.shuffle(order.begin(), order.end());
      for (int s = 0; s < resample; ++s) {
        const auto pos = static_cast<std::size_t>(order[s]);
        const int old = residue_index(cand[pos]);
        cand[pos] = residue_symbol((old + 1 + c_rng.index(19)) % 20);
      }
      placed = true;
      for (int f = 0; f < spec.num_families && placed; ++f) {
        if (f == ho) continue;
        placed = edit_distance(cand, consensus[static_cast<std::size_t>(f)]) >=
                 min_distance;
      }
      if (placed) consensus[static_cast<std::size_t>(ho)] = cand;
    }
    if (!placed) {
      throw std::runtime_error("could not place the held-out consensus at "
                               "the required distance");
    }
  } else {
    for (int f = 0; f < spec.num_families; ++f) {
      if (f == ho) continue;
      const int d = edit_distance(consensus[static_cast<std::size_t>(ho)],
                                  consensus[static_cast<std::size_t>(f)]);
      if (d < min_distance) {
        throw std::invalid_argument(
            "held-out consensus too close to family " + std::to_string(f));
      }
    }
  }

  // Position tables: consensus keeps 1 - rate of the mass, the rest is
  // spread over the other residues by a seeded softmax.
  for (int f = 0; f < spec.num_families; ++f) {
    FamilyModel& family = corpus.families[static_cast<std::size_t>(f)];
    family.consensus = consensus[static_cast<std::size_t>(f)];
    family.tables.resize(static_cast<std::size_t>(L));
    Rng t_rng(Rng::mix(spec.seed, static_cast<std::uint64_t>(f),
                       kTableStream));
    for (int i = 0; i < L; ++i) {
      auto& row = family.tables[static_cast<std::size_t>(i)];
      const int cons = residue_index(family.consensus[
          static_cast<std::size_t>(i)]);
      if (spec.substitution_rate == 0.0) {
        row.fill(0.0);
        row[static_cast<std::size_t>(cons)] = 1.0;
        continue;
      }
      std::array<double, 20> g{};
      double max_g = -1e300;
      for (int r = 0; r < 20; ++r) {
        if (r == cons) continue;
        g[static_cast<std::size_t>(r)] = t_rng.normal();
        max_g = std::max(max_g, g[static_cast<std::size_t>(r)]);
      }
      double z = 0.0;
      for (int r = 0; r < 20; ++r) {
        if (r == cons) continue;
        z += std::exp(g[static_cast<std::size_t>(r)] - max_g);
      }
      for (int r = 0; r < 20; ++r) {
        row[static_cast<std::size_t>(r)] =
            r == cons ? 1.0 - spec.substitution_rate
                      : spec.substitution_rate *
                            std::exp(g[static_cast<std::size_t>(r)] - max_g) /
                            z;
      }
    }
  }

  for (int f = 0; f < spec.num_families; ++f) {
    if (f == ho) continue;
    const FamilyModel& family = corpus.families[static_cast<std::size_t>(f)];
    Rng m_rng(Rng::mix(spec.seed, static_cast<std::uint64_t>(f),
                       kMemberStream));
    for (int m = 0; m < spec.members_per_family; ++m) {
      std::string seq(static_cast<std::size_t>(L), 'A');
      for (int i = 0; i < L; ++i) {
        seq[static_cast<std::size_t>(i)] = residue_symbol(
            sample_residue(family.tables[static_cast<std::size_t>(i)], m_rng));
      }
      corpus.training.push_back({"fam" + std::to_string(f) + "_member" +
                                     std::to_string(m),
                                 std::move(seq)});
    }
  }

  const FamilyModel& held_out = corpus.families[static_cast<std::size_t>(ho)];
  Rng g_rng(Rng::mix(spec.seed, kTargetStream));
  for (int t = 0; t < spec.num_targets; ++t) {
    std::string seq(static_cast<std::size_t>(L), 'A');
    for (int i = 0; i < L; ++i) {
      seq[static_cast<std::size_t>(i)] = residue_symbol(
          sample_residue(held_out.tables[static_cast<std::size_t>(i)], g_rng));
    }
    corpus.targets.push_back({"target_" + std::to_string(t), std::move(seq)});
  }

  if (spec.substitution_rate == 0.0) return corpus;  // no finite oracle

  for (int t = 0; t < spec.num_targets; ++t) {
    const FastaRecord& target = corpus.targets[static_cast<std::size_t>(t)];
    SyntheticAssay assay;
    assay.target_id = target.id;
    assay.target_sequence = target.sequence;
    assay.records.push_back({MutationSet{}, 0.0, "WT"});
    Rng a_rng(Rng::mix(spec.seed, static_cast<std::uint64_t>(t),
                       kAssayStream));
    std::set<std::string> used;
    for (int r = 0; r < spec.assay_records; ++r) {
      MutationRecord rec;
      for (int attempt = 0;; ++attempt) {
        if (attempt >= 1000) {
          throw std::runtime_error("assay sampling failed to find a fresh "
                                   "mutant");
        }
        const int k = 1 + a_rng.index(spec.max_mutations_per_record);
        std::vector<int> positions;
        while (static_cast<int>(positions.size()) < k) {
          const int p = a_rng.index(L);
          if (std::find(positions.begin(), positions.end(), p) ==
              positions.end()) {
            positions.push_back(p);
          }
        }
        std::sort(positions.begin(), positions.end());
        MutationSet set;
        std::string id;
        for (const int p : positions) {
          const char wt_symbol = target.sequence[static_cast<std::size_t>(p)];
          const int wt = residue_index(wt_symbol);
          const int mut = (wt + 1 + a_rng.index(19)) % 20;
          set.substitutions.push_back({p, Alphabet::kFirstResidue + wt,
                                       Alphabet::kFirstResidue + mut});
          if (!id.empty()) id += ':';
          id += wt_symbol;
          id += std::to_string(p + 1);
          id += residue_symbol(mut);
        }
        if (!used.insert(id).second) continue;
        rec.mutations = std::move(set);
        rec.id = std::move(id);
        rec.measured_fitness =
            oracle_fitness(held_out, target.sequence, rec.mutations);
        break;
      }
      assay.records.push_back(std::move(rec));
    }
    corpus.assays.push_back(std::move(assay));
  }
  return corpus;
}

}  // namespace pttt
