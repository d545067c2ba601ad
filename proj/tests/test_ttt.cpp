#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "pttt/heads.hpp"
#include "pttt/scoring.hpp"
#include "pttt/synthetic.hpp"
#include "pttt/ttt.hpp"

using namespace pttt;

namespace {

ModelConfig tiny_config(std::uint64_t seed = 51) {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.model_dim = 32;
  cfg.num_heads = 4;
  cfg.ffn_dim = 48;
  cfg.max_positions = 96;
  cfg.seed = seed;
  return cfg;
}

TokenSequence random_sequence(int length, Rng& rng) {
  std::string s;
  for (int i = 0; i < length; ++i) {
    s.push_back(Alphabet::residues()[rng.index(Alphabet::kNumResidues)]);
  }
  return tokenize(s, Alphabet{});
}

TTTConfig small_ttt(std::uint64_t seed = 0) {
  TTTConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.micro_batch_size = 2;
  cfg.grad_accum_steps = 2;
  cfg.steps = 3;
  cfg.seed = seed;
  return cfg;
}

bool weights_bit_equal(const BackboneWeights<float>& a,
                       const BackboneWeights<float>& b) {
  bool equal = true;
  std::vector<const Mat<float>*> lhs;
  a.visit([&](const std::string&, const Mat<float>& t) { lhs.push_back(&t); });
  std::size_t i = 0;
  b.visit([&](const std::string&, const Mat<float>& t) {
    if (!(lhs[i]->array() == t.array()).all()) equal = false;
    ++i;
  });
  return equal;
}

bool logits_bit_equal(const BackboneWeights<float>& a,
                      const LoraAdapter<float>* aa,
                      const BackboneWeights<float>& b,
                      const LoraAdapter<float>* bb, const IdMatrix& probe) {
  auto la = forward_logits(a, aa, probe);
  auto lb = forward_logits(b, bb, probe);
  for (std::size_t i = 0; i < la.size(); ++i) {
    if (!(la[i].array() == lb[i].array()).all()) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("ttt config validation") {
  TTTConfig cfg = small_ttt();
  CHECK_NOTHROW(cfg.validate());
  cfg.steps = 0;
  CHECK_THROWS(cfg.validate());
  cfg = small_ttt();
  cfg.learning_rate = -1.0;
  CHECK_THROWS(cfg.validate());
  cfg = small_ttt();
  cfg.micro_batch_size = 0;
  CHECK_THROWS(cfg.validate());
  cfg = small_ttt();
  cfg.lora = LoraSpec{};  // lora without lora_only selection
  CHECK_THROWS(cfg.validate());
  cfg = small_ttt();
  cfg.trainable.mode = TrainableSelection::Mode::lora_only;  // and vice versa
  CHECK_THROWS(cfg.validate());
  cfg.lora = LoraSpec{};
  CHECK_NOTHROW(cfg.validate());
  cfg.lora->rank = 0;
  CHECK_THROWS(cfg.validate());
}

TEST_CASE("lr zero with one step leaves forward behavior at theta_0") {
  auto model = init_backbone<float>(tiny_config());
  const BackboneWeights<float> original = model;
  Rng rng(1);
  TokenSequence x = random_sequence(16, rng);
  TTTConfig cfg = small_ttt();
  cfg.learning_rate = 0.0;
  cfg.steps = 1;
  TTTSession session = ttt_single(model, x, cfg);
  REQUIRE(session.trace.steps.size() == 2);
  CHECK(std::isnan(session.trace.steps[0].loss));
  CHECK(std::isfinite(session.trace.steps[1].loss));
  CHECK(session.trace.selected_step == 1);
  CHECK(weights_bit_equal(model, original));
}

TEST_CASE("without a confidence hook the last step is selected") {
  auto model = init_backbone<float>(tiny_config());
  Rng rng(2);
  TokenSequence x = random_sequence(16, rng);
  TTTConfig cfg = small_ttt();
  cfg.steps = 4;
  TTTSession session = ttt_single(model, x, cfg);
  CHECK(session.trace.selected_step == 4);
  REQUIRE(session.trace.steps.size() == 5);
  for (const auto& rec : session.trace.steps) {
    CHECK_FALSE(rec.confidence.has_value());
  }
}

TEST_CASE("confidence argmax picks the step, ties go earliest") {
  Rng rng(3);
  TokenSequence x = random_sequence(14, rng);

  // Captured model states per step let the selection be checked bit-exactly.
  auto run_with_script = [&](std::vector<double> script) {
    auto model = init_backbone<float>(tiny_config());
    std::vector<BackboneWeights<float>> seen;
    auto observer = [&](int, const BackboneWeights<float>& w,
                        const LoraAdapter<float>*) { seen.push_back(w); };
    TTTConfig cfg = small_ttt();
    cfg.steps = 3;
    std::size_t call = 0;
    cfg.confidence = [&script, &call](const BackboneWeights<float>&,
                                      const LoraAdapter<float>*) {
      return script.at(call++);
    };
    TTTSession session = ttt_single(model, x, cfg, observer);
    REQUIRE(seen.size() == 4);
    for (int t = 0; t <= 3; ++t) {
      REQUIRE(session.trace.steps[static_cast<std::size_t>(t)].confidence ==
              script[static_cast<std::size_t>(t)]);
    }
    return std::make_pair(session.trace.selected_step,
                          weights_bit_equal(
                              seen[static_cast<std::size_t>(
                                  session.trace.selected_step)],
                              model));
  };

  auto [peak_mid, mid_ok] = run_with_script({1.0, 4.0, 9.0, 2.0});
  CHECK(peak_mid == 2);
  CHECK(mid_ok);

  auto [tie, tie_ok] = run_with_script({5.0, 3.0, 5.0, 5.0});
  CHECK(tie == 0);  // strict improvement only: earliest of the tied steps
  CHECK(tie_ok);

  auto [rising, rising_ok] = run_with_script({0.0, 1.0, 2.0, 3.0});
  CHECK(rising == 3);
  CHECK(rising_ok);
}

TEST_CASE("non-finite confidence aborts with the step index") {
  auto model = init_backbone<float>(tiny_config());
  Rng rng(4);
  TokenSequence x = random_sequence(12, rng);
  TTTConfig cfg = small_ttt();
  cfg.confidence = [](const BackboneWeights<float>&,
                      const LoraAdapter<float>*) {
    return std::numeric_limits<double>::quiet_NaN();
  };
  CHECK_THROWS_WITH_AS(ttt_single(model, x, cfg),
                       doctest::Contains("step"), std::runtime_error);
}

TEST_CASE("non-finite training loss aborts with the step index") {
  auto model = init_backbone<float>(tiny_config());
  model.head_bias(0, 0) = std::numeric_limits<float>::quiet_NaN();
  Rng rng(5);
  TokenSequence x = random_sequence(16, rng);
  TTTConfig cfg = small_ttt();
  CHECK_THROWS_WITH_AS(ttt_single(model, x, cfg), doctest::Contains("step"),
                       std::runtime_error);
}

TEST_CASE("seeded sessions are reproducible, different seeds are not") {
  Rng rng(6);
  TokenSequence x = random_sequence(18, rng);
  TTTConfig cfg = small_ttt(77);
  cfg.record_perplexity = true;

  auto m1 = init_backbone<float>(tiny_config());
  TTTSession s1 = ttt_single(m1, x, cfg);
  auto m2 = init_backbone<float>(tiny_config());
  TTTSession s2 = ttt_single(m2, x, cfg);

  REQUIRE(s1.trace.steps.size() == s2.trace.steps.size());
  for (std::size_t i = 1; i < s1.trace.steps.size(); ++i) {
    CHECK(s1.trace.steps[i].loss == s2.trace.steps[i].loss);
    CHECK(s1.trace.steps[i].perplexity == s2.trace.steps[i].perplexity);
  }
  CHECK(weights_bit_equal(m1, m2));

  cfg.seed = 78;
  auto m3 = init_backbone<float>(tiny_config());
  TTTSession s3 = ttt_single(m3, x, cfg);
  bool any_diff = false;
  for (std::size_t i = 1; i < s1.trace.steps.size(); ++i) {
    if (s1.trace.steps[i].loss != s3.trace.steps[i].loss) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("perplexity recording covers step zero through T") {
  auto model = init_backbone<float>(tiny_config());
  Rng rng(7);
  TokenSequence x = random_sequence(12, rng);
  TTTConfig cfg = small_ttt();
  cfg.record_perplexity = true;
  TTTSession session = ttt_single(model, x, cfg);
  for (const auto& rec : session.trace.steps) {
    REQUIRE(rec.perplexity.has_value());
    CHECK(*rec.perplexity >= 1.0);
  }
  // The trailing record reflects the returned model state.
  CHECK(session.trace.steps.back().perplexity ==
        doctest::Approx(pseudo_perplexity(model, nullptr, x))
            .epsilon(1e-12));
}

TEST_CASE("reset restores theta_0 bit-exactly and is idempotent") {
  auto model = init_backbone<float>(tiny_config());
  const BackboneWeights<float> original = model;
  Rng rng(8);
  TokenSequence x = random_sequence(16, rng);
  IdMatrix probe = make_batch({random_sequence(10, rng).ids, x.ids});

  TTTConfig cfg = small_ttt(5);
  TTTSession session = ttt_single(model, x, cfg);
  CHECK_FALSE(logits_bit_equal(model, nullptr, original, nullptr, probe));

  ttt_reset(model, session);
  CHECK(weights_bit_equal(model, original));
  CHECK(logits_bit_equal(model, nullptr, original, nullptr, probe));
  ttt_reset(model, session);
  CHECK(weights_bit_equal(model, original));

  // Statelessness: a rerun after reset reproduces the first trace.
  TTTSession again = ttt_single(model, x, cfg);
  REQUIRE(again.trace.steps.size() == session.trace.steps.size());
  for (std::size_t i = 1; i < again.trace.steps.size(); ++i) {
    CHECK(again.trace.steps[i].loss == session.trace.steps[i].loss);
  }
}

TEST_CASE("lora customization trains factors only") {
  auto model = init_backbone<float>(tiny_config());
  const BackboneWeights<float> original = model;
  Rng rng(9);
  TokenSequence x = random_sequence(16, rng);
  IdMatrix probe = make_batch({x.ids});

  TTTConfig cfg = small_ttt(3);
  cfg.trainable.mode = TrainableSelection::Mode::lora_only;
  cfg.lora = LoraSpec{2, 4.0f};
  TTTSession session = ttt_single(model, x, cfg);

  REQUIRE(session.adapter.has_value());
  CHECK(weights_bit_equal(model, original));  // backbone frozen under LoRA
  bool b_nonzero = false;
  for (const auto& layer : session.adapter->layers) {
    for (const auto& fp : layer) {
      if ((fp.b.array() != 0.0f).any()) b_nonzero = true;
    }
  }
  CHECK(b_nonzero);
  CHECK_FALSE(logits_bit_equal(model, &*session.adapter, original, nullptr,
                               probe));

  ttt_reset(model, session);
  REQUIRE(session.adapter.has_value());
  // Fresh adapter state has B = 0: adapted forward equals theta_0 exactly.
  CHECK(logits_bit_equal(model, &*session.adapter, original, nullptr, probe));
}

TEST_CASE("norm and head training under lora is opt-in") {
  auto model = init_backbone<float>(tiny_config());
  const BackboneWeights<float> original = model;
  Rng rng(10);
  TokenSequence x = random_sequence(16, rng);

  TTTConfig cfg = small_ttt(4);
  cfg.trainable.mode = TrainableSelection::Mode::lora_only;
  cfg.trainable.lora_train_norms_and_head = true;
  cfg.lora = LoraSpec{2, 4.0f};
  ttt_single(model, x, cfg);

  CHECK((model.token_embedding.array() ==
         original.token_embedding.array()).all());
  CHECK((model.layers[0].wq.array() == original.layers[0].wq.array()).all());
  CHECK_FALSE((model.layers[0].attn_ln_gain.array() ==
               original.layers[0].attn_ln_gain.array()).all());
  CHECK_FALSE((model.head_bias.array() == original.head_bias.array()).all());
}

TEST_CASE("single-row MSA reproduces the single-sequence trajectory") {
  Rng rng(11);
  TokenSequence x = random_sequence(20, rng);
  Msa msa;
  msa.rows = {detokenize(x, Alphabet{})};

  TTTConfig cfg = small_ttt(21);
  cfg.steps = 4;
  auto m1 = init_backbone<float>(tiny_config());
  TTTSession single = ttt_single(m1, x, cfg);
  auto m2 = init_backbone<float>(tiny_config());
  TTTSession via_msa = ttt_msa(m2, msa, cfg);

  REQUIRE(single.trace.steps.size() == via_msa.trace.steps.size());
  for (std::size_t i = 1; i < single.trace.steps.size(); ++i) {
    CHECK(single.trace.steps[i].loss == via_msa.trace.steps[i].loss);
  }
  CHECK(single.trace.selected_step == via_msa.trace.selected_step);
  CHECK(weights_bit_equal(m1, m2));
}

TEST_CASE("a sampler pinned to row zero degenerates to single-sequence") {
  Rng rng(12);
  TokenSequence x = random_sequence(20, rng);
  Msa msa;
  msa.rows = {detokenize(x, Alphabet{})};
  for (int i = 0; i < 3; ++i) {
    msa.rows.push_back(detokenize(random_sequence(20, rng), Alphabet{}));
  }

  TTTConfig cfg = small_ttt(22);
  auto m1 = init_backbone<float>(tiny_config());
  TTTSession single = ttt_single(m1, x, cfg);
  auto m2 = init_backbone<float>(tiny_config());
  TTTSession pinned = ttt_msa(m2, msa, cfg,
                              [](const Msa&, Rng&) { return 0; });
  for (std::size_t i = 1; i < single.trace.steps.size(); ++i) {
    CHECK(single.trace.steps[i].loss == pinned.trace.steps[i].loss);
  }
  CHECK(weights_bit_equal(m1, m2));
}

TEST_CASE("msa input validation") {
  auto model = init_backbone<float>(tiny_config());
  TTTConfig cfg = small_ttt();
  Msa empty;
  CHECK_THROWS(ttt_msa(model, empty, cfg));
  Msa gap_target;
  gap_target.rows = {"AC-E", "ACDE"};
  CHECK_THROWS(ttt_msa(model, gap_target, cfg));
  Msa bad_sampler;
  bad_sampler.rows = {"ACDE", "AC-E"};
  CHECK_THROWS(ttt_msa(model, bad_sampler, cfg,
                       [](const Msa&, Rng&) { return 7; }));
}

TEST_CASE("uniform sampler covers all rows deterministically") {
  Msa msa;
  msa.rows = {"ACDE", "ACDF", "ACDG", "ACDH"};
  Rng a(1), b(1);
  std::vector<int> seen(4, 0);
  for (int i = 0; i < 400; ++i) {
    const int row = uniform_msa_sampler(msa, a);
    CHECK(row == uniform_msa_sampler(msa, b));
    REQUIRE(row >= 0);
    REQUIRE(row < 4);
    ++seen[static_cast<std::size_t>(row)];
  }
  for (int count : seen) CHECK(count > 0);
}

TEST_CASE("training loss descends from step one in nearly all seeds") {
  // Stability invariant at toy scale: the mean over the last three steps
  // sits below the mean over the first three in at least 95 of 100 seeded
  // runs. Averaging both sides suppresses mask-resampling noise.
  Rng rng(13);
  TokenSequence x = random_sequence(40, rng);
  const auto base = init_backbone<float>(tiny_config(2024));
  int descended = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto model = base;
    TTTConfig cfg;
    cfg.learning_rate = 2e-3;
    cfg.micro_batch_size = 4;
    cfg.grad_accum_steps = 4;
    cfg.steps = 12;
    cfg.seed = 9000 + static_cast<std::uint64_t>(trial);
    TTTSession session = ttt_single(model, x, cfg);
    const auto& steps = session.trace.steps;
    double head = 0.0, tail = 0.0;
    for (int i = 1; i <= 3; ++i) head += steps[static_cast<std::size_t>(i)].loss;
    for (int i = 10; i <= 12; ++i) {
      tail += steps[static_cast<std::size_t>(i)].loss;
    }
    if (tail < head) ++descended;
  }
  CHECK(descended >= 95);
}

TEST_CASE("an msa generalizes to an unseen family member") {
  // Paired comparison on a toy family: training on eight homologs transfers
  // to a ninth member the session never saw, while training on the target
  // alone overfits it. The MSA run ends at or below the single-sequence
  // pseudo-perplexity on the held-out member in at least 16 of 20 trials,
  // and improves the target itself over the untrained base in at least 16.
  // Thresholds pinned by pilot (observed 20/20 for both).
  SyntheticFamilySpec spec;
  spec.consensus_length = 32;
  spec.members_per_family = 10;
  spec.num_targets = 1;
  spec.seed = 404;
  SyntheticCorpus corpus = generate_corpus(spec);

  Msa msa;
  for (int i = 0; i < 8; ++i) {
    msa.rows.push_back(corpus.training[static_cast<std::size_t>(i)].sequence);
  }
  TokenSequence target = tokenize(msa.rows[0], Alphabet{}, "target");
  TokenSequence heldout =
      tokenize(corpus.training[8].sequence, Alphabet{}, "heldout");

  const auto base = init_backbone<float>(tiny_config(606));
  const double base_target_ppl = pseudo_perplexity(base, nullptr, target);

  int msa_wins_heldout = 0;
  int msa_helps_target = 0;
  for (int trial = 0; trial < 20; ++trial) {
    TTTConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.micro_batch_size = 4;
    cfg.grad_accum_steps = 4;
    cfg.steps = 8;
    cfg.seed = 7000 + static_cast<std::uint64_t>(trial);

    auto m1 = base;
    ttt_single(m1, target, cfg);
    const double single_heldout = pseudo_perplexity(m1, nullptr, heldout);

    auto m2 = base;
    ttt_msa(m2, msa, cfg);
    if (pseudo_perplexity(m2, nullptr, heldout) <= single_heldout) {
      ++msa_wins_heldout;
    }
    if (pseudo_perplexity(m2, nullptr, target) < base_target_ppl) {
      ++msa_helps_target;
    }
  }
  CHECK(msa_wins_heldout >= 16);
  CHECK(msa_helps_target >= 16);
}

TEST_CASE("pretrain with zero epochs returns the init unchanged") {
  auto init = init_backbone<float>(tiny_config());
  Rng rng(14);
  std::vector<TokenSequence> corpus = {random_sequence(20, rng),
                                       random_sequence(24, rng)};
  PretrainConfig cfg;
  cfg.epochs = 0;
  std::vector<double> curve;
  auto out = pretrain(init, corpus, cfg, &curve);
  CHECK(weights_bit_equal(out, init));
  CHECK(curve.empty());
}

TEST_CASE("pretrain drops a trailing incomplete accumulation group") {
  auto init = init_backbone<float>(tiny_config());
  Rng rng(15);
  std::vector<TokenSequence> corpus = {random_sequence(16, rng),
                                       random_sequence(16, rng),
                                       random_sequence(16, rng)};
  PretrainConfig cfg;
  cfg.micro_batch_size = 1;
  cfg.grad_accum_steps = 4;  // three views per epoch never fill a group
  cfg.epochs = 1;
  std::vector<double> curve;
  auto out = pretrain(init, corpus, cfg, &curve);
  CHECK(weights_bit_equal(out, init));
  CHECK(curve.empty());

  // Groups span epoch boundaries: two epochs supply 6 views, one full
  // group of 4, so exactly one update lands.
  cfg.epochs = 2;
  auto stepped = pretrain(init, corpus, cfg, &curve);
  CHECK_FALSE(weights_bit_equal(stepped, init));
  CHECK(curve.size() == 1);
}

TEST_CASE("pretrain is deterministic per seed") {
  auto init = init_backbone<float>(tiny_config());
  Rng rng(16);
  std::vector<TokenSequence> corpus;
  for (int i = 0; i < 6; ++i) corpus.push_back(random_sequence(18, rng));
  PretrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 5;
  auto a = pretrain(init, corpus, cfg);
  auto b = pretrain(init, corpus, cfg);
  CHECK(weights_bit_equal(a, b));
  cfg.seed = 6;
  auto c = pretrain(init, corpus, cfg);
  CHECK_FALSE(weights_bit_equal(a, c));
}

TEST_CASE("a single-sequence corpus is memorized toward perplexity one") {
  auto init = init_backbone<float>(tiny_config(71));
  Rng rng(17);
  TokenSequence x = random_sequence(24, rng);
  PretrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.epochs = 600;
  cfg.seed = 9;
  std::vector<double> curve;
  auto trained = pretrain(init, {x}, cfg, &curve);
  REQUIRE(curve.size() == 600);
  double tail = 0.0;
  for (std::size_t i = curve.size() - 10; i < curve.size(); ++i) {
    tail += curve[i];
  }
  tail /= 10.0;
  CHECK(tail < 0.3);  // training loss approaches zero
  const double ppl = pseudo_perplexity(trained, nullptr, x);
  CHECK(ppl >= 1.0);
  CHECK(ppl < 1.5);  // pseudo-perplexity approaches its lower bound
}

TEST_CASE("pretraining favors held-in families over the held-out one") {
  SyntheticFamilySpec spec;
  spec.consensus_length = 32;
  spec.members_per_family = 12;
  spec.num_targets = 6;
  spec.seed = 31;
  SyntheticCorpus corpus = generate_corpus(spec);

  std::vector<TokenSequence> train;
  for (const auto& rec : corpus.training) {
    train.push_back(tokenize(rec.sequence, Alphabet{}, rec.id));
  }
  auto init = init_backbone<float>(tiny_config(72));
  PretrainConfig cfg;
  cfg.learning_rate = 0.3;
  cfg.epochs = 20;
  cfg.seed = 10;
  auto trained = pretrain(init, train, cfg);

  double held_in = 0.0;
  for (int i = 0; i < 6; ++i) {
    held_in += pseudo_perplexity(
        trained, nullptr,
        tokenize(corpus.training[static_cast<std::size_t>(i * 3)].sequence,
                 Alphabet{}));
  }
  double held_out = 0.0;
  for (int i = 0; i < 6; ++i) {
    held_out += pseudo_perplexity(
        trained, nullptr,
        tokenize(corpus.targets[static_cast<std::size_t>(i)].sequence,
                 Alphabet{}));
  }
  CHECK(held_in / 6.0 < held_out / 6.0);
}
