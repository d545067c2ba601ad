#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pttt/checkpoint.hpp"
#include "pttt/heads.hpp"
#include "pttt/scoring.hpp"
#include "pttt/seqio.hpp"
#include "pttt/synthetic.hpp"
#include "pttt/ttt.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace pttt;

namespace {

// Engine failures exit 1; problems with how the tool was invoked exit 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << content;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

// save_checkpoint refuses to invent directories; the tool prepares them.
fs::path prepared(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  return path;
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

struct GlobalOptions {
  std::uint64_t seed = 0;
  std::string output_dir = ".";
  int jobs = 1;
};

struct MaskOptions {
  std::string kind = "fixed";
  double p = 0.15;
  double lo = 0.05, hi = 0.50;
  double a = 3.0, b = 9.0;
  int crop_window = 1024;  // 0 disables cropping

  MaskingStrategy strategy() const {
    MaskingStrategy s;
    if (kind == "fixed") {
      s.kind = MaskingStrategy::Kind::fixed_ratio;
    } else if (kind == "uniform") {
      s.kind = MaskingStrategy::Kind::uniform_ratio_range;
    } else if (kind == "beta") {
      s.kind = MaskingStrategy::Kind::beta_ratio;
    } else {
      throw UsageError("unknown --mask-kind '" + kind + "'");
    }
    s.p = p;
    s.lo = lo;
    s.hi = hi;
    s.a = a;
    s.b = b;
    if (crop_window == 0) {
      s.crop_window.reset();
    } else {
      s.crop_window = crop_window;
    }
    return s;
  }
};

void add_mask_flags(CLI::App* cmd, MaskOptions& m) {
  cmd->add_option("--mask-kind", m.kind, "masking ratio law")
      ->check(CLI::IsMember({"fixed", "uniform", "beta"}))
      ->capture_default_str();
  cmd->add_option("--mask-p", m.p, "ratio for --mask-kind fixed")
      ->capture_default_str();
  cmd->add_option("--mask-lo", m.lo, "lower ratio for --mask-kind uniform")
      ->capture_default_str();
  cmd->add_option("--mask-hi", m.hi, "upper ratio for --mask-kind uniform")
      ->capture_default_str();
  cmd->add_option("--mask-a", m.a, "alpha for --mask-kind beta")
      ->capture_default_str();
  cmd->add_option("--mask-b", m.b, "beta for --mask-kind beta")
      ->capture_default_str();
  cmd->add_option("--crop-window", m.crop_window,
                  "crop window before masking; 0 disables cropping")
      ->capture_default_str();
}

json masking_json(const MaskingStrategy& s) {
  json j;
  switch (s.kind) {
    case MaskingStrategy::Kind::fixed_ratio:
      j["kind"] = "fixed";
      j["p"] = s.p;
      break;
    case MaskingStrategy::Kind::uniform_ratio_range:
      j["kind"] = "uniform";
      j["lo"] = s.lo;
      j["hi"] = s.hi;
      break;
    case MaskingStrategy::Kind::beta_ratio:
      j["kind"] = "beta";
      j["a"] = s.a;
      j["b"] = s.b;
      break;
  }
  j["p_mask"] = s.p_mask;
  j["p_random"] = s.p_random;
  j["p_keep"] = s.p_keep;
  if (s.crop_window.has_value()) {
    j["crop_window"] = *s.crop_window;
  } else {
    j["crop_window"] = nullptr;
  }
  return j;
}

struct ModelOptions {
  int layers = 4;
  int dim = 128;
  int heads = 4;
  int ffn = 256;
  int max_positions = 1026;

  ModelConfig config(std::uint64_t seed) const {
    ModelConfig c;
    c.num_layers = layers;
    c.model_dim = dim;
    c.num_heads = heads;
    c.ffn_dim = ffn;
    c.max_positions = max_positions;
    c.seed = seed;
    return c;
  }
};

void add_model_flags(CLI::App* cmd, ModelOptions& m) {
  cmd->add_option("--layers", m.layers)->capture_default_str();
  cmd->add_option("--dim", m.dim)->capture_default_str();
  cmd->add_option("--heads", m.heads)->capture_default_str();
  cmd->add_option("--ffn", m.ffn)->capture_default_str();
  cmd->add_option("--max-positions", m.max_positions)->capture_default_str();
}

json model_json(const ModelConfig& c) {
  return json{{"num_layers", c.num_layers},   {"model_dim", c.model_dim},
              {"num_heads", c.num_heads},     {"ffn_dim", c.ffn_dim},
              {"max_positions", c.max_positions},
              {"vocab_size", c.vocab_size},   {"seed", c.seed}};
}

LossKind parse_loss(const std::string& name) {
  if (name == "normalized") return LossKind::normalized_cross_entropy;
  if (name == "global") return LossKind::normalized_global_cross_entropy;
  if (name == "unnormalized") return LossKind::unnormalized_cross_entropy;
  throw UsageError("unknown loss kind '" + name + "'");
}

ScoringMode parse_mode(const std::string& name) {
  if (name == "independent") return ScoringMode::masked_marginal_independent;
  if (name == "joint") return ScoringMode::masked_marginal_joint;
  if (name == "wildtype") return ScoringMode::wildtype_marginal;
  throw UsageError("unknown scoring mode '" + name + "'");
}

TrainableSelection::Mode parse_selection(const std::string& name) {
  if (name == "full_except_embeddings") {
    return TrainableSelection::Mode::full_except_embeddings;
  }
  if (name == "lora_only") return TrainableSelection::Mode::lora_only;
  if (name == "full") return TrainableSelection::Mode::full;
  throw UsageError("unknown trainable selection '" + name + "'");
}

std::vector<TokenSequence> tokenize_records(
    const std::vector<FastaRecord>& records, const Alphabet& alphabet) {
  std::vector<TokenSequence> out;
  out.reserve(records.size());
  for (const FastaRecord& r : records) {
    out.push_back(tokenize(r.sequence, alphabet, r.id));
  }
  return out;
}

// labels CSV: header `id,family`, then one row per sequence id.
std::map<std::string, int> parse_labels(const std::string& csv) {
  std::map<std::string, int> labels;
  std::istringstream in(csv);
  std::string line;
  bool saw_header = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!saw_header) {
      if (line != "id,family") {
        throw std::invalid_argument("labels csv: expected header "
                                    "'id,family', got '" + line + "'");
      }
      saw_header = true;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos || line.find(',', comma + 1) !=
                                          std::string::npos) {
      throw std::invalid_argument("labels csv: malformed row '" + line + "'");
    }
    const std::string id = line.substr(0, comma);
    const std::string value = line.substr(comma + 1);
    std::size_t used = 0;
    const int family = std::stoi(value, &used);
    if (used != value.size()) {
      throw std::invalid_argument("labels csv: bad family '" + value + "'");
    }
    if (!labels.emplace(id, family).second) {
      throw std::invalid_argument("labels csv: duplicate id '" + id + "'");
    }
  }
  if (!saw_header) throw std::invalid_argument("labels csv: empty input");
  return labels;
}

std::string trace_step_line(const TTTStepRecord& rec) {
  json j;
  j["step"] = rec.step;
  if (rec.step > 0) j["loss"] = rec.loss;
  if (rec.perplexity.has_value()) j["perplexity"] = *rec.perplexity;
  if (rec.confidence.has_value()) j["confidence"] = *rec.confidence;
  j["wall_ms"] = rec.wall_ms;
  return j.dump();
}

void write_trace(const fs::path& path, const json& run_config,
                 const TTTTrace& trace) {
  std::string out = json{{"run_config", run_config}}.dump();
  out += '\n';
  for (const TTTStepRecord& rec : trace.steps) {
    out += trace_step_line(rec);
    out += '\n';
  }
  out += json{{"selected_step", trace.selected_step}}.dump();
  out += '\n';
  write_file(path, out);
}

// ---------------------------------------------------------------------------
// gen-corpus

struct GenOptions {
  int families = 3;
  int length = 48;
  double rate = 0.10;
  int members = 60;
  int targets = 20;
  int assay_records = 24;
  int max_mutations = 2;
  int held_out = -1;
};

int run_gen_corpus(const GenOptions& g, const GlobalOptions& global) {
  SyntheticFamilySpec spec;
  spec.num_families = g.families;
  spec.consensus_length = g.length;
  spec.substitution_rate = g.rate;
  spec.members_per_family = g.members;
  spec.num_targets = g.targets;
  spec.assay_records = g.assay_records;
  spec.max_mutations_per_record = g.max_mutations;
  spec.held_out_family = g.held_out;
  spec.seed = global.seed;
  const SyntheticCorpus corpus = generate_corpus(spec);

  const fs::path out_dir = global.output_dir;
  json rc{{"command", "gen-corpus"},
          {"seed", global.seed},
          {"output_dir", global.output_dir},
          {"num_families", g.families},
          {"consensus_length", g.length},
          {"substitution_rate", g.rate},
          {"members_per_family", g.members},
          {"num_targets", g.targets},
          {"assay_records", g.assay_records},
          {"max_mutations_per_record", g.max_mutations},
          {"held_out_family", spec.held_out()}};

  write_file(out_dir / "corpus.fasta", write_fasta(corpus.training));
  write_file(out_dir / "targets.fasta", write_fasta(corpus.targets));

  std::string labels = "id,family\n";
  for (const FastaRecord& rec : corpus.training) {
    const auto under = rec.id.find('_');
    labels += rec.id + "," + rec.id.substr(3, under - 3) + "\n";
  }
  write_file(out_dir / "labels.csv", labels);

  std::vector<std::string> assay_files;
  for (const SyntheticAssay& assay : corpus.assays) {
    std::string csv = "# run_config: " + rc.dump() + "\n";
    csv += "# target_id: " + assay.target_id + "\n";
    csv += "# reference: " + assay.target_sequence + "\n";
    csv += write_mutations_csv(assay.records);
    const fs::path file = out_dir / "assays" / (assay.target_id + ".csv");
    write_file(file, csv);
    assay_files.push_back("assays/" + assay.target_id + ".csv");
  }

  json consensus = json::array();
  for (const FamilyModel& family : corpus.families) {
    consensus.push_back(family.consensus);
  }
  json manifest{{"run_config", rc},
                {"consensus", consensus},
                {"files",
                 {{"corpus", "corpus.fasta"},
                  {"targets", "targets.fasta"},
                  {"labels", "labels.csv"},
                  {"assays", assay_files}}}};
  write_file(out_dir / "manifest.json", manifest.dump(2) + "\n");

  std::cout << "wrote " << corpus.training.size() << " training sequences, "
            << corpus.targets.size() << " targets, " << corpus.assays.size()
            << " assays to " << out_dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainOptions {
  std::string corpus;
  std::string labels;
  std::string out;
  std::string curve;
  double lr = 0.3;
  int micro = 8;
  int accum = 1;
  int epochs = 20;
  std::string loss = "normalized";
  ModelOptions model;
  MaskOptions mask;
};

int run_pretrain(const PretrainOptions& p, const GlobalOptions& global) {
  const Alphabet alphabet;
  const auto records = parse_fasta(read_file(p.corpus));
  const auto sequences = tokenize_records(records, alphabet);

  const ModelConfig mc = p.model.config(global.seed);
  PretrainConfig pc;
  pc.learning_rate = p.lr;
  pc.micro_batch_size = p.micro;
  pc.grad_accum_steps = p.accum;
  pc.epochs = p.epochs;
  pc.masking = p.mask.strategy();
  pc.loss_kind = parse_loss(p.loss);
  pc.seed = global.seed;

  const fs::path out_path =
      p.out.empty() ? fs::path(global.output_dir) / "pretrained.ckpt"
                    : fs::path(p.out);
  const fs::path curve_path =
      p.curve.empty() ? fs::path(global.output_dir) / "pretrain_loss.jsonl"
                      : fs::path(p.curve);

  json rc{{"command", "pretrain"},
          {"seed", global.seed},
          {"output_dir", global.output_dir},
          {"corpus", p.corpus},
          {"labels", p.labels},
          {"checkpoint", out_path.string()},
          {"epochs", p.epochs},
          {"learning_rate", p.lr},
          {"micro_batch_size", p.micro},
          {"grad_accum_steps", p.accum},
          {"loss_kind", p.loss},
          {"masking", masking_json(pc.masking)},
          {"model", model_json(mc)}};

  const BackboneWeights<float> init = init_backbone<float>(mc);
  std::vector<double> curve;
  const BackboneWeights<float> trained = pretrain(init, sequences, pc, &curve);

  std::optional<ClassifierHead> head;
  if (!p.labels.empty()) {
    const auto labels = parse_labels(read_file(p.labels));
    std::map<int, int> classes;  // family value -> dense class id
    for (const auto& [id, family] : labels) classes.emplace(family, 0);
    int next_class = 0;
    for (auto& [family, cls] : classes) cls = next_class++;
    std::vector<Mat<float>> embeddings;
    std::vector<int> targets;
    embeddings.reserve(sequences.size());
    for (const TokenSequence& seq : sequences) {
      const auto at = labels.find(seq.source_id);
      if (at == labels.end()) {
        throw std::runtime_error("no label for sequence '" + seq.source_id +
                                 "'");
      }
      embeddings.push_back(embed(trained, nullptr, seq));
      targets.push_back(classes.at(at->second));
    }
    head = train_classifier_head(embeddings, targets,
                                 static_cast<int>(classes.size()));
    rc["head"] = {{"num_classes", static_cast<int>(classes.size())},
                  {"hash", head_hash(*head)}};
  }

  save_checkpoint(prepared(out_path).string(), trained,
                  head.has_value() ? &*head : nullptr);
  rc["checkpoint_hash"] = file_sha256(out_path.string());

  std::string jsonl = json{{"run_config", rc}}.dump() + "\n";
  for (std::size_t i = 0; i < curve.size(); ++i) {
    jsonl += json{{"step", i + 1}, {"loss", curve[i]}}.dump() + "\n";
  }
  write_file(curve_path, jsonl);

  std::cout << "pretrained " << curve.size() << " steps";
  if (!curve.empty()) {
    std::cout << ", loss " << fmt9(curve.front()) << " -> "
              << fmt9(curve.back());
  }
  std::cout << ", checkpoint " << out_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// ttt

struct TTTOptions {
  std::string checkpoint;
  std::string target;
  std::string target_id;
  std::string msa;
  int steps = 30;
  double lr = 4e-4;
  int micro = 4;
  int accum = 16;
  std::string loss = "normalized";
  std::string selection = "full_except_embeddings";
  int lora_rank = 0;
  double lora_alpha = 16.0;
  bool lora_norms_head = false;
  std::string confidence = "none";
  bool emit_perplexity = false;
  std::string trace;
  std::string out;
  MaskOptions mask;
};

TTTConfig build_ttt_config(const TTTOptions& t, std::uint64_t seed) {
  TTTConfig cfg;
  cfg.learning_rate = t.lr;
  cfg.micro_batch_size = t.micro;
  cfg.grad_accum_steps = t.accum;
  cfg.steps = t.steps;
  cfg.masking = t.mask.strategy();
  cfg.loss_kind = parse_loss(t.loss);
  cfg.trainable.mode = parse_selection(t.selection);
  cfg.trainable.lora_train_norms_and_head = t.lora_norms_head;
  if (t.lora_rank > 0) {
    cfg.lora = LoraSpec{t.lora_rank, static_cast<float>(t.lora_alpha)};
  }
  cfg.record_perplexity = t.emit_perplexity;
  cfg.seed = seed;
  return cfg;
}

json ttt_config_json(const TTTConfig& cfg, const TTTOptions& t) {
  json j{{"steps", cfg.steps},
         {"learning_rate", cfg.learning_rate},
         {"micro_batch_size", cfg.micro_batch_size},
         {"grad_accum_steps", cfg.grad_accum_steps},
         {"loss_kind", t.loss},
         {"selection", t.selection},
         {"masking", masking_json(cfg.masking)},
         {"confidence", t.confidence},
         {"emit_perplexity", cfg.record_perplexity},
         {"seed", cfg.seed}};
  if (cfg.lora.has_value()) {
    j["lora"] = {{"rank", cfg.lora->rank},
                 {"alpha", cfg.lora->alpha},
                 {"train_norms_and_head",
                  cfg.trainable.lora_train_norms_and_head}};
  }
  return j;
}

int run_ttt(const TTTOptions& t, const GlobalOptions& global) {
  if (t.target.empty() && t.msa.empty()) {
    throw UsageError("one of --target or --msa is required");
  }
  const Alphabet alphabet;
  LoadedCheckpoint ck = load_checkpoint(t.checkpoint);
  const std::string checkpoint_hash = file_sha256(t.checkpoint);

  TokenSequence x;
  std::optional<Msa> msa;
  if (!t.msa.empty()) {
    msa = parse_a3m(read_file(t.msa));
    x = tokenize(degap(msa->rows[static_cast<std::size_t>(msa->target_index)]),
                 alphabet, "msa_target");
  } else {
    const auto records = parse_fasta(read_file(t.target));
    const FastaRecord* picked = &records.front();
    if (!t.target_id.empty()) {
      picked = nullptr;
      for (const FastaRecord& rec : records) {
        if (rec.id == t.target_id) {
          picked = &rec;
          break;
        }
      }
      if (picked == nullptr) {
        throw std::runtime_error("no record '" + t.target_id + "' in " +
                                 t.target);
      }
    }
    x = tokenize(picked->sequence, alphabet, picked->id);
  }

  TTTConfig cfg = build_ttt_config(t, global.seed);
  const ClassifierHead* head = ck.head.has_value() ? &*ck.head : nullptr;
  const std::string head_before = head ? head_hash(*head) : "";
  if (t.confidence != "none") {
    ConfidenceAdapter adapter;
    adapter.kind = t.confidence == "head_max_prob"
                       ? ConfidenceAdapter::Kind::head_max_prob
                       : ConfidenceAdapter::Kind::neg_pseudo_perplexity;
    cfg.confidence = [adapter, &x, head](const BackboneWeights<float>& w,
                                         const LoraAdapter<float>* la) {
      return confidence(adapter, w, la, x, head);
    };
  }

  json rc{{"command", "ttt"},
          {"seed", global.seed},
          {"output_dir", global.output_dir},
          {"checkpoint", t.checkpoint},
          {"model_checkpoint_hash", checkpoint_hash},
          {"target", t.msa.empty() ? t.target : t.msa},
          {"target_id", x.source_id},
          {"msa", !t.msa.empty()},
          {"ttt", ttt_config_json(cfg, t)}};

  TTTSession session = msa.has_value() ? ttt_msa(ck.weights, *msa, cfg)
                                       : ttt_single(ck.weights, x, cfg);

  if (head && head_hash(*head) != head_before) {
    throw std::runtime_error("classifier head changed during TTT");
  }

  const fs::path trace_path =
      t.trace.empty() ? fs::path(global.output_dir) / "ttt_trace.jsonl"
                      : fs::path(t.trace);
  write_trace(trace_path, rc, session.trace);

  const fs::path out_path =
      t.out.empty() ? fs::path(global.output_dir) / "ttt_selected.ckpt"
                    : fs::path(t.out);
  if (session.adapter.has_value()) {
    save_checkpoint(prepared(out_path).string(),
                    materialize_lora(ck.weights, *session.adapter), head);
  } else {
    save_checkpoint(prepared(out_path).string(), ck.weights, head);
  }

  std::cout << "selected step " << session.trace.selected_step << " of "
            << cfg.steps << ", trace " << trace_path.string()
            << ", checkpoint " << out_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// score

struct ScoreOptions {
  std::string checkpoint;
  std::string targets;
  std::vector<std::string> assays;
  std::string assay_dir;
  std::string mode = "independent";
  bool renormalize = false;
};

int run_score(const ScoreOptions& s, const GlobalOptions& global) {
  const Alphabet alphabet;
  const LoadedCheckpoint ck = load_checkpoint(s.checkpoint);
  const std::string checkpoint_hash = file_sha256(s.checkpoint);
  const ScoringMode mode = parse_mode(s.mode);
  ScoringOptions options;
  options.renormalize_residues = s.renormalize;

  std::map<std::string, TokenSequence> references;
  for (const FastaRecord& rec : parse_fasta(read_file(s.targets))) {
    references.emplace(rec.id, tokenize(rec.sequence, alphabet, rec.id));
  }

  std::vector<fs::path> files;
  for (const std::string& path : s.assays) files.emplace_back(path);
  if (!s.assay_dir.empty()) {
    for (const auto& entry : fs::directory_iterator(s.assay_dir)) {
      if (entry.is_regular_file() && entry.path().extension() == ".csv") {
        files.push_back(entry.path());
      }
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw UsageError("no assay files given");

  json rc{{"command", "score"},
          {"seed", global.seed},
          {"output_dir", global.output_dir},
          {"checkpoint", s.checkpoint},
          {"targets", s.targets},
          {"mode", s.mode},
          {"renormalize", s.renormalize}};

  json summaries = json::array();
  json failures = json::array();
  for (const fs::path& file : files) {
    try {
      const std::string id = file.stem().string();
      const auto ref = references.find(id);
      if (ref == references.end()) {
        throw std::runtime_error("no target record with id '" + id + "'");
      }
      const auto records =
          parse_mutations(read_file(file), ref->second, alphabet);
      const AssayResult result = evaluate_assay(
          ck.weights, nullptr, ref->second, records, mode, options);

      std::string csv = "# run_config: " + rc.dump() + "\n";
      csv += "# model_checkpoint_hash: " + checkpoint_hash + "\n";
      csv += "id,mutant,pred_score,fitness\n";
      for (std::size_t i = 0; i < records.size(); ++i) {
        const bool wild = records[i].mutations.substitutions.empty();
        csv += records[i].id + "," + (wild ? "" : records[i].id) + "," +
               fmt17(result.scores[i]) + "," +
               fmt17(records[i].measured_fitness) + "\n";
      }
      const fs::path out =
          fs::path(global.output_dir) / "scores" / (id + "_scores.csv");
      write_file(out, csv);
      summaries.push_back({{"id", id},
                           {"spearman", result.spearman},
                           {"n", result.n},
                           {"scores_csv", out.string()}});
      std::cout << id << " spearman " << fmt9(result.spearman) << " (n="
                << result.n << ")\n";
    } catch (const std::exception& e) {
      failures.push_back({{"file", file.string()}, {"error", e.what()}});
      std::cerr << "failed " << file.string() << ": " << e.what() << "\n";
    }
  }

  json summary{{"run_config", rc},
               {"model_checkpoint_hash", checkpoint_hash},
               {"assays", summaries},
               {"failures", failures}};
  write_file(fs::path(global.output_dir) / "score_summary.json",
             summary.dump(2) + "\n");
  return summaries.empty() ? 1 : 0;
}

// ---------------------------------------------------------------------------
// perplexity

struct PerplexityOptions {
  std::string checkpoint;
  std::string targets;
  bool renormalize = false;
  std::string out;
};

int run_perplexity(const PerplexityOptions& p, const GlobalOptions& global) {
  const Alphabet alphabet;
  const LoadedCheckpoint ck = load_checkpoint(p.checkpoint);
  const std::string checkpoint_hash = file_sha256(p.checkpoint);
  ScoringOptions options;
  options.renormalize_residues = p.renormalize;

  json rc{{"command", "perplexity"},
          {"seed", global.seed},
          {"output_dir", global.output_dir},
          {"checkpoint", p.checkpoint},
          {"targets", p.targets},
          {"renormalize", p.renormalize}};

  std::string csv = "# run_config: " + rc.dump() + "\n";
  csv += "# model_checkpoint_hash: " + checkpoint_hash + "\n";
  csv += "id,pseudo_perplexity\n";
  for (const FastaRecord& rec : parse_fasta(read_file(p.targets))) {
    const TokenSequence seq = tokenize(rec.sequence, alphabet, rec.id);
    const double ppl = pseudo_perplexity(ck.weights, nullptr, seq, options);
    csv += rec.id + "," + fmt17(ppl) + "\n";
    std::cout << rec.id << " " << fmt9(ppl) << "\n";
  }
  const fs::path out = p.out.empty()
                           ? fs::path(global.output_dir) / "perplexity.csv"
                           : fs::path(p.out);
  write_file(out, csv);
  return 0;
}

// ---------------------------------------------------------------------------
// grid

struct GridCmdOptions {
  std::string checkpoint;
  std::string targets;
  std::string assay_dir;
  std::vector<double> lrs{4e-4};
  std::vector<int> micros{4};
  std::vector<int> accums{16};
  std::vector<std::string> maskings{"fixed:0.15"};
  std::vector<std::string> losses{"normalized"};
  int steps = 30;
  int crop_window = 1024;
  std::string out;
  std::string trace_dir;
};

MaskingStrategy parse_masking_spec(const std::string& text, int crop_window) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto colon = text.find(':', start);
    if (colon == std::string::npos) {
      parts.push_back(text.substr(start));
      break;
    }
    parts.push_back(text.substr(start, colon - start));
    start = colon + 1;
  }
  MaskingStrategy s;
  try {
    if (parts[0] == "fixed" && parts.size() == 2) {
      s.kind = MaskingStrategy::Kind::fixed_ratio;
      s.p = std::stod(parts[1]);
    } else if (parts[0] == "uniform" && parts.size() == 3) {
      s.kind = MaskingStrategy::Kind::uniform_ratio_range;
      s.lo = std::stod(parts[1]);
      s.hi = std::stod(parts[2]);
    } else if (parts[0] == "beta" && parts.size() == 3) {
      s.kind = MaskingStrategy::Kind::beta_ratio;
      s.a = std::stod(parts[1]);
      s.b = std::stod(parts[2]);
    } else {
      throw std::invalid_argument("bad form");
    }
  } catch (const std::exception&) {
    throw UsageError("bad masking spec '" + text +
                     "' (want fixed:P, uniform:LO:HI, or beta:A:B)");
  }
  if (crop_window == 0) {
    s.crop_window.reset();
  } else {
    s.crop_window = crop_window;
  }
  return s;
}

int run_grid_cmd(const GridCmdOptions& g, const GlobalOptions& global) {
  const Alphabet alphabet;
  const LoadedCheckpoint ck = load_checkpoint(g.checkpoint);
  const std::string checkpoint_hash = file_sha256(g.checkpoint);

  const auto target_records = parse_fasta(read_file(g.targets));
  const auto targets = tokenize_records(target_records, alphabet);

  std::vector<std::vector<MutationRecord>> assays;
  if (!g.assay_dir.empty()) {
    assays.reserve(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const fs::path file =
          fs::path(g.assay_dir) / (target_records[i].id + ".csv");
      assays.push_back(
          parse_mutations(read_file(file), targets[i], alphabet));
    }
  }

  struct CellAxes {
    double lr;
    int micro;
    int accum;
    MaskingStrategy masking;
    LossKind loss;
    std::string loss_name;
  };
  std::vector<CellAxes> cells;
  for (double lr : g.lrs) {
    for (int micro : g.micros) {
      for (int accum : g.accums) {
        for (const std::string& mask_spec : g.maskings) {
          const MaskingStrategy masking =
              parse_masking_spec(mask_spec, g.crop_window);
          for (const std::string& loss_name : g.losses) {
            cells.push_back({lr, micro, accum, masking,
                             parse_loss(loss_name), loss_name});
          }
        }
      }
    }
  }

  json rc{{"command", "grid"},
          {"seed", global.seed},
          {"output_dir", global.output_dir},
          {"jobs", global.jobs},
          {"checkpoint", g.checkpoint},
          {"model_checkpoint_hash", checkpoint_hash},
          {"targets", g.targets},
          {"assay_dir", g.assay_dir},
          {"steps", g.steps},
          {"cells", cells.size()}};

  const fs::path trace_root =
      g.trace_dir.empty() ? fs::path(global.output_dir) / "grid_traces"
                          : fs::path(g.trace_dir);
  fs::create_directories(trace_root);

  auto hook = [&](std::uint64_t cell_index, std::size_t target_index,
                  const TTTConfig& cfg, const TTTSession& session) {
    char cell_name[24];
    std::snprintf(cell_name, sizeof(cell_name), "cell_%03llu",
                  static_cast<unsigned long long>(cell_index));
    json cell_rc{{"command", "grid-cell"},
                 {"cell_index", cell_index},
                 {"target_id", target_records[target_index].id},
                 {"seed", cfg.seed},
                 {"steps", cfg.steps},
                 {"learning_rate", cfg.learning_rate},
                 {"micro_batch_size", cfg.micro_batch_size},
                 {"grad_accum_steps", cfg.grad_accum_steps},
                 {"loss_kind", loss_kind_to_string(cfg.loss_kind)},
                 {"masking", masking_json(cfg.masking)}};
    write_trace(trace_root / cell_name /
                    (target_records[target_index].id + ".jsonl"),
                cell_rc, session.trace);
  };

  std::vector<GridCellCurve> merged(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      const CellAxes& axes = cells[i];
      GridSpec one;
      one.learning_rates = {axes.lr};
      one.micro_batch_sizes = {axes.micro};
      one.grad_accum_steps = {axes.accum};
      one.maskings = {axes.masking};
      one.loss_kinds = {axes.loss};
      one.steps = g.steps;
      one.seed = global.seed;
      one.first_cell_index = i;
      try {
        GridReport report = run_grid(ck.weights, targets, assays, one, hook);
        merged[i] = std::move(report.cells.front());
      } catch (const std::exception& e) {
        merged[i].learning_rate = axes.lr;
        merged[i].micro_batch_size = axes.micro;
        merged[i].grad_accum_steps = axes.accum;
        merged[i].masking = axes.masking;
        merged[i].loss_kind = axes.loss;
        merged[i].failed = true;
        merged[i].error = e.what();
      }
    }
  };

  const int jobs = std::clamp<int>(global.jobs, 1,
                                   static_cast<int>(cells.size()));
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(jobs));
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }

  std::string csv = "# run_config: " + rc.dump() + "\n";
  csv += "lr,micro_batch,accum,masking,step,mean_perplexity,mean_spearman\n";
  std::size_t succeeded = 0;
  json failures = json::array();
  for (const GridCellCurve& cell : merged) {
    if (cell.failed) {
      failures.push_back({{"masking", masking_to_string(cell.masking)},
                          {"lr", cell.learning_rate},
                          {"error", cell.error}});
      continue;
    }
    ++succeeded;
    for (std::size_t t = 0; t < cell.mean_perplexity.size(); ++t) {
      csv += fmt9(cell.learning_rate) + "," +
             std::to_string(cell.micro_batch_size) + "," +
             std::to_string(cell.grad_accum_steps) + "," +
             masking_to_string(cell.masking) + "," + std::to_string(t) + "," +
             fmt9(cell.mean_perplexity[t]) + "," +
             fmt9(cell.mean_spearman[t]) + "\n";
    }
  }
  const fs::path out = g.out.empty()
                           ? fs::path(global.output_dir) / "grid.csv"
                           : fs::path(g.out);
  write_file(out, csv);

  json manifest{{"run_config", rc},
                {"succeeded_cells", succeeded},
                {"failed_cells", failures},
                {"aggregate_csv", out.string()},
                {"trace_dir", trace_root.string()}};
  write_file(fs::path(global.output_dir) / "grid_manifest.json",
             manifest.dump(2) + "\n");

  std::cout << succeeded << "/" << cells.size() << " cells succeeded, "
            << "aggregate " << out.string() << "\n";
  return succeeded > 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale protein test-time training engine"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", "0.1.0");
  app.set_config("--config", "",
                 "declarative config file; flags take precedence");

  GlobalOptions global;
  app.add_option("--seed", global.seed, "run seed")->capture_default_str();
  app.add_option("--output-dir", global.output_dir, "artifact directory")
      ->capture_default_str();
  app.add_option("--jobs", global.jobs, "grid worker count")
      ->capture_default_str();

  GenOptions gen;
  CLI::App* gen_cmd =
      app.add_subcommand("gen-corpus", "generate a synthetic family corpus");
  gen_cmd->add_option("--families", gen.families)->capture_default_str();
  gen_cmd->add_option("--length", gen.length)->capture_default_str();
  gen_cmd->add_option("--rate", gen.rate, "within-family substitution rate")
      ->capture_default_str();
  gen_cmd->add_option("--members", gen.members)->capture_default_str();
  gen_cmd->add_option("--targets", gen.targets)->capture_default_str();
  gen_cmd->add_option("--assay-records", gen.assay_records)
      ->capture_default_str();
  gen_cmd->add_option("--max-mutations", gen.max_mutations)
      ->capture_default_str();
  gen_cmd->add_option("--held-out", gen.held_out, "-1 picks the last family")
      ->capture_default_str();

  PretrainOptions pre;
  CLI::App* pre_cmd =
      app.add_subcommand("pretrain", "masked-LM training over a corpus");
  pre_cmd->add_option("--corpus", pre.corpus, "training FASTA")->required();
  pre_cmd->add_option("--labels", pre.labels,
                      "family labels CSV; trains a classifier head");
  pre_cmd->add_option("--out", pre.out, "checkpoint path");
  pre_cmd->add_option("--loss-curve", pre.curve, "loss curve JSONL path");
  pre_cmd->add_option("--lr", pre.lr)->capture_default_str();
  pre_cmd->add_option("--micro-batch", pre.micro)->capture_default_str();
  pre_cmd->add_option("--accum", pre.accum)->capture_default_str();
  pre_cmd->add_option("--epochs", pre.epochs)->capture_default_str();
  pre_cmd->add_option("--loss", pre.loss)
      ->check(CLI::IsMember({"normalized", "global", "unnormalized"}))
      ->capture_default_str();
  add_model_flags(pre_cmd, pre.model);
  add_mask_flags(pre_cmd, pre.mask);

  TTTOptions ttt;
  CLI::App* ttt_cmd =
      app.add_subcommand("ttt", "customize a checkpoint to one sequence");
  ttt_cmd->add_option("--checkpoint", ttt.checkpoint)->required();
  ttt_cmd->add_option("--target", ttt.target, "target FASTA");
  ttt_cmd->add_option("--target-id", ttt.target_id,
                      "record id inside --target; first record otherwise");
  ttt_cmd->add_option("--msa", ttt.msa, "A3M alignment; enables the MSA "
                                        "objective");
  ttt_cmd->add_option("--steps", ttt.steps)->capture_default_str();
  ttt_cmd->add_option("--lr", ttt.lr)->capture_default_str();
  ttt_cmd->add_option("--micro-batch", ttt.micro)->capture_default_str();
  ttt_cmd->add_option("--accum", ttt.accum)->capture_default_str();
  ttt_cmd->add_option("--loss", ttt.loss)
      ->check(CLI::IsMember({"normalized", "global", "unnormalized"}))
      ->capture_default_str();
  ttt_cmd->add_option("--selection", ttt.selection)
      ->check(CLI::IsMember({"full_except_embeddings", "lora_only", "full"}))
      ->capture_default_str();
  ttt_cmd->add_option("--lora-rank", ttt.lora_rank,
                      "> 0 attaches an adapter (needs --selection lora_only)")
      ->capture_default_str();
  ttt_cmd->add_option("--lora-alpha", ttt.lora_alpha)->capture_default_str();
  ttt_cmd->add_flag("--lora-train-norms-head", ttt.lora_norms_head,
                    "also customize layer norms and the MLM head");
  ttt_cmd->add_option("--confidence", ttt.confidence)
      ->check(CLI::IsMember({"none", "neg_perplexity", "head_max_prob"}))
      ->capture_default_str();
  ttt_cmd->add_flag("--emit-perplexity", ttt.emit_perplexity,
                    "record pseudo-perplexity at every step");
  ttt_cmd->add_option("--trace", ttt.trace, "trace JSONL path");
  ttt_cmd->add_option("--out", ttt.out, "selected snapshot checkpoint path");
  add_mask_flags(ttt_cmd, ttt.mask);

  ScoreOptions score;
  CLI::App* score_cmd =
      app.add_subcommand("score", "log-odds fitness scoring over assays");
  score_cmd->add_option("--checkpoint", score.checkpoint)->required();
  score_cmd->add_option("--targets", score.targets, "reference FASTA")
      ->required();
  score_cmd->add_option("--assay", score.assays, "assay CSV; repeatable");
  score_cmd->add_option("--assays", score.assay_dir,
                        "directory of <target_id>.csv assays");
  score_cmd->add_option("--mode", score.mode)
      ->check(CLI::IsMember({"independent", "joint", "wildtype"}))
      ->capture_default_str();
  score_cmd->add_flag("--renormalize", score.renormalize,
                      "renormalize probabilities over the 20 residues");

  PerplexityOptions ppl;
  CLI::App* ppl_cmd =
      app.add_subcommand("perplexity", "pseudo-perplexity per sequence");
  ppl_cmd->add_option("--checkpoint", ppl.checkpoint)->required();
  ppl_cmd->add_option("--targets", ppl.targets, "FASTA")->required();
  ppl_cmd->add_flag("--renormalize", ppl.renormalize);
  ppl_cmd->add_option("--out", ppl.out, "CSV path");

  GridCmdOptions grid;
  CLI::App* grid_cmd =
      app.add_subcommand("grid", "hyperparameter sweep over TTT cells");
  grid_cmd->add_option("--checkpoint", grid.checkpoint)->required();
  grid_cmd->add_option("--targets", grid.targets, "target FASTA")->required();
  grid_cmd->add_option("--assays", grid.assay_dir,
                       "directory of <target_id>.csv assays");
  grid_cmd->add_option("--lrs", grid.lrs)->delimiter(',')
      ->capture_default_str();
  grid_cmd->add_option("--micro-batches", grid.micros)->delimiter(',')
      ->capture_default_str();
  grid_cmd->add_option("--accums", grid.accums)->delimiter(',')
      ->capture_default_str();
  grid_cmd->add_option("--maskings", grid.maskings,
                       "fixed:P | uniform:LO:HI | beta:A:B; repeatable")
      ->delimiter(',');
  grid_cmd->add_option("--losses", grid.losses)->delimiter(',');
  grid_cmd->add_option("--steps", grid.steps)->capture_default_str();
  grid_cmd->add_option("--crop-window", grid.crop_window,
                       "0 disables cropping")
      ->capture_default_str();
  grid_cmd->add_option("--out", grid.out, "aggregate CSV path");
  grid_cmd->add_option("--trace-dir", grid.trace_dir,
                       "per-cell trace directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen_cmd->parsed()) return run_gen_corpus(gen, global);
    if (pre_cmd->parsed()) return run_pretrain(pre, global);
    if (ttt_cmd->parsed()) return run_ttt(ttt, global);
    if (score_cmd->parsed()) return run_score(score, global);
    if (ppl_cmd->parsed()) return run_perplexity(ppl, global);
    if (grid_cmd->parsed()) return run_grid_cmd(grid, global);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
