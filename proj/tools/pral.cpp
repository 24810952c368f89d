// pral: corpus tools, tokenizer training, teacher construction, training,
// evaluation, generation and terminal chat.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <unistd.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "pral/evaluation.hpp"
#include "pral/manifest.hpp"
#include "pral/synthetic.hpp"
#include "pral/training.hpp"

using namespace pral;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string command_line(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
  return s;
}

json read_json_file(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw Error("cannot open " + p.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

// A config file is one flat JSON object: TrainConfig field names plus
// ModelConfig field names.
struct ConfigFile {
  json train = json::object();
  json model = json::object();
};

ConfigFile read_config(const std::optional<fs::path>& p) {
  ConfigFile c;
  if (!p) return c;
  const json j = read_json_file(*p);
  if (!j.is_object()) throw ConfigError(p->string() + ": expected a JSON object");
  const json model_keys = ModelConfig{}.to_json();
  for (const auto& [k, v] : j.items()) (model_keys.contains(k) ? c.model : c.train)[k] = v;
  return c;
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + p.string());
    f << text;
  }
  fs::rename(tmp, p);
}

Role parse_role(const std::string& s) {
  if (s == "A" || s == "a" || s == "user") return Role::User;
  if (s == "B" || s == "b" || s == "system") return Role::System;
  throw ConfigError("role must be A or B, got '" + s + "'");
}

// Model shape flags shared by train and make-teacher.
struct ModelFlags {
  std::optional<std::size_t> layers, heads, d_model, d_ff, max_positions;
  std::optional<double> dropout;

  void add(CLI::App* app) {
    app->add_option("--layers", layers, "transformer blocks per LM");
    app->add_option("--heads", heads, "attention heads");
    app->add_option("--d-model", d_model, "embedding width");
    app->add_option("--d-ff", d_ff, "feed-forward width");
    app->add_option("--max-positions", max_positions, "context capacity in tokens");
    app->add_option("--dropout", dropout, "dropout rate");
  }

  ModelConfig resolve(const json& file_cfg, const Vocab& v, std::uint64_t seed) const {
    ModelConfig c = file_cfg.is_object() ? ModelConfig::from_json(file_cfg) : ModelConfig{};
    if (!(file_cfg.is_object() && file_cfg.contains("init_seed"))) c.init_seed = derive_seed(seed, "model");
    if (layers) c.n_layers = *layers;
    if (heads) c.n_heads = *heads;
    if (d_model) c.d_model = *d_model;
    if (d_ff) c.d_ff = *d_ff;
    if (max_positions) c.max_positions = *max_positions;
    if (dropout) c.dropout_rate = *dropout;
    c.vocab_size = v.size();
    c.validate();
    return c;
  }
};

struct DecodeFlags {
  std::string strategy = "top-p";
  double top_p = 0.9;
  double temperature = 1.0;
  std::size_t max_new_tokens = 64;

  void add(CLI::App* app, const std::string& default_strategy) {
    strategy = default_strategy;
    app->add_option("--strategy", strategy, "greedy or top-p")
        ->check(CLI::IsMember({"greedy", "top-p"}))
        ->capture_default_str();
    app->add_option("--top-p", top_p, "nucleus mass")->capture_default_str();
    app->add_option("--temperature", temperature)->capture_default_str();
    app->add_option("--max-new-tokens", max_new_tokens)->capture_default_str();
  }

  DecodeConfig resolve(std::uint64_t seed) const {
    DecodeConfig d;
    d.strategy = strategy == "greedy" ? DecodeStrategy::Greedy : DecodeStrategy::TopP;
    d.top_p = top_p;
    d.temperature = temperature;
    d.max_new_tokens = max_new_tokens;
    d.seed = seed;
    d.validate();
    return d;
  }
};

std::vector<TokenizedDialog> encode_corpus(const Vocab& v, std::span<const Dialog> corpus, std::size_t cap,
                                           const char* what) {
  std::vector<TokenizedDialog> out;
  for (const auto& d : corpus) {
    TokenizedDialog td = encode_dialog(v, d);
    if (td.ids.size() > cap) {
      throw CapacityError(std::string(what) + " dialog '" + d.id + "' has " + std::to_string(td.ids.size()) +
                          " tokens, capacity is " + std::to_string(cap));
    }
    out.push_back(std::move(td));
  }
  return out;
}

// ---------------------------------------------------------------------------
// corpus

int corpus_synth(std::uint64_t seed, std::size_t n, bool broad, const fs::path& out) {
  SyntheticGrammar g;
  if (broad) g.breadth = SyntheticGrammar::Breadth::Broad;
  const auto corpus = generate_synthetic(seed, n, g);
  write_corpus(out, corpus);
  std::cerr << "wrote " << corpus.size() << " dialogs to " << out.string() << "\n";
  return 0;
}

int corpus_ingest(const fs::path& in, const std::vector<std::string>& maps, const fs::path& out) {
  std::map<std::string, Role> mapping;
  for (const auto& m : maps) {
    const auto eq = m.rfind('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--map expects LABEL=A|B, got '" + m + "'");
    mapping[m.substr(0, eq)] = parse_role(m.substr(eq + 1));
  }
  std::ifstream f(in, std::ios::binary);
  if (!f) throw Error("cannot open " + in.string());
  std::vector<TabularRecord> records;
  std::string line;
  std::size_t offset = 0;
  while (std::getline(f, line)) {
    const std::size_t start = offset;
    offset += line.size() + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      TabularRecord r;
      r.dialog_id = j.at("dialog_id").is_string() ? j.at("dialog_id").get<std::string>() : j.at("dialog_id").dump();
      r.turn_index = j.at("turn_index").get<std::int64_t>();
      r.speaker = j.at("speaker").get<std::string>();
      r.text = j.at("text").get<std::string>();
      records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ParseError(in.string() + ": bad record: " + e.what(), start);
    }
  }
  const IngestResult res = ingest_tabular(records, mapping);
  write_corpus(out, res.dialogs);
  std::cerr << "ingested " << res.dialogs.size() << " dialogs from " << records.size() << " records, dropped "
            << res.dropped << "\n";
  return 0;
}

int corpus_stats_cmd(const fs::path& in, const std::optional<fs::path>& vocab, const std::optional<fs::path>& out) {
  const auto corpus = read_corpus(in);
  std::optional<Vocab> v;
  if (vocab) v = Vocab::load(*vocab);
  const CorpusStats s = v ? corpus_stats(corpus, vocab_splitter(*v)) : corpus_stats(corpus);
  std::printf("%-22s %zu\n%-22s %.4f\n%-22s %.4f\n%-22s %.4f\n%-22s %zu\n", "dialogs", s.dialog_count,
              "avg turns / dialog", s.avg_turns_per_dialog, "avg tokens / turn", s.avg_tokens_per_turn,
              "avg tokens / dialog", s.avg_tokens_per_dialog, "unique tokens", s.unique_token_count);
  if (out) {
    const json j = {{"dialogs", s.dialog_count},
                    {"avg_turns_per_dialog", s.avg_turns_per_dialog},
                    {"avg_tokens_per_turn", s.avg_tokens_per_turn},
                    {"avg_tokens_per_dialog", s.avg_tokens_per_dialog},
                    {"unique_tokens", s.unique_token_count},
                    {"tokens", v ? "bpe" : "whitespace"}};
    write_text(*out, j.dump(2) + "\n");
  }
  return 0;
}

int corpus_validate(const fs::path& in) {
  const auto corpus = read_corpus(in);
  std::cerr << in.string() << ": " << corpus.size() << " valid dialogs\n";
  return 0;
}

// ---------------------------------------------------------------------------
// training

struct TrainFlags {
  fs::path corpus, vocab, out_dir;
  std::optional<fs::path> teacher_ckpt, config;
  bool no_spr = false, no_teacher = false, no_discount = false;
  std::optional<double> gamma, alpha0, lambda, lr, warmup;
  std::optional<std::size_t> steps, batch_size, checkpoint_interval;
  std::uint64_t seed = 0;
  ModelFlags model;
};

TrainConfig resolve_train_config(const TrainFlags& f, const json& file_cfg) {
  TrainConfig c = file_cfg.is_object() ? TrainConfig::from_json(file_cfg) : TrainConfig{};
  c = TrainConfig::from_environment(c);
  c.seed = f.seed;
  if (f.no_spr) c.spr_enabled = false;
  if (f.no_teacher) c.teacher_enabled = false;
  if (f.no_discount) c.discount_enabled = false;
  if (f.gamma) c.gamma = *f.gamma;
  if (f.alpha0) c.alpha0 = *f.alpha0;
  if (f.lambda) c.lambda = *f.lambda;
  if (f.lr) c.learning_rate = *f.lr;
  if (f.warmup) c.warmup_fraction = *f.warmup;
  if (f.steps) c.total_steps = *f.steps;
  if (f.batch_size) c.batch_size = *f.batch_size;
  if (f.checkpoint_interval) c.checkpoint_interval = *f.checkpoint_interval;
  c.validate();
  return c;
}

int train_cmd(const TrainFlags& f, const std::string& cmdline) {
  const ConfigFile file_cfg = read_config(f.config);
  const TrainConfig tc = resolve_train_config(f, file_cfg.train);
  const Vocab v = Vocab::load(f.vocab);
  const ModelConfig mc = f.model.resolve(file_cfg.model, v, f.seed);
  if (tc.teacher_enabled && !f.teacher_ckpt) {
    throw ConfigError("teacher is enabled but no --teacher-ckpt was given (use --no-teacher to train without)");
  }
  const auto dialogs = read_corpus(f.corpus);
  const auto corpus = encode_corpus(v, dialogs, mc.max_positions, "training");

  std::optional<TeacherHandle<float>> teacher;
  if (tc.teacher_enabled) {
    teacher.emplace(lm_from_checkpoint<float>(load_checkpoint(*f.teacher_ckpt), kTeacherKind));
  }

  fs::create_directories(f.out_dir);
  RunManifest manifest;
  manifest.command = cmdline;
  manifest.config = {{"train", tc.to_json()}, {"model", mc.to_json()}};
  manifest.add_file("corpus", f.corpus, f.out_dir);
  manifest.add_file("vocab", f.vocab, f.out_dir);
  if (teacher) manifest.add_file("teacher", *f.teacher_ckpt, f.out_dir);

  const fs::path log_path = f.out_dir / "loss.jsonl";
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw Error("cannot write " + log_path.string());
  std::vector<fs::path> checkpoints;
  const json extra = {{"train_config", tc.to_json()}};

  RoleAlternatingModel<float> m(mc);
  TrainCallbacks<float> cb;
  const std::size_t every = std::max<std::size_t>(1, tc.total_steps / 20);
  cb.on_step = [&](const StepRecord& r) {
    log << r.to_json().dump() << '\n';
    if (r.step % every == 0 || r.step == tc.total_steps) {
      std::cerr << "step " << r.step << "/" << tc.total_steps << " lm " << r.lm;
      if (r.kl) std::cerr << " kl " << *r.kl << " alpha " << r.alpha;
      std::cerr << " lr " << r.lr << "\n";
    }
  };
  cb.on_checkpoint = [&](std::size_t step, const RoleAlternatingModel<float>& model) {
    json meta = extra;
    meta["step"] = step;
    const fs::path p = f.out_dir / ("model-step" + std::to_string(step) + ".ckpt");
    save_checkpoint(p, model.to_checkpoint(meta));
    checkpoints.push_back(p);
  };
  const auto records = train<float>(corpus, m, teacher ? &*teacher : nullptr, tc, cb);
  log.close();

  const fs::path final_path = f.out_dir / "model.ckpt";
  json meta = extra;
  meta["step"] = tc.total_steps;
  save_checkpoint(final_path, m.to_checkpoint(meta));
  for (const auto& p : checkpoints) manifest.add_file("checkpoint", p, f.out_dir);
  manifest.add_file("model", final_path, f.out_dir);
  manifest.add_file("loss_log", log_path, f.out_dir);
  if (!records.empty()) manifest.metrics = {{"final_step", records.back().to_json()}};
  manifest.save(f.out_dir / "manifest.json");
  std::cerr << "wrote " << final_path.string() << " and " << (f.out_dir / "manifest.json").string() << "\n";
  return 0;
}

struct TeacherFlags {
  fs::path vocab, out;
  std::optional<fs::path> config;
  std::uint64_t seed = 0;
  std::optional<std::size_t> dialogs, steps;
  std::optional<double> lr;
  ModelFlags model;
};

int make_teacher_cmd(const TeacherFlags& f, const std::string& cmdline) {
  const ConfigFile file_cfg = read_config(f.config);
  const Vocab v = Vocab::load(f.vocab);
  const ModelConfig student = f.model.resolve(file_cfg.model, v, f.seed);
  TeacherRecipe recipe;
  recipe.corpus_seed = derive_seed(f.seed, "teacher.corpus");
  recipe.train.seed = derive_seed(f.seed, "teacher.train");
  if (f.dialogs) recipe.dialogs = *f.dialogs;
  if (f.steps) recipe.train.total_steps = *f.steps;
  if (f.lr) recipe.train.learning_rate = *f.lr;
  recipe.train.validate();
  const std::size_t every = std::max<std::size_t>(1, recipe.train.total_steps / 20);
  const TransformerLM<float> lm = make_teacher<float>(student, v, recipe, [&](const StepRecord& r) {
    if (r.step % every == 0) std::cerr << "teacher step " << r.step << "/" << recipe.train.total_steps << " loss " << r.lm << "\n";
  });
  save_checkpoint(f.out, lm_checkpoint(lm, kTeacherKind));

  RunManifest manifest;
  manifest.command = cmdline;
  manifest.config = {{"recipe", recipe.to_json()}, {"student_model", student.to_json()},
                     {"teacher_model", lm.config().to_json()}};
  const fs::path dir = f.out.has_parent_path() ? f.out.parent_path() : fs::path(".");
  manifest.add_file("vocab", f.vocab, dir);
  manifest.add_file("teacher", f.out, dir);
  const fs::path mpath = f.out.string() + ".manifest.json";
  manifest.save(mpath);
  std::cerr << "wrote " << f.out.string() << " and " << mpath.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval / generate / chat

RoleAlternatingModel<float> load_model(const fs::path& p) {
  return RoleAlternatingModel<float>::from_checkpoint(load_checkpoint(p));
}

void require_vocab_match(const RoleAlternatingModel<float>& m, const Vocab& v) {
  if (m.config().vocab_size != v.size()) {
    throw ConfigError("model vocab_size " + std::to_string(m.config().vocab_size) + " differs from vocabulary size " +
                      std::to_string(v.size()));
  }
}

int eval_cmd(const fs::path& model, const fs::path& vocab, const fs::path& corpus, std::size_t max_dialogs,
             const std::optional<fs::path>& out, const DecodeFlags& dec, std::uint64_t seed) {
  const auto m = load_model(model);
  const Vocab v = Vocab::load(vocab);
  require_vocab_match(m, v);
  const auto dialogs = read_corpus(corpus);
  EvalConfig cfg;
  cfg.decode = dec.resolve(seed);
  cfg.max_dialogs = max_dialogs;
  const EvalOutput res = evaluate(m, v, std::span<const Dialog>(dialogs), cfg);
  std::cout << res.report.table();
  if (out) write_text(*out, res.report.to_json().dump(2) + "\n");
  return 0;
}

int generate_cmd(const fs::path& model, const fs::path& vocab, const fs::path& corpus, const fs::path& out,
                 const DecodeFlags& dec, std::uint64_t seed) {
  const auto m = load_model(model);
  const Vocab v = Vocab::load(vocab);
  require_vocab_match(m, v);
  const auto dialogs = read_corpus(corpus);
  const DecodeConfig cfg = dec.resolve(seed);
  Rng rng(derive_seed(seed, "generate"));
  std::vector<Dialog> result;
  for (const auto& d : dialogs) {
    Dialog g = d;
    for (std::size_t i = 0; i < d.utterances.size(); ++i) {
      if (d.utterances[i].role != Role::System) continue;
      Dialog history{d.id, {d.utterances.begin(), d.utterances.begin() + static_cast<std::ptrdiff_t>(i)}, {}};
      g.utterances[i] = generate_utterance(m, v, history, Role::System, cfg, &rng);
    }
    result.push_back(std::move(g));
    if (result.size() % 50 == 0) std::cerr << "generated " << result.size() << "/" << dialogs.size() << "\n";
  }
  write_corpus(out, result);
  std::cerr << "wrote " << result.size() << " dialogs to " << out.string() << "\n";
  return 0;
}

int chat_cmd(const fs::path& model, const fs::path& vocab, const std::string& human, const DecodeFlags& dec,
             std::uint64_t seed, const std::optional<fs::path>& transcript) {
  const auto m = load_model(model);
  const Vocab v = Vocab::load(vocab);
  require_vocab_match(m, v);
  const Role human_role = parse_role(human);
  ChatSession<float> session(m, v, human_role, dec.resolve(seed));
  const bool interactive = isatty(STDIN_FILENO);
  auto save = [&] {
    if (transcript && !session.history().utterances.empty()) write_text(*transcript, serialize_unified(session.history()));
  };
  auto say = [&](const Utterance& u) { std::cout << role_prefix(u.role) << " " << u.text << std::endl; };
  if (session.next_speaker() != human_role) say(session.model_turn());
  std::string line;
  while (true) {
    if (interactive) std::cerr << role_prefix(human_role) << " " << std::flush;
    if (!std::getline(std::cin, line) || line == "/quit") break;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    try {
      const Utterance reply = session.chat_step(line);
      if (!interactive) std::cout << role_prefix(human_role) << " " << line << "\n";
      say(reply);
      save();
    } catch (const FormatError& e) {
      std::cerr << "ignored input: " << e.what() << "\n";
    }
  }
  save();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Role-alternating dialog language models: corpus, tokenizer, training, evaluation, chat"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);
  const std::string cmdline = command_line(argc, argv);
  std::function<int()> run;

  // corpus
  auto* corpus = app.add_subcommand("corpus", "build, inspect and check corpus files");
  corpus->require_subcommand(1);
  std::uint64_t synth_seed = 0;
  std::size_t synth_n = 200;
  bool synth_broad = false;
  fs::path synth_out;
  auto* synth = corpus->add_subcommand("synth", "write a synthetic restaurant-search corpus");
  synth->add_option("--seed", synth_seed)->capture_default_str();
  synth->add_option("--n", synth_n, "number of dialogs")->capture_default_str();
  synth->add_flag("--broad", synth_broad, "use the broader grammar");
  synth->add_option("-o,--out", synth_out)->required();
  synth->callback([&] { run = [&] { return corpus_synth(synth_seed, synth_n, synth_broad, synth_out); }; });

  fs::path ingest_in, ingest_out;
  std::vector<std::string> ingest_maps;
  auto* ingest = corpus->add_subcommand("ingest", "convert JSONL turn records {dialog_id, turn_index, speaker, text}");
  ingest->add_option("input", ingest_in)->required()->check(CLI::ExistingFile);
  ingest->add_option("--map", ingest_maps, "speaker label mapping, LABEL=A or LABEL=B")->required();
  ingest->add_option("-o,--out", ingest_out)->required();
  ingest->callback([&] { run = [&] { return corpus_ingest(ingest_in, ingest_maps, ingest_out); }; });

  fs::path stats_in;
  std::optional<fs::path> stats_vocab, stats_out;
  auto* stats = corpus->add_subcommand("stats", "print corpus statistics");
  stats->add_option("input", stats_in)->required()->check(CLI::ExistingFile);
  stats->add_option("--vocab", stats_vocab, "count BPE tokens instead of whitespace tokens");
  stats->add_option("-o,--out", stats_out, "also write the statistics as JSON");
  stats->callback([&] { run = [&] { return corpus_stats_cmd(stats_in, stats_vocab, stats_out); }; });

  fs::path validate_in;
  auto* validate = corpus->add_subcommand("validate", "parse and check every dialog");
  validate->add_option("input", validate_in)->required()->check(CLI::ExistingFile);
  validate->callback([&] { run = [&] { return corpus_validate(validate_in); }; });

  // tokenizer
  auto* tokenizer = app.add_subcommand("tokenizer", "byte-level BPE vocabulary");
  tokenizer->require_subcommand(1);
  fs::path tok_corpus, tok_out;
  std::size_t vocab_size = 2000;
  auto* tok_train = tokenizer->add_subcommand("train", "learn merges from a corpus");
  tok_train->add_option("--corpus", tok_corpus)->required()->check(CLI::ExistingFile);
  tok_train->add_option("--vocab-size", vocab_size)->capture_default_str();
  tok_train->add_option("-o,--out", tok_out)->required();
  tok_train->callback([&] {
    run = [&] {
      const auto c = read_corpus(tok_corpus);
      const Vocab v = train_bpe(std::span<const Dialog>(c), vocab_size);
      v.save(tok_out);
      std::cerr << "wrote " << v.size() << " tokens to " << tok_out.string() << "\n";
      return 0;
    };
  });

  // make-teacher
  TeacherFlags tf;
  auto* teacher = app.add_subcommand("make-teacher", "train and freeze a larger LM on a broad synthetic corpus");
  teacher->add_option("--vocab", tf.vocab)->required()->check(CLI::ExistingFile);
  teacher->add_option("-o,--out", tf.out)->required();
  teacher->add_option("--config", tf.config, "flat JSON config; its model keys give the student shape")
      ->check(CLI::ExistingFile);
  teacher->add_option("--seed", tf.seed)->capture_default_str();
  teacher->add_option("--dialogs", tf.dialogs, "broad corpus size (default 4000)");
  teacher->add_option("--steps", tf.steps, "training steps (default 2000)");
  teacher->add_option("--lr", tf.lr, "learning rate (default 1e-3)");
  tf.model.add(teacher);
  teacher->callback([&] { run = [&] { return make_teacher_cmd(tf, cmdline); }; });

  // train
  TrainFlags trf;
  auto* tr = app.add_subcommand("train", "train the user and system models");
  tr->add_option("--corpus", trf.corpus)->required()->check(CLI::ExistingFile);
  tr->add_option("--vocab", trf.vocab)->required()->check(CLI::ExistingFile);
  tr->add_option("-o,--out", trf.out_dir, "output directory")->required();
  tr->add_option("--teacher-ckpt", trf.teacher_ckpt)->check(CLI::ExistingFile);
  tr->add_option("--config", trf.config, "flat JSON object of TrainConfig and ModelConfig keys")
      ->check(CLI::ExistingFile);
  tr->add_flag("--no-spr", trf.no_spr, "disable split position randomization");
  tr->add_flag("--no-teacher", trf.no_teacher, "disable the distillation term");
  tr->add_flag("--no-discount", trf.no_discount, "weight every utterance 1");
  tr->add_option("--gamma", trf.gamma);
  tr->add_option("--alpha0", trf.alpha0);
  tr->add_option("--lambda", trf.lambda);
  tr->add_option("--lr", trf.lr);
  tr->add_option("--warmup", trf.warmup, "warmup fraction of total steps");
  tr->add_option("--steps", trf.steps);
  tr->add_option("--batch-size", trf.batch_size);
  tr->add_option("--checkpoint-interval", trf.checkpoint_interval);
  tr->add_option("--seed", trf.seed)->capture_default_str();
  trf.model.add(tr);
  tr->footer("Environment variables PRAL_<KEY> (e.g. PRAL_GAMMA, PRAL_TOTAL_STEPS) override the config file; flags "
             "override both.");
  tr->callback([&] { run = [&] { return train_cmd(trf, cmdline); }; });

  // eval
  fs::path ev_model, ev_vocab, ev_corpus;
  std::size_t ev_max = 0;
  std::optional<fs::path> ev_out;
  std::uint64_t ev_seed = 0;
  DecodeFlags ev_dec;
  auto* ev = app.add_subcommand("eval", "perplexity, BLEU and Success F1 on a corpus");
  ev->add_option("--model", ev_model)->required()->check(CLI::ExistingFile);
  ev->add_option("--vocab", ev_vocab)->required()->check(CLI::ExistingFile);
  ev->add_option("--corpus", ev_corpus)->required()->check(CLI::ExistingFile);
  ev->add_option("--max-dialogs", ev_max, "0 evaluates all")->capture_default_str();
  ev->add_option("-o,--out", ev_out, "write the report as JSON");
  ev->add_option("--seed", ev_seed)->capture_default_str();
  ev_dec.add(ev, "greedy");
  ev->callback([&] { run = [&] { return eval_cmd(ev_model, ev_vocab, ev_corpus, ev_max, ev_out, ev_dec, ev_seed); }; });

  // generate
  fs::path gen_model, gen_vocab, gen_corpus, gen_out;
  std::uint64_t gen_seed = 0;
  DecodeFlags gen_dec;
  auto* gen = app.add_subcommand("generate", "replace every system turn with a generated response");
  gen->add_option("--model", gen_model)->required()->check(CLI::ExistingFile);
  gen->add_option("--vocab", gen_vocab)->required()->check(CLI::ExistingFile);
  gen->add_option("--corpus", gen_corpus)->required()->check(CLI::ExistingFile);
  gen->add_option("-o,--out", gen_out)->required();
  gen->add_option("--seed", gen_seed)->capture_default_str();
  gen_dec.add(gen, "top-p");
  gen->callback([&] { run = [&] { return generate_cmd(gen_model, gen_vocab, gen_corpus, gen_out, gen_dec, gen_seed); }; });

  // chat
  fs::path chat_model, chat_vocab;
  std::string human_role = "A";
  std::optional<fs::path> chat_transcript;
  std::uint64_t chat_seed = 0;
  DecodeFlags chat_dec;
  auto* chat = app.add_subcommand("chat", "talk to the model on stdin/stdout; /quit ends the session");
  chat->add_option("--model", chat_model)->required()->check(CLI::ExistingFile);
  chat->add_option("--vocab", chat_vocab)->required()->check(CLI::ExistingFile);
  chat->add_option("--human-role", human_role, "A (user) or B (system)")
      ->check(CLI::IsMember({"A", "B"}))
      ->capture_default_str();
  chat->add_option("--transcript", chat_transcript, "save the dialog in unified format");
  chat->add_option("--seed", chat_seed)->capture_default_str();
  chat_dec.add(chat, "top-p");
  chat->callback([&] {
    run = [&] { return chat_cmd(chat_model, chat_vocab, human_role, chat_dec, chat_seed, chat_transcript); };
  });

  // manifest
  auto* manifest = app.add_subcommand("manifest", "run manifests");
  manifest->require_subcommand(1);
  fs::path manifest_path;
  auto* verify = manifest->add_subcommand("verify", "recompute every fingerprint");
  verify->add_option("manifest", manifest_path)->required()->check(CLI::ExistingFile);
  verify->callback([&] {
    run = [&] {
      const RunManifest m = RunManifest::load(manifest_path);
      const auto problems = verify_manifest(m, manifest_path.parent_path());
      for (const auto& p : problems) std::cerr << p << "\n";
      if (!problems.empty()) return 1;
      std::cerr << manifest_path.string() << ": " << m.files.size() << " files verified\n";
      return 0;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    return run ? run() : 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
