// Command-line front end: data generation, retriever pretraining, index
// building/inspection, joint training, translation, evaluation, and TM
// hot-swapping. Progress goes to stderr; data output (translations, metrics)
// goes to stdout so pipelines stay clean.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "memt/checkpoint.hpp"
#include "memt/corpus.hpp"
#include "memt/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace memt;

namespace {

constexpr const char* kToolVersion = "memt 1.0";

// distinct exit codes per error class
constexpr int kExitFailure = 1;
constexpr int kExitMissingFile = 2;
constexpr int kExitDimensionMismatch = 3;
constexpr int kExitBadConfig = 4;

struct MissingFileError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionMismatchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_exists(const std::string& path) {
  if (!fs::exists(path)) throw MissingFileError("missing file or directory: " + path);
}

// Every tunable in one flat bag; resolution order is flag > config file >
// built-in default, and the resolved result lands in the run manifest.
struct AppConfig {
  SyntheticTaskSpec task;
  CorpusSizes sizes;
  int width = 128;
  int ffn = 256;
  int heads = 2;
  double dropout = 0.1;
  int embed_dim = 128;
  int retr_blocks = 3;
  int enc_blocks = 6;
  int dec_blocks = 6;
  int mem_blocks = 4;
  double label_smoothing = 0.1;
  TrainConfig train;
  int beam = 1;
  int max_len = 32;

  void set(const std::string& key, const std::string& value) {
    try {
      if (key == "src_vocab_size") task.src_vocab_size = std::stoi(value);
      else if (key == "tgt_vocab_size") task.tgt_vocab_size = std::stoi(value);
      else if (key == "mapping_seed") task.mapping_seed = std::stoull(value);
      else if (key == "len_min") task.len_min = std::stoi(value);
      else if (key == "len_max") task.len_max = std::stoi(value);
      else if (key == "zipf_exponent") task.zipf_exponent = std::stod(value);
      else if (key == "num_domains") task.num_domains = std::stoi(value);
      else if (key == "near_dup_rate") task.near_dup_rate = std::stod(value);
      else if (key == "tgt_synonyms") task.tgt_synonyms = std::stoi(value);
      else if (key == "train_size") sizes.train = std::stoi(value);
      else if (key == "dev_size") sizes.dev = std::stoi(value);
      else if (key == "test_size") sizes.test = std::stoi(value);
      else if (key == "extra_monolingual") sizes.extra_monolingual = std::stoi(value);
      else if (key == "width") width = std::stoi(value);
      else if (key == "ffn") ffn = std::stoi(value);
      else if (key == "heads") heads = std::stoi(value);
      else if (key == "dropout") dropout = std::stod(value);
      else if (key == "embed_dim") embed_dim = std::stoi(value);
      else if (key == "retr_blocks") retr_blocks = std::stoi(value);
      else if (key == "enc_blocks") enc_blocks = std::stoi(value);
      else if (key == "dec_blocks") dec_blocks = std::stoi(value);
      else if (key == "mem_blocks") mem_blocks = std::stoi(value);
      else if (key == "label_smoothing") label_smoothing = std::stod(value);
      else if (key == "variant") train.variant = parse_variant(value);
      else if (key == "m") train.m = std::stoi(value);
      else if (key == "batch") train.batch = std::stoi(value);
      else if (key == "steps") train.steps = std::stoi(value);
      else if (key == "refresh_interval")
        train.refresh_interval = (value == "inf") ? 0 : std::stol(value);
      else if (key == "exclude_self_match") train.exclude_self_match = (value == "1" || value == "true");
      else if (key == "seed") train.seed = std::stoull(value);
      else if (key == "pretrain_steps") train.pretrain_steps = std::stoi(value);
      else if (key == "pretrain_batch") train.pretrain_batch = std::stoi(value);
      else if (key == "checkpoint_every") train.checkpoint_every = std::stoi(value);
      else if (key == "retriever_anchor_weight") train.retriever_anchor_weight = std::stod(value);
      else if (key == "backend")
        train.backend = (value == "approx") ? IndexBackend::approximate : IndexBackend::exact;
      else if (key == "warmup_steps") train.adam.warmup_steps = std::stoi(value);
      else if (key == "base_lr") train.adam.base_lr = std::stod(value);
      else if (key == "clip_norm") train.adam.clip_norm = std::stod(value);
      else if (key == "beam") beam = std::stoi(value);
      else if (key == "max_len") max_len = std::stoi(value);
      else throw ConfigError("unknown configuration key: " + key);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("bad value for configuration key " + key + ": " + value);
    }
  }

  std::map<std::string, std::string> resolved() const {
    std::ostringstream zipf, drop, dup, smooth, lr, clip, anchor;
    zipf << task.zipf_exponent;
    anchor << train.retriever_anchor_weight;
    drop << dropout;
    dup << task.near_dup_rate;
    smooth << label_smoothing;
    lr << train.adam.base_lr;
    clip << train.adam.clip_norm;
    return {
        {"src_vocab_size", std::to_string(task.src_vocab_size)},
        {"tgt_vocab_size", std::to_string(task.tgt_vocab_size)},
        {"mapping_seed", std::to_string(task.mapping_seed)},
        {"len_min", std::to_string(task.len_min)},
        {"len_max", std::to_string(task.len_max)},
        {"zipf_exponent", zipf.str()},
        {"num_domains", std::to_string(task.num_domains)},
        {"near_dup_rate", dup.str()},
        {"tgt_synonyms", std::to_string(task.tgt_synonyms)},
        {"train_size", std::to_string(sizes.train)},
        {"dev_size", std::to_string(sizes.dev)},
        {"test_size", std::to_string(sizes.test)},
        {"extra_monolingual", std::to_string(sizes.extra_monolingual)},
        {"width", std::to_string(width)},
        {"ffn", std::to_string(ffn)},
        {"heads", std::to_string(heads)},
        {"dropout", drop.str()},
        {"embed_dim", std::to_string(embed_dim)},
        {"retr_blocks", std::to_string(retr_blocks)},
        {"enc_blocks", std::to_string(enc_blocks)},
        {"dec_blocks", std::to_string(dec_blocks)},
        {"mem_blocks", std::to_string(mem_blocks)},
        {"label_smoothing", smooth.str()},
        {"variant", variant_name(train.variant)},
        {"m", std::to_string(train.m)},
        {"batch", std::to_string(train.batch)},
        {"steps", std::to_string(train.steps)},
        {"refresh_interval",
         train.refresh_interval <= 0 ? std::string("inf") : std::to_string(train.refresh_interval)},
        {"exclude_self_match", train.exclude_self_match ? "1" : "0"},
        {"seed", std::to_string(train.seed)},
        {"pretrain_steps", std::to_string(train.pretrain_steps)},
        {"pretrain_batch", std::to_string(train.pretrain_batch)},
        {"checkpoint_every", std::to_string(train.checkpoint_every)},
        {"retriever_anchor_weight", anchor.str()},
        {"backend", train.backend == IndexBackend::approximate ? "approx" : "exact"},
        {"warmup_steps", std::to_string(train.adam.warmup_steps)},
        {"base_lr", lr.str()},
        {"clip_norm", clip.str()},
        {"beam", std::to_string(beam)},
        {"max_len", std::to_string(max_len)},
    };
  }

  void load_file(const std::string& path) {
    require_exists(path);
    std::ifstream in(path);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      auto eq = line.find('=');
      if (eq == std::string::npos) {
        if (line.find_first_not_of(" \t\r") != std::string::npos)
          throw ConfigError("malformed config line " + std::to_string(line_no) + " in " + path);
        continue;
      }
      auto trim = [](std::string s) {
        auto b = s.find_first_not_of(" \t\r");
        auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }
};

RetrieverConfig retriever_config(const AppConfig& cfg, int src_vocab, int tgt_vocab) {
  RetrieverConfig r;
  r.src_vocab = src_vocab;
  r.tgt_vocab = tgt_vocab;
  r.blocks = cfg.retr_blocks;
  r.embed_dim = cfg.embed_dim;
  r.dims = {cfg.width, cfg.ffn, cfg.heads, cfg.dropout};
  return r;
}

TranslatorConfig translator_config(const AppConfig& cfg, int src_vocab, int tgt_vocab) {
  TranslatorConfig t;
  t.src_vocab = src_vocab;
  t.tgt_vocab = tgt_vocab;
  t.enc_blocks = cfg.enc_blocks;
  t.dec_blocks = cfg.dec_blocks;
  t.mem_blocks = cfg.mem_blocks;
  t.dims = {cfg.width, cfg.ffn, cfg.heads, cfg.dropout};
  t.label_smoothing = cfg.label_smoothing;
  return t;
}

void write_manifest(const std::string& run_dir, const AppConfig& cfg,
                    const std::map<std::string, std::string>& paths) {
  json m;
  m["tool_version"] = kToolVersion;
  m["seed"] = cfg.train.seed;
  m["config"] = cfg.resolved();
  m["paths"] = paths;
  std::ofstream out(run_dir + "/manifest.json");
  out << m.dump(2) << "\n";
}

json read_manifest(const std::string& run_dir) {
  std::string path = run_dir + "/manifest.json";
  require_exists(path);
  std::ifstream in(path);
  json m;
  try {
    in >> m;
  } catch (const std::exception&) {
    throw ConfigError("malformed manifest: " + path);
  }
  return m;
}

AppConfig config_from_manifest(const json& m) {
  AppConfig cfg;
  for (const auto& [key, value] : m.at("config").items())
    cfg.set(key, value.get<std::string>());
  return cfg;
}

void write_config_file(const std::string& path, const AppConfig& cfg) {
  std::ofstream out(path);
  for (const auto& [k, v] : cfg.resolved()) out << k << " = " << v << "\n";
}

// Model bundle loaded from a run directory: vocabularies + trainer with
// checkpointed parameters.
struct LoadedModel {
  AppConfig cfg;
  Vocabulary src_vocab, tgt_vocab;
  std::unique_ptr<Trainer> trainer;
  json manifest;
};

LoadedModel load_model(const std::string& run_dir) {
  LoadedModel lm;
  lm.manifest = read_manifest(run_dir);
  lm.cfg = config_from_manifest(lm.manifest);
  require_exists(run_dir + "/vocab.src");
  require_exists(run_dir + "/vocab.tgt");
  lm.src_vocab = Vocabulary::load(run_dir + "/vocab.src");
  lm.tgt_vocab = Vocabulary::load(run_dir + "/vocab.tgt");
  lm.trainer = std::make_unique<Trainer>(
      retriever_config(lm.cfg, lm.src_vocab.size(), lm.tgt_vocab.size()),
      translator_config(lm.cfg, lm.src_vocab.size(), lm.tgt_vocab.size()), lm.cfg.train);
  std::string ckpt = run_dir + "/" + lm.manifest.at("paths").at("checkpoint").get<std::string>();
  require_exists(ckpt);
  try {
    lm.trainer->load(ckpt);
  } catch (const std::exception& e) {
    throw DimensionMismatchError(std::string("checkpoint does not match model config: ") +
                                 e.what());
  }
  return lm;
}

int cmd_gen_data(const AppConfig& cfg, const std::string& out_dir, std::uint64_t seed) {
  auto corpus = generate(cfg.task, cfg.sizes, seed);
  fs::create_directories(out_dir);
  save_corpus(corpus, out_dir);
  write_config_file(out_dir + "/config", cfg);
  std::cerr << "wrote " << corpus.train.size() << " train / " << corpus.dev.size() << " dev / "
            << corpus.test.size() << " test pairs, TM pool " << corpus.tm_pool.size() << " -> "
            << out_dir << "\n";
  return 0;
}

int cmd_pretrain(const AppConfig& cfg, const std::string& data_dir, const std::string& run_dir) {
  require_exists(data_dir);
  auto corpus = load_corpus(data_dir);
  Trainer trainer(retriever_config(cfg, corpus.src_vocab.size(), corpus.tgt_vocab.size()),
                  translator_config(cfg, corpus.src_vocab.size(), corpus.tgt_vocab.size()),
                  cfg.train);
  auto rep = trainer.pretrain(corpus.train, cfg.train.pretrain_steps, cfg.train.pretrain_batch);
  fs::create_directories(run_dir + "/checkpoints");
  trainer.save(run_dir + "/checkpoints/pretrain.ckpt");
  corpus.src_vocab.save(run_dir + "/vocab.src");
  corpus.tgt_vocab.save(run_dir + "/vocab.tgt");
  write_manifest(run_dir, cfg, {{"checkpoint", "checkpoints/pretrain.ckpt"}, {"data", data_dir}});
  std::vector<SentencePair> probe(corpus.train.begin(),
                                  corpus.train.begin() +
                                      std::min<std::size_t>(32, corpus.train.size()));
  std::vector<SentencePair> recall_probe(
      corpus.train.begin(),
      corpus.train.begin() + std::min<std::size_t>(400, corpus.train.size()));
  std::vector<TokenSeq> train_tm;
  for (const auto& p : corpus.train) train_tm.push_back(p.tgt);
  std::cout << "pretrain_steps " << rep.steps_run << "\n"
            << "final_loss " << rep.final_loss << "\n"
            << "in_batch_top1 " << in_batch_top1_accuracy(trainer.retriever(), probe) << "\n"
            << "gold_recall_at_5 "
            << gold_recall_at_k(trainer.retriever(), recall_probe, train_tm, 5) << "\n";
  return rep.diverged ? kExitFailure : 0;
}

int cmd_train(const AppConfig& cfg, const std::string& data_dir, const std::string& run_dir) {
  require_exists(data_dir);
  auto corpus = load_corpus(data_dir);
  Trainer trainer(retriever_config(cfg, corpus.src_vocab.size(), corpus.tgt_vocab.size()),
                  translator_config(cfg, corpus.src_vocab.size(), corpus.tgt_vocab.size()),
                  cfg.train);
  if (cfg.train.variant == Variant::lexical) trainer.set_lexical_tm(corpus.train);
  fs::create_directories(run_dir);
  corpus.src_vocab.save(run_dir + "/vocab.src");
  corpus.tgt_vocab.save(run_dir + "/vocab.tgt");
  write_config_file(run_dir + "/config", cfg);
  auto reports = trainer.joint_train(corpus.train, corpus.tm_pool, run_dir);
  std::string ckpt = "checkpoints/step-" + std::to_string(cfg.train.steps) + ".ckpt";
  write_manifest(run_dir, cfg, {{"checkpoint", ckpt}, {"data", data_dir}});
  double mean_step = 0;
  for (const auto& r : reports) mean_step += r.step_seconds;
  mean_step /= reports.empty() ? 1 : static_cast<double>(reports.size());
  std::cout << "steps " << reports.size() << "\n"
            << "final_loss " << (reports.empty() ? 0.0 : reports.back().loss) << "\n"
            << "mean_step_seconds " << mean_step << "\n"
            << "index_generations " << trainer.generations_published() << "\n";
  return 0;
}

int cmd_build_index(const std::string& model_dir, const std::string& tm_path,
                    const std::string& backend, const std::string& out_path) {
  auto lm = load_model(model_dir);
  require_exists(tm_path);
  auto tm = load_tm_file(tm_path, lm.tgt_vocab);
  auto encode = [&](const TokenSeq& z) {
    Rng r(0);
    auto e = lm.trainer->retriever().encode_tgt(z, r, false);
    return std::vector<float>(e.vec.data().begin(), e.vec.data().end());
  };
  auto snap = IndexSnapshot::build(
      tm, encode, backend == "approx" ? IndexBackend::approximate : IndexBackend::exact, 1);
  snap->save(out_path);
  std::cout << "indexed " << snap->size() << " of " << tm.size() << " memories ("
            << snap->warnings().size() << " excluded)\n";
  return 0;
}

int cmd_index_stats(const std::string& path) {
  require_exists(path);
  auto snap = IndexSnapshot::load(path);
  std::cout << "generation " << snap->generation() << "\n"
            << "dim " << snap->dim() << "\n"
            << "size " << snap->size() << "\n"
            << "backend " << (snap->backend() == IndexBackend::exact ? "exact" : "approx") << "\n"
            << "row_checksum " << snap->row_checksum() << "\n";
  return 0;
}

int cmd_translate(const std::string& model_dir, const std::string& tm_path,
                  const std::string& in_path, const std::string& out_path, int beam) {
  auto lm = load_model(model_dir);
  require_exists(in_path);
  std::vector<TokenSeq> tm;
  std::shared_ptr<const IndexSnapshot> snap;
  bool uses_tm = lm.cfg.train.variant != Variant::no_tm;
  if (uses_tm) {
    require_exists(tm_path);
    tm = load_tm_file(tm_path, lm.tgt_vocab);
    if (lm.cfg.train.variant == Variant::lexical) {
      // token-overlap retrieval needs bilingual pairs: rebuild them from the
      // training data recorded in the manifest
      std::string data_dir = lm.manifest.at("paths").at("data").get<std::string>();
      require_exists(data_dir);
      lm.trainer->set_lexical_tm(load_corpus(data_dir).train);
    } else {
      snap = lm.trainer->build_index(tm);
    }
  }
  std::ifstream in(in_path);
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot write: " + out_path);
  DecodeConfig decode{beam > 0 ? beam : lm.cfg.beam, lm.cfg.max_len};
  Rng rng(0);
  std::string line;
  int count = 0;
  while (std::getline(in, line)) {
    auto x = tokenize(line, lm.src_vocab);
    std::vector<RetrievedMemory<float>> mems;
    if (uses_tm && !x.empty())
      mems = lm.trainer->retrieve_for(x, nullptr, tm, snap, rng, false).mems;
    TranslationResult res;
    if (!x.empty()) res = lm.trainer->translator().translate(x, mems, decode);
    out << detokenize(res.tokens, lm.tgt_vocab) << "\n";
    ++count;
  }
  std::cerr << "translated " << count << " lines -> " << out_path << "\n";
  return 0;
}

int cmd_eval(const std::string& model_dir, const std::string& tm_path,
             const std::string& test_dir, int beam) {
  auto lm = load_model(model_dir);
  require_exists(test_dir);
  auto corpus = load_corpus(test_dir);
  bool uses_tm = lm.cfg.train.variant != Variant::no_tm;
  std::vector<TokenSeq> tm;
  if (uses_tm) {
    require_exists(tm_path);
    tm = load_tm_file(tm_path, lm.tgt_vocab);
    if (lm.cfg.train.variant == Variant::lexical) {
      std::string data_dir = lm.manifest.at("paths").at("data").get<std::string>();
      require_exists(data_dir);
      lm.trainer->set_lexical_tm(load_corpus(data_dir).train);
    }
  }
  DecodeConfig decode{beam > 0 ? beam : lm.cfg.beam, lm.cfg.max_len};
  auto rep = lm.trainer->evaluate(corpus.test, tm, decode);
  std::cout << "bleu " << rep.bleu << "\n";
  if (uses_tm) {
    std::cout << "mean_relevance " << rep.mean_top1_relevance << "\n"
              << "mean_lambda " << rep.mean_lambda << "\n";
    // inference latency vs the same weights decoding memory-free
    auto start = std::chrono::steady_clock::now();
    for (const auto& p : corpus.test) lm.trainer->translator().translate(p.src, {}, decode);
    double base = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() /
                  static_cast<double>(corpus.test.size());
    std::cout << "latency_ratio " << (base > 0 ? rep.seconds_per_sentence / base : 0.0) << "\n";
  }
  return 0;
}

int cmd_swap_tm(const std::string& model_dir, const std::string& tm_path) {
  auto lm = load_model(model_dir);
  require_exists(tm_path);
  auto tm = load_tm_file(tm_path, lm.tgt_vocab);
  auto snap = lm.trainer->build_index(tm);
  fs::create_directories(model_dir + "/index");
  std::string rel = "index/swapped.idx";
  snap->save(model_dir + "/" + rel);
  lm.manifest["paths"]["tm"] = tm_path;
  lm.manifest["paths"]["swapped_index"] = rel;
  std::ofstream out(model_dir + "/manifest.json");
  out << lm.manifest.dump(2) << "\n";
  std::cout << "indexed " << snap->size() << " memories from " << tm_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"retrieve-then-generate translation workbench"};
  app.require_subcommand(1);

  std::string config_path, data_dir, run_dir, out_dir, out_path, tm_path, in_path, test_dir;
  std::string backend = "exact", variant, refresh;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int steps = -1, beam = -1, m_flag = -1, batch = -1;

  auto add_config_flags = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "flat key = value configuration file");
    cmd->add_option_function<std::uint64_t>(
        "--seed", [&](std::uint64_t v) { seed = v; seed_set = true; }, "random seed");
  };

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic parallel corpus");
  gen->add_option("--out", out_dir, "output directory")->required();
  add_config_flags(gen);

  auto* pre = app.add_subcommand("pretrain", "warm-start the retriever");
  pre->add_option("--data", data_dir, "corpus directory")->required();
  pre->add_option("--out", run_dir, "run directory")->required();
  pre->add_option("--steps", steps, "pretraining steps");
  add_config_flags(pre);

  auto* trn = app.add_subcommand("train", "joint training");
  trn->add_option("--data", data_dir, "corpus directory")->required();
  trn->add_option("--out", run_dir, "run directory")->required();
  trn->add_option("--variant", variant, "no_tm|lexical|fixed|fixed_tgt|full");
  trn->add_option("--refresh-interval", refresh, "steps between index rebuilds, or inf");
  trn->add_option("--steps", steps, "training steps");
  trn->add_option("--m", m_flag, "memories per example");
  trn->add_option("--batch", batch, "batch size");
  add_config_flags(trn);

  auto* bix = app.add_subcommand("build-index", "encode a TM file into an index");
  bix->add_option("--model", run_dir, "run directory with a checkpoint")->required();
  bix->add_option("--tm", tm_path, "TM sentences, one per line")->required();
  bix->add_option("--backend", backend, "exact|approx");
  bix->add_option("--out", out_path, "index output path")->required();

  auto* ist = app.add_subcommand("index-stats", "inspect a saved index");
  ist->add_option("--index", out_path, "index path")->required();

  auto* tra = app.add_subcommand("translate", "translate a file of sentences");
  tra->add_option("--model", run_dir, "run directory")->required();
  tra->add_option("--tm", tm_path, "TM sentences, one per line");
  tra->add_option("--in", in_path, "input sentences")->required();
  tra->add_option("--out", out_path, "output path")->required();
  tra->add_option("--beam", beam, "beam width");

  auto* evl = app.add_subcommand("eval", "score a model on a test set");
  evl->add_option("--model", run_dir, "run directory")->required();
  evl->add_option("--tm", tm_path, "TM sentences, one per line");
  evl->add_option("--test", test_dir, "corpus directory with a test split")->required();
  evl->add_option("--beam", beam, "beam width");

  auto* swp = app.add_subcommand("swap-tm", "rebuild the index over a new TM, no retraining");
  swp->add_option("--model", run_dir, "run directory")->required();
  swp->add_option("--tm", tm_path, "TM sentences, one per line")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    AppConfig cfg;
    if (!config_path.empty()) cfg.load_file(config_path);
    if (seed_set) cfg.train.seed = seed;
    if (steps > 0) {
      cfg.train.steps = steps;
      cfg.train.pretrain_steps = steps;  // the pretrain command reads this
    }
    if (!variant.empty()) cfg.train.variant = parse_variant(variant);
    if (!refresh.empty()) cfg.set("refresh_interval", refresh);
    if (m_flag > 0) cfg.train.m = m_flag;
    if (batch > 0) cfg.train.batch = batch;

    if (gen->parsed()) return cmd_gen_data(cfg, out_dir, cfg.train.seed);
    if (pre->parsed()) return cmd_pretrain(cfg, data_dir, run_dir);
    if (trn->parsed()) return cmd_train(cfg, data_dir, run_dir);
    if (bix->parsed()) return cmd_build_index(run_dir, tm_path, backend, out_path);
    if (ist->parsed()) return cmd_index_stats(out_path);
    if (tra->parsed()) return cmd_translate(run_dir, tm_path, in_path, out_path, beam);
    if (evl->parsed()) return cmd_eval(run_dir, tm_path, test_dir, beam);
    if (swp->parsed()) return cmd_swap_tm(run_dir, tm_path);
  } catch (const MissingFileError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitMissingFile;
  } catch (const DimensionMismatchError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDimensionMismatch;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
