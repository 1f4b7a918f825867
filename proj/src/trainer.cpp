#include "memt/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "memt/checkpoint.hpp"
#include "memt/errors.hpp"

namespace memt {

namespace {

double elapsed_seconds(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::vector<float> embedding_values(const SentenceEmbedding<float>& e) {
  return std::vector<float>(e.vec.data().begin(), e.vec.data().end());
}

bool uses_dense_retrieval(Variant v) {
  return v == Variant::fixed_retriever || v == Variant::fixed_tgt || v == Variant::full_async;
}

}  // namespace

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::no_tm: return "no_tm";
    case Variant::lexical: return "lexical";
    case Variant::fixed_retriever: return "fixed";
    case Variant::fixed_tgt: return "fixed_tgt";
    case Variant::full_async: return "full";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  if (name == "no_tm") return Variant::no_tm;
  if (name == "lexical") return Variant::lexical;
  if (name == "fixed") return Variant::fixed_retriever;
  if (name == "fixed_tgt") return Variant::fixed_tgt;
  if (name == "full") return Variant::full_async;
  throw std::invalid_argument("unknown training variant: " + name);
}

Trainer::Trainer(const RetrieverConfig& retr_cfg, const TranslatorConfig& trans_cfg,
                 const TrainConfig& cfg)
    : cfg_(cfg),
      init_rng_(cfg.seed),
      retriever_(retr_cfg, init_rng_),
      translator_(trans_cfg, init_rng_),
      optimizer_(cfg.adam) {
  for (auto& [name, p] : retriever_.params()) params_.emplace(name, p);
  for (auto& [name, p] : translator_.params()) params_.emplace(name, p);
}

std::set<std::string> Trainer::freeze_set() const {
  std::set<std::string> frozen;
  if (cfg_.variant == Variant::fixed_retriever) {
    for (const auto& [name, p] : params_)
      if (name.rfind("retriever.", 0) == 0) frozen.insert(name);
  } else if (cfg_.variant == Variant::fixed_tgt) {
    frozen = retriever_.tgt_side_params();
  }
  return frozen;
}

PretrainReport Trainer::pretrain(const std::vector<SentencePair>& pairs, int steps, int batch) {
  if (pairs.empty()) throw std::invalid_argument("pretrain: empty corpus");
  if (batch < 2) throw std::invalid_argument("pretrain: batch must be >= 2 for in-batch negatives");
  AdamConfig acfg = cfg_.adam;
  Adam<float> opt(acfg);
  Rng data_rng(cfg_.seed ^ 0x70726570ULL);  // independent pretraining stream
  PretrainReport report;
  for (int s = 1; s <= steps; ++s) {
    std::vector<SentencePair> b;
    for (int i = 0; i < batch; ++i)
      b.push_back(pairs[static_cast<std::size_t>(data_rng.randint(
          0, static_cast<std::int64_t>(pairs.size()) - 1))]);
    Rng drop_rng = data_rng.fork(static_cast<std::uint64_t>(s));
    Tape<float> tape;
    double loss_val;
    {
      Tape<float>::Scope scope(tape);
      auto loss = retriever_.pretrain_objective(b, drop_rng, true);
      loss_val = loss.total.item();
      if (!std::isfinite(loss_val)) {
        report.diverged = true;
        break;
      }
      tape.backward(loss.total);
    }
    GradMap<float> grads;
    for (auto& [name, p] : retriever_.params()) grads[name] = tape.leaf_grad(p);
    opt.step(retriever_.params(), grads);
    report.final_loss = loss_val;
    report.steps_run = s;
  }
  return report;
}

std::shared_ptr<const IndexSnapshot> Trainer::build_index(const std::vector<TokenSeq>& tm) {
  auto encode = [this](const TokenSeq& z) {
    Rng r(0);
    return embedding_values(retriever_.encode_tgt(z, r, false));
  };
  auto snap = IndexSnapshot::build(tm, encode, cfg_.backend, ++generation_, cfg_.nsw);
  publisher_.publish(snap);
  return snap;
}

void Trainer::set_lexical_tm(const std::vector<SentencePair>& pairs) {
  lexical_tm_.emplace(pairs);
}

Trainer::RetrievedBatch Trainer::retrieve_for(const TokenSeq& x, const TokenSeq* exclude_tgt,
                                              const std::vector<TokenSeq>& tm,
                                              const std::shared_ptr<const IndexSnapshot>& snap,
                                              Rng& rng, bool training) {
  RetrievedBatch out;
  if (cfg_.variant == Variant::no_tm) return out;
  int overfetch = exclude_tgt ? 4 : 0;

  if (cfg_.variant == Variant::lexical) {
    if (!lexical_tm_) throw std::logic_error("lexical variant: TM pairs were never supplied");
    auto hits = lexical_tm_->search(x, cfg_.m + overfetch);
    for (const auto& hit : hits) {
      if (static_cast<int>(out.mems.size()) == cfg_.m) break;
      const auto& pr = lexical_tm_->pair(hit.pair_id);
      if (exclude_tgt && pr.tgt == *exclude_tgt) continue;
      if (out.mems.empty()) out.top1 = hit.score;
      // token-overlap retrieval carries no learned relevance; the attention
      // bias term is zero for these memories
      out.mems.push_back({hit.pair_id, pr.tgt, Tensor<float>::scalar(0.0f)});
    }
    return out;
  }

  if (!snap || snap->size() == 0) return out;
  try {
    auto ex = retriever_.encode_src(x, rng, training);
    auto hits = snap->search(embedding_values(ex), cfg_.m + overfetch);
    for (const auto& hit : hits) {
      if (static_cast<int>(out.mems.size()) == cfg_.m) break;
      const TokenSeq& z = tm[static_cast<std::size_t>(hit.memory_id)];
      if (exclude_tgt && z == *exclude_tgt) continue;
      try {
        auto f = relevance(ex, retriever_.encode_tgt(z, rng, training));
        // candidate selection used the snapshot score; the model sees the
        // fresh one
        out.score_gap += std::abs(static_cast<double>(f.item()) - hit.score);
        ++out.gap_count;
        if (out.mems.empty()) out.top1 = f.item();
        out.mems.push_back({hit.memory_id, z, f});
      } catch (const DegenerateEmbeddingError&) {
        continue;
      }
    }
  } catch (const DegenerateEmbeddingError&) {
    out.mems.clear();
  }
  return out;
}

TrainStepReport Trainer::train_step(const std::vector<SentencePair>& batch,
                                    const std::vector<TokenSeq>& tm, long step_number) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  auto start = std::chrono::steady_clock::now();
  auto snap = uses_dense_retrieval(cfg_.variant) ? publisher_.get() : nullptr;
  Rng base(cfg_.seed);
  Rng step_rng = base.fork(static_cast<std::uint64_t>(step_number));

  TrainStepReport report;
  report.step = step_number;
  report.index_generation = snap ? snap->generation() : 0;
  double lambda_sum = 0;
  long lambda_count = 0;
  double top1_sum = 0;
  int top1_count = 0;
  double gap_sum = 0;
  int gap_count = 0;

  Tape<float> tape;
  {
    Tape<float>::Scope scope(tape);
    Tensor<float> total = Tensor<float>::scalar(0.0f);
    for (const auto& pair : batch) {
      auto rb = retrieve_for(pair.src, cfg_.exclude_self_match ? &pair.tgt : nullptr, tm, snap,
                             step_rng, true);
      auto src_enc = translator_.encode_source(pair.src, step_rng, true);
      auto ctx = translator_.encode_memories(rb.mems, step_rng, true);
      TokenSeq prefix{Vocabulary::kBos};
      prefix.insert(prefix.end(), pair.tgt.begin(), pair.tgt.end());
      TokenSeq targets = pair.tgt;
      targets.push_back(Vocabulary::kEos);
      auto outputs = translator_.forward(prefix, src_enc, ctx, step_rng, true);
      total = add(total,
                  smoothed_nll(outputs.dist, targets, translator_.config().label_smoothing));
      for (int t = 0; t < outputs.lambda.numel(); ++t)
        lambda_sum += outputs.lambda.data()[t];
      lambda_count += outputs.lambda.numel();
      if (!rb.mems.empty()) {
        top1_sum += rb.top1;
        ++top1_count;
      }
      gap_sum += rb.score_gap;
      gap_count += rb.gap_count;
    }
    total = scale(total, 1.0 / static_cast<double>(batch.size()));
    bool retriever_learns =
        cfg_.variant == Variant::full_async || cfg_.variant == Variant::fixed_tgt;
    if (retriever_learns && cfg_.retriever_anchor_weight > 0 && batch.size() >= 2) {
      // keep the retriever's embedding space anchored to the warm-start
      // objective; see TrainConfig::retriever_anchor_weight
      auto anchor = retriever_.pretrain_objective(batch, step_rng, true);
      total = add(total, scale(anchor.total, cfg_.retriever_anchor_weight));
    }
    report.loss = total.item();
    if (std::isfinite(report.loss)) tape.backward(total);
  }

  if (std::isfinite(report.loss)) {
    GradMap<float> grads;
    for (auto& [name, p] : params_) grads[name] = tape.leaf_grad(p);
    optimizer_.step(params_, grads, freeze_set());
  }

  report.mean_lambda = lambda_count ? lambda_sum / static_cast<double>(lambda_count) : 0.0;
  report.mean_top1_relevance = top1_count ? top1_sum / top1_count : 0.0;
  report.mean_score_gap = gap_count ? gap_sum / gap_count : 0.0;
  report.step_seconds = elapsed_seconds(start);
  return report;
}

std::vector<TrainStepReport> Trainer::joint_train(const std::vector<SentencePair>& train_pairs,
                                                  const std::vector<TokenSeq>& tm,
                                                  const std::string& run_dir) {
  if (train_pairs.empty()) throw std::invalid_argument("joint_train: empty corpus");
  namespace fs = std::filesystem;
  if (!run_dir.empty()) {
    fs::create_directories(run_dir + "/checkpoints");
    fs::create_directories(run_dir + "/index");
  }

  if (cfg_.variant == Variant::lexical && !lexical_tm_) set_lexical_tm(train_pairs);
  bool dense = uses_dense_retrieval(cfg_.variant);
  if (dense) {
    if (cfg_.pretrain_steps > 0)
      pretrain(train_pairs, cfg_.pretrain_steps, cfg_.pretrain_batch);
    auto snap = build_index(tm);
    if (!run_dir.empty())
      snap->save(run_dir + "/index/gen-" + std::to_string(snap->generation()) + ".idx");
  }

  std::vector<TrainStepReport> reports;
  reports.reserve(static_cast<std::size_t>(cfg_.steps));
  Rng data_rng(cfg_.seed ^ 0x6a6f696eULL);
  RefreshController controller(dense ? cfg_.refresh_interval : 0);
  std::thread builder;
  std::atomic<bool> build_running{false};

  for (long step = 1; step <= cfg_.steps; ++step) {
    if (controller.should_trigger(step, build_running.load())) {
      if (builder.joinable()) builder.join();  // finished: build_running was false
      auto frozen_retriever = std::make_shared<Retriever<float>>(retriever_.clone());
      long gen = ++generation_;
      build_running.store(true);
      builder = std::thread([this, frozen_retriever, &tm, gen, run_dir, &build_running] {
        auto encode = [&](const TokenSeq& z) {
          Rng r(0);
          return embedding_values(frozen_retriever->encode_tgt(z, r, false));
        };
        try {
          auto snap = IndexSnapshot::build(tm, encode, cfg_.backend, gen, cfg_.nsw);
          publisher_.publish(snap);
          if (!run_dir.empty()) snap->save(run_dir + "/index/gen-" + std::to_string(gen) + ".idx");
        } catch (const std::exception&) {
          // keep serving the previous snapshot
        }
        build_running.store(false);
      });
    }

    std::vector<SentencePair> batch;
    for (int i = 0; i < cfg_.batch; ++i)
      batch.push_back(train_pairs[static_cast<std::size_t>(data_rng.randint(
          0, static_cast<std::int64_t>(train_pairs.size()) - 1))]);
    reports.push_back(train_step(batch, tm, step));

    if (!run_dir.empty() && cfg_.checkpoint_every > 0 && step % cfg_.checkpoint_every == 0)
      save(run_dir + "/checkpoints/step-" + std::to_string(step) + ".ckpt");
  }
  if (builder.joinable()) builder.join();

  if (!run_dir.empty()) {
    save(run_dir + "/checkpoints/step-" + std::to_string(cfg_.steps) + ".ckpt");
    std::ofstream log(run_dir + "/log");
    log << "step\tloss\tmean_lambda\tmean_top1_relevance\tmean_score_gap\tindex_generation\t"
           "step_seconds\n";
    for (const auto& r : reports)
      log << r.step << '\t' << r.loss << '\t' << r.mean_lambda << '\t' << r.mean_top1_relevance
          << '\t' << r.mean_score_gap << '\t' << r.index_generation << '\t' << r.step_seconds
          << '\n';
  }
  return reports;
}

EvalReport Trainer::evaluate(const std::vector<SentencePair>& test_pairs,
                             const std::vector<TokenSeq>& tm, const DecodeConfig& decode) {
  EvalReport report;
  if (test_pairs.empty()) return report;
  std::shared_ptr<const IndexSnapshot> snap;
  if (uses_dense_retrieval(cfg_.variant)) {
    auto encode = [this](const TokenSeq& z) {
      Rng r(0);
      return embedding_values(retriever_.encode_tgt(z, r, false));
    };
    // local snapshot over the supplied TM; the published training index is
    // untouched, so TM hot-swaps never mutate training state
    snap = IndexSnapshot::build(tm, encode, IndexBackend::exact, generation_, cfg_.nsw);
  }

  auto start = std::chrono::steady_clock::now();
  Rng rng(0);
  std::vector<TokenSeq> hyps, refs;
  double top1_sum = 0;
  int top1_count = 0;
  double lambda_sum = 0;
  long lambda_count = 0;
  for (const auto& pair : test_pairs) {
    auto rb = retrieve_for(pair.src, nullptr, tm, snap, rng, false);
    auto hyp = translator_.translate(pair.src, rb.mems, decode);
    hyps.push_back(hyp.tokens);
    refs.push_back(pair.tgt);
    if (!rb.mems.empty()) {
      top1_sum += rb.top1;
      ++top1_count;
      TokenSeq prefix{Vocabulary::kBos};
      prefix.insert(prefix.end(), hyp.tokens.begin(), hyp.tokens.end());
      auto src_enc = translator_.encode_source(pair.src, rng, false);
      auto ctx = translator_.encode_memories(rb.mems, rng, false);
      auto out = translator_.forward(prefix, src_enc, ctx, rng, false);
      for (int t = 0; t < out.lambda.numel(); ++t) lambda_sum += out.lambda.data()[t];
      lambda_count += out.lambda.numel();
    }
  }
  report.sentences = static_cast<int>(test_pairs.size());
  report.seconds_per_sentence = elapsed_seconds(start) / report.sentences;
  report.bleu = corpus_bleu(hyps, refs);
  report.mean_top1_relevance = top1_count ? top1_sum / top1_count : 0.0;
  report.mean_lambda = lambda_count ? lambda_sum / static_cast<double>(lambda_count) : 0.0;
  return report;
}

void Trainer::save(const std::string& path) const { save_checkpoint(path, params_); }

void Trainer::load(const std::string& path) { load_checkpoint_into(path, params_); }

double in_batch_top1_accuracy(Retriever<float>& retriever,
                              const std::vector<SentencePair>& batch) {
  if (batch.empty()) return 0;
  Rng rng(0);
  std::vector<SentenceEmbedding<float>> xs, zs;
  for (const auto& p : batch) {
    xs.push_back(retriever.encode_src(p.src, rng, false));
    zs.push_back(retriever.encode_tgt(p.tgt, rng, false));
  }
  int correct = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    int best = -1;
    float best_score = -2.0f;
    for (std::size_t j = 0; j < batch.size(); ++j) {
      float s = relevance(xs[i], zs[j]).item();
      if (s > best_score) {
        best_score = s;
        best = static_cast<int>(j);
      }
    }
    if (best == static_cast<int>(i)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(batch.size());
}

double gold_recall_at_k(Retriever<float>& retriever, const std::vector<SentencePair>& pairs,
                        const std::vector<TokenSeq>& tm, int k) {
  if (pairs.empty()) return 0;
  auto encode = [&](const TokenSeq& z) {
    Rng r(0);
    return embedding_values(retriever.encode_tgt(z, r, false));
  };
  auto snap = IndexSnapshot::build(tm, encode, IndexBackend::exact, 1);
  Rng rng(0);
  int found = 0;
  for (const auto& p : pairs) {
    std::vector<float> q;
    try {
      q = embedding_values(retriever.encode_src(p.src, rng, false));
    } catch (const DegenerateEmbeddingError&) {
      continue;
    }
    for (const auto& hit : snap->search(q, k)) {
      if (tm[static_cast<std::size_t>(hit.memory_id)] == p.tgt) {
        ++found;
        break;
      }
    }
  }
  return static_cast<double>(found) / static_cast<double>(pairs.size());
}

}  // namespace memt
