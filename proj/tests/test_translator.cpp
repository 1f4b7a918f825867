#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "memt/retriever.hpp"
#include "memt/translator.hpp"

using namespace memt;
using D = Tensor<double>;

namespace {

TranslatorConfig micro_config(int vocab = 12) {
  TranslatorConfig cfg;
  cfg.src_vocab = vocab;
  cfg.tgt_vocab = vocab;
  cfg.enc_blocks = 1;
  cfg.dec_blocks = 1;
  cfg.mem_blocks = 1;
  cfg.dims.width = 8;
  cfg.dims.ffn = 16;
  cfg.dims.heads = 2;
  cfg.dims.dropout = 0.0;
  return cfg;
}

template <class T>
std::vector<RetrievedMemory<T>> make_memories(const std::vector<TokenSeq>& sents,
                                              const std::vector<double>& scores) {
  std::vector<RetrievedMemory<T>> mems;
  for (std::size_t i = 0; i < sents.size(); ++i)
    mems.push_back({static_cast<int>(i), sents[i], Tensor<T>::scalar(static_cast<T>(scores[i]))});
  return mems;
}

void zero_param(ParamMap<double>& params, const std::string& name) {
  auto raw = params.at(name).raw();
  std::fill(raw.begin(), raw.end(), 0.0);
}

}  // namespace

TEST_CASE("memory groups are independent, ordered, score-carrying") {
  Rng rng(3);
  Translator<double> model(micro_config(), rng);
  Rng er(1);
  auto mems = make_memories<double>({{4, 5, 6}, {7, 8}}, {0.5, -0.25});
  auto ctx = model.encode_memories(mems, er, false);
  REQUIRE(ctx.groups.size() == 2);
  CHECK(ctx.groups[0].dim(0) == 3);
  CHECK(ctx.groups[1].dim(0) == 2);
  CHECK(ctx.total_tokens() == 5);
  CHECK(ctx.token_ids == std::vector<int>{4, 5, 6, 7, 8});
  CHECK(ctx.owner == std::vector<int>{0, 0, 0, 1, 1});
  CHECK(ctx.scores[0].item() == 0.5);
  CHECK(ctx.scores[1].item() == -0.25);

  // no cross-memory attention: permuting memories permutes groups bitwise
  auto swapped = model.encode_memories(make_memories<double>({{7, 8}, {4, 5, 6}}, {-0.25, 0.5}),
                                       er, false);
  for (int i = 0; i < ctx.groups[0].numel(); ++i)
    CHECK(ctx.groups[0].data()[i] == swapped.groups[1].data()[i]);
  for (int i = 0; i < ctx.groups[1].numel(); ++i)
    CHECK(ctx.groups[1].data()[i] == swapped.groups[0].data()[i]);

  // a duplicated memory yields two identical groups
  auto dup = model.encode_memories(make_memories<double>({{4, 5}, {4, 5}}, {0.1, 0.9}), er, false);
  for (int i = 0; i < dup.groups[0].numel(); ++i)
    CHECK(dup.groups[0].data()[i] == dup.groups[1].data()[i]);

  CHECK(model.encode_memories({}, er, false).empty());
}

TEST_CASE("attention with beta = 0 equals the unbiased softmax oracle") {
  Rng rng(5);
  Translator<double> model(micro_config(), rng);
  zero_param(model.params(), "translator.beta");
  Rng er(2);
  auto ctx = model.encode_memories(make_memories<double>({{4, 5, 6}, {7, 8}}, {0.9, -0.9}), er,
                                   false);
  auto h = D::randn({3, 8}, rng);
  auto [alpha, c] = model.memory_attention(h, ctx);
  REQUIRE(alpha.dim(0) == 3);
  REQUIRE(alpha.dim(1) == 5);

  // oracle: long-double softmax of h W_m flat^T, no bias term at all
  const auto& wm = model.params().at("translator.w_m");
  for (int t = 0; t < 3; ++t) {
    std::vector<long double> logits(5, 0.0L);
    for (int j = 0; j < 5; ++j) {
      for (int a = 0; a < 8; ++a) {
        long double hw = 0;
        for (int b = 0; b < 8; ++b) hw += (long double)h.data()[t * 8 + b] * wm.data()[b * 8 + a];
        logits[static_cast<std::size_t>(j)] += hw * ctx.flat.data()[j * 8 + a];
      }
    }
    long double mx = *std::max_element(logits.begin(), logits.end());
    long double tot = 0;
    for (auto l : logits) tot += expl(l - mx);
    for (int j = 0; j < 5; ++j)
      CHECK(alpha.data()[t * 5 + j] ==
            doctest::Approx(static_cast<double>(expl(logits[static_cast<std::size_t>(j)] - mx) / tot))
                .epsilon(1e-9));
  }
}

TEST_CASE("zero bilinear logits and beta = 0 give uniform attention") {
  Rng rng(7);
  Translator<double> model(micro_config(), rng);
  zero_param(model.params(), "translator.w_m");
  zero_param(model.params(), "translator.beta");
  Rng er(4);
  auto ctx = model.encode_memories(make_memories<double>({{4, 5}, {6, 7, 8}, {9}}, {1, -1, 0}),
                                   er, false);
  auto h = D::randn({2, 8}, rng);
  auto [alpha, c] = model.memory_attention(h, ctx);
  for (int i = 0; i < alpha.numel(); ++i)
    CHECK(alpha.data()[i] == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
}

TEST_CASE("two memories, scores (1, -1), beta = 1: exponent-sum oracle") {
  Rng rng(9);
  Translator<double> model(micro_config(), rng);
  zero_param(model.params(), "translator.w_m");  // leaves only the bias term
  Rng er(6);
  auto ctx = model.encode_memories(make_memories<double>({{4, 5}, {6, 7}}, {1.0, -1.0}), er, false);
  auto h = D::randn({1, 8}, rng);
  auto [alpha, c] = model.memory_attention(h, ctx);
  long double e1 = expl(1.0L), em1 = expl(-1.0L);
  long double denom = 2 * e1 + 2 * em1;
  double hi = static_cast<double>(e1 / denom), lo = static_cast<double>(em1 / denom);
  CHECK(alpha.data()[0] == doctest::Approx(hi).epsilon(1e-9));
  CHECK(alpha.data()[1] == doctest::Approx(hi).epsilon(1e-9));
  CHECK(alpha.data()[2] == doctest::Approx(lo).epsilon(1e-9));
  CHECK(alpha.data()[3] == doctest::Approx(lo).epsilon(1e-9));
  CHECK(hi == doctest::Approx(0.44039).epsilon(1e-4));
  CHECK(lo == doctest::Approx(0.05961).epsilon(1e-4));
}

TEST_CASE("attention rows and output rows are normalized") {
  Rng rng(11);
  Translator<double> model(micro_config(), rng);
  Rng er(8);
  TokenSeq x = {4, 5, 6}, prefix = {Vocabulary::kBos, 7, 8};
  auto src = model.encode_source(x, er, false);
  auto ctx = model.encode_memories(make_memories<double>({{7, 9}, {10, 11, 4}}, {0.4, 0.1}), er,
                                   false);
  auto out = model.forward(prefix, src, ctx, er, false);
  REQUIRE(out.dist.dim(0) == 3);
  for (int t = 0; t < 3; ++t) {
    double srow = 0, arow = 0;
    for (int j = 0; j < out.dist.dim(1); ++j) srow += out.dist.data()[t * out.dist.dim(1) + j];
    for (int j = 0; j < out.alpha.dim(1); ++j) arow += out.alpha.data()[t * out.alpha.dim(1) + j];
    CHECK(srow == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(arow == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(out.lambda.data()[t] > 0.0);
    CHECK(out.lambda.data()[t] < 1.0);
  }
}

TEST_CASE("gate endpoints: the free-gate output is their exact mixture") {
  Rng rng(13);
  Translator<double> model(micro_config(), rng);
  Rng er(10);
  TokenSeq x = {4, 5}, prefix = {Vocabulary::kBos, 6};
  auto src = model.encode_source(x, er, false);
  auto ctx = model.encode_memories(make_memories<double>({{6, 7}, {8}}, {0.3, -0.2}), er, false);
  auto free = model.forward(prefix, src, ctx, er, false);
  auto pinned0 = model.forward(prefix, src, ctx, er, false, 0.0);
  auto pinned1 = model.forward(prefix, src, ctx, er, false, 1.0);
  int v = free.dist.dim(1);
  for (int t = 0; t < free.dist.dim(0); ++t) {
    double lam = free.lambda.data()[t];
    for (int j = 0; j < v; ++j) {
      double mix = (1 - lam) * pinned0.dist.data()[t * v + j] + lam * pinned1.dist.data()[t * v + j];
      CHECK(free.dist.data()[t * v + j] == doctest::Approx(mix).epsilon(1e-9));
    }
  }
}

TEST_CASE("gate pinned to 1 with a single-token memory is a point mass") {
  Rng rng(15);
  Translator<double> model(micro_config(), rng);
  Rng er(12);
  auto src = model.encode_source({4, 5}, er, false);
  auto ctx = model.encode_memories(make_memories<double>({{9}}, {0.7}), er, false);
  auto out = model.forward({Vocabulary::kBos}, src, ctx, er, false, 1.0);
  for (int j = 0; j < out.dist.dim(1); ++j)
    CHECK(out.dist.data()[j] == doctest::Approx(j == 9 ? 1.0 : 0.0).epsilon(1e-9));
}

TEST_CASE("copy mass equals an explicit position scan") {
  Rng rng(17);
  Translator<double> model(micro_config(), rng);
  Rng er(14);
  auto src = model.encode_source({4, 5, 6}, er, false);
  // token 7 appears in both memories; 5 appears twice in one
  auto ctx = model.encode_memories(make_memories<double>({{7, 5, 5}, {7, 8}}, {0.6, -0.1}), er,
                                   false);
  auto out = model.forward({Vocabulary::kBos, 7}, src, ctx, er, false, 1.0);
  int k = ctx.total_tokens(), v = out.dist.dim(1);
  for (int t = 0; t < out.dist.dim(0); ++t) {
    std::vector<double> scanned(static_cast<std::size_t>(v), 0.0);
    for (int j = 0; j < k; ++j)
      scanned[static_cast<std::size_t>(ctx.token_ids[static_cast<std::size_t>(j)])] +=
          out.alpha.data()[t * k + j];
    for (int j = 0; j < v; ++j)
      CHECK(out.dist.data()[t * v + j] == doctest::Approx(scanned[static_cast<std::size_t>(j)])
                                              .epsilon(1e-9));
  }
}

TEST_CASE("output distribution is memory-order equivariant") {
  Rng rng(19);
  Translator<double> model(micro_config(), rng);
  Rng er(16);
  TokenSeq x = {4, 5, 6}, prefix = {Vocabulary::kBos, 7, 8};
  auto src = model.encode_source(x, er, false);
  std::vector<TokenSeq> sents = {{7, 9}, {10}, {11, 4, 5}};
  std::vector<double> scores = {0.5, -0.3, 0.2};
  auto base = model.forward(prefix, src, model.encode_memories(make_memories<double>(sents, scores),
                                                               er, false),
                            er, false);
  std::vector<TokenSeq> perm_sents = {sents[2], sents[0], sents[1]};
  std::vector<double> perm_scores = {scores[2], scores[0], scores[1]};
  auto perm = model.forward(
      prefix, src, model.encode_memories(make_memories<double>(perm_sents, perm_scores), er, false),
      er, false);
  for (int i = 0; i < base.dist.numel(); ++i)
    CHECK(base.dist.data()[i] == doctest::Approx(perm.dist.data()[i]).epsilon(1e-6));
}

TEST_CASE("memory-free forward has a shut gate and normalized rows") {
  Rng rng(21);
  Translator<double> model(micro_config(), rng);
  Rng er(18);
  auto src = model.encode_source({4, 5}, er, false);
  MemoryContext<double> empty;
  auto out = model.forward({Vocabulary::kBos, 6}, src, empty, er, false);
  CHECK(out.alpha.numel() == 1);  // placeholder; no memory positions exist
  for (int t = 0; t < out.dist.dim(0); ++t) {
    CHECK(out.lambda.data()[t] == 0.0);
    double s = 0;
    for (int j = 0; j < out.dist.dim(1); ++j) s += out.dist.data()[t * out.dist.dim(1) + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("training loss gradient passes finite differences end-to-end") {
  Rng rng(23);
  RetrieverConfig rcfg;
  rcfg.src_vocab = 8;
  rcfg.tgt_vocab = 8;
  rcfg.blocks = 1;
  rcfg.embed_dim = 6;
  rcfg.dims.width = 8;
  rcfg.dims.ffn = 16;
  rcfg.dims.heads = 2;
  rcfg.dims.dropout = 0.0;
  Retriever<double> retr(rcfg, rng);
  Translator<double> model(micro_config(8), rng);

  ParamMap<double> all;
  for (auto& [n, p] : retr.params()) all.emplace(n, p);
  for (auto& [n, p] : model.params()) all.emplace(n, p);

  TokenSeq x = {4, 5}, y = {6, 7};
  std::vector<TokenSeq> tm = {{6, 7}, {5, 4}};
  auto fwd = [&]() {
    Rng er(1);
    auto ex = retr.encode_src(x, er, false);
    std::vector<RetrievedMemory<double>> mems;
    for (std::size_t i = 0; i < tm.size(); ++i) {
      auto ez = retr.encode_tgt(tm[i], er, false);
      mems.push_back({static_cast<int>(i), tm[i], relevance(ex, ez)});
    }
    return model.training_loss(x, y, mems, er, false);
  };
  Rng check_rng(29);
  auto rep = test::grad_check(all, fwd, check_rng, 1e-5, 3);
  INFO("worst: ", rep.worst);
  CHECK(rep.max_rel_err < 1e-4);

  // the fresh-score path carries signal: loss gradients reach beta and the
  // source-side retriever through f(x, z_i)
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    tape.backward(fwd());
  }
  auto beta_grad = tape.leaf_grad(all.at("translator.beta"));
  CHECK(std::abs(beta_grad[0]) > 0.0);
  double src_norm = 0;
  for (double g : tape.leaf_grad(all.at("retriever.src.proj"))) src_norm += g * g;
  CHECK(src_norm > 0.0);
}

TEST_CASE("overfits one pair; greedy decode recovers it; beam 1 == greedy") {
  using F = Tensor<float>;
  Rng rng(31);
  TranslatorConfig cfg;
  cfg.src_vocab = 12;
  cfg.tgt_vocab = 12;
  cfg.enc_blocks = 1;
  cfg.dec_blocks = 1;
  cfg.mem_blocks = 1;
  cfg.dims.width = 16;
  cfg.dims.ffn = 32;
  cfg.dims.heads = 2;
  cfg.dims.dropout = 0.0;
  Translator<float> model(cfg, rng);

  TokenSeq x = {4, 5, 6}, y = {7, 8, 9};
  auto mems = make_memories<float>({{7, 8, 9}, {10, 11}}, {0.8, -0.1});

  AdamConfig acfg;
  acfg.model_dim = cfg.dims.width;
  acfg.warmup_steps = 40;
  Adam<float> opt(acfg);
  Rng er(2);
  double first = 0, last = 0;
  for (int step = 0; step < 160; ++step) {
    Tape<float> tape;
    GradMap<float> grads;
    double loss_val;
    {
      Tape<float>::Scope scope(tape);
      auto loss = model.training_loss(x, y, mems, er, false);
      loss_val = loss.item();
      tape.backward(loss);
    }
    for (auto& [n, p] : model.params()) grads[n] = tape.leaf_grad(p);
    REQUIRE(opt.step(model.params(), grads).applied);
    if (step == 0) first = loss_val;
    last = loss_val;
  }
  CHECK(last < first * 0.5);

  DecodeConfig greedy_cfg{1, 8};
  auto out = model.translate(x, mems, greedy_cfg);
  CHECK_FALSE(out.truncated);
  CHECK(out.tokens == y);

  DecodeConfig beam_cfg{3, 8};
  auto beamed = model.translate(x, mems, beam_cfg);
  CHECK(beamed.tokens == y);

  // beam width 1 equals an explicit argmax loop, token-for-token
  TokenSeq other = {6, 4};
  Rng dr(0);
  auto osrc = model.encode_source(other, dr, false);
  auto octx = model.encode_memories(mems, dr, false);
  TokenSeq prefix{Vocabulary::kBos}, greedy_tokens;
  bool greedy_trunc = true;
  for (int step = 0; step < 6; ++step) {
    auto fwd_out = model.forward(prefix, osrc, octx, dr, false);
    int t = fwd_out.dist.dim(0), v = fwd_out.dist.dim(1);
    int best = 0;
    for (int j = 1; j < v; ++j)
      if (fwd_out.dist.data()[(t - 1) * v + j] > fwd_out.dist.data()[(t - 1) * v + best]) best = j;
    if (best == Vocabulary::kEos) {
      greedy_trunc = false;
      break;
    }
    greedy_tokens.push_back(best);
    prefix.push_back(best);
  }
  auto b1 = model.translate(other, mems, DecodeConfig{1, 6});
  CHECK(b1.tokens == greedy_tokens);
  CHECK(b1.truncated == greedy_trunc);

  // hard length cap sets the truncation flag
  auto capped = model.translate(x, mems, DecodeConfig{1, 2});
  CHECK(capped.truncated);
  CHECK(capped.tokens.size() == 2);
}
