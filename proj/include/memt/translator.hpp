#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "memt/transformer.hpp"

// Memory-augmented encoder-decoder. Retrieved target sentences are encoded
// individually; the decoder attends over all their token positions jointly,
// with each position's logit biased by beta * relevance of its parent memory,
// and mixes the vocabulary softmax with a copy distribution through a learned
// gate. With no memories the model degrades exactly to a plain
// encoder-decoder (the gate is forced shut), so the no-TM baseline shares
// this code path.

namespace memt {

template <class T>
struct RetrievedMemory {
  int memory_id = -1;
  TokenSeq tokens;  // target-side sentence z_i
  Tensor<T> score;  // relevance f(x, z_i); on-tape during training
};

struct TranslatorConfig {
  int src_vocab = 0;
  int tgt_vocab = 0;
  int enc_blocks = 6;
  int dec_blocks = 6;
  int mem_blocks = 4;
  BlockDims dims;
  double label_smoothing = 0.1;
};

// Per-memory encodings plus a flattened view over all K token positions.
template <class T>
struct MemoryContext {
  std::vector<Tensor<T>> groups;  // [L_i, width] per memory
  Tensor<T> flat;                 // [K, width]
  std::vector<int> owner;         // position -> memory index
  std::vector<int> token_ids;     // position -> target token id
  std::vector<Tensor<T>> scores;  // scalar per memory

  bool empty() const { return groups.empty(); }
  int total_tokens() const { return static_cast<int>(token_ids.size()); }
};

template <class T>
struct DecoderOutputs {
  Tensor<T> dist;    // [t, V], rows sum to 1
  Tensor<T> alpha;   // [t, K] memory attention ([1, 1] zero placeholder when memory-free)
  Tensor<T> lambda;  // [t, 1] gate ([t, 1] of zeros when memory-free)
};

struct DecodeConfig {
  int beam = 1;
  int max_len = 32;
};

struct TranslationResult {
  TokenSeq tokens;  // without [BOS]/[EOS]
  bool truncated = false;
};

template <class T>
class Translator {
 public:
  Translator(const TranslatorConfig& cfg, Rng& rng) : cfg_(cfg) {
    enc_ = EncoderStack<T>::create(cfg.src_vocab, cfg.enc_blocks, cfg.dims, rng, params_,
                                   "translator.enc");
    dec_ = DecoderStack<T>::create(cfg.tgt_vocab, cfg.dec_blocks, cfg.dims, rng, params_,
                                   "translator.dec");
    mem_ = EncoderStack<T>::create(cfg.tgt_vocab, cfg.mem_blocks, cfg.dims, rng, params_,
                                   "translator.mem");
    int w = cfg.dims.width;
    w_m_ = Tensor<T>::xavier({w, w}, rng);
    w_c_ = Tensor<T>::xavier({w, w}, rng);
    params_.emplace("translator.w_m", w_m_);
    params_.emplace("translator.w_c", w_c_);
    out_ = Linear<T>::create(w, cfg.tgt_vocab, rng, params_, "translator.out");
    gate1_ = Linear<T>::create(2 * w, w, rng, params_, "translator.gate1");
    gate2_ = Linear<T>::create(w, 1, rng, params_, "translator.gate2");
    beta_ = Tensor<T>::filled({1}, T(1), true);  // nonzero so score gradients flow immediately
    params_.emplace("translator.beta", beta_);
  }

  const TranslatorConfig& config() const { return cfg_; }
  ParamMap<T>& params() { return params_; }
  const ParamMap<T>& params() const { return params_; }
  const Tensor<T>& beta() const { return beta_; }

  Tensor<T> encode_source(const TokenSeq& x, Rng& rng, bool training = false) const {
    return enc_.apply(x, rng, training);
  }

  // Each memory is encoded on its own: no attention crosses memory
  // boundaries, so permuting memories permutes the groups and nothing else.
  MemoryContext<T> encode_memories(const std::vector<RetrievedMemory<T>>& mems, Rng& rng,
                                   bool training = false) const {
    MemoryContext<T> ctx;
    if (mems.empty()) return ctx;
    for (std::size_t i = 0; i < mems.size(); ++i) {
      if (mems[i].tokens.empty())
        throw std::invalid_argument("encode_memories: empty memory sentence");
      ctx.groups.push_back(mem_.apply(mems[i].tokens, rng, training));
      ctx.scores.push_back(mems[i].score);
      for (int tok : mems[i].tokens) {
        ctx.owner.push_back(static_cast<int>(i));
        ctx.token_ids.push_back(tok);
      }
    }
    ctx.flat = concat_rows(ctx.groups);
    return ctx;
  }

  // Joint softmax over all K memory-token positions: logit(t, (i,j)) =
  // h_t^T W_m z_{i,j} + beta * f(x, z_i). Returns (alpha [t,K], c [t,width]).
  std::pair<Tensor<T>, Tensor<T>> memory_attention(const Tensor<T>& h,
                                                   const MemoryContext<T>& ctx) const {
    if (ctx.empty()) throw std::invalid_argument("memory_attention: no memories");
    auto logits = matmul(matmul(h, w_m_), transpose(ctx.flat));  // [t, K]
    // bias column j by beta * score(owner(j)); built from ops so the
    // gradient reaches beta and, through fresh scores, the retriever
    int k = ctx.total_tokens();
    int m = static_cast<int>(ctx.scores.size());
    std::vector<T> onehot(static_cast<std::size_t>(k) * m, T(0));
    for (int j = 0; j < k; ++j)
      onehot[static_cast<std::size_t>(j) * m + ctx.owner[static_cast<std::size_t>(j)]] = T(1);
    std::vector<Tensor<T>> score_rows;
    for (const auto& s : ctx.scores) score_rows.push_back(reshape(s, {1, 1}));
    auto per_position = reshape(matmul(Tensor<T>::from_data({k, m}, std::move(onehot)),
                                       concat_rows(score_rows)),
                                {k});
    auto alpha = softmax_rows(add_bias(logits, mul_scalar(per_position, beta_)));
    auto c = matmul(matmul(alpha, ctx.flat), w_c_);
    return {alpha, c};
  }

  // Teacher-forcing pass over a [BOS]-prefixed target prefix. Steps (per
  // time index, vectorized over t): decoder hidden h; (alpha, c) from memory
  // attention; h <- h + c; P_v from the updated h; gate from (h', c); final
  // distribution (1 - lambda) P_v + lambda * copy. lambda_override in [0, 1]
  // pins the gate (tests and ablation wiring only).
  DecoderOutputs<T> forward(const TokenSeq& prefix, const Tensor<T>& src_enc,
                            const MemoryContext<T>& ctx, Rng& rng, bool training = false,
                            double lambda_override = -1.0) const {
    auto h = dec_.apply(prefix, src_enc, rng, training);
    int t = h.dim(0);
    DecoderOutputs<T> out;
    if (ctx.empty()) {
      out.dist = softmax_rows(out_.apply(h));
      out.alpha = Tensor<T>::zeros({1, 1});
      out.lambda = Tensor<T>::zeros({t, 1});
      return out;
    }
    auto [alpha, c] = memory_attention(h, ctx);
    auto h2 = add(h, c);
    auto p_v = softmax_rows(out_.apply(h2));
    Tensor<T> lam;
    if (lambda_override >= 0.0)
      lam = Tensor<T>::filled({t, 1}, static_cast<T>(lambda_override));
    else
      lam = sigmoid(gate2_.apply(relu(gate1_.apply(concat_cols(h2, c)))));
    auto copy = scatter_copy(alpha, ctx.token_ids, cfg_.tgt_vocab);
    auto keep = sub(Tensor<T>::filled({t, 1}, T(1)), lam);
    out.dist = add(scale_rows(p_v, reshape(keep, {t})), scale_rows(copy, reshape(lam, {t})));
    out.alpha = alpha;
    out.lambda = lam;
    return out;
  }

  // Label-smoothed NLL of y under teacher forcing; prefix = [BOS] + y,
  // targets = y + [EOS] (the last row predicts end-of-sentence).
  Tensor<T> training_loss(const TokenSeq& x, const TokenSeq& y,
                          const std::vector<RetrievedMemory<T>>& mems, Rng& rng,
                          bool training = true) const {
    if (y.empty()) throw std::invalid_argument("training_loss: empty target");
    auto src_enc = encode_source(x, rng, training);
    auto ctx = encode_memories(mems, rng, training);
    TokenSeq prefix{Vocabulary::kBos};
    prefix.insert(prefix.end(), y.begin(), y.end());
    TokenSeq targets = y;
    targets.push_back(Vocabulary::kEos);
    auto outputs = forward(prefix, src_enc, ctx, rng, training);
    return smoothed_nll(outputs.dist, targets, cfg_.label_smoothing);
  }

  TranslationResult translate(const TokenSeq& x, const std::vector<RetrievedMemory<T>>& mems,
                              const DecodeConfig& decode) const {
    if (decode.beam < 1) throw std::invalid_argument("translate: beam width must be >= 1");
    Rng rng(0);  // inference runs without dropout; the stream is unused
    auto src_enc = encode_source(x, rng, false);
    auto ctx = encode_memories(mems, rng, false);
    return beam_search(src_enc, ctx, decode, rng);
  }

 private:
  // Log probabilities of the next token after the given [BOS]-prefixed
  // prefix. Re-runs the full prefix each step; fine at desk scale.
  std::vector<T> next_token_logprobs(const TokenSeq& prefix, const Tensor<T>& src_enc,
                                     const MemoryContext<T>& ctx, Rng& rng) const {
    auto out = forward(prefix, src_enc, ctx, rng, false);
    int t = out.dist.dim(0), v = out.dist.dim(1);
    std::vector<T> logp(static_cast<std::size_t>(v));
    const T* row = out.dist.data().data() + static_cast<std::ptrdiff_t>(t - 1) * v;
    for (int j = 0; j < v; ++j)
      logp[static_cast<std::size_t>(j)] = std::log(std::max(row[j], T(1e-12)));
    return logp;
  }

  struct Hypothesis {
    TokenSeq prefix;  // includes [BOS]
    double logp = 0;
    bool done = false;
    bool truncated = false;

    double normalized() const {
      auto len = static_cast<double>(prefix.size() > 1 ? prefix.size() - 1 : 1);
      return logp / len;
    }
  };

  TranslationResult beam_search(const Tensor<T>& src_enc, const MemoryContext<T>& ctx,
                                const DecodeConfig& decode, Rng& rng) const {
    std::vector<Hypothesis> live{{{Vocabulary::kBos}, 0.0, false, false}};
    std::vector<Hypothesis> finished;
    for (int step = 0; step < decode.max_len && !live.empty(); ++step) {
      std::vector<Hypothesis> expanded;
      for (const auto& hyp : live) {
        auto logp = next_token_logprobs(hyp.prefix, src_enc, ctx, rng);
        // only the beam-width best continuations of each hypothesis matter
        std::vector<int> order(logp.size());
        for (std::size_t j = 0; j < order.size(); ++j) order[j] = static_cast<int>(j);
        std::partial_sort(order.begin(),
                          order.begin() + std::min<std::size_t>(order.size(),
                                                                static_cast<std::size_t>(decode.beam)),
                          order.end(),
                          [&](int a, int b) { return logp[static_cast<std::size_t>(a)] >
                                                     logp[static_cast<std::size_t>(b)]; });
        for (int r = 0; r < decode.beam && r < static_cast<int>(order.size()); ++r) {
          int tok = order[static_cast<std::size_t>(r)];
          Hypothesis next = hyp;
          next.logp += static_cast<double>(logp[static_cast<std::size_t>(tok)]);
          if (tok == Vocabulary::kEos) {
            next.done = true;
            finished.push_back(next);
          } else {
            next.prefix.push_back(tok);
            expanded.push_back(next);
          }
        }
      }
      std::sort(expanded.begin(), expanded.end(),
                [](const Hypothesis& a, const Hypothesis& b) { return a.normalized() > b.normalized(); });
      if (static_cast<int>(expanded.size()) > decode.beam)
        expanded.resize(static_cast<std::size_t>(decode.beam));
      live = std::move(expanded);
    }
    for (auto& hyp : live) {
      hyp.truncated = true;
      finished.push_back(hyp);
    }
    auto best = std::max_element(finished.begin(), finished.end(),
                                 [](const Hypothesis& a, const Hypothesis& b) {
                                   return a.normalized() < b.normalized();
                                 });
    TranslationResult res;
    res.tokens.assign(best->prefix.begin() + 1, best->prefix.end());
    res.truncated = best->truncated;
    return res;
  }

  TranslatorConfig cfg_;
  ParamMap<T> params_;
  EncoderStack<T> enc_, mem_;
  DecoderStack<T> dec_;
  Tensor<T> w_m_, w_c_, beta_;
  Linear<T> out_, gate1_, gate2_;
};

}  // namespace memt
