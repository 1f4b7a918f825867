#pragma once

#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "memt/errors.hpp"
#include "memt/transformer.hpp"

// Dual-encoder cross-lingual retriever: two independent encoder stacks with
// projections into a shared d-dimensional space. Relevance is the dot product
// of centered, unit-length sentence embeddings, so scores live in [-1, 1].

namespace memt {

enum class EmbeddingSide { source, target };

template <class T>
struct SentenceEmbedding {
  Tensor<T> vec;  // [d], zero mean, unit length
  EmbeddingSide side;
};

struct RetrieverConfig {
  int src_vocab = 0;
  int tgt_vocab = 0;
  int blocks = 3;
  int embed_dim = 128;  // retrieval dimension d
  BlockDims dims;
};

// Center to zero mean and scale to unit length. Differentiable; a constant
// input (norm < 1e-12 after centering) is rejected.
template <class T>
Tensor<T> normalize_embedding(const Tensor<T>& v) {
  if (v.numel() < 2) throw std::invalid_argument("normalize_embedding: need length >= 2");
  auto centered = add_scalar(v, scale(mean(v), -1.0));
  auto norm = sqrt_t(sum(mul(centered, centered)));
  if (norm.item() < T(1e-12))
    throw DegenerateEmbeddingError("degenerate embedding: zero vector after centering");
  return div_scalar(centered, norm);
}

template <class T>
Tensor<T> relevance(const SentenceEmbedding<T>& e_x, const SentenceEmbedding<T>& e_z) {
  if (e_x.side != EmbeddingSide::source || e_z.side != EmbeddingSide::target)
    throw std::invalid_argument("relevance expects (source, target) embeddings");
  if (e_x.vec.numel() != e_z.vec.numel())
    throw std::invalid_argument("relevance: embedding dimensions differ");
  return dot(e_x.vec, e_z.vec);
}

template <class T>
class Retriever {
 public:
  Retriever(const RetrieverConfig& cfg, Rng& rng) : cfg_(cfg) {
    src_enc_ = EncoderStack<T>::create(cfg.src_vocab, cfg.blocks, cfg.dims, rng, params_,
                                       "retriever.src.enc");
    tgt_enc_ = EncoderStack<T>::create(cfg.tgt_vocab, cfg.blocks, cfg.dims, rng, params_,
                                       "retriever.tgt.enc");
    w_src_ = Tensor<T>::xavier({cfg.dims.width, cfg.embed_dim}, rng);
    w_tgt_ = Tensor<T>::xavier({cfg.dims.width, cfg.embed_dim}, rng);
    params_.emplace("retriever.src.proj", w_src_);
    params_.emplace("retriever.tgt.proj", w_tgt_);
    // token-prediction heads for the bag-of-words pretraining loss
    tok_src2tgt_ = Linear<T>::create(cfg.embed_dim, cfg.tgt_vocab, rng, params_,
                                     "retriever.src.tok_head");
    tok_tgt2src_ = Linear<T>::create(cfg.embed_dim, cfg.src_vocab, rng, params_,
                                     "retriever.tgt.tok_head");
  }

  const RetrieverConfig& config() const { return cfg_; }
  ParamMap<T>& params() { return params_; }
  const ParamMap<T>& params() const { return params_; }

  // Parameter names on the E_tgt side (the freeze set of the fixed-E_tgt
  // training variant).
  std::set<std::string> tgt_side_params() const {
    std::set<std::string> out;
    for (const auto& [name, t] : params_)
      if (name.rfind("retriever.tgt.", 0) == 0) out.insert(name);
    return out;
  }

  SentenceEmbedding<T> encode_src(const TokenSeq& x, Rng& rng, bool training = false) const {
    return encode(x, src_enc_, w_src_, cfg_.src_vocab, EmbeddingSide::source, rng, training);
  }

  SentenceEmbedding<T> encode_tgt(const TokenSeq& z, Rng& rng, bool training = false) const {
    return encode(z, tgt_enc_, w_tgt_, cfg_.tgt_vocab, EmbeddingSide::target, rng, training);
  }

  // In-batch contrastive loss: softmax over each row of S = X Z^T against the
  // diagonal, averaged over rows.
  Tensor<T> sentence_alignment_loss(const std::vector<SentenceEmbedding<T>>& xs,
                                    const std::vector<SentenceEmbedding<T>>& zs) const {
    if (xs.empty() || xs.size() != zs.size())
      throw std::invalid_argument("sentence_alignment_loss: need aligned nonempty batch");
    int b = static_cast<int>(xs.size());
    int d = xs[0].vec.numel();
    std::vector<Tensor<T>> xrows, zrows;
    for (int i = 0; i < b; ++i) {
      xrows.push_back(reshape(xs[static_cast<std::size_t>(i)].vec, {1, d}));
      zrows.push_back(reshape(zs[static_cast<std::size_t>(i)].vec, {1, d}));
    }
    auto x_mat = concat_rows(xrows);
    auto z_mat = concat_rows(zrows);
    return alignment_loss_from_scores(matmul(x_mat, transpose(z_mat)));
  }

  // Negative log-softmax of the diagonal of a [B, B] score matrix, averaged
  // over rows.
  static Tensor<T> alignment_loss_from_scores(const Tensor<T>& scores) {
    if (scores.rank() != 2 || scores.dim(0) != scores.dim(1))
      throw std::invalid_argument("alignment loss needs a square score matrix");
    int b = scores.dim(0);
    auto logp = log_softmax_rows(scores);
    std::vector<int> diag;
    for (int i = 0; i < b; ++i) diag.push_back(i * b + i);
    return scale(gather_sum(logp, diag), -1.0 / b);
  }

  // Bag-of-words cross-alignment loss for one pair, both directions summed.
  // Token sets exclude reserved ids; an empty set contributes 0.
  Tensor<T> bag_of_words_loss(const SentenceEmbedding<T>& e_x, const SentenceEmbedding<T>& e_z,
                              const TokenSeq& x, const TokenSeq& z) const {
    auto dir = [&](const Linear<T>& head, const Tensor<T>& e, const TokenSeq& sent) {
      std::set<int> tokens;
      for (int t : sent)
        if (t >= 4) tokens.insert(t);
      if (tokens.empty()) return Tensor<T>::scalar(T(0));
      auto logits = head.apply(reshape(e, {1, e.numel()}));
      auto logp = log_softmax_rows(logits);
      return scale(gather_sum(logp, std::vector<int>(tokens.begin(), tokens.end())), -1.0);
    };
    return add(dir(tok_src2tgt_, e_x.vec, z), dir(tok_tgt2src_, e_z.vec, x));
  }

  struct PretrainLoss {
    Tensor<T> total;
    double l_snt = 0;
    double l_tok = 0;
  };

  // (1/B) sum_i [ L_snt_i + L_tok_i ]: unweighted sum of the two objectives.
  PretrainLoss pretrain_objective(const std::vector<SentencePair>& batch, Rng& rng,
                                  bool training = true) const {
    if (batch.empty()) throw std::invalid_argument("pretrain_objective: empty batch");
    std::vector<SentenceEmbedding<T>> xs, zs;
    for (const auto& p : batch) {
      xs.push_back(encode_src(p.src, rng, training));
      zs.push_back(encode_tgt(p.tgt, rng, training));
    }
    auto l_snt = sentence_alignment_loss(xs, zs);
    Tensor<T> l_tok = Tensor<T>::scalar(T(0));
    for (std::size_t i = 0; i < batch.size(); ++i)
      l_tok = add(l_tok, bag_of_words_loss(xs[i], zs[i], batch[i].src, batch[i].tgt));
    l_tok = scale(l_tok, 1.0 / static_cast<double>(batch.size()));
    PretrainLoss out;
    out.l_snt = static_cast<double>(l_snt.item());
    out.l_tok = static_cast<double>(l_tok.item());
    out.total = add(l_snt, l_tok);
    return out;
  }

  // Deep copy with independent parameter storage (for index-builder threads).
  Retriever clone() const {
    Rng scratch(0);
    Retriever copy(cfg_, scratch);
    auto it = copy.params_.begin();
    for (const auto& [name, t] : params_) {
      std::copy(t.data().begin(), t.data().end(), it->second.raw().begin());
      ++it;
    }
    return copy;
  }

 private:
  SentenceEmbedding<T> encode(const TokenSeq& s, const EncoderStack<T>& enc, const Tensor<T>& proj,
                              int vocab, EmbeddingSide side, Rng& rng, bool training) const {
    if (s.empty()) throw std::invalid_argument("retriever: empty input sentence");
    for (int t : s)
      if (t < 0 || t >= vocab)
        throw std::out_of_range("retriever: token id " + std::to_string(t) + " outside vocabulary");
    TokenSeq with_bos;
    with_bos.reserve(s.size() + 1);
    with_bos.push_back(Vocabulary::kBos);
    with_bos.insert(with_bos.end(), s.begin(), s.end());
    auto hidden = enc.apply(with_bos, rng, training);
    auto bos_vec = reshape(slice_rows(hidden, 0, 1), {cfg_.dims.width});
    auto projected = reshape(matmul(reshape(bos_vec, {1, cfg_.dims.width}), proj),
                             {cfg_.embed_dim});
    return {normalize_embedding(projected), side};
  }

  RetrieverConfig cfg_;
  ParamMap<T> params_;
  EncoderStack<T> src_enc_, tgt_enc_;
  Tensor<T> w_src_, w_tgt_;
  Linear<T> tok_src2tgt_, tok_tgt2src_;
};

}  // namespace memt
