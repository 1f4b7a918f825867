#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "memt/adam.hpp"
#include "memt/corpus.hpp"
#include "memt/rng.hpp"
#include "memt/tensor.hpp"

// Transformer building blocks (pre-norm variant with a final layer norm).
// Parameter tensors are registered into a shared ParamMap under dotted name
// prefixes so the optimizer and checkpointing see one flat manifest.

namespace memt {

struct BlockDims {
  int width = 128;
  int ffn = 256;
  int heads = 2;
  double dropout = 0.1;
};

template <class T>
struct Linear {
  Tensor<T> w;  // [in, out]
  Tensor<T> b;  // [out]

  static Linear create(int in, int out, Rng& rng, ParamMap<T>& params, const std::string& name) {
    Linear l;
    l.w = Tensor<T>::xavier({in, out}, rng);
    l.b = Tensor<T>::zeros({out}, true);
    params.emplace(name + ".w", l.w);
    params.emplace(name + ".b", l.b);
    return l;
  }

  Tensor<T> apply(const Tensor<T>& x) const { return add_bias(matmul(x, w), b); }
};

template <class T>
struct LayerNormParams {
  Tensor<T> gain, bias;

  static LayerNormParams create(int width, ParamMap<T>& params, const std::string& name) {
    LayerNormParams ln;
    ln.gain = Tensor<T>::filled({width}, T(1), true);
    ln.bias = Tensor<T>::zeros({width}, true);
    params.emplace(name + ".gain", ln.gain);
    params.emplace(name + ".bias", ln.bias);
    return ln;
  }

  Tensor<T> apply(const Tensor<T>& x) const { return layer_norm(x, gain, bias); }
};

template <class T>
struct MultiHeadAttention {
  Linear<T> q, k, v, o;
  int heads = 1;
  int width = 0;

  static MultiHeadAttention create(const BlockDims& dims, Rng& rng, ParamMap<T>& params,
                                   const std::string& name) {
    if (dims.width % dims.heads != 0)
      throw std::invalid_argument("attention width must divide by head count");
    MultiHeadAttention a;
    a.heads = dims.heads;
    a.width = dims.width;
    a.q = Linear<T>::create(dims.width, dims.width, rng, params, name + ".q");
    a.k = Linear<T>::create(dims.width, dims.width, rng, params, name + ".k");
    a.v = Linear<T>::create(dims.width, dims.width, rng, params, name + ".v");
    a.o = Linear<T>::create(dims.width, dims.width, rng, params, name + ".o");
    return a;
  }

  Tensor<T> apply(const Tensor<T>& x_q, const Tensor<T>& x_kv, bool causal, double drop, Rng& rng,
                  bool training) const {
    int lq = x_q.dim(0), lk = x_kv.dim(0);
    int dh = width / heads;
    Tensor<T> qm = q.apply(x_q), km = k.apply(x_kv), vm = v.apply(x_kv);
    std::vector<T> mask;
    if (causal) {
      mask.assign(static_cast<std::size_t>(lq) * lk, T(0));
      for (int i = 0; i < lq; ++i)
        for (int j = i + 1; j < lk; ++j) mask[static_cast<std::size_t>(i) * lk + j] = T(-1e9);
    }
    std::vector<Tensor<T>> head_out;
    for (int h = 0; h < heads; ++h) {
      auto qh = slice_cols(qm, h * dh, (h + 1) * dh);
      auto kh = slice_cols(km, h * dh, (h + 1) * dh);
      auto vh = slice_cols(vm, h * dh, (h + 1) * dh);
      auto scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
      if (causal) scores = add_const(scores, mask);
      auto attn = softmax_rows(scores);
      attn = dropout(attn, drop, rng, training);
      head_out.push_back(matmul(attn, vh));
    }
    Tensor<T> cat = head_out[0];
    for (std::size_t h = 1; h < head_out.size(); ++h) cat = concat_cols(cat, head_out[h]);
    return o.apply(cat);
  }
};

template <class T>
struct TransformerBlock {
  LayerNormParams<T> ln1;
  MultiHeadAttention<T> self_attn;
  bool has_cross = false;
  LayerNormParams<T> ln_cross;
  MultiHeadAttention<T> cross_attn;
  LayerNormParams<T> ln2;
  Linear<T> ffn1, ffn2;
  double drop = 0.1;

  static TransformerBlock create(const BlockDims& dims, bool with_cross, Rng& rng,
                                 ParamMap<T>& params, const std::string& name) {
    TransformerBlock b;
    b.drop = dims.dropout;
    b.ln1 = LayerNormParams<T>::create(dims.width, params, name + ".ln1");
    b.self_attn = MultiHeadAttention<T>::create(dims, rng, params, name + ".self");
    b.has_cross = with_cross;
    if (with_cross) {
      b.ln_cross = LayerNormParams<T>::create(dims.width, params, name + ".lnc");
      b.cross_attn = MultiHeadAttention<T>::create(dims, rng, params, name + ".cross");
    }
    b.ln2 = LayerNormParams<T>::create(dims.width, params, name + ".ln2");
    b.ffn1 = Linear<T>::create(dims.width, dims.ffn, rng, params, name + ".ffn1");
    b.ffn2 = Linear<T>::create(dims.ffn, dims.width, rng, params, name + ".ffn2");
    return b;
  }

  Tensor<T> apply(Tensor<T> x, const std::optional<Tensor<T>>& cross_src, bool causal, Rng& rng,
                  bool training) const {
    auto normed = ln1.apply(x);
    x = add(x, dropout(self_attn.apply(normed, normed, causal, drop, rng, training), drop, rng,
                       training));
    if (has_cross) {
      if (!cross_src) throw std::invalid_argument("cross-attention block needs source encoding");
      x = add(x, dropout(cross_attn.apply(ln_cross.apply(x), *cross_src, false, drop, rng, training),
                         drop, rng, training));
    }
    auto h = ffn2.apply(relu(ffn1.apply(ln2.apply(x))));
    return add(x, dropout(h, drop, rng, training));
  }
};

// Sinusoidal position encodings added to scaled token embeddings.
template <class T>
std::vector<T> sinusoid_positions(int len, int width) {
  std::vector<T> pos(static_cast<std::size_t>(len) * width);
  for (int p = 0; p < len; ++p) {
    for (int i = 0; i < width; ++i) {
      double angle = p / std::pow(10000.0, 2.0 * (i / 2) / width);
      pos[static_cast<std::size_t>(p) * width + i] =
          static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pos;
}

template <class T>
struct TokenEmbedding {
  Tensor<T> table;  // [V, width]
  int width = 0;

  static TokenEmbedding create(int vocab, int width, Rng& rng, ParamMap<T>& params,
                               const std::string& name) {
    TokenEmbedding e;
    e.width = width;
    e.table = Tensor<T>::randn({vocab, width}, rng, 1.0 / std::sqrt(static_cast<double>(width)),
                               true);
    params.emplace(name + ".table", e.table);
    return e;
  }

  Tensor<T> apply(const TokenSeq& ids) const {
    auto x = scale(embedding(table, ids), std::sqrt(static_cast<double>(width)));
    return add_const(x, sinusoid_positions<T>(static_cast<int>(ids.size()), width));
  }
};

// Self-attention-only encoder stack.
template <class T>
struct EncoderStack {
  TokenEmbedding<T> embed;
  std::vector<TransformerBlock<T>> blocks;
  LayerNormParams<T> ln_final;
  double drop = 0.1;

  static EncoderStack create(int vocab, int n_blocks, const BlockDims& dims, Rng& rng,
                             ParamMap<T>& params, const std::string& name) {
    EncoderStack e;
    e.drop = dims.dropout;
    e.embed = TokenEmbedding<T>::create(vocab, dims.width, rng, params, name + ".embed");
    for (int i = 0; i < n_blocks; ++i)
      e.blocks.push_back(
          TransformerBlock<T>::create(dims, false, rng, params, name + ".block" + std::to_string(i)));
    e.ln_final = LayerNormParams<T>::create(dims.width, params, name + ".lnf");
    return e;
  }

  Tensor<T> apply(const TokenSeq& ids, Rng& rng, bool training) const {
    if (ids.empty()) throw std::invalid_argument("encoder: empty token sequence");
    Tensor<T> x = dropout(embed.apply(ids), drop, rng, training);
    for (const auto& b : blocks) x = b.apply(x, std::nullopt, false, rng, training);
    return ln_final.apply(x);
  }
};

// Decoder stack: causal self-attention plus cross-attention to a source
// encoding.
template <class T>
struct DecoderStack {
  TokenEmbedding<T> embed;
  std::vector<TransformerBlock<T>> blocks;
  LayerNormParams<T> ln_final;
  double drop = 0.1;

  static DecoderStack create(int vocab, int n_blocks, const BlockDims& dims, Rng& rng,
                             ParamMap<T>& params, const std::string& name) {
    DecoderStack d;
    d.drop = dims.dropout;
    d.embed = TokenEmbedding<T>::create(vocab, dims.width, rng, params, name + ".embed");
    for (int i = 0; i < n_blocks; ++i)
      d.blocks.push_back(
          TransformerBlock<T>::create(dims, true, rng, params, name + ".block" + std::to_string(i)));
    d.ln_final = LayerNormParams<T>::create(dims.width, params, name + ".lnf");
    return d;
  }

  Tensor<T> apply(const TokenSeq& ids, const Tensor<T>& src_enc, Rng& rng, bool training) const {
    if (ids.empty()) throw std::invalid_argument("decoder: empty token sequence");
    Tensor<T> x = dropout(embed.apply(ids), drop, rng, training);
    for (const auto& b : blocks) x = b.apply(x, src_enc, true, rng, training);
    return ln_final.apply(x);
  }
};

}  // namespace memt
