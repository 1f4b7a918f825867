#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "memt/rng.hpp"

namespace memt {

using TokenSeq = std::vector<int>;

// Token <-> id map with reserved ids 0..3 for [PAD], [BOS], [EOS], [UNK].
// Content tokens never occupy reserved ids.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Vocabulary();

  int add(const std::string& token);
  int id(const std::string& token) const;  // kUnk when missing
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(id_to_tok_.size()); }

  void save(const std::string& path) const;  // token<TAB>id lines
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> id_to_tok_;
  std::unordered_map<std::string, int> tok_to_id_;
};

TokenSeq tokenize(const std::string& text, const Vocabulary& vocab);
std::string detokenize(const TokenSeq& ids, const Vocabulary& vocab);

struct SentencePair {
  TokenSeq src;
  TokenSeq tgt;
  int domain = 0;
};

// Synthetic translation task: an injective content-token mapping plus a
// deterministic local reordering (adjacent-pair swap), so every generated
// target re-derives from its source. Domains partition the content
// vocabulary; near-duplicates of train/dev/test targets are injected into
// the TM pool so retrieval is provably useful at desk scale.
//
// With tgt_synonyms = K > 1 each source token owns K disjoint target
// synonyms and every sentence picks one per token at random. The choice is
// irreducibly ambiguous from the source alone, so a model can only recover
// it from a TM neighbor of the target — translation quality then measurably
// depends on memory *content*, not merely on having memories.
struct SyntheticTaskSpec {
  int src_vocab_size = 120;   // content tokens (excluding reserved ids)
  int tgt_vocab_size = 120;   // must equal src_vocab_size * tgt_synonyms
  std::uint64_t mapping_seed = 13;  // derives the permutation table
  int len_min = 4;
  int len_max = 9;
  double zipf_exponent = 1.1;  // token frequency skew inside a domain
  int num_domains = 1;
  double near_dup_rate = 0.5;  // chance a test target gets a TM near-duplicate
  int tgt_synonyms = 1;        // target synonyms per source token

  // src content idx -> tgt content idx for one synonym slot (0 is canonical).
  std::vector<int> mapping_table(int synonym = 0) const;
};

struct CorpusSizes {
  int train = 2000;
  int dev = 200;
  int test = 200;
  int extra_monolingual = 0;  // TM-only sentences whose sources are discarded
};

struct GeneratedCorpus {
  Vocabulary src_vocab;
  Vocabulary tgt_vocab;
  std::vector<SentencePair> train, dev, test;
  std::vector<TokenSeq> tm_pool;                  // all domains combined
  std::vector<std::vector<TokenSeq>> domain_pools;
};

// Applies the spec's canonical (synonym-0) mapping + reorder rule to a
// source sentence. With tgt_synonyms > 1 generated pairs may use other
// synonym slots, so their targets need not equal this canonical form.
TokenSeq reference_translation(const SyntheticTaskSpec& spec, const TokenSeq& src,
                               const Vocabulary& src_vocab, const Vocabulary& tgt_vocab);

GeneratedCorpus generate(const SyntheticTaskSpec& spec, const CorpusSizes& sizes,
                         std::uint64_t seed);

void save_corpus(const GeneratedCorpus& corpus, const std::string& dir);
GeneratedCorpus load_corpus(const std::string& dir);
std::vector<TokenSeq> load_tm_file(const std::string& path, const Vocabulary& vocab);

// Corpus-level BLEU in [0, 100]: geometric mean of clipped n-gram precisions
// (n <= max_n) times the brevity penalty. A zero unigram precision scores 0;
// higher orders with zero matches get add-one smoothing; orders with no
// candidate n-grams are dropped from the mean.
double corpus_bleu(const std::vector<TokenSeq>& hypotheses, const std::vector<TokenSeq>& references,
                   int max_n = 4);

int edit_distance(const TokenSeq& a, const TokenSeq& b);

// BM25 (k1 = 1.2, b = 0.75) over the source sides of a bilingual TM; the
// lexical stand-in for the source-similarity retrieval baseline.
class Bm25Index {
 public:
  Bm25Index(std::vector<SentencePair> pairs, double k1 = 1.2, double b = 0.75);

  struct Hit {
    int pair_id;
    double score;
  };
  // Top-M positive-score pairs, ties broken by ascending pair id.
  std::vector<Hit> search(const TokenSeq& query, int m) const;

  const SentencePair& pair(int id) const { return pairs_[static_cast<std::size_t>(id)]; }
  int size() const { return static_cast<int>(pairs_.size()); }

 private:
  std::vector<SentencePair> pairs_;
  double k1_, b_;
  double avg_len_ = 0;
  std::unordered_map<int, int> df_;  // token -> document frequency
};

}  // namespace memt
