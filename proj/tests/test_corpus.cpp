#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "memt/corpus.hpp"

using namespace memt;

TEST_CASE("vocabulary reserves ids 0-3 and round-trips") {
  Vocabulary v;
  CHECK(v.size() == 4);
  CHECK(v.id("[BOS]") == Vocabulary::kBos);
  int a = v.add("hello");
  CHECK(a == 4);
  CHECK(v.id("hello") == 4);
  CHECK(v.id("missing") == Vocabulary::kUnk);

  v.save("vocab_test.txt");
  auto loaded = Vocabulary::load("vocab_test.txt");
  CHECK(loaded.id("hello") == 4);
  CHECK(loaded.size() == v.size());
  std::filesystem::remove("vocab_test.txt");
}

TEST_CASE("tokenize round-trip, OOV, empty string") {
  Vocabulary v;
  v.add("a");
  v.add("b");
  CHECK(detokenize(tokenize("a b a", v), v) == "a b a");
  CHECK(tokenize("a zzz", v) == TokenSeq{4, Vocabulary::kUnk});
  CHECK(tokenize("", v).empty());
}

TEST_CASE("generate is deterministic and satisfies the bijective construction") {
  SyntheticTaskSpec spec;
  spec.src_vocab_size = 40;
  spec.tgt_vocab_size = 40;
  CorpusSizes sizes{100, 20, 20, 0};
  auto c1 = generate(spec, sizes, 42);
  auto c2 = generate(spec, sizes, 42);
  REQUIRE(c1.train.size() == 100);
  for (std::size_t i = 0; i < c1.train.size(); ++i) {
    CHECK(c1.train[i].src == c2.train[i].src);
    CHECK(c1.train[i].tgt == c2.train[i].tgt);
  }
  CHECK(c1.tm_pool == c2.tm_pool);

  // every pair's target re-derives from its source
  for (const auto& p : c1.train) {
    CHECK(reference_translation(spec, p.src, c1.src_vocab, c1.tgt_vocab) == p.tgt);
  }
  auto c3 = generate(spec, sizes, 43);
  CHECK(c3.train[0].src != c1.train[0].src);
}

TEST_CASE("near-duplicate injection puts close TM neighbors for test targets") {
  SyntheticTaskSpec spec;
  spec.src_vocab_size = 60;
  spec.tgt_vocab_size = 60;
  spec.near_dup_rate = 0.5;
  CorpusSizes sizes{200, 20, 100, 0};
  auto c = generate(spec, sizes, 7);
  int close = 0;
  for (const auto& p : c.test) {
    for (const auto& z : c.tm_pool) {
      if (edit_distance(p.tgt, z) <= 2) {
        ++close;
        break;
      }
    }
  }
  CHECK(close >= 40);  // >= 40% of 100 test targets
}

TEST_CASE("corpus save/load round-trip") {
  SyntheticTaskSpec spec;
  spec.src_vocab_size = 30;
  spec.tgt_vocab_size = 30;
  spec.num_domains = 2;
  auto c = generate(spec, {50, 10, 10, 20}, 3);
  save_corpus(c, "corpus_test_dir");
  auto l = load_corpus("corpus_test_dir");
  CHECK(l.train.size() == c.train.size());
  for (std::size_t i = 0; i < c.train.size(); ++i) {
    CHECK(l.train[i].src == c.train[i].src);
    CHECK(l.train[i].tgt == c.train[i].tgt);
    CHECK(l.train[i].domain == c.train[i].domain);
  }
  CHECK(l.tm_pool == c.tm_pool);
  REQUIRE(l.domain_pools.size() == 2);
  CHECK(l.domain_pools[0] == c.domain_pools[0]);
  CHECK(l.domain_pools[1] == c.domain_pools[1]);
  std::filesystem::remove_all("corpus_test_dir");
}

TEST_CASE("corpus BLEU spot values") {
  // identical corpus -> exactly 100
  std::vector<TokenSeq> h = {{4, 5, 6}, {7, 8}};
  CHECK(corpus_bleu(h, h) == 100.0);

  // hand-computed oracle: hyp "the cat", ref "the cat sat", n <= 2
  // p1 = 1, p2 = 1, BP = exp(1 - 3/2)
  std::vector<TokenSeq> hyp = {{10, 11}};
  std::vector<TokenSeq> ref = {{10, 11, 12}};
  double expected = 100.0 * std::exp(1.0 - 3.0 / 2.0);
  CHECK(corpus_bleu(hyp, ref, 2) == doctest::Approx(expected).epsilon(1e-9));
  CHECK(corpus_bleu(hyp, ref, 2) == doctest::Approx(60.653).epsilon(1e-4));

  // disjoint vocabularies -> exactly 0
  std::vector<TokenSeq> bad = {{20, 21, 22}};
  CHECK(corpus_bleu(bad, ref) == 0.0);

  // empty hypothesis contributes zero matches, no exception
  std::vector<TokenSeq> with_empty = {{}, {10, 11, 12}};
  std::vector<TokenSeq> refs2 = {{10}, {10, 11, 12}};
  CHECK_NOTHROW(corpus_bleu(with_empty, refs2));
}

TEST_CASE("corpus BLEU is permutation-invariant over sentence order") {
  Rng rng(5);
  std::vector<TokenSeq> h, r;
  for (int i = 0; i < 10; ++i) {
    TokenSeq hi, ri;
    for (int j = 0; j < 6; ++j) {
      hi.push_back(static_cast<int>(rng.randint(4, 10)));
      ri.push_back(static_cast<int>(rng.randint(4, 10)));
    }
    h.push_back(hi);
    r.push_back(ri);
  }
  double base = corpus_bleu(h, r);
  std::vector<std::size_t> perm = {3, 1, 4, 0, 9, 2, 7, 5, 8, 6};
  std::vector<TokenSeq> hp, rp;
  for (auto i : perm) {
    hp.push_back(h[i]);
    rp.push_back(r[i]);
  }
  CHECK(corpus_bleu(hp, rp) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("BM25 ranking") {
  std::vector<SentencePair> pairs;
  // doc 0: "a b c", doc 1: "a a d", doc 2: "e f"
  pairs.push_back({{4, 5, 6}, {100}, 0});
  pairs.push_back({{4, 4, 7}, {101}, 0});
  pairs.push_back({{8, 9}, {102}, 0});
  Bm25Index index(pairs);

  SUBCASE("identical query ranks its pair first") {
    auto hits = index.search({4, 5, 6}, 3);
    REQUIRE(!hits.empty());
    CHECK(hits[0].pair_id == 0);
  }

  SUBCASE("no shared tokens gives no hits") {
    CHECK(index.search({30, 31}, 3).empty());
  }

  SUBCASE("direct BM25 formula oracle on a larger collection") {
    Rng rng(9);
    std::vector<SentencePair> docs;
    for (int i = 0; i < 20; ++i) {
      SentencePair p;
      int len = static_cast<int>(rng.randint(3, 8));
      for (int j = 0; j < len; ++j) p.src.push_back(static_cast<int>(rng.randint(4, 14)));
      docs.push_back(p);
    }
    Bm25Index idx(docs);
    TokenSeq query = {5, 7, 7, 9};

    // independent evaluation of the BM25 formula
    double k1 = 1.2, b = 0.75;
    double avg = 0;
    for (const auto& d : docs) avg += static_cast<double>(d.src.size());
    avg /= 20.0;
    auto df_of = [&](int t) {
      int df = 0;
      for (const auto& d : docs)
        if (std::count(d.src.begin(), d.src.end(), t) > 0) ++df;
      return df;
    };
    std::vector<std::pair<double, int>> expected;
    for (int d = 0; d < 20; ++d) {
      double score = 0;
      for (int t : {5, 7, 9}) {  // deduplicated query terms
        int df = df_of(t);
        if (df == 0) continue;
        double tf = static_cast<double>(
            std::count(docs[static_cast<std::size_t>(d)].src.begin(),
                       docs[static_cast<std::size_t>(d)].src.end(), t));
        if (tf == 0) continue;
        double idf = std::log(1.0 + (20.0 - df + 0.5) / (df + 0.5));
        score += idf * tf * (k1 + 1.0) /
                 (tf + k1 * (1.0 - b + b * docs[static_cast<std::size_t>(d)].src.size() / avg));
      }
      if (score > 0) expected.emplace_back(-score, d);
    }
    std::sort(expected.begin(), expected.end());
    auto hits = idx.search(query, 5);
    REQUIRE(hits.size() == std::min<std::size_t>(5, expected.size()));
    for (std::size_t i = 0; i < hits.size(); ++i) {
      CHECK(hits[i].pair_id == expected[i].second);
      CHECK(hits[i].score == doctest::Approx(-expected[i].first).epsilon(1e-9));
    }
  }
}

TEST_CASE("synonym slots: disjoint injective tables, per-sentence choices") {
  SyntheticTaskSpec spec;
  spec.src_vocab_size = 30;
  spec.tgt_vocab_size = 90;
  spec.tgt_synonyms = 3;

  // per-slot tables are injective and pairwise disjoint
  std::vector<std::vector<int>> tables;
  for (int k = 0; k < 3; ++k) tables.push_back(spec.mapping_table(k));
  std::set<int> seen;
  for (const auto& t : tables) {
    REQUIRE(static_cast<int>(t.size()) == 30);
    for (int v : t) {
      CHECK(v >= 0);
      CHECK(v < 90);
      CHECK(seen.insert(v).second);  // never reused across slots or entries
    }
  }

  CHECK_THROWS_AS(spec.mapping_table(3), std::invalid_argument);
  SyntheticTaskSpec bad = spec;
  bad.tgt_vocab_size = 60;
  CHECK_THROWS_AS(bad.mapping_table(0), std::invalid_argument);

  // every generated target token is one of its source token's synonyms,
  // position-wise under the adjacent-pair reorder rule
  CorpusSizes sizes{200, 10, 10, 0};
  auto corpus = generate(spec, sizes, 5);
  int slot_hits[3] = {0, 0, 0};
  for (const auto& p : corpus.train) {
    REQUIRE(p.tgt.size() == p.src.size());
    // invert the reorder to line target positions up with source positions
    TokenSeq tgt = p.tgt;
    for (std::size_t i = 0; i + 1 < tgt.size(); i += 2) std::swap(tgt[i], tgt[i + 1]);
    for (std::size_t i = 0; i < p.src.size(); ++i) {
      int src_idx = p.src[i] - 4;
      int tgt_idx = tgt[i] - 4;
      bool matched = false;
      for (int k = 0; k < 3; ++k) {
        if (tables[static_cast<std::size_t>(k)][static_cast<std::size_t>(src_idx)] == tgt_idx) {
          matched = true;
          ++slot_hits[k];
        }
      }
      CHECK(matched);
    }
  }
  // all slots are actually used
  for (int k = 0; k < 3; ++k) CHECK(slot_hits[k] > 100);

  // default single-slot spec still matches the canonical reference rule
  SyntheticTaskSpec flat;
  flat.src_vocab_size = 30;
  flat.tgt_vocab_size = 30;
  auto c = generate(flat, sizes, 6);
  for (const auto& p : c.train)
    CHECK(reference_translation(flat, p.src, c.src_vocab, c.tgt_vocab) == p.tgt);
}
