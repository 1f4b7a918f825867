#include "memt/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace memt {

// ---- Vocabulary ----

Vocabulary::Vocabulary() {
  for (const char* t : {"[PAD]", "[BOS]", "[EOS]", "[UNK]"}) add(t);
}

int Vocabulary::add(const std::string& token) {
  auto it = tok_to_id_.find(token);
  if (it != tok_to_id_.end()) return it->second;
  int id = static_cast<int>(id_to_tok_.size());
  id_to_tok_.push_back(token);
  tok_to_id_.emplace(token, id);
  return id;
}

int Vocabulary::id(const std::string& token) const {
  auto it = tok_to_id_.find(token);
  return it == tok_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("vocabulary id " + std::to_string(id));
  return id_to_tok_[static_cast<std::size_t>(id)];
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocabulary: " + path);
  for (int i = 0; i < size(); ++i) out << id_to_tok_[static_cast<std::size_t>(i)] << "\t" << i << "\n";
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read vocabulary: " + path);
  Vocabulary v;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw std::runtime_error("malformed vocabulary line: " + line);
    std::string tok = line.substr(0, tab);
    int id = std::stoi(line.substr(tab + 1));
    if (id < 4) continue;  // reserved ids are fixed by the constructor
    int got = v.add(tok);
    if (got != id) throw std::runtime_error("non-contiguous vocabulary ids in " + path);
  }
  return v;
}

TokenSeq tokenize(const std::string& text, const Vocabulary& vocab) {
  TokenSeq out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) out.push_back(vocab.id(tok));
  return out;
}

std::string detokenize(const TokenSeq& ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (id == Vocabulary::kPad || id == Vocabulary::kBos || id == Vocabulary::kEos) continue;
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

// ---- synthetic task ----

std::vector<int> SyntheticTaskSpec::mapping_table(int synonym) const {
  if (tgt_synonyms < 1 || synonym < 0 || synonym >= tgt_synonyms)
    throw std::invalid_argument("synonym slot out of range");
  if (tgt_vocab_size != src_vocab_size * tgt_synonyms)
    throw std::invalid_argument("mapping must be injective per slot: need tgt_vocab_size == src_vocab_size * tgt_synonyms");
  std::vector<int> perm(static_cast<std::size_t>(tgt_vocab_size));
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 gen(mapping_seed);
  std::shuffle(perm.begin(), perm.end(), gen);
  std::vector<int> table(static_cast<std::size_t>(src_vocab_size));
  for (int i = 0; i < src_vocab_size; ++i)
    table[static_cast<std::size_t>(i)] = perm[static_cast<std::size_t>(i * tgt_synonyms + synonym)];
  return table;
}

namespace {

constexpr int kReserved = 4;

// Local reorder rule: swap adjacent pairs (0<->1, 2<->3, ...).
void apply_reorder(TokenSeq& t) {
  for (std::size_t i = 0; i + 1 < t.size(); i += 2) std::swap(t[i], t[i + 1]);
}

struct DomainSampler {
  // content indices owned by each domain, with a Zipf cumulative distribution
  std::vector<std::vector<int>> members;
  std::vector<std::vector<double>> cum;

  DomainSampler(const SyntheticTaskSpec& spec) {
    int v = spec.src_vocab_size, d = spec.num_domains;
    members.resize(static_cast<std::size_t>(d));
    cum.resize(static_cast<std::size_t>(d));
    for (int k = 0; k < d; ++k) {
      int lo = k * v / d, hi = (k + 1) * v / d;
      double tot = 0;
      for (int i = lo; i < hi; ++i) {
        members[static_cast<std::size_t>(k)].push_back(i);
        tot += std::pow(static_cast<double>(i - lo + 1), -spec.zipf_exponent);
        cum[static_cast<std::size_t>(k)].push_back(tot);
      }
      for (auto& c : cum[static_cast<std::size_t>(k)]) c /= tot;
    }
  }

  int sample(int domain, Rng& rng) const {
    const auto& c = cum[static_cast<std::size_t>(domain)];
    double u = rng.uniform();
    auto it = std::lower_bound(c.begin(), c.end(), u);
    std::size_t idx = std::min(static_cast<std::size_t>(it - c.begin()), c.size() - 1);
    return members[static_cast<std::size_t>(domain)][idx];
  }
};

}  // namespace

TokenSeq reference_translation(const SyntheticTaskSpec& spec, const TokenSeq& src,
                               const Vocabulary& /*src_vocab*/, const Vocabulary& /*tgt_vocab*/) {
  auto table = spec.mapping_table();
  TokenSeq tgt;
  tgt.reserve(src.size());
  for (int id : src) {
    if (id < kReserved) {
      tgt.push_back(Vocabulary::kUnk);
      continue;
    }
    tgt.push_back(kReserved + table[static_cast<std::size_t>(id - kReserved)]);
  }
  apply_reorder(tgt);
  return tgt;
}

GeneratedCorpus generate(const SyntheticTaskSpec& spec, const CorpusSizes& sizes,
                         std::uint64_t seed) {
  GeneratedCorpus out;
  for (int i = 0; i < spec.src_vocab_size; ++i) out.src_vocab.add("s" + std::to_string(i));
  for (int i = 0; i < spec.tgt_vocab_size; ++i) out.tgt_vocab.add("t" + std::to_string(i));

  std::vector<std::vector<int>> tables;
  for (int k = 0; k < spec.tgt_synonyms; ++k) tables.push_back(spec.mapping_table(k));
  DomainSampler sampler(spec);
  Rng rng(seed);

  auto gen_pair = [&](int domain) {
    SentencePair p;
    p.domain = domain;
    int len = static_cast<int>(rng.randint(spec.len_min, spec.len_max));
    for (int i = 0; i < len; ++i) p.src.push_back(kReserved + sampler.sample(domain, rng));
    p.tgt.reserve(p.src.size());
    for (int id : p.src) {
      int slot = spec.tgt_synonyms > 1 ? static_cast<int>(rng.randint(0, spec.tgt_synonyms - 1)) : 0;
      p.tgt.push_back(kReserved + tables[static_cast<std::size_t>(slot)][static_cast<std::size_t>(id - kReserved)]);
    }
    apply_reorder(p.tgt);
    return p;
  };

  for (int i = 0; i < sizes.train; ++i) out.train.push_back(gen_pair(i % spec.num_domains));
  for (int i = 0; i < sizes.dev; ++i) out.dev.push_back(gen_pair(i % spec.num_domains));
  for (int i = 0; i < sizes.test; ++i) out.test.push_back(gen_pair(i % spec.num_domains));

  // TM pool: training targets, extra monolingual targets (sources discarded),
  // and near-duplicates of each split's targets at the injection rate.  Train
  // targets get near-duplicates too: retrieval during training excludes exact
  // gold matches, so without close neighbours in the pool the memory pathway
  // would never see a useful candidate while learning.
  std::vector<std::pair<TokenSeq, int>> pool;  // (sentence, domain)
  for (const auto& p : out.train) pool.emplace_back(p.tgt, p.domain);
  for (int i = 0; i < sizes.extra_monolingual; ++i) {
    auto p = gen_pair(i % spec.num_domains);
    pool.emplace_back(std::move(p.tgt), p.domain);
  }
  auto tgt_domain_token = [&](int domain) {
    int slot = spec.tgt_synonyms > 1 ? static_cast<int>(rng.randint(0, spec.tgt_synonyms - 1)) : 0;
    return kReserved + tables[static_cast<std::size_t>(slot)][static_cast<std::size_t>(sampler.sample(domain, rng))];
  };
  auto inject = [&](const std::vector<SentencePair>& split) {
    for (const auto& p : split) {
      if (!rng.bernoulli(spec.near_dup_rate)) continue;
      TokenSeq dup = p.tgt;
      int edits = static_cast<int>(rng.randint(0, 2));
      for (int e = 0; e < edits && !dup.empty(); ++e) {
        std::size_t pos = static_cast<std::size_t>(rng.randint(0, static_cast<std::int64_t>(dup.size()) - 1));
        dup[pos] = tgt_domain_token(p.domain);
      }
      pool.emplace_back(std::move(dup), p.domain);
    }
  };
  inject(out.train);
  inject(out.dev);
  inject(out.test);

  std::shuffle(pool.begin(), pool.end(), rng.engine());
  out.domain_pools.resize(static_cast<std::size_t>(spec.num_domains));
  for (auto& [snt, dom] : pool) {
    out.tm_pool.push_back(snt);
    out.domain_pools[static_cast<std::size_t>(dom)].push_back(snt);
  }
  return out;
}

// ---- persistence ----

namespace {

void write_split(const std::string& dir, const std::string& name,
                 const std::vector<SentencePair>& split, const Vocabulary& sv,
                 const Vocabulary& tv) {
  std::ofstream src(dir + "/" + name + ".src"), tgt(dir + "/" + name + ".tgt"),
      dom(dir + "/" + name + ".dom");
  for (const auto& p : split) {
    src << detokenize(p.src, sv) << "\n";
    tgt << detokenize(p.tgt, tv) << "\n";
    dom << p.domain << "\n";
  }
}

std::vector<SentencePair> read_split(const std::string& dir, const std::string& name,
                                     const Vocabulary& sv, const Vocabulary& tv) {
  std::ifstream src(dir + "/" + name + ".src"), tgt(dir + "/" + name + ".tgt"),
      dom(dir + "/" + name + ".dom");
  if (!src || !tgt) throw std::runtime_error("missing corpus split " + name + " in " + dir);
  std::vector<SentencePair> out;
  std::string sline, tline, dline;
  while (std::getline(src, sline) && std::getline(tgt, tline)) {
    SentencePair p;
    p.src = tokenize(sline, sv);
    p.tgt = tokenize(tline, tv);
    if (std::getline(dom, dline) && !dline.empty()) p.domain = std::stoi(dline);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

void save_corpus(const GeneratedCorpus& corpus, const std::string& dir) {
  std::filesystem::create_directories(dir);
  corpus.src_vocab.save(dir + "/vocab.src");
  corpus.tgt_vocab.save(dir + "/vocab.tgt");
  write_split(dir, "train", corpus.train, corpus.src_vocab, corpus.tgt_vocab);
  write_split(dir, "dev", corpus.dev, corpus.src_vocab, corpus.tgt_vocab);
  write_split(dir, "test", corpus.test, corpus.src_vocab, corpus.tgt_vocab);
  std::ofstream tm(dir + "/tm.tgt");
  for (const auto& s : corpus.tm_pool) tm << detokenize(s, corpus.tgt_vocab) << "\n";
  for (std::size_t d = 0; d < corpus.domain_pools.size(); ++d) {
    std::ofstream dp(dir + "/tm.domain" + std::to_string(d) + ".tgt");
    for (const auto& s : corpus.domain_pools[d]) dp << detokenize(s, corpus.tgt_vocab) << "\n";
  }
}

GeneratedCorpus load_corpus(const std::string& dir) {
  GeneratedCorpus out;
  out.src_vocab = Vocabulary::load(dir + "/vocab.src");
  out.tgt_vocab = Vocabulary::load(dir + "/vocab.tgt");
  out.train = read_split(dir, "train", out.src_vocab, out.tgt_vocab);
  out.dev = read_split(dir, "dev", out.src_vocab, out.tgt_vocab);
  out.test = read_split(dir, "test", out.src_vocab, out.tgt_vocab);
  out.tm_pool = load_tm_file(dir + "/tm.tgt", out.tgt_vocab);
  for (int d = 0;; ++d) {
    std::string path = dir + "/tm.domain" + std::to_string(d) + ".tgt";
    if (!std::filesystem::exists(path)) break;
    out.domain_pools.push_back(load_tm_file(path, out.tgt_vocab));
  }
  return out;
}

std::vector<TokenSeq> load_tm_file(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read TM file: " + path);
  std::vector<TokenSeq> out;
  std::string line;
  while (std::getline(in, line)) {
    TokenSeq s = tokenize(line, vocab);
    if (!s.empty()) out.push_back(std::move(s));
  }
  return out;
}

// ---- BLEU ----

namespace {

std::string ngram_key(const TokenSeq& s, std::size_t start, int n) {
  std::string key;
  for (int i = 0; i < n; ++i) {
    key += std::to_string(s[start + static_cast<std::size_t>(i)]);
    key += ',';
  }
  return key;
}

}  // namespace

double corpus_bleu(const std::vector<TokenSeq>& hypotheses, const std::vector<TokenSeq>& references,
                   int max_n) {
  if (hypotheses.size() != references.size())
    throw std::invalid_argument("corpus_bleu: count mismatch");
  if (references.empty()) throw std::invalid_argument("corpus_bleu: empty corpus");

  long hyp_len = 0, ref_len = 0;
  std::vector<long> matches(static_cast<std::size_t>(max_n), 0),
      totals(static_cast<std::size_t>(max_n), 0);
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const TokenSeq& h = hypotheses[i];
    const TokenSeq& r = references[i];
    hyp_len += static_cast<long>(h.size());
    ref_len += static_cast<long>(r.size());
    for (int n = 1; n <= max_n; ++n) {
      if (static_cast<int>(h.size()) < n) continue;
      std::unordered_map<std::string, long> ref_counts;
      for (std::size_t j = 0; j + static_cast<std::size_t>(n) <= r.size(); ++j)
        ++ref_counts[ngram_key(r, j, n)];
      std::unordered_map<std::string, long> hyp_counts;
      for (std::size_t j = 0; j + static_cast<std::size_t>(n) <= h.size(); ++j)
        ++hyp_counts[ngram_key(h, j, n)];
      for (const auto& [key, cnt] : hyp_counts) {
        totals[static_cast<std::size_t>(n - 1)] += cnt;
        auto it = ref_counts.find(key);
        if (it != ref_counts.end())
          matches[static_cast<std::size_t>(n - 1)] += std::min(cnt, it->second);
      }
    }
  }
  if (hyp_len == 0) return 0.0;

  double log_sum = 0;
  int used = 0;
  for (int n = 0; n < max_n; ++n) {
    if (totals[static_cast<std::size_t>(n)] == 0) continue;  // no candidate n-grams of this order
    double p;
    if (matches[static_cast<std::size_t>(n)] == 0) {
      // No unigram match at all means a zero score; higher orders get add-one
      // smoothing so one missing 4-gram does not zero the corpus.
      if (n == 0) return 0.0;
      p = 1.0 / (static_cast<double>(totals[static_cast<std::size_t>(n)]) + 1.0);
    } else {
      p = static_cast<double>(matches[static_cast<std::size_t>(n)]) /
          static_cast<double>(totals[static_cast<std::size_t>(n)]);
    }
    log_sum += std::log(p);
    ++used;
  }
  if (used == 0) return 0.0;
  double geo = std::exp(log_sum / used);
  double bp = hyp_len >= ref_len
                  ? 1.0
                  : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return 100.0 * bp * geo;
}

int edit_distance(const TokenSeq& a, const TokenSeq& b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= b.size(); ++j) {
      int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// ---- BM25 ----

Bm25Index::Bm25Index(std::vector<SentencePair> pairs, double k1, double b)
    : pairs_(std::move(pairs)), k1_(k1), b_(b) {
  if (pairs_.empty()) throw std::invalid_argument("Bm25Index: empty TM");
  long total_len = 0;
  for (const auto& p : pairs_) {
    total_len += static_cast<long>(p.src.size());
    std::unordered_map<int, bool> seen;
    for (int t : p.src) {
      if (!seen[t]) {
        ++df_[t];
        seen[t] = true;
      }
    }
  }
  avg_len_ = static_cast<double>(total_len) / static_cast<double>(pairs_.size());
}

std::vector<Bm25Index::Hit> Bm25Index::search(const TokenSeq& query, int m) const {
  std::vector<int> terms(query.begin(), query.end());
  std::sort(terms.begin(), terms.end());
  terms.erase(std::unique(terms.begin(), terms.end()), terms.end());

  double n_docs = static_cast<double>(pairs_.size());
  std::vector<Hit> hits;
  for (int d = 0; d < size(); ++d) {
    const TokenSeq& doc = pairs_[static_cast<std::size_t>(d)].src;
    double score = 0;
    for (int t : terms) {
      auto dit = df_.find(t);
      if (dit == df_.end()) continue;
      long tf = std::count(doc.begin(), doc.end(), t);
      if (tf == 0) continue;
      double idf = std::log(1.0 + (n_docs - dit->second + 0.5) / (dit->second + 0.5));
      double norm = static_cast<double>(doc.size()) / avg_len_;
      score += idf * (static_cast<double>(tf) * (k1_ + 1.0)) /
               (static_cast<double>(tf) + k1_ * (1.0 - b_ + b_ * norm));
    }
    if (score > 0) hits.push_back({d, score});
  }
  std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b2) {
    if (a.score != b2.score) return a.score > b2.score;
    return a.pair_id < b2.pair_id;
  });
  if (static_cast<int>(hits.size()) > m) hits.resize(static_cast<std::size_t>(m));
  return hits;
}

}  // namespace memt
