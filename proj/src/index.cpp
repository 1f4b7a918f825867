#include "memt/index.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <queue>

#include "memt/errors.hpp"

namespace memt {

namespace {

float inner_product(const float* a, const float* b, int d) {
  float s = 0;
  for (int i = 0; i < d; ++i) s += a[i] * b[i];
  return s;
}

void sort_hits(std::vector<SearchHit>& hits) {
  std::sort(hits.begin(), hits.end(), [](const SearchHit& a, const SearchHit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.memory_id < b.memory_id;
  });
}

}  // namespace

std::shared_ptr<const IndexSnapshot> IndexSnapshot::build(
    const std::vector<TokenSeq>& store,
    const std::function<std::vector<float>(const TokenSeq&)>& encode_tgt, IndexBackend backend,
    long generation, const NswConfig& nsw) {
  if (store.empty()) throw std::invalid_argument("index build: empty memory store");
  auto snap = std::make_shared<IndexSnapshot>();
  snap->generation_ = generation;
  snap->backend_ = backend;
  snap->nsw_ = nsw;
  for (std::size_t i = 0; i < store.size(); ++i) {
    std::vector<float> emb;
    try {
      emb = encode_tgt(store[i]);
    } catch (const DegenerateEmbeddingError& e) {
      snap->warnings_.push_back({static_cast<int>(i), e.what()});
      continue;
    }
    if (snap->dim_ == 0) snap->dim_ = static_cast<int>(emb.size());
    if (static_cast<int>(emb.size()) != snap->dim_)
      throw std::invalid_argument("index build: inconsistent embedding dimension");
    snap->rows_.insert(snap->rows_.end(), emb.begin(), emb.end());
    snap->ids_.push_back(static_cast<int>(i));
  }
  if (backend == IndexBackend::approximate) snap->build_graph();
  return snap;
}

void IndexSnapshot::build_graph() {
  int n = size();
  adjacency_.assign(static_cast<std::size_t>(n), {});
  if (n <= 1) return;
  int degree = std::max(1, nsw_.out_degree);

  // Diversity-preserving pruning: a candidate is kept only when no already
  // kept neighbor is closer to it than the node itself (otherwise the kept
  // neighbor already covers that direction). Dropping the plain least-similar
  // edge instead would strip the long-range links the routing depends on.
  auto prune = [&](int u) {
    auto& lst = adjacency_[static_cast<std::size_t>(u)];
    if (static_cast<int>(lst.size()) <= degree) return;
    std::vector<std::pair<float, int>> cand;
    cand.reserve(lst.size());
    for (int v : lst) cand.emplace_back(inner_product(row(u), row(v), dim_), v);
    std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    std::vector<int> selected, pruned;
    for (const auto& [s, v] : cand) {
      if (static_cast<int>(selected.size()) >= degree) break;
      bool covered = false;
      for (int w : selected)
        if (inner_product(row(v), row(w), dim_) > s) {
          covered = true;
          break;
        }
      (covered ? pruned : selected).push_back(v);
    }
    for (int v : pruned) {
      if (static_cast<int>(selected.size()) >= degree) break;
      selected.push_back(v);
    }
    lst = std::move(selected);
  };

  auto link = [&](int u, int v) {
    auto& lst = adjacency_[static_cast<std::size_t>(u)];
    if (std::find(lst.begin(), lst.end(), v) != lst.end()) return;
    lst.push_back(v);
    if (static_cast<int>(lst.size()) > degree) prune(u);
  };

  for (int i = 1; i < n; ++i) {
    std::vector<float> q(row(i), row(i) + dim_);
    // search the partially built graph (positions < i), then pick the new
    // node's links with the same coverage rule used for pruning
    auto cand = search_nsw_partial(q, nsw_.build_beam, nsw_.build_beam, i);
    std::vector<int> near, covered_cand;
    for (int v : cand) {
      if (static_cast<int>(near.size()) >= degree) break;
      float s = inner_product(row(i), row(v), dim_);
      bool covered = false;
      for (int w : near)
        if (inner_product(row(v), row(w), dim_) > s) {
          covered = true;
          break;
        }
      (covered ? covered_cand : near).push_back(v);
    }
    for (int v : covered_cand) {
      if (static_cast<int>(near.size()) >= degree) break;
      near.push_back(v);
    }
    if (near.empty()) near.push_back(0);
    for (int v : near) {
      link(i, v);
      link(v, i);
    }
  }
}

// Beam search restricted to the first `limit` inserted positions; returns
// positions of the best candidates. Shared by queries (limit = size) and
// graph construction.
std::vector<int> IndexSnapshot::search_nsw_partial(const std::vector<float>& query, int m,
                                                   int beam, int limit) const {
  if (limit <= 0) return {};
  beam = std::max(beam, m);
  std::vector<char> visited(static_cast<std::size_t>(limit), 0);

  using Scored = std::pair<float, int>;
  std::priority_queue<Scored> candidates;                                  // max-heap
  std::priority_queue<Scored, std::vector<Scored>, std::greater<>> best;   // min-heap, size<=beam

  auto visit = [&](int pos) {
    if (visited[static_cast<std::size_t>(pos)]) return;
    visited[static_cast<std::size_t>(pos)] = 1;
    float s = inner_product(query.data(), row(pos), dim_);
    if (static_cast<int>(best.size()) < beam || s > best.top().first) {
      candidates.emplace(s, pos);
      best.emplace(s, pos);
      if (static_cast<int>(best.size()) > beam) best.pop();
    }
  };

  // Spread deterministic entry points: a flat graph has no hierarchy, so
  // starting from several distant positions keeps routing from getting stuck
  // in one region of the store.
  int entries = std::min(limit, 16);
  for (int e = 0; e < entries; ++e) visit(e * (limit / entries));
  // Expand every node that ever made the beam. Stopping as soon as the best
  // open candidate falls below the current beam floor (the textbook rule)
  // saves a little work but costs measurable recall on high-dimensional
  // stores, and the full expansion is still bounded by beam * degree visits.
  while (!candidates.empty()) {
    auto [score, pos] = candidates.top();
    candidates.pop();
    for (int nb : adjacency_[static_cast<std::size_t>(pos)])
      if (nb < limit) visit(nb);
  }

  std::vector<Scored> collected;
  while (!best.empty()) {
    collected.push_back(best.top());
    best.pop();
  }
  std::sort(collected.begin(), collected.end(), [](const Scored& a, const Scored& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  if (static_cast<int>(collected.size()) > m) collected.resize(static_cast<std::size_t>(m));
  std::vector<int> out;
  for (auto& [s, p] : collected) out.push_back(p);
  return out;
}

std::vector<SearchHit> IndexSnapshot::search(const std::vector<float>& query, int m,
                                             int beam_override) const {
  if (size() == 0) return {};
  if (static_cast<int>(query.size()) != dim_)
    throw std::invalid_argument("index search: query dimension " + std::to_string(query.size()) +
                                " != index dimension " + std::to_string(dim_));
  if (m < 1) throw std::invalid_argument("index search: M must be >= 1");
  if (backend_ == IndexBackend::exact) return search_exact(query, m);
  return search_nsw(query, m, beam_override > 0 ? beam_override : nsw_.search_beam);
}

std::vector<SearchHit> IndexSnapshot::search_exact(const std::vector<float>& query, int m) const {
  std::vector<SearchHit> hits;
  hits.reserve(static_cast<std::size_t>(size()));
  for (int i = 0; i < size(); ++i)
    hits.push_back({ids_[static_cast<std::size_t>(i)], inner_product(query.data(), row(i), dim_)});
  sort_hits(hits);
  if (static_cast<int>(hits.size()) > m) hits.resize(static_cast<std::size_t>(m));
  return hits;
}

std::vector<SearchHit> IndexSnapshot::search_nsw(const std::vector<float>& query, int m,
                                                 int beam) const {
  auto positions = search_nsw_partial(query, m, beam, size());
  std::vector<SearchHit> hits;
  for (int p : positions)
    hits.push_back({ids_[static_cast<std::size_t>(p)], inner_product(query.data(), row(p), dim_)});
  sort_hits(hits);
  return hits;
}

std::uint64_t IndexSnapshot::row_checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(rows_.data());
  for (std::size_t i = 0; i < rows_.size() * sizeof(float); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

void IndexSnapshot::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write index: " + path);
  out << "memt-index 1\n"
      << generation_ << " " << dim_ << " " << size() << " "
      << (backend_ == IndexBackend::exact ? "exact" : "approx") << " " << nsw_.out_degree << " "
      << nsw_.search_beam << "\ndata\n";
  out.write(reinterpret_cast<const char*>(rows_.data()),
            static_cast<std::streamsize>(rows_.size() * sizeof(float)));
  out.write(reinterpret_cast<const char*>(ids_.data()),
            static_cast<std::streamsize>(ids_.size() * sizeof(int)));
  for (const auto& lst : adjacency_) {
    int c = static_cast<int>(lst.size());
    out.write(reinterpret_cast<const char*>(&c), sizeof(int));
    out.write(reinterpret_cast<const char*>(lst.data()),
              static_cast<std::streamsize>(lst.size() * sizeof(int)));
  }
  if (!out) throw std::runtime_error("index write failed: " + path);
}

std::shared_ptr<const IndexSnapshot> IndexSnapshot::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open index: " + path);
  std::string magic;
  int version = 0;
  in >> magic >> version;
  if (magic != "memt-index" || version != 1)
    throw std::runtime_error("not an index file: " + path);
  auto snap = std::make_shared<IndexSnapshot>();
  int count = 0;
  std::string backend;
  in >> snap->generation_ >> snap->dim_ >> count >> backend >> snap->nsw_.out_degree >>
      snap->nsw_.search_beam;
  std::string marker;
  in >> marker;
  if (marker != "data") throw std::runtime_error("malformed index header: " + path);
  in.get();
  snap->backend_ = backend == "exact" ? IndexBackend::exact : IndexBackend::approximate;
  snap->rows_.resize(static_cast<std::size_t>(count) * snap->dim_);
  in.read(reinterpret_cast<char*>(snap->rows_.data()),
          static_cast<std::streamsize>(snap->rows_.size() * sizeof(float)));
  snap->ids_.resize(static_cast<std::size_t>(count));
  in.read(reinterpret_cast<char*>(snap->ids_.data()),
          static_cast<std::streamsize>(snap->ids_.size() * sizeof(int)));
  if (snap->backend_ == IndexBackend::approximate) {
    snap->adjacency_.resize(static_cast<std::size_t>(count));
    for (auto& lst : snap->adjacency_) {
      int c = 0;
      in.read(reinterpret_cast<char*>(&c), sizeof(int));
      lst.resize(static_cast<std::size_t>(c));
      in.read(reinterpret_cast<char*>(lst.data()),
              static_cast<std::streamsize>(lst.size() * sizeof(int)));
    }
  }
  if (!in) throw std::runtime_error("truncated index file: " + path);
  return snap;
}

}  // namespace memt
