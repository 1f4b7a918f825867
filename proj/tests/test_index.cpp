#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <thread>

#include "memt/errors.hpp"
#include "memt/index.hpp"
#include "memt/rng.hpp"

using namespace memt;

namespace {

std::vector<float> unit_vector(int d, Rng& rng) {
  std::vector<float> v(static_cast<std::size_t>(d));
  double norm = 0;
  for (auto& x : v) {
    x = static_cast<float>(rng.normal());
    norm += static_cast<double>(x) * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x = static_cast<float>(x / norm);
  return v;
}

// Encoder stub: memory i is token sequence {i}; its embedding is vectors[i].
struct VectorStore {
  std::vector<TokenSeq> store;
  std::vector<std::vector<float>> vectors;

  VectorStore(int n, int d, std::uint64_t seed) {
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
      store.push_back({i});
      vectors.push_back(unit_vector(d, rng));
    }
  }

  std::function<std::vector<float>(const TokenSeq&)> encoder() const {
    return [this](const TokenSeq& s) { return vectors[static_cast<std::size_t>(s[0])]; };
  }
};

std::vector<SearchHit> brute_force(const std::vector<std::vector<float>>& rows,
                                   const std::vector<float>& q, int m) {
  std::vector<SearchHit> hits;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    float s = 0;
    for (std::size_t j = 0; j < q.size(); ++j) s += rows[i][j] * q[j];
    hits.push_back({static_cast<int>(i), s});
  }
  std::sort(hits.begin(), hits.end(), [](const SearchHit& a, const SearchHit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.memory_id < b.memory_id;
  });
  if (static_cast<int>(hits.size()) > m) hits.resize(static_cast<std::size_t>(m));
  return hits;
}

}  // namespace

TEST_CASE("single-row store returns itself with score 1") {
  VectorStore vs(1, 16, 7);
  auto snap = IndexSnapshot::build(vs.store, vs.encoder(), IndexBackend::exact, 1);
  REQUIRE(snap->size() == 1);
  auto hits = snap->search(vs.vectors[0], 1);
  REQUIRE(hits.size() == 1);
  CHECK(hits[0].memory_id == 0);
  CHECK(hits[0].score == doctest::Approx(1.0f).epsilon(1e-5));
}

TEST_CASE("rebuild with unchanged vectors is bitwise identical") {
  VectorStore vs(64, 16, 11);
  auto a = IndexSnapshot::build(vs.store, vs.encoder(), IndexBackend::approximate, 1);
  auto b = IndexSnapshot::build(vs.store, vs.encoder(), IndexBackend::approximate, 2);
  CHECK(a->row_checksum() == b->row_checksum());
  CHECK(a->generation() == 1);
  CHECK(b->generation() == 2);
}

TEST_CASE("rebuild after a vector update differs") {
  VectorStore vs(32, 16, 3);
  auto a = IndexSnapshot::build(vs.store, vs.encoder(), IndexBackend::exact, 1);
  vs.vectors[5][0] += 0.25f;
  auto b = IndexSnapshot::build(vs.store, vs.encoder(), IndexBackend::exact, 2);
  CHECK(a->row_checksum() != b->row_checksum());
}

TEST_CASE("exact backend matches a brute-force scan, 1000 rows M=5") {
  VectorStore vs(1000, 32, 42);
  auto snap = IndexSnapshot::build(vs.store, vs.encoder(), IndexBackend::exact, 1);
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    auto q = unit_vector(32, rng);
    auto got = snap->search(q, 5);
    auto want = brute_force(vs.vectors, q, 5);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].memory_id == want[i].memory_id);
      CHECK(got[i].score == doctest::Approx(want[i].score).epsilon(1e-5));
    }
  }
}

TEST_CASE("M >= store size returns every memory sorted") {
  VectorStore vs(12, 8, 5);
  auto snap = IndexSnapshot::build(vs.store, vs.encoder(), IndexBackend::exact, 1);
  Rng rng(1);
  auto hits = snap->search(unit_vector(8, rng), 50);
  REQUIRE(hits.size() == 12);
  for (std::size_t i = 1; i < hits.size(); ++i) CHECK(hits[i - 1].score >= hits[i].score);
}

TEST_CASE("equal scores break ties by ascending memory id") {
  // duplicate rows guarantee exact ties
  VectorStore vs(6, 8, 21);
  vs.vectors[4] = vs.vectors[1];
  vs.vectors[5] = vs.vectors[1];
  auto snap = IndexSnapshot::build(vs.store, vs.encoder(), IndexBackend::exact, 1);
  auto hits = snap->search(vs.vectors[1], 3);
  REQUIRE(hits.size() == 3);
  CHECK(hits[0].memory_id == 1);
  CHECK(hits[1].memory_id == 4);
  CHECK(hits[2].memory_id == 5);
}

TEST_CASE("approximate search with beam = store size equals exact") {
  VectorStore vs(200, 24, 17);
  auto exact = IndexSnapshot::build(vs.store, vs.encoder(), IndexBackend::exact, 1);
  auto approx = IndexSnapshot::build(vs.store, vs.encoder(), IndexBackend::approximate, 1);
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    auto q = unit_vector(24, rng);
    auto want = exact->search(q, 5);
    auto got = approx->search(q, 5, /*beam_override=*/200);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i].memory_id == want[i].memory_id);
  }
}

TEST_CASE("approximate recall@5 at default settings") {
  VectorStore vs(4000, 32, 8);
  auto exact = IndexSnapshot::build(vs.store, vs.encoder(), IndexBackend::exact, 1);
  auto approx = IndexSnapshot::build(vs.store, vs.encoder(), IndexBackend::approximate, 1);
  Rng rng(15);
  int found = 0, total = 0;
  for (int trial = 0; trial < 40; ++trial) {
    auto q = unit_vector(32, rng);
    auto want = exact->search(q, 5);
    auto got = approx->search(q, 5);
    for (const auto& w : want) {
      ++total;
      for (const auto& g : got)
        if (g.memory_id == w.memory_id) {
          ++found;
          break;
        }
    }
  }
  CHECK(static_cast<double>(found) / total >= 0.95);
}

TEST_CASE("out-degree 1 on a collinear 3-point set stays connected") {
  VectorStore vs(3, 4, 1);
  vs.vectors[0] = {1.f, 0.f, 0.f, 0.f};
  vs.vectors[1] = {1.f, 0.f, 0.f, 0.f};
  vs.vectors[2] = {1.f, 0.f, 0.f, 0.f};
  NswConfig nsw;
  nsw.out_degree = 1;
  auto snap = IndexSnapshot::build(vs.store, vs.encoder(), IndexBackend::approximate, 1, nsw);
  auto hits = snap->search(vs.vectors[0], 3, /*beam_override=*/3);
  CHECK(hits.size() >= 1);
  CHECK(hits[0].memory_id == 0);
}

TEST_CASE("degenerate embeddings are excluded with warnings") {
  VectorStore vs(5, 8, 33);
  auto base = vs.encoder();
  auto encoder = [&](const TokenSeq& s) -> std::vector<float> {
    if (s[0] == 2) throw DegenerateEmbeddingError("degenerate embedding: constant sentence");
    return base(s);
  };
  auto snap = IndexSnapshot::build(vs.store, encoder, IndexBackend::exact, 1);
  CHECK(snap->size() == 4);
  REQUIRE(snap->warnings().size() == 1);
  CHECK(snap->warnings()[0].memory_id == 2);
  // surviving ids skip the excluded memory
  auto hits = snap->search(vs.vectors[3], 1);
  CHECK(hits[0].memory_id == 3);
}

TEST_CASE("save/load round-trips both backends") {
  VectorStore vs(50, 16, 9);
  for (auto backend : {IndexBackend::exact, IndexBackend::approximate}) {
    auto snap = IndexSnapshot::build(vs.store, vs.encoder(), backend, 7);
    std::string path = "index_roundtrip.bin";
    snap->save(path);
    auto loaded = IndexSnapshot::load(path);
    std::remove(path.c_str());
    CHECK(loaded->generation() == 7);
    CHECK(loaded->dim() == 16);
    CHECK(loaded->size() == 50);
    CHECK(loaded->backend() == backend);
    CHECK(loaded->row_checksum() == snap->row_checksum());
    Rng rng(4);
    auto q = unit_vector(16, rng);
    auto a = snap->search(q, 5);
    auto b = loaded->search(q, 5);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].memory_id == b[i].memory_id);
  }
}

TEST_CASE("snapshot rows stay stable under concurrent searches") {
  VectorStore vs(300, 16, 25);
  auto snap = IndexSnapshot::build(vs.store, vs.encoder(), IndexBackend::approximate, 1);
  auto before = snap->row_checksum();
  std::vector<std::thread> workers;
  for (int w = 0; w < 4; ++w)
    workers.emplace_back([&, w] {
      Rng rng(static_cast<std::uint64_t>(100 + w));
      for (int i = 0; i < 50; ++i) snap->search(unit_vector(16, rng), 5);
    });
  for (auto& t : workers) t.join();
  CHECK(snap->row_checksum() == before);
}

TEST_CASE("publisher hands out complete snapshots") {
  VectorStore vs(20, 8, 6);
  IndexPublisher pub;
  CHECK(pub.get() == nullptr);
  auto a = IndexSnapshot::build(vs.store, vs.encoder(), IndexBackend::exact, 1);
  pub.publish(a);
  CHECK(pub.get()->generation() == 1);
  auto b = IndexSnapshot::build(vs.store, vs.encoder(), IndexBackend::exact, 2);
  pub.publish(b);
  CHECK(pub.get()->generation() == 2);
  CHECK(a->generation() == 1);  // old snapshot untouched
}

TEST_CASE("refresh controller: interval 3000 fires exactly twice by step 6000") {
  RefreshController ctl(3000);
  int fired = 0;
  for (long step = 1; step <= 6000; ++step)
    if (ctl.should_trigger(step, false)) ++fired;
  CHECK(fired == 2);
}

TEST_CASE("refresh controller: non-positive interval never fires") {
  RefreshController never(0);
  RefreshController neg(-1);
  for (long step = 1; step <= 10000; ++step) {
    CHECK_FALSE(never.should_trigger(step, false));
    CHECK_FALSE(neg.should_trigger(step, false));
  }
}

TEST_CASE("refresh controller skips ticks while a build is running") {
  RefreshController ctl(100);
  CHECK(ctl.should_trigger(100, false));
  // tick at 200 lands mid-build: skipped, not queued
  CHECK_FALSE(ctl.should_trigger(200, true));
  CHECK_FALSE(ctl.should_trigger(250, false));
  CHECK(ctl.should_trigger(300, false));
}
