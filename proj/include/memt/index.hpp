#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "memt/corpus.hpp"

// Maximum Inner Product Search over TM embeddings. Two backends behind one
// snapshot type: an exact brute-force scan (the oracle) and a single-layer
// navigable-small-world graph over the raw vectors. Snapshots are immutable
// once built and swapped atomically by the publisher.

namespace memt {

enum class IndexBackend { exact, approximate };

struct SearchHit {
  int memory_id;
  float score;  // inner product against the snapshot's stored row
};

struct NswConfig {
  int out_degree = 32;   // graph degree
  int search_beam = 64;  // beam width at query time
  int build_beam = 200;  // beam width while inserting
};

struct BuildWarning {
  int memory_id;
  std::string message;
};

class IndexSnapshot {
 public:
  long generation() const { return generation_; }
  int dim() const { return dim_; }
  int size() const { return static_cast<int>(ids_.size()); }
  IndexBackend backend() const { return backend_; }
  const NswConfig& nsw() const { return nsw_; }
  const std::vector<BuildWarning>& warnings() const { return warnings_; }

  // Hits in non-increasing score order, ties broken by ascending memory id.
  // beam_override > 0 widens/narrows the approximate search beam.
  std::vector<SearchHit> search(const std::vector<float>& query, int m,
                                int beam_override = 0) const;

  const float* row(int position) const { return rows_.data() + static_cast<std::size_t>(position) * dim_; }
  int memory_id_at(int position) const { return ids_[static_cast<std::size_t>(position)]; }

  // Stable checksum over the stored rows (snapshot immutability checks).
  std::uint64_t row_checksum() const;

  void save(const std::string& path) const;
  static std::shared_ptr<const IndexSnapshot> load(const std::string& path);

  // Encodes every memory with the supplied encoder; memories that fail with a
  // degenerate embedding are excluded and recorded as warnings.
  static std::shared_ptr<const IndexSnapshot> build(
      const std::vector<TokenSeq>& store,
      const std::function<std::vector<float>(const TokenSeq&)>& encode_tgt, IndexBackend backend,
      long generation, const NswConfig& nsw = {});

 private:
  std::vector<SearchHit> search_exact(const std::vector<float>& query, int m) const;
  std::vector<SearchHit> search_nsw(const std::vector<float>& query, int m, int beam) const;
  std::vector<int> search_nsw_partial(const std::vector<float>& query, int m, int beam,
                                      int limit) const;
  void build_graph();

  long generation_ = 0;
  int dim_ = 0;
  IndexBackend backend_ = IndexBackend::exact;
  NswConfig nsw_;
  std::vector<float> rows_;       // row-major, one row per surviving memory
  std::vector<int> ids_;          // memory id per row
  std::vector<std::vector<int>> adjacency_;  // row positions, approximate backend only
  std::vector<BuildWarning> warnings_;
};

// Atomic snapshot publication: readers always observe a complete snapshot.
class IndexPublisher {
 public:
  void publish(std::shared_ptr<const IndexSnapshot> snap) {
    std::lock_guard<std::mutex> lock(m_);
    current_ = std::move(snap);
  }

  std::shared_ptr<const IndexSnapshot> get() const {
    std::lock_guard<std::mutex> lock(m_);
    return current_;
  }

 private:
  mutable std::mutex m_;
  std::shared_ptr<const IndexSnapshot> current_;
};

// Skip-not-queue refresh policy: a tick fires when the step counter crosses a
// multiple of the interval and no build is running; a tick that lands while a
// build is in flight is skipped, not queued. interval <= 0 means never
// (fixed-index mode).
class RefreshController {
 public:
  explicit RefreshController(long interval_steps) : interval_(interval_steps) {}

  bool should_trigger(long current_step, bool build_running) {
    if (interval_ <= 0) return false;
    if (current_step / interval_ <= last_fired_multiple_) return false;
    if (build_running) {
      last_fired_multiple_ = current_step / interval_;  // skip, don't queue
      return false;
    }
    last_fired_multiple_ = current_step / interval_;
    return true;
  }

  long interval() const { return interval_; }

 private:
  long interval_;
  long last_fired_multiple_ = 0;
};

}  // namespace memt
