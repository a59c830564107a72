#pragma once

#include <array>
#include <bit>
#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <memory>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "gridgnn/grid.hpp"

namespace gridgnn {

enum class Precision { kFp32, kBf16Roundtrip };

enum class Phase : int { kSampling = 0, kForward, kBackward, kDpSync, kOther };
inline constexpr int kNumPhases = 5;

/// Rounds an fp32 value to bfloat16 (8-bit exponent, 7-bit fraction) with
/// round-to-nearest-even, returned as fp32.
inline float bf16_round(float x) {
  std::uint32_t u = std::bit_cast<std::uint32_t>(x);
  if ((u & 0x7f800000u) == 0x7f800000u) {
    // Inf/NaN: truncate mantissa, keep a payload bit for NaN.
    std::uint32_t r = u & 0xffff0000u;
    if ((u & 0x007fffffu) != 0 && (r & 0x007f0000u) == 0) r |= 0x00400000u;
    return std::bit_cast<float>(r);
  }
  const std::uint32_t lsb = (u >> 16) & 1u;
  return std::bit_cast<float>((u + 0x7fffu + lsb) & 0xffff0000u);
}

struct CommTimeout : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CommContract : std::logic_error {
  using std::logic_error::logic_error;
};

/// Caps the number of concurrently computing workers. Ranks release their slot
/// while blocked at a rendezvous so collectives make progress even when fewer
/// OS threads than virtual ranks are allowed.
class WorkerSlots {
 public:
  explicit WorkerSlots(int cap) : cap_(cap) {}

  void acquire() {
    if (cap_ <= 0) return;
    std::unique_lock lk(m_);
    cv_.wait(lk, [&] { return used_ < cap_; });
    ++used_;
  }
  void release() {
    if (cap_ <= 0) return;
    std::lock_guard lk(m_);
    --used_;
    cv_.notify_one();
  }

 private:
  int cap_;
  int used_ = 0;
  std::mutex m_;
  std::condition_variable cv_;
};

/// Per-rank instrumentation. Each rank writes only its own slot; snapshots are
/// taken while the grid is quiescent (after a barrier or join).
struct RankStats {
  std::array<std::array<std::uint64_t, kNumPhases>, kNumAxes> bytes{};
  std::array<std::uint64_t, kNumAxes> allreduce_calls{};
  std::array<std::uint64_t, kNumAxes> allgather_calls{};
  std::uint64_t sampled_nnz_extracted = 0;
  std::uint64_t sampled_nnz_kept = 0;

  std::uint64_t bytes_on(Axis a) const {
    std::uint64_t s = 0;
    for (auto b : bytes[static_cast<std::size_t>(static_cast<int>(a))]) s += b;
    return s;
  }
  std::uint64_t phase_bytes(Phase p) const {
    std::uint64_t s = 0;
    for (const auto& ax : bytes) s += ax[static_cast<std::size_t>(static_cast<int>(p))];
    return s;
  }
};

struct CommStats {
  std::array<std::array<std::uint64_t, kNumPhases>, kNumAxes> bytes{};
  std::array<std::uint64_t, kNumAxes> allreduce_calls{};
  std::array<std::uint64_t, kNumAxes> allgather_calls{};

  std::uint64_t bytes_on(Axis a) const {
    std::uint64_t s = 0;
    for (auto b : bytes[static_cast<std::size_t>(static_cast<int>(a))]) s += b;
    return s;
  }
  std::uint64_t sampling_bytes() const {
    std::uint64_t s = 0;
    for (const auto& ax : bytes) s += ax[static_cast<std::size_t>(0)];
    return s;
  }
  std::uint64_t total_bytes() const {
    std::uint64_t s = 0;
    for (const auto& ax : bytes)
      for (auto b : ax) s += b;
    return s;
  }
};

namespace detail {

struct ChannelMember {
  const void* ptr = nullptr;
  std::size_t count = 0;
};

/// Reusable rendezvous point for one process group. All members must arrive
/// before any returns; the last arriver runs the reduction once, in a fixed
/// member order, so every member copies out bit-identical bytes.
class Channel {
 public:
  explicit Channel(int size) : size_(size), members_(static_cast<std::size_t>(size)) {}

  template <class ComputeFn, class CopyOutFn>
  void rendezvous(int slot, ChannelMember m, ComputeFn&& compute, CopyOutFn&& copy_out,
                  std::chrono::milliseconds timeout, WorkerSlots* slots) {
    if (size_ == 1) {
      members_[0] = m;
      compute(*this);
      if (!error_.empty()) {
        std::string e = std::move(error_);
        error_.clear();
        throw CommContract(e);
      }
      copy_out(*this);
      return;
    }
    if (slots) slots->release();
    std::string pending_error;
    {
      std::unique_lock lk(m_);
      const std::uint64_t g0 = gen_;
      members_[static_cast<std::size_t>(slot)] = m;
      if (++arrived_ == size_) {
        compute(*this);
        ready_ = true;
        cv_.notify_all();
      } else if (!cv_.wait_for(lk, timeout, [&] { return ready_ && gen_ == g0; })) {
        throw CommTimeout("collective timed out: not all group members arrived");
      }
      pending_error = error_;
      if (pending_error.empty()) copy_out(*this);
      if (++departed_ == size_) {
        arrived_ = departed_ = 0;
        ready_ = false;
        error_.clear();
        ++gen_;
        cv_.notify_all();
      } else if (!cv_.wait_for(lk, timeout, [&] { return gen_ != g0; })) {
        throw CommTimeout("collective timed out during departure");
      }
    }
    if (slots) slots->acquire();
    if (!pending_error.empty()) throw CommContract(pending_error);
  }

  int size() const { return size_; }
  const ChannelMember& member(int i) const { return members_[static_cast<std::size_t>(i)]; }
  void fail(std::string msg) { error_ = std::move(msg); }
  std::vector<std::byte> result;

 private:
  int size_;
  std::vector<ChannelMember> members_;
  std::mutex m_;
  std::condition_variable cv_;
  int arrived_ = 0;
  int departed_ = 0;
  bool ready_ = false;
  std::uint64_t gen_ = 0;
  std::string error_;
};

}  // namespace detail

struct CommConfig {
  std::chrono::milliseconds timeout{60000};
  int max_worker_threads = 0;  // <= 0: uncapped
};

class RankComm;

/// Shared in-process state backing the simulated collectives of one grid.
class Communicator {
 public:
  explicit Communicator(const DeviceGrid& grid, CommConfig cfg = {})
      : grid_(grid), cfg_(cfg), slots_(cfg.max_worker_threads),
        stats_(static_cast<std::size_t>(grid.total())),
        barrier_(grid.total()) {
    for (int a = 0; a < kNumAxes; ++a) {
      const auto axis = static_cast<Axis>(a);
      channels_[a].reserve(static_cast<std::size_t>(grid_.num_groups(axis)));
      for (int g = 0; g < grid_.num_groups(axis); ++g)
        channels_[a].push_back(std::make_unique<detail::Channel>(grid_.dim(axis)));
    }
  }

  const DeviceGrid& grid() const { return grid_; }
  WorkerSlots& slots() { return slots_; }
  const CommConfig& config() const { return cfg_; }

  RankStats& rank_stats(int rank) { return stats_[static_cast<std::size_t>(rank)]; }
  const RankStats& rank_stats(int rank) const { return stats_[static_cast<std::size_t>(rank)]; }

  CommStats snapshot() const {
    CommStats s;
    for (const auto& r : stats_) {
      for (int a = 0; a < kNumAxes; ++a) {
        for (int p = 0; p < kNumPhases; ++p)
          s.bytes[static_cast<std::size_t>(a)][static_cast<std::size_t>(p)] +=
              r.bytes[static_cast<std::size_t>(a)][static_cast<std::size_t>(p)];
        s.allreduce_calls[static_cast<std::size_t>(a)] += r.allreduce_calls[static_cast<std::size_t>(a)];
        s.allgather_calls[static_cast<std::size_t>(a)] += r.allgather_calls[static_cast<std::size_t>(a)];
      }
    }
    return s;
  }

  detail::Channel& channel(Axis axis, int rank) {
    return *channels_[static_cast<int>(axis)][static_cast<std::size_t>(
        grid_.group_id(axis, rank))];
  }
  detail::Channel& barrier_channel() { return barrier_; }

 private:
  DeviceGrid grid_;
  CommConfig cfg_;
  WorkerSlots slots_;
  std::vector<RankStats> stats_;
  std::array<std::vector<std::unique_ptr<detail::Channel>>, kNumAxes> channels_;
  detail::Channel barrier_;
};

/// A rank's handle on the communicator: collectives plus phase attribution.
class RankComm {
 public:
  RankComm(Communicator& comm, int rank)
      : comm_(&comm), rank_(rank), coord_(comm.grid().coord_of(rank)) {}

  int rank() const { return rank_; }
  const Coord4& coord() const { return coord_; }
  int coord_on(Axis a) const { return coord_[static_cast<std::size_t>(static_cast<int>(a))]; }
  const DeviceGrid& grid() const { return comm_->grid(); }
  Communicator& communicator() { return *comm_; }
  RankStats& stats() { return comm_->rank_stats(rank_); }

  Phase phase = Phase::kOther;

  /// In-place sum over the rank's group along `axis`, accumulated in ascending
  /// axis-coordinate order. With kBf16Roundtrip each member's contribution is
  /// rounded to bfloat16 first; accumulation and the result stay in T.
  template <class T>
  void all_reduce(Axis axis, std::span<T> buf, Precision prec = Precision::kFp32) {
    auto& ch = comm_->channel(axis, rank_);
    const int g = ch.size();
    const std::size_t count = buf.size();
    auto compute = [count, prec](detail::Channel& c) {
      for (int i = 0; i < c.size(); ++i)
        if (c.member(i).count != count) {
          c.fail("all_reduce: mismatched buffer lengths across group members");
          return;
        }
      c.result.assign(count * sizeof(T), std::byte{0});
      T* out = reinterpret_cast<T*>(c.result.data());
      for (int i = 0; i < c.size(); ++i) {
        const T* src = static_cast<const T*>(c.member(i).ptr);
        if (prec == Precision::kBf16Roundtrip) {
          if constexpr (std::is_same_v<T, float>) {
            for (std::size_t k = 0; k < count; ++k) out[k] += bf16_round(src[k]);
          } else {
            for (std::size_t k = 0; k < count; ++k) out[k] += src[k];
          }
        } else {
          for (std::size_t k = 0; k < count; ++k) out[k] += src[k];
        }
      }
    };
    auto copy_out = [&buf](detail::Channel& c) {
      std::memcpy(buf.data(), c.result.data(), c.result.size());
    };
    ch.rendezvous(coord_on(axis), {buf.data(), count}, compute, copy_out,
                  comm_->config().timeout, &comm_->slots());
    charge_all_reduce(axis, count, elem_bytes<T>(prec), g);
  }

  /// In-place elementwise maximum over the rank's group along `axis`. Always
  /// full precision; used by numerically sensitive reductions.
  template <class T>
  void all_reduce_max(Axis axis, std::span<T> buf) {
    auto& ch = comm_->channel(axis, rank_);
    const int g = ch.size();
    const std::size_t count = buf.size();
    auto compute = [count](detail::Channel& c) {
      for (int i = 0; i < c.size(); ++i)
        if (c.member(i).count != count) {
          c.fail("all_reduce_max: mismatched buffer lengths across group members");
          return;
        }
      c.result.resize(count * sizeof(T));
      T* out = reinterpret_cast<T*>(c.result.data());
      std::memcpy(out, c.member(0).ptr, count * sizeof(T));
      for (int i = 1; i < c.size(); ++i) {
        const T* src = static_cast<const T*>(c.member(i).ptr);
        for (std::size_t k = 0; k < count; ++k)
          if (src[k] > out[k]) out[k] = src[k];
      }
    };
    auto copy_out = [&buf](detail::Channel& c) {
      std::memcpy(buf.data(), c.result.data(), c.result.size());
    };
    ch.rendezvous(coord_on(axis), {buf.data(), count}, compute, copy_out,
                  comm_->config().timeout, &comm_->slots());
    charge_all_reduce(axis, count, sizeof(T), g);
  }

  /// Gathers every member's shard, returned per member in axis order. Shards
  /// may differ in length.
  template <class T>
  std::vector<std::vector<T>> all_gather(Axis axis, std::span<const T> shard) {
    auto& ch = comm_->channel(axis, rank_);
    const int g = ch.size();
    std::vector<std::vector<T>> parts;
    auto compute = [](detail::Channel& c) {
      std::size_t total = 0;
      for (int i = 0; i < c.size(); ++i) total += c.member(i).count;
      c.result.resize(total * sizeof(T));
      std::byte* out = c.result.data();
      for (int i = 0; i < c.size(); ++i) {
        const std::size_t len = c.member(i).count * sizeof(T);
        if (len > 0) std::memcpy(out, c.member(i).ptr, len);
        out += len;
      }
    };
    std::uint64_t total_elems = 0;
    auto copy_out = [&parts, &total_elems](detail::Channel& c) {
      parts.resize(static_cast<std::size_t>(c.size()));
      const std::byte* src = c.result.data();
      for (int i = 0; i < c.size(); ++i) {
        const std::size_t n = c.member(i).count;
        parts[static_cast<std::size_t>(i)].resize(n);
        if (n > 0) std::memcpy(parts[static_cast<std::size_t>(i)].data(), src, n * sizeof(T));
        src += n * sizeof(T);
        total_elems += n;
      }
    };
    ch.rendezvous(coord_on(axis), {shard.data(), shard.size()}, compute, copy_out,
                  comm_->config().timeout, &comm_->slots());
    charge_all_gather(axis, total_elems * sizeof(T), g);
    return parts;
  }

  /// Global barrier across all ranks of the grid.
  void barrier() {
    auto& ch = comm_->barrier_channel();
    ch.rendezvous(rank_, {nullptr, 0}, [](detail::Channel&) {}, [](detail::Channel&) {},
                  comm_->config().timeout, &comm_->slots());
  }

 private:
  template <class T>
  static std::size_t elem_bytes(Precision prec) {
    if (prec == Precision::kBf16Roundtrip && std::is_same_v<T, float>) return 2;
    return sizeof(T);
  }

  // Accounting model: a collective in a singleton group is free. An all-reduce
  // charges each member payload * (g-1)/g bytes (ring-equivalent volume); an
  // all-gather charges each member the total gathered payload.
  void charge_all_reduce(Axis axis, std::size_t count, std::size_t ebytes, int g) {
    auto& st = stats();
    const auto a = static_cast<std::size_t>(static_cast<int>(axis));
    const auto p = static_cast<std::size_t>(static_cast<int>(phase));
    if (g > 1)
      st.bytes[a][p] += static_cast<std::uint64_t>(count) * ebytes *
                        static_cast<std::uint64_t>(g - 1) / static_cast<std::uint64_t>(g);
    st.allreduce_calls[a] += 1;
  }
  void charge_all_gather(Axis axis, std::uint64_t payload_bytes, int g) {
    auto& st = stats();
    const auto a = static_cast<std::size_t>(static_cast<int>(axis));
    const auto p = static_cast<std::size_t>(static_cast<int>(phase));
    if (g > 1) st.bytes[a][p] += payload_bytes;
    st.allgather_calls[a] += 1;
  }

  Communicator* comm_;
  int rank_;
  Coord4 coord_;
};

/// Scoped phase attribution for communication accounting.
class PhaseScope {
 public:
  PhaseScope(RankComm& rc, Phase p) : rc_(rc), prev_(rc.phase) { rc_.phase = p; }
  ~PhaseScope() { rc_.phase = prev_; }
  PhaseScope(const PhaseScope&) = delete;
  PhaseScope& operator=(const PhaseScope&) = delete;

 private:
  RankComm& rc_;
  Phase prev_;
};

}  // namespace gridgnn
