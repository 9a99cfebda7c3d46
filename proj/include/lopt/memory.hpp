#pragma once

#include <atomic>
#include <cstddef>
#include <map>
#include <new>
#include <string>

namespace lopt::memory {

namespace detail {
inline std::atomic<std::size_t> g_live{0};
inline std::atomic<std::size_t> g_peak{0};

inline void on_alloc(std::size_t bytes) noexcept {
  const std::size_t now = g_live.fetch_add(bytes, std::memory_order_relaxed) + bytes;
  std::size_t seen = g_peak.load(std::memory_order_relaxed);
  while (now > seen && !g_peak.compare_exchange_weak(seen, now, std::memory_order_relaxed)) {
  }
}

inline void on_free(std::size_t bytes) noexcept { g_live.fetch_sub(bytes, std::memory_order_relaxed); }
}  // namespace detail

/// Bytes currently held by tensor buffers.
inline std::size_t live_bytes() noexcept { return detail::g_live.load(std::memory_order_relaxed); }

/// High-water mark of live tensor bytes since the last reset_peak().
inline std::size_t peak_bytes() noexcept { return detail::g_peak.load(std::memory_order_relaxed); }

inline void reset_peak() noexcept { detail::g_peak.store(live_bytes(), std::memory_order_relaxed); }

/// Allocator used for every tensor buffer so that activation, gradient and
/// optimizer-state bytes show up in the live/peak counters.
template <typename T>
struct TrackedAllocator {
  using value_type = T;

  TrackedAllocator() noexcept = default;
  template <typename U>
  TrackedAllocator(const TrackedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    auto* p = static_cast<T*>(::operator new(n * sizeof(T)));
    detail::on_alloc(n * sizeof(T));
    return p;
  }

  void deallocate(T* p, std::size_t n) noexcept {
    detail::on_free(n * sizeof(T));
    ::operator delete(p);
  }

  template <typename U>
  bool operator==(const TrackedAllocator<U>&) const noexcept {
    return true;
  }
};

/// Peak live bytes recorded per named phase of a training step.
struct PhaseProfile {
  std::map<std::string, std::size_t> phase_peak;
  std::size_t baseline = 0;  // live bytes when the step began

  std::size_t overall_peak() const {
    std::size_t best = 0;
    for (const auto& [_, v] : phase_peak) best = best > v ? best : v;
    return best;
  }
};

/// Records the high-water mark of the enclosed region into a PhaseProfile.
class PhaseScope {
 public:
  PhaseScope(PhaseProfile& profile, std::string name) : profile_(profile), name_(std::move(name)) {
    reset_peak();
  }
  ~PhaseScope() {
    auto& slot = profile_.phase_peak[name_];
    slot = slot > peak_bytes() ? slot : peak_bytes();
  }
  PhaseScope(const PhaseScope&) = delete;
  PhaseScope& operator=(const PhaseScope&) = delete;

 private:
  PhaseProfile& profile_;
  std::string name_;
};

}  // namespace lopt::memory
