#pragma once

// Bounded wait-free single-producer single-consumer queue of fixed-width
// float rows.

#include <atomic>
#include <cstddef>
#include <span>
#include <vector>

#include "flood/error.hpp"

namespace flood {

class SpscRows {
public:
  SpscRows(std::size_t capacity, std::size_t width)
      : cap_(capacity), width_(width), data_(capacity * width) {
    if (capacity == 0 || width == 0) throw ConfigError("spsc: capacity and width must be positive");
  }

  /// Producer side. Returns false if the queue is full.
  bool try_push(std::span<const float> row) {
    if (row.size() != width_) throw ShapeError("spsc: row width mismatch");
    const std::size_t head = head_.load(std::memory_order_relaxed);
    if (head - tail_.load(std::memory_order_acquire) == cap_) return false;
    std::copy(row.begin(), row.end(), data_.begin() + static_cast<long>((head % cap_) * width_));
    head_.store(head + 1, std::memory_order_release);
    return true;
  }

  /// Consumer side. Returns false if the queue is empty.
  bool try_pop(std::vector<float>& row) {
    const std::size_t tail = tail_.load(std::memory_order_relaxed);
    if (tail == head_.load(std::memory_order_acquire)) return false;
    const auto it = data_.begin() + static_cast<long>((tail % cap_) * width_);
    row.assign(it, it + static_cast<long>(width_));
    tail_.store(tail + 1, std::memory_order_release);
    return true;
  }

  std::size_t capacity() const { return cap_; }
  std::size_t width() const { return width_; }

private:
  std::size_t cap_, width_;
  std::vector<float> data_;
  alignas(64) std::atomic<std::size_t> head_{0};
  alignas(64) std::atomic<std::size_t> tail_{0};
};

} // namespace flood
