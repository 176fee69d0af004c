#pragma once

#include "vrwkv/core.hpp"

#include <cstdint>
#include <utility>

namespace vrwkv::memory {

/// Counts live 64-bit values allocated by instrumented kernels.
///
/// The arena does not own memory. Kernels report each scratch or output
/// buffer through a CountedMatrix; the arena tracks the running total and
/// its high-water mark.
class ElementArena {
 public:
  void acquire(std::int64_t elements) {
    live_ += elements;
    if (live_ > peak_) peak_ = live_;
  }
  void release(std::int64_t elements) { live_ -= elements; }

  std::int64_t live() const { return live_; }
  std::int64_t peak() const { return peak_; }
  void reset_peak() { peak_ = live_; }

 private:
  std::int64_t live_ = 0;
  std::int64_t peak_ = 0;
};

/// The arena active on this thread, or nullptr.
ElementArena* active_arena();

/// Like active_arena() but throws InstrumentationError when none is active.
ElementArena& require_arena();

/// Activates an arena for the current thread for the lifetime of the scope.
/// Scopes nest; the previous arena is restored on destruction.
class ArenaScope {
 public:
  explicit ArenaScope(ElementArena& arena);
  ~ArenaScope();
  ArenaScope(const ArenaScope&) = delete;
  ArenaScope& operator=(const ArenaScope&) = delete;

 private:
  ElementArena* previous_;
};

/// Charges a fixed element count to the active arena for the scope's
/// lifetime. Used for values whose storage is owned elsewhere.
class Charge {
 public:
  explicit Charge(std::int64_t elements) : arena_(active_arena()), elements_(elements) {
    if (arena_ != nullptr) arena_->acquire(elements_);
  }
  Charge(const Charge&) = delete;
  Charge& operator=(const Charge&) = delete;
  ~Charge() {
    if (arena_ != nullptr) arena_->release(elements_);
  }

 private:
  ElementArena* arena_;
  std::int64_t elements_;
};

/// A dense matrix whose element count is charged to the arena that was
/// active when it was created. Without an active arena it is a plain matrix.
template <typename Scalar>
class CountedMatrix {
 public:
  CountedMatrix() = default;
  CountedMatrix(Index rows, Index cols) : value_(rows, cols), arena_(active_arena()) {
    if (arena_ != nullptr) arena_->acquire(value_.size());
  }
  CountedMatrix(const CountedMatrix&) = delete;
  CountedMatrix& operator=(const CountedMatrix&) = delete;
  CountedMatrix(CountedMatrix&& other) noexcept
      : value_(std::move(other.value_)), arena_(std::exchange(other.arena_, nullptr)) {}
  CountedMatrix& operator=(CountedMatrix&& other) noexcept {
    if (this != &other) {
      release();
      value_ = std::move(other.value_);
      arena_ = std::exchange(other.arena_, nullptr);
    }
    return *this;
  }
  ~CountedMatrix() { release(); }

  RowMatrix<Scalar>& get() { return value_; }
  const RowMatrix<Scalar>& get() const { return value_; }
  RowMatrix<Scalar>& operator*() { return value_; }
  const RowMatrix<Scalar>& operator*() const { return value_; }
  RowMatrix<Scalar>* operator->() { return &value_; }
  const RowMatrix<Scalar>* operator->() const { return &value_; }

  /// Drops the arena charge and hands out the matrix.
  RowMatrix<Scalar> take() {
    release();
    return std::move(value_);
  }

 private:
  void release() {
    if (arena_ != nullptr) {
      arena_->release(value_.size());
      arena_ = nullptr;
    }
  }

  RowMatrix<Scalar> value_;
  ElementArena* arena_ = nullptr;
};

}  // namespace vrwkv::memory
