#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace nap {

using Shape = std::vector<std::size_t>;

/// Cache-line aligned allocator. Eigen picks its vectorized loop split from
/// the runtime address, so unaligned buffers give run-to-run rounding noise.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <class U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

using AlignedVector = std::vector<double, AlignedAllocator<double>>;

std::size_t shape_size(const Shape& shape) noexcept;
std::string shape_to_string(const Shape& shape);

/// Dense row-major array of doubles with an arbitrary number of axes.
///
/// A rank-0 tensor (empty shape) holds exactly one value and is used for
/// scalar losses.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  /// Builds a rank-2 tensor from nested rows; all rows must have equal length.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor identity(std::size_t n);

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
  [[nodiscard]] std::size_t size() const noexcept { return values_.size(); }
  [[nodiscard]] std::size_t dim(std::size_t axis) const;
  [[nodiscard]] bool empty() const noexcept { return values_.empty(); }

  [[nodiscard]] std::span<double> values() noexcept { return values_; }
  [[nodiscard]] std::span<const double> values() const noexcept { return values_; }
  [[nodiscard]] double* data() noexcept { return values_.data(); }
  [[nodiscard]] const double* data() const noexcept { return values_.data(); }

  double& operator[](std::size_t i) noexcept { return values_[i]; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }

  /// Multi-index access with bounds checking.
  [[nodiscard]] double& at(std::initializer_list<std::size_t> index);
  [[nodiscard]] double at(std::initializer_list<std::size_t> index) const;

  [[nodiscard]] double item() const;

  /// Same values under a new shape of equal size.
  [[nodiscard]] Tensor reshaped(Shape shape) const;
  void reshape(Shape shape);

  void fill(double value) noexcept;
  [[nodiscard]] bool all_finite() const noexcept;

  /// Throws NumericError naming `what` if any value is NaN or infinite.
  void require_finite(const std::string& what) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  [[nodiscard]] std::size_t flat_index(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  AlignedVector values_;
};

[[nodiscard]] double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace nap
