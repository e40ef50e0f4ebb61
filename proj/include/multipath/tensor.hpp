#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "multipath/numeric.hpp"

namespace multipath {
inline namespace MULTIPATH_NUMERIC_NS {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major array with an optional gradient buffer.
///
/// Tensors are shared handles: copying a Tensor aliases the same storage, the
/// way parameters and tape-recorded intermediates need to. Use clone() for an
/// independent copy. A rank-0 shape ({}) holds one scalar.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, real fill = real(0));
  Tensor(Shape shape, std::vector<real> values);

  static Tensor scalar(real value);
  /// Zero-filled tensor that accumulates gradients.
  static Tensor parameter(Shape shape);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<real> data();
  std::span<const real> data() const;
  real item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<real> grad();
  std::span<const real> grad() const;
  /// Allocates a zeroed gradient when absent, then returns it.
  std::span<real> ensure_grad() const;
  void zero_grad();

  /// Independent copy of the values; never requires grad.
  Tensor clone() const;
  bool same(const Tensor& other) const noexcept { return impl_ == other.impl_; }

  /// Identifier of the tape that produced this tensor, 0 for leaves.
  std::uint64_t producer() const;

 private:
  friend class Tape;
  struct Impl {
    Shape shape;
    std::vector<real> values;
    std::vector<real> grad;
    bool requires_grad = false;
    std::uint64_t producer = 0;
  };
  std::shared_ptr<Impl> impl_;
};

bool all_finite(std::span<const real> values);

}  // namespace MULTIPATH_NUMERIC_NS
}  // namespace multipath
