#include "multipath/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "multipath/errors.hpp"

namespace multipath {
inline namespace MULTIPATH_NUMERIC_NS {

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, real fill) : impl_(std::make_shared<Impl>()) {
  impl_->values.assign(element_count(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<real> values) : impl_(std::make_shared<Impl>()) {
  if (element_count(shape) != values.size())
    throw ShapeError("tensor: shape " + to_string(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  impl_->shape = std::move(shape);
  impl_->values = std::move(values);
}

Tensor Tensor::scalar(real value) { return Tensor(Shape{}, std::vector<real>{value}); }

Tensor Tensor::parameter(Shape shape) {
  Tensor t(std::move(shape));
  t.impl_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size())
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " +
                     to_string(impl_->shape));
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->values.size(); }

std::span<real> Tensor::data() { return impl_->values; }
std::span<const real> Tensor::data() const { return impl_->values; }

real Tensor::item() const {
  if (numel() != 1) throw ShapeError("tensor: item() on " + to_string(shape()));
  return impl_->values[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { impl_->requires_grad = flag; }
bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }
std::span<real> Tensor::grad() { return impl_->grad; }
std::span<const real> Tensor::grad() const { return impl_->grad; }

std::span<real> Tensor::ensure_grad() const {
  if (impl_->grad.size() != impl_->values.size()) impl_->grad.assign(impl_->values.size(), real(0));
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), real(0));
}

Tensor Tensor::clone() const { return Tensor(impl_->shape, impl_->values); }

std::uint64_t Tensor::producer() const { return impl_ ? impl_->producer : 0; }

bool all_finite(std::span<const real> values) {
  for (real v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace MULTIPATH_NUMERIC_NS
}  // namespace multipath
