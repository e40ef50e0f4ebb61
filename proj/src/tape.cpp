#include "multipath/tape.hpp"

#include <atomic>

#include "multipath/errors.hpp"

namespace multipath {
inline namespace MULTIPATH_NUMERIC_NS {

namespace {
std::atomic<std::uint64_t> next_tape_id{1};
}

Tape::Tape(Mode mode) : mode_(mode), id_(next_tape_id.fetch_add(1)) {}

bool Tape::wants(std::initializer_list<const Tensor*> inputs) const {
  if (!recording()) return false;
  for (const Tensor* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

bool Tape::wants(const std::vector<Tensor>& inputs) const {
  if (!recording()) return false;
  for (const Tensor& t : inputs)
    if (t.defined() && t.requires_grad()) return true;
  return false;
}

void Tape::record(std::string_view op, std::vector<Tensor> inputs, Tensor& output,
                  std::function<void()> backward) {
  output.impl_->requires_grad = true;
  output.impl_->producer = id_;
  records_.push_back(Record{std::string(op), std::move(inputs), output, std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.producer() != id_)
    throw GraphError("backward: loss tensor was not produced by this tape");
  if (loss.numel() != 1)
    throw GraphError("backward: loss must be a scalar, got " + to_string(loss.shape()));

  for (Record& r : records_) r.output.impl_->grad.clear();
  Tensor seed = loss;
  seed.ensure_grad()[0] = real(1);

  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward();
  }
}

std::optional<std::string> Tape::first_non_finite() const {
  for (std::size_t i = 0; i < records_.size(); ++i) {
    if (!all_finite(records_[i].output.data()))
      return records_[i].op + " (tape position " + std::to_string(i) + ", shape " +
             to_string(records_[i].output.shape()) + ")";
  }
  return std::nullopt;
}

std::vector<std::string> Tape::op_names() const {
  std::vector<std::string> names;
  names.reserve(records_.size());
  for (const Record& r : records_) names.push_back(r.op);
  return names;
}

void Tape::for_each_record(const RecordVisitor& visit) const {
  for (const Record& r : records_) visit(r.op, r.inputs, r.output);
}

}  // namespace MULTIPATH_NUMERIC_NS
}  // namespace multipath
