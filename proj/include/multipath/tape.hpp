#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "multipath/tensor.hpp"

namespace multipath {
inline namespace MULTIPATH_NUMERIC_NS {

/// Ordered record of differentiable operations for reverse-mode accumulation.
///
/// Operations record themselves only while the tape is recording and at least
/// one input requires a gradient. A record's saved context is captured by
/// value in its closure and never modified afterwards.
class Tape {
 public:
  enum class Mode { record, inference };

  explicit Tape(Mode mode = Mode::record);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return mode_ == Mode::record; }
  std::uint64_t id() const noexcept { return id_; }
  std::size_t size() const noexcept { return records_.size(); }

  /// True when an operation over these inputs should be recorded.
  bool wants(std::initializer_list<const Tensor*> inputs) const;
  bool wants(const std::vector<Tensor>& inputs) const;

  /// Marks `output` as produced by this tape and stores the backward closure.
  void record(std::string_view op, std::vector<Tensor> inputs, Tensor& output,
              std::function<void()> backward);

  /// Populates gradients of every requires-grad tensor reachable from `loss`.
  /// Leaf gradients accumulate across calls; intermediate gradients are reset.
  void backward(const Tensor& loss);

  /// Name and position of the first recorded operation whose output holds a
  /// non-finite value.
  std::optional<std::string> first_non_finite() const;

  std::vector<std::string> op_names() const;

  using RecordVisitor =
      std::function<void(std::string_view op, const std::vector<Tensor>& inputs, const Tensor& output)>;
  /// Visits every record in tape order.
  void for_each_record(const RecordVisitor& visit) const;

 private:
  struct Record {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  Mode mode_;
  std::uint64_t id_;
  std::vector<Record> records_;
};

inline void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

}  // namespace MULTIPATH_NUMERIC_NS
}  // namespace multipath
