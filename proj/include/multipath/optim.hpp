#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "multipath/network.hpp"
#include "multipath/objective.hpp"
#include "multipath/rng.hpp"

namespace multipath {
inline namespace MULTIPATH_NUMERIC_NS {

/// value(t) = initial * 2^(-t / half_life).
struct Schedule {
  double initial = 1.0;
  double half_life = 10000.0;

  double at(double iteration) const;
  void validate() const;
};

struct OptimizerConfig {
  std::size_t batch_size = 128;
  /// Initial learning rate is base_learning_rate / batch_size.
  double base_learning_rate = 0.1;
  double momentum = 0.9;
  double lr_half_life = 10000.0;
  double actor_temperature = 1.0;
  double critic_temperature = 0.1;
  double temperature_half_life = 10000.0;
  bool talr = true;

  double initial_learning_rate() const { return base_learning_rate / static_cast<double>(batch_size); }
  Schedule learning_rate() const { return {initial_learning_rate(), lr_half_life}; }
  Schedule temperature(Strategy strategy) const;
  void validate() const;
};

double lr_at(const OptimizerConfig& config, std::uint64_t iteration);
double temperature_at(const OptimizerConfig& config, std::uint64_t iteration, Strategy strategy);

/// 1 / ‖p‖ over the mini-batch; empty when the node received no mass.
std::optional<double> talr_factor(std::span<const real> densities);

/// Per-node factors for a batch: TALR factors when enabled, otherwise 1 for
/// every node (nodes without mass still skip their update).
std::vector<std::optional<double>> node_factors(const MultipathNetwork& net,
                                                const PathDensity& density, bool talr);

/// SGD with momentum; the node factor scales the gradient before it enters
/// the buffer.
class SgdMomentum {
 public:
  SgdMomentum(const MultipathNetwork& net, double momentum);

  void step(MultipathNetwork& net, double learning_rate,
            std::span<const std::optional<double>> factors);

  double momentum() const { return momentum_; }
  std::span<const std::vector<real>> buffers() const { return buffers_; }
  std::vector<std::vector<real>>& mutable_buffers() { return buffers_; }

 private:
  double momentum_;
  std::vector<std::vector<real>> buffers_;
};

/// Xavier-uniform weights, zero final routing layers, zero biases, unit
/// batch-norm scale and zero shift. Resets batch-norm running moments.
void init_parameters(MultipathNetwork& net, Rng& rng);

}  // namespace MULTIPATH_NUMERIC_NS
}  // namespace multipath
