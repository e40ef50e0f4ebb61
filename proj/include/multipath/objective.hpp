#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "multipath/network.hpp"
#include "multipath/routing.hpp"

namespace multipath {
inline namespace MULTIPATH_NUMERIC_NS {

enum class ErrorKind { cross_entropy, classification_error };

/// Cost of computation per multiply-accumulate. `per_example`, when
/// non-empty, overrides k_cpt for each example of the batch.
struct CostModel {
  double k_cpt = 0.0;
  ErrorKind error_kind = ErrorKind::cross_entropy;
  std::vector<double> per_example;

  double k_for(std::size_t example) const;
  void validate(std::size_t batch) const;
};

double c_cpt(std::uint64_t n_ops, double k_cpt);
double c_err(std::span<const real> logits, int label, ErrorKind kind);

/// Per-example error at every terminal, values only: errors[node][i].
/// Non-terminal nodes hold empty rows.
using TerminalErrors = std::vector<std::vector<double>>;

TerminalErrors terminal_errors(const MultipathNetwork& net, std::span<const Tensor> logits,
                               std::span<const int> labels, ErrorKind kind);
/// Sampled-mode variant: only the examples that reached a terminal are filled.
TerminalErrors terminal_errors(const MultipathNetwork& net, const SampledForward& sampled,
                               std::span<const int> labels, ErrorKind kind);

/// Σ_i [Σ_t p_t^i·CE(logits_t^i) + k_i·Σ_ℓ p_ℓ^i·n_ops(ℓ)], differentiable in
/// densities and logits.
Tensor expected_inference_cost(Tape& tape, const MultipathNetwork& net,
                               const PathDensity& density, std::span<const Tensor> logits,
                               std::span<const int> labels, const CostModel& cost);

enum class UtilityKind { pragmatic, optimistic };

/// u[j][i*sinks + c] for junction node j, example i and sink c.
class UtilityTargets {
 public:
  UtilityTargets(const MultipathNetwork& net, std::size_t batch, UtilityKind kind);

  UtilityKind kind() const { return kind_; }
  std::size_t batch() const { return batch_; }
  std::size_t sinks(int junction) const;
  bool available(int junction, std::size_t example, std::size_t sink) const;
  /// Throws AvailabilityError for sinks the example never visited.
  double at(int junction, std::size_t example, std::size_t sink) const;
  void set(int junction, std::size_t example, std::size_t sink, double value);

  /// Row-major [batch, sinks] values and availability mask (1 or 0) for a junction.
  Tensor values(int junction) const;
  Tensor mask(int junction) const;

 private:
  std::size_t index(int junction, std::size_t example, std::size_t sink) const;

  UtilityKind kind_;
  std::size_t batch_;
  std::vector<std::size_t> sinks_;
  std::vector<std::vector<double>> values_;
  std::vector<std::vector<char>> available_;
};

/// Expected downstream cost of each sink's subnetwork under the current
/// training policy, negated. Densities are read as constants.
UtilityTargets pragmatic_utilities(const MultipathNetwork& net, const PathDensity& density,
                                   const TerminalErrors& errors, const CostModel& cost);
/// Sampled mode: only the taken sink of every visited junction is available.
UtilityTargets pragmatic_utilities(const MultipathNetwork& net, const SampledForward& sampled,
                                   const TerminalErrors& errors, const CostModel& cost);

/// Negated cost of the best decision vector inside each sink's subnetwork.
UtilityTargets optimistic_utilities(const MultipathNetwork& net, const TerminalErrors& errors,
                                    const CostModel& cost);

/// k_ure·‖s − u‖² for a single score vector.
double utility_regression_cost(std::span<const real> scores, std::span<const double> targets,
                               double k_ure);

/// Σ_j Σ_i reach_j^i·k_ure·‖mask ⊙ (s_j^i − u_j^i)‖², differentiable in the
/// scores only. `scores[j]` holds [rows, sinks] for the examples listed in
/// `rows[j]` (all examples when empty); reach is read from `density`.
Tensor utility_regression(Tape& tape, const MultipathNetwork& net, const PathDensity& density,
                          std::span<const Tensor> scores,
                          std::span<const std::vector<std::size_t>> rows,
                          const UtilityTargets& targets, double k_ure);

/// E[c_inf] + Σ_j E[reach_j]·c_ure^j.
Tensor critic_loss(Tape& tape, const Tensor& expected_cost, const Tensor& regression);

/// k_L2·Σ_ℓ (Σ_i p_ℓ^i)·Σ_{w∈ℓ} w², with densities held constant. Applies to
/// kernels and weight matrices, not biases or batch-norm affine terms.
Tensor activated_l2(Tape& tape, const MultipathNetwork& net, const PathDensity& density,
                    double k_L2);

/// activated_l2 + k_dec·Σ_j Σ_i reach_j^i·‖s_j^i‖²; the score term is
/// differentiable in the scores, the reach is constant.
Tensor actor_regularizer(Tape& tape, const MultipathNetwork& net, const PathDensity& density,
                         double k_L2, double k_dec);

enum class Strategy {
  actor,
  pragmatic_critic,
  pragmatic_critic_classification_error,
  optimistic_critic,
  static_baseline,
};

std::string_view to_string(Strategy strategy);
Strategy parse_strategy(std::string_view text);
bool is_critic(Strategy strategy);

}  // namespace MULTIPATH_NUMERIC_NS
}  // namespace multipath
