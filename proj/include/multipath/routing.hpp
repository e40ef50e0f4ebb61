#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "multipath/network.hpp"
#include "multipath/rng.hpp"

namespace multipath {
inline namespace MULTIPATH_NUMERIC_NS {

enum class PolicyKind { inference_argmax, softmax_temperature, epsilon_greedy };

struct RoutingPolicy {
  PolicyKind kind = PolicyKind::inference_argmax;
  double temperature = 1.0;
  double epsilon = 0.0;

  static RoutingPolicy argmax() { return {}; }
  static RoutingPolicy softmax(double temperature);
  static RoutingPolicy epsilon_greedy(double epsilon);
  void validate() const;
};

/// Index of the largest score; ties go to the lowest index.
std::size_t infer_decision(std::span<const real> scores);

/// softmax(scores / temperature).
std::vector<double> training_distribution(std::span<const real> scores, double temperature);

/// Inverse-CDF draw from a normalized distribution using one uniform.
std::size_t sample_decision(std::span<const double> distribution, Rng& rng);

/// Greedy choice with probability 1 - epsilon, otherwise uniform over all sinks.
std::size_t epsilon_greedy(std::span<const real> scores, double epsilon, Rng& rng);

/// Probability mass of every example at every node.
struct PathDensity {
  /// [N] per node.
  std::vector<Tensor> node;
  /// [N,sinks] routing scores at junction nodes; undefined elsewhere.
  std::vector<Tensor> scores;
  /// [N,sinks] training-policy decision distribution at junction nodes.
  std::vector<Tensor> distribution;

  double at(int node_id, std::size_t example) const {
    return node.at(static_cast<std::size_t>(node_id)).data()[example];
  }
};

/// How routing scores influence the path densities.
enum class ScoreGradient {
  /// Densities are differentiable functions of the scores (actor learning).
  through_policy,
  /// Densities are computed from detached scores (critic learning).
  detached,
};

struct MarginalForward {
  PathDensity density;
  /// [N,K] logits at terminal nodes; undefined elsewhere.
  std::vector<Tensor> logits;
  std::size_t batch = 0;
};

/// Evaluates every node once and propagates the soft-routing density.
/// In train mode each node's batch-norm moments are weighted by its density.
MarginalForward marginalized_forward(MultipathNetwork& net, const Tensor& images,
                                     double temperature, const std::optional<Tensor>& kcpt,
                                     const ForwardContext& ctx,
                                     ScoreGradient mode = ScoreGradient::through_policy);

struct DecisionPath {
  /// Junction nodes encountered, in order, with the decision taken at each.
  std::vector<int> junctions;
  std::vector<std::size_t> decisions;
  int terminal = -1;
  /// Every node visited, root first.
  std::vector<int> nodes;
};

struct SampledForward {
  std::vector<DecisionPath> paths;
  /// [N,K] logits of the terminal each example reached (values only).
  Tensor logits;
  /// Multiply-accumulates executed per example.
  std::vector<std::uint64_t> ops;
  /// Per node: indices of the examples evaluated there.
  std::vector<std::vector<std::size_t>> members;
  /// Per junction node: [members,sinks] scores, differentiable.
  std::vector<Tensor> scores;
  /// Per terminal node: [members,K] logits, differentiable.
  std::vector<Tensor> terminal_logits;
};

/// Evaluates only the nodes on each example's realized path. `streams` holds
/// one random stream per example; unused by the argmax policy.
SampledForward sampled_forward(MultipathNetwork& net, const Tensor& images,
                               const RoutingPolicy& policy, std::span<Rng> streams,
                               const std::optional<Tensor>& kcpt, const ForwardContext& ctx);

/// Path density induced by sampled paths (1 on visited nodes, 0 elsewhere).
PathDensity realized_density(const MultipathNetwork& net, const SampledForward& sampled);

}  // namespace MULTIPATH_NUMERIC_NS
}  // namespace multipath
