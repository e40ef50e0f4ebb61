#include "multipath/routing.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>

#include "multipath/errors.hpp"

namespace multipath {
inline namespace MULTIPATH_NUMERIC_NS {

RoutingPolicy RoutingPolicy::softmax(double temperature) {
  RoutingPolicy p{PolicyKind::softmax_temperature, temperature, 0.0};
  p.validate();
  return p;
}

RoutingPolicy RoutingPolicy::epsilon_greedy(double epsilon) {
  RoutingPolicy p{PolicyKind::epsilon_greedy, 1.0, epsilon};
  p.validate();
  return p;
}

void RoutingPolicy::validate() const {
  if (!(temperature > 0)) throw ArgumentError("routing policy: temperature must be positive");
  if (!(epsilon >= 0 && epsilon <= 1)) throw ArgumentError("routing policy: epsilon outside [0,1]");
}

std::size_t infer_decision(std::span<const real> scores) {
  if (scores.empty()) throw ArgumentError("infer_decision: empty score vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

std::vector<double> training_distribution(std::span<const real> scores, double temperature) {
  if (!(temperature > 0))
    throw ArgumentError("training_distribution: temperature must be positive, got " +
                        std::to_string(temperature));
  if (scores.empty()) throw ArgumentError("training_distribution: empty score vector");
  const double top = *std::max_element(scores.begin(), scores.end());
  std::vector<double> out(scores.size());
  double norm = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp((scores[i] - top) / temperature);
    norm += out[i];
  }
  for (double& v : out) v /= norm;
  return out;
}

std::size_t sample_decision(std::span<const double> distribution, Rng& rng) {
  if (distribution.empty()) throw ArgumentError("sample_decision: empty distribution");
  double total = 0;
  for (double p : distribution) {
    if (!(p >= 0)) throw ArgumentError("sample_decision: negative probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6)
    throw ArgumentError("sample_decision: distribution sums to " + std::to_string(total));
  const double u = rng.uniform();
  double cdf = 0;
  for (std::size_t i = 0; i < distribution.size(); ++i) {
    cdf += distribution[i];
    if (u < cdf) return i;
  }
  // Rounding can leave u above the final partial sum; fall back to the last
  // sink with positive mass.
  for (std::size_t i = distribution.size(); i-- > 0;)
    if (distribution[i] > 0) return i;
  return distribution.size() - 1;
}

std::size_t epsilon_greedy(std::span<const real> scores, double epsilon, Rng& rng) {
  if (!(epsilon >= 0 && epsilon <= 1))
    throw ArgumentError("epsilon_greedy: epsilon " + std::to_string(epsilon) + " outside [0,1]");
  const std::size_t greedy = infer_decision(scores);
  if (epsilon > 0 && rng.uniform() < epsilon) return static_cast<std::size_t>(rng.below(scores.size()));
  return greedy;
}

namespace {

std::optional<Tensor> kcpt_rows(Tape& tape, const std::optional<Tensor>& kcpt,
                                std::span<const std::size_t> rows, std::size_t batch) {
  if (!kcpt) return std::nullopt;
  if (kcpt->numel() == 1) return *kcpt;
  if (kcpt->numel() != batch)
    throw ShapeError("k_cpt feature must be a scalar or one value per example");
  if (rows.size() == batch) return *kcpt;
  return gather_rows(tape, *kcpt, rows);
}

}  // namespace

MarginalForward marginalized_forward(MultipathNetwork& net, const Tensor& images,
                                     double temperature, const std::optional<Tensor>& kcpt,
                                     const ForwardContext& ctx, ScoreGradient mode) {
  if (!(temperature > 0)) throw ArgumentError("marginalized_forward: temperature must be positive");
  Tape& tape = ctx.tape;
  const std::size_t n = images.dim(0);
  const std::size_t count = net.size();
  MarginalForward out;
  out.batch = n;
  out.density.node.resize(count);
  out.density.scores.resize(count);
  out.density.distribution.resize(count);
  out.logits.resize(count);

  std::vector<FeaturePyramid> features(count);
  out.density.node[0] = Tensor({n}, real(1));

  // Nodes are stored in preorder, so a parent is always processed before its children.
  for (std::size_t id = 0; id < count; ++id) {
    LayerNode& node = net.node(static_cast<int>(id));
    const Tensor& density = out.density.node[id];
    const FeaturePyramid& input =
        node.parent < 0 ? image_pyramid(images) : features[static_cast<std::size_t>(node.parent)];
    Tensor bn_weights;
    if (ctx.bn_mode == BatchNormMode::train && node.parent >= 0)
      bn_weights = mode == ScoreGradient::detached ? density.clone() : density;
    features[id] = forward_column(node, input, ctx, bn_weights, net.schedule());

    if (node.terminal()) {
      out.logits[id] = head_logits(tape, *node.head, global_descriptor(tape, features[id]));
      continue;
    }
    if (!node.junction) {
      for (int child : node.children) out.density.node[static_cast<std::size_t>(child)] = density;
      continue;
    }
    const Tensor descriptor = global_descriptor(tape, features[id]);
    Tensor scores = routing_scores(tape, *node.junction, descriptor, kcpt);
    out.density.scores[id] = scores;
    Tensor policy_input = mode == ScoreGradient::detached ? scores.clone() : scores;
    Tensor dist = softmax_rows(tape, policy_input, temperature);
    out.density.distribution[id] = dist;
    for (std::size_t k = 0; k < node.children.size(); ++k) {
      out.density.node[static_cast<std::size_t>(node.children[k])] =
          mul(tape, density, column(tape, dist, k));
    }
  }
  return out;
}

SampledForward sampled_forward(MultipathNetwork& net, const Tensor& images,
                               const RoutingPolicy& policy, std::span<Rng> streams,
                               const std::optional<Tensor>& kcpt, const ForwardContext& ctx) {
  policy.validate();
  Tape& tape = ctx.tape;
  const std::size_t n = images.dim(0);
  if (policy.kind != PolicyKind::inference_argmax && streams.size() != n)
    throw ArgumentError("sampled_forward: one random stream per example is required");
  const std::size_t count = net.size();
  const auto classes = static_cast<std::size_t>(net.schedule().classes);

  SampledForward out;
  out.paths.resize(n);
  out.ops.assign(n, 0);
  out.members.resize(count);
  out.scores.resize(count);
  out.terminal_logits.resize(count);
  out.logits = Tensor({n, classes});

  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});

  std::function<void(int, const FeaturePyramid&, std::vector<std::size_t>)> visit =
      [&](int id, const FeaturePyramid& input, std::vector<std::size_t> members) {
        LayerNode& node = net.node(id);
        const FeaturePyramid features = forward_column(node, input, ctx, Tensor{}, net.schedule());
        const std::uint64_t node_ops = node.n_ops();
        for (std::size_t e : members) {
          out.ops[e] += node_ops;
          out.paths[e].nodes.push_back(id);
        }
        out.members[static_cast<std::size_t>(id)] = members;

        if (node.terminal()) {
          Tensor logits = head_logits(tape, *node.head, global_descriptor(tape, features));
          for (std::size_t r = 0; r < members.size(); ++r) {
            out.paths[members[r]].terminal = id;
            std::copy_n(logits.data().data() + r * classes, classes,
                        out.logits.data().data() + members[r] * classes);
          }
          out.terminal_logits[static_cast<std::size_t>(id)] = logits;
          return;
        }
        if (!node.junction) {
          visit(node.children.front(), features, std::move(members));
          return;
        }

        const Tensor descriptor = global_descriptor(tape, features);
        Tensor scores =
            routing_scores(tape, *node.junction, descriptor, kcpt_rows(tape, kcpt, members, n));
        out.scores[static_cast<std::size_t>(id)] = scores;
        const std::size_t sinks = node.junction->sink_count;
        std::vector<std::vector<std::size_t>> local(sinks);
        std::vector<std::vector<std::size_t>> global(sinks);
        for (std::size_t r = 0; r < members.size(); ++r) {
          std::span<const real> s(scores.data().data() + r * sinks, sinks);
          const std::size_t e = members[r];
          std::size_t d = 0;
          switch (policy.kind) {
            case PolicyKind::inference_argmax:
              d = infer_decision(s);
              break;
            case PolicyKind::softmax_temperature: {
              const auto dist = training_distribution(s, policy.temperature);
              d = sample_decision(dist, streams[e]);
              break;
            }
            case PolicyKind::epsilon_greedy:
              d = epsilon_greedy(s, policy.epsilon, streams[e]);
              break;
          }
          out.paths[e].junctions.push_back(id);
          out.paths[e].decisions.push_back(d);
          local[d].push_back(r);
          global[d].push_back(e);
        }
        for (std::size_t k = 0; k < sinks; ++k) {
          if (global[k].empty()) continue;
          FeaturePyramid subset;
          subset.finest = features.finest;
          if (local[k].size() == members.size()) {
            subset = features;
          } else {
            for (const Tensor& level : features.levels)
              subset.levels.push_back(gather_rows(tape, level, local[k]));
          }
          visit(node.children[k], subset, global[k]);
        }
      };

  if (n > 0) visit(net.root(), image_pyramid(images), all);
  return out;
}

PathDensity realized_density(const MultipathNetwork& net, const SampledForward& sampled) {
  const std::size_t n = sampled.paths.size();
  PathDensity d;
  d.node.assign(net.size(), Tensor{});
  d.scores.assign(net.size(), Tensor{});
  d.distribution.assign(net.size(), Tensor{});
  for (std::size_t id = 0; id < net.size(); ++id) {
    d.node[id] = Tensor({n}, real(0));
    for (std::size_t e : sampled.members[id]) d.node[id].data()[e] = real(1);
  }
  return d;
}

}  // namespace MULTIPATH_NUMERIC_NS
}  // namespace multipath
