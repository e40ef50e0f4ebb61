#include "multipath/objective.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "multipath/errors.hpp"

namespace multipath {
inline namespace MULTIPATH_NUMERIC_NS {

double CostModel::k_for(std::size_t example) const {
  return per_example.empty() ? k_cpt : per_example.at(example);
}

void CostModel::validate(std::size_t batch) const {
  if (!(k_cpt >= 0)) throw ArgumentError("cost model: k_cpt must be non-negative");
  if (!per_example.empty() && per_example.size() != batch)
    throw ShapeError("cost model: per-example k_cpt has " + std::to_string(per_example.size()) +
                     " entries for a batch of " + std::to_string(batch));
  for (double k : per_example)
    if (!(k >= 0)) throw ArgumentError("cost model: k_cpt must be non-negative");
}

double c_cpt(std::uint64_t n_ops, double k_cpt) { return k_cpt * static_cast<double>(n_ops); }

double c_err(std::span<const real> logits, int label, ErrorKind kind) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size())
    throw ArgumentError("c_err: label " + std::to_string(label) + " outside [0," +
                        std::to_string(logits.size()) + ")");
  if (kind == ErrorKind::classification_error) {
    const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
    return best == label ? 0.0 : 1.0;
  }
  const double top = *std::max_element(logits.begin(), logits.end());
  double norm = 0;
  for (real v : logits) norm += std::exp(v - top);
  return std::log(norm) + top - logits[static_cast<std::size_t>(label)];
}

TerminalErrors terminal_errors(const MultipathNetwork& net, std::span<const Tensor> logits,
                               std::span<const int> labels, ErrorKind kind) {
  TerminalErrors out(net.size());
  for (int t : net.terminals()) {
    const Tensor& l = logits[static_cast<std::size_t>(t)];
    const std::size_t k = l.dim(1);
    auto& row = out[static_cast<std::size_t>(t)];
    row.resize(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i)
      row[i] = c_err(l.data().subspan(i * k, k), labels[i], kind);
  }
  return out;
}

TerminalErrors terminal_errors(const MultipathNetwork& net, const SampledForward& sampled,
                               std::span<const int> labels, ErrorKind kind) {
  TerminalErrors out(net.size());
  for (int t : net.terminals()) {
    const auto& members = sampled.members[static_cast<std::size_t>(t)];
    auto& row = out[static_cast<std::size_t>(t)];
    row.assign(labels.size(), std::numeric_limits<double>::quiet_NaN());
    if (members.empty()) continue;
    const Tensor& l = sampled.terminal_logits[static_cast<std::size_t>(t)];
    const std::size_t k = l.dim(1);
    for (std::size_t r = 0; r < members.size(); ++r)
      row[members[r]] = c_err(l.data().subspan(r * k, k), labels[members[r]], kind);
  }
  return out;
}

Tensor expected_inference_cost(Tape& tape, const MultipathNetwork& net,
                               const PathDensity& density, std::span<const Tensor> logits,
                               std::span<const int> labels, const CostModel& cost) {
  const std::size_t n = labels.size();
  cost.validate(n);
  Tensor total = Tensor::scalar(0);
  for (int t : net.terminals()) {
    const auto id = static_cast<std::size_t>(t);
    Tensor ce = softmax_cross_entropy(tape, logits[id], labels);
    total = add(tape, total, dot(tape, density.node[id], ce));
  }
  for (const LayerNode& node : net.nodes()) {
    const double ops = static_cast<double>(node.n_ops());
    Tensor coefficient({n});
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
      coefficient.data()[i] = static_cast<real>(cost.k_for(i) * ops);
      any = any || coefficient.data()[i] != 0;
    }
    if (!any) continue;
    total = add(tape, total,
                dot(tape, density.node[static_cast<std::size_t>(node.id)], coefficient));
  }
  return total;
}

UtilityTargets::UtilityTargets(const MultipathNetwork& net, std::size_t batch, UtilityKind kind)
    : kind_(kind), batch_(batch), sinks_(net.size(), 0), values_(net.size()),
      available_(net.size()) {
  for (const LayerNode& node : net.nodes()) {
    if (!node.junction) continue;
    const auto id = static_cast<std::size_t>(node.id);
    sinks_[id] = node.junction->sink_count;
    values_[id].assign(batch * sinks_[id], 0.0);
    available_[id].assign(batch * sinks_[id], 0);
  }
}

std::size_t UtilityTargets::sinks(int junction) const {
  return sinks_.at(static_cast<std::size_t>(junction));
}

std::size_t UtilityTargets::index(int junction, std::size_t example, std::size_t sink) const {
  const std::size_t s = sinks(junction);
  if (s == 0) throw ArgumentError("utility targets: node " + std::to_string(junction) +
                                  " is not a junction");
  if (example >= batch_ || sink >= s) throw ArgumentError("utility targets: index out of range");
  return example * s + sink;
}

bool UtilityTargets::available(int junction, std::size_t example, std::size_t sink) const {
  return available_[static_cast<std::size_t>(junction)][index(junction, example, sink)] != 0;
}

double UtilityTargets::at(int junction, std::size_t example, std::size_t sink) const {
  const std::size_t k = index(junction, example, sink);
  if (!available_[static_cast<std::size_t>(junction)][k])
    throw AvailabilityError("utility of sink " + std::to_string(sink) + " at junction " +
                            std::to_string(junction) + " is unknown for example " +
                            std::to_string(example) + " (sink not visited)");
  return values_[static_cast<std::size_t>(junction)][k];
}

void UtilityTargets::set(int junction, std::size_t example, std::size_t sink, double value) {
  const std::size_t k = index(junction, example, sink);
  values_[static_cast<std::size_t>(junction)][k] = value;
  available_[static_cast<std::size_t>(junction)][k] = 1;
}

Tensor UtilityTargets::values(int junction) const {
  const auto id = static_cast<std::size_t>(junction);
  Tensor out({batch_, sinks_.at(id)});
  for (std::size_t k = 0; k < values_[id].size(); ++k)
    out.data()[k] = available_[id][k] ? static_cast<real>(values_[id][k]) : real(0);
  return out;
}

Tensor UtilityTargets::mask(int junction) const {
  const auto id = static_cast<std::size_t>(junction);
  Tensor out({batch_, sinks_.at(id)});
  for (std::size_t k = 0; k < available_[id].size(); ++k)
    out.data()[k] = available_[id][k] ? real(1) : real(0);
  return out;
}

namespace {

std::vector<double> node_ops(const MultipathNetwork& net) {
  std::vector<double> ops(net.size());
  for (const LayerNode& node : net.nodes())
    ops[static_cast<std::size_t>(node.id)] = static_cast<double>(node.n_ops());
  return ops;
}

void require_errors(const MultipathNetwork& net, const TerminalErrors& errors, std::size_t n) {
  if (errors.size() != net.size()) throw ShapeError("terminal errors: one row per node expected");
  for (int t : net.terminals())
    if (errors[static_cast<std::size_t>(t)].size() != n)
      throw ShapeError("terminal errors: terminal " + std::to_string(t) + " lacks a full row");
}

}  // namespace

UtilityTargets pragmatic_utilities(const MultipathNetwork& net, const PathDensity& density,
                                   const TerminalErrors& errors, const CostModel& cost) {
  const std::size_t n = density.node.front().numel();
  cost.validate(n);
  require_errors(net, errors, n);
  const auto ops = node_ops(net);
  UtilityTargets out(net, n, UtilityKind::pragmatic);
  std::vector<double> downstream(net.size());
  for (std::size_t i = 0; i < n; ++i) {
    const double k = cost.k_for(i);
    // Preorder storage: children follow their parent, so a reverse sweep is bottom-up.
    for (std::size_t id = net.size(); id-- > 0;) {
      const LayerNode& node = net.node(static_cast<int>(id));
      double below = 0;
      if (node.terminal()) {
        below = errors[id][i];
      } else if (node.junction) {
        const std::size_t s = node.children.size();
        const auto q = density.distribution[id].data().subspan(i * s, s);
        for (std::size_t c = 0; c < s; ++c) {
          const double child = downstream[static_cast<std::size_t>(node.children[c])];
          below += q[c] * child;
          out.set(node.id, i, c, -child);
        }
      } else {
        below = downstream[static_cast<std::size_t>(node.children.front())];
      }
      downstream[id] = k * ops[id] + below;
    }
  }
  return out;
}

UtilityTargets pragmatic_utilities(const MultipathNetwork& net, const SampledForward& sampled,
                                   const TerminalErrors& errors, const CostModel& cost) {
  const std::size_t n = sampled.paths.size();
  cost.validate(n);
  const auto ops = node_ops(net);
  UtilityTargets out(net, n, UtilityKind::pragmatic);
  for (std::size_t i = 0; i < n; ++i) {
    const DecisionPath& path = sampled.paths[i];
    const double k = cost.k_for(i);
    const auto terminal = static_cast<std::size_t>(path.terminal);
    double downstream = errors.at(terminal).at(i);
    // Walk the realized path upward; each junction's taken sink gets the cost
    // accumulated below it.
    std::size_t next_junction = path.junctions.size();
    for (std::size_t p = path.nodes.size(); p-- > 0;) {
      const int id = path.nodes[p];
      if (next_junction > 0 && path.junctions[next_junction - 1] == id) {
        --next_junction;
        out.set(id, i, path.decisions[next_junction], -downstream);
      }
      downstream += k * ops[static_cast<std::size_t>(id)];
    }
  }
  return out;
}

UtilityTargets optimistic_utilities(const MultipathNetwork& net, const TerminalErrors& errors,
                                    const CostModel& cost) {
  std::size_t n = 0;
  for (int t : net.terminals()) n = std::max(n, errors.at(static_cast<std::size_t>(t)).size());
  cost.validate(n);
  require_errors(net, errors, n);
  const auto ops = node_ops(net);
  UtilityTargets out(net, n, UtilityKind::optimistic);
  std::vector<double> best(net.size());
  for (std::size_t i = 0; i < n; ++i) {
    const double k = cost.k_for(i);
    for (std::size_t id = net.size(); id-- > 0;) {
      const LayerNode& node = net.node(static_cast<int>(id));
      double below = 0;
      if (node.terminal()) {
        below = errors[id][i];
      } else {
        below = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < node.children.size(); ++c) {
          const double child = best[static_cast<std::size_t>(node.children[c])];
          below = std::min(below, child);
          if (node.junction) out.set(node.id, i, c, -child);
        }
      }
      best[id] = k * ops[id] + below;
    }
  }
  return out;
}

double utility_regression_cost(std::span<const real> scores, std::span<const double> targets,
                               double k_ure) {
  if (scores.size() != targets.size())
    throw ShapeError("utility_regression_cost: " + std::to_string(scores.size()) +
                     " scores vs " + std::to_string(targets.size()) + " targets");
  double s = 0;
  for (std::size_t c = 0; c < scores.size(); ++c) {
    const double d = scores[c] - targets[c];
    s += d * d;
  }
  return k_ure * s;
}

Tensor utility_regression(Tape& tape, const MultipathNetwork& net, const PathDensity& density,
                          std::span<const Tensor> scores,
                          std::span<const std::vector<std::size_t>> rows,
                          const UtilityTargets& targets, double k_ure) {
  Tensor total = Tensor::scalar(0);
  if (k_ure == 0) return total;
  for (int j : net.junctions()) {
    const auto id = static_cast<std::size_t>(j);
    const Tensor& s = scores[id];
    if (!s.defined() || s.numel() == 0) continue;
    const std::size_t sinks = targets.sinks(j);
    const Tensor all_u = targets.values(j);
    const Tensor all_mask = targets.mask(j);
    const std::size_t m = s.dim(0);
    const bool subset = !rows.empty() && !rows[id].empty() && rows[id].size() != targets.batch();
    if (!subset && m != targets.batch()) throw ShapeError("utility_regression: score rows mismatch");
    Tensor u({m, sinks}), mask({m, sinks}), reach({m});
    for (std::size_t r = 0; r < m; ++r) {
      const std::size_t e = subset ? rows[id][r] : r;
      std::copy_n(all_u.data().data() + e * sinks, sinks, u.data().data() + r * sinks);
      std::copy_n(all_mask.data().data() + e * sinks, sinks, mask.data().data() + r * sinks);
      reach.data()[r] = density.node[id].data()[e];
    }
    Tensor diff = mul(tape, sub(tape, s, u), mask);
    Tensor term = dot(tape, row_squared_norm(tape, diff), reach);
    total = add(tape, total, scale(tape, term, k_ure));
  }
  return total;
}

Tensor critic_loss(Tape& tape, const Tensor& expected_cost, const Tensor& regression) {
  return add(tape, expected_cost, regression);
}

Tensor activated_l2(Tape& tape, const MultipathNetwork& net, const PathDensity& density,
                    double k_L2) {
  Tensor total = Tensor::scalar(0);
  if (k_L2 == 0) return total;
  std::vector<double> mass(net.size(), 0.0);
  for (std::size_t id = 0; id < net.size(); ++id)
    for (real p : density.node[id].data()) mass[id] += p;
  for (const ParameterEntry& entry : net.parameters()) {
    if (!is_weight(entry.kind)) continue;
    const double m = mass[static_cast<std::size_t>(entry.node)];
    if (m == 0) continue;
    total = add(tape, total, scale(tape, sum_squares(tape, entry.tensor), k_L2 * m));
  }
  return total;
}

Tensor actor_regularizer(Tape& tape, const MultipathNetwork& net, const PathDensity& density,
                         double k_L2, double k_dec) {
  Tensor total = activated_l2(tape, net, density, k_L2);
  if (k_dec == 0) return total;
  for (int j : net.junctions()) {
    const auto id = static_cast<std::size_t>(j);
    const Tensor& s = density.scores[id];
    if (!s.defined()) continue;
    Tensor term = dot(tape, row_squared_norm(tape, s), density.node[id].clone());
    total = add(tape, total, scale(tape, term, k_dec));
  }
  return total;
}

std::string_view to_string(Strategy strategy) {
  switch (strategy) {
    case Strategy::actor: return "actor";
    case Strategy::pragmatic_critic: return "pragmatic-critic";
    case Strategy::pragmatic_critic_classification_error:
      return "pragmatic-critic-classification-error";
    case Strategy::optimistic_critic: return "optimistic-critic";
    case Strategy::static_baseline: return "static-baseline";
  }
  return "unknown";
}

Strategy parse_strategy(std::string_view text) {
  for (Strategy s : {Strategy::actor, Strategy::pragmatic_critic,
                     Strategy::pragmatic_critic_classification_error,
                     Strategy::optimistic_critic, Strategy::static_baseline})
    if (to_string(s) == text) return s;
  throw ArgumentError("unknown strategy '" + std::string(text) + "'");
}

bool is_critic(Strategy strategy) {
  return strategy == Strategy::pragmatic_critic ||
         strategy == Strategy::pragmatic_critic_classification_error ||
         strategy == Strategy::optimistic_critic;
}

}  // namespace MULTIPATH_NUMERIC_NS
}  // namespace multipath
