#pragma once

// Shared helpers for the unit and acceptance suites: small random networks,
// a synthetic labeled dataset, and reference implementations that the
// library results are compared against. Everything that serves as an oracle
// is written directly from the definitions and never calls into the code it
// checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "multipath/data.hpp"
#include "multipath/network.hpp"
#include "multipath/objective.hpp"
#include "multipath/optim.hpp"
#include "multipath/routing.hpp"

namespace multipath {
inline namespace MULTIPATH_NUMERIC_NS {
namespace testing {

/// 4x4 images, three pyramid levels, two channels per level.
inline ArchitectureSchedule tiny_schedule(int classes = 3) {
  ArchitectureSchedule s;
  s.image_size = 4;
  s.base_width = 2;
  s.growth = 1;
  s.classes = classes;
  s.routing_hidden = 3;
  return s;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (real& v : t.data()) v = static_cast<real>(rng.uniform(lo, hi));
  return t;
}

inline double normal(Rng& rng) {
  const double u1 = 1.0 - rng.uniform(), u2 = rng.uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793 * u2);
}

/// Random branching layout with at most `junctions` junctions. The root is a
/// column; sinks are columns, bare heads or nested junctions.
inline std::string random_tree(Rng& rng, int junctions) {
  int budget = junctions;
  std::function<std::string(bool)> node = [&](bool root) -> std::string {
    const bool branch = budget > 0 && (root || rng.bernoulli(0.5));
    if (!branch) return root || rng.bernoulli(0.6) ? "T" : "H";
    --budget;
    const int sinks = rng.bernoulli(0.5) ? 2 : 3;
    std::string out = "[";
    for (int c = 0; c < sinks; ++c) out += (c ? "," : "") + node(false);
    return out + "]";
  };
  return node(true);
}

/// Initialized network with non-trivial routing: the final routing layers
/// and the batch-norm affine terms are randomized so policies are not uniform.
inline MultipathNetwork random_network(const ArchitectureSchedule& schedule, std::uint64_t seed,
                                       double routing_scale = 1.0) {
  MultipathNetwork net = build_network(schedule);
  Rng rng(seed);
  init_parameters(net, rng);
  for (const ParameterEntry& p : net.parameters()) {
    Tensor t = p.tensor;
    switch (p.kind) {
      case ParameterKind::routing_output_weights:
      case ParameterKind::routing_output_bias:
        for (real& v : t.data()) v = static_cast<real>(routing_scale * rng.uniform(-1, 1));
        break;
      case ParameterKind::bn_gamma:
        for (real& v : t.data()) v = static_cast<real>(rng.uniform(0.5, 1.5));
        break;
      case ParameterKind::bn_beta:
      case ParameterKind::conv_bias:
      case ParameterKind::head_bias:
      case ParameterKind::routing_hidden_bias:
        for (real& v : t.data()) v = static_cast<real>(rng.uniform(-0.3, 0.3));
        break;
      default:
        break;
    }
  }
  return net;
}

inline MultipathNetwork random_tree_network(const std::string& tree, std::uint64_t seed,
                                            int classes = 3, bool kcpt = false) {
  ArchitectureSchedule s = tiny_schedule(classes);
  s.tree = tree;
  s.accepts_kcpt = kcpt;
  return random_network(s, seed);
}

inline std::vector<int> random_labels(std::size_t n, int classes, Rng& rng) {
  std::vector<int> labels(n);
  for (int& l : labels) l = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
  return labels;
}

/// Batch-norm running moments seeded by one train-mode pass, so inference-mode
/// forwards are defined.
inline void seed_moments(MultipathNetwork& net, const Tensor& images) {
  Tape tape(Tape::Mode::inference);
  ForwardContext ctx{tape, BatchNormMode::train, true};
  marginalized_forward(net, images, 1.0, std::nullopt, ctx, ScoreGradient::detached);
}

// ---------------------------------------------------------------------------
// Layer oracles on single images ([C,H,W], row-major) with MAC counters.

struct MacCounter {
  std::uint64_t macs = 0;
};

/// Direct quadruple loop over output channel, input channel, pixel and tap.
/// Every tap counts as one multiply-accumulate, padded taps included.
inline std::vector<double> reference_conv(const std::vector<double>& x, std::size_t c_in,
                                          std::size_t h, std::size_t w,
                                          const std::vector<double>& kernel, std::size_t c_out,
                                          const std::vector<double>& bias, MacCounter* counter = nullptr) {
  std::vector<double> y(c_out * h * w, 0.0);
  for (std::size_t o = 0; o < c_out; ++o)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        double acc = bias.empty() ? 0.0 : bias[o];
        for (std::size_t i = 0; i < c_in; ++i)
          for (int dr = -1; dr <= 1; ++dr)
            for (int dc = -1; dc <= 1; ++dc) {
              const long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
              const double k = kernel[((o * c_in + i) * 3 + static_cast<std::size_t>(dr + 1)) * 3 +
                                      static_cast<std::size_t>(dc + 1)];
              double v = 0;
              if (rr >= 0 && cc >= 0 && rr < static_cast<long>(h) && cc < static_cast<long>(w))
                v = x[(i * h + static_cast<std::size_t>(rr)) * w + static_cast<std::size_t>(cc)];
              acc += k * v;
              if (counter) ++counter->macs;
            }
        y[(o * h + r) * w + c] = acc;
      }
  return y;
}

/// Enumerates every 2x2 window and keeps its maximum.
inline std::vector<double> reference_maxpool(const std::vector<double>& x, std::size_t c_in,
                                             std::size_t h, std::size_t w) {
  std::vector<double> y;
  for (std::size_t i = 0; i < c_in; ++i)
    for (std::size_t r = 0; r + 1 < h; r += 2)
      for (std::size_t c = 0; c + 1 < w; c += 2) {
        const double* p = &x[(i * h + r) * w + c];
        y.push_back(std::max({p[0], p[1], p[w], p[w + 1]}));
      }
  return y;
}

inline std::vector<double> reference_dense(const std::vector<double>& x,
                                           const std::vector<double>& weights, std::size_t m,
                                           const std::vector<double>& bias,
                                           MacCounter* counter = nullptr) {
  const std::size_t n = x.size();
  std::vector<double> y(m, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    double acc = bias.empty() ? 0.0 : bias[r];
    for (std::size_t c = 0; c < n; ++c) {
      acc += weights[r * n + c] * x[c];
      if (counter) ++counter->macs;
    }
    y[r] = acc;
  }
  return y;
}

inline std::vector<double> to_double(std::span<const real> v) { return {v.begin(), v.end()}; }

/// Multiply-accumulates of running one node on one example, counted by
/// executing the reference layers on zero inputs of the node's actual tensor
/// shapes.
inline std::uint64_t instrumented_node_macs(const LayerNode& node) {
  MacCounter counter;
  if (node.transform) {
    for (const ConvBlock& b : node.transform->blocks) {
      const std::size_t e = b.extent;
      const std::size_t c_in = b.kernel.dim(1), c_out = b.kernel.dim(0);
      reference_conv(std::vector<double>(c_in * e * e, 0.0), c_in, e, e,
                     to_double(b.kernel.data()), c_out, {}, &counter);
    }
  }
  if (node.junction) {
    const Junction& j = *node.junction;
    const std::size_t in = j.hidden.weights.dim(1);
    const auto hidden = reference_dense(std::vector<double>(in, 0.0),
                                        to_double(j.hidden.weights.data()),
                                        j.hidden.weights.dim(0), {}, &counter);
    reference_dense(hidden, to_double(j.output.weights.data()), j.output.weights.dim(0), {},
                    &counter);
  }
  if (node.head) {
    const DenseLayer& h = *node.head;
    reference_dense(std::vector<double>(h.weights.dim(1), 0.0), to_double(h.weights.data()),
                    h.weights.dim(0), {}, &counter);
  }
  return counter.macs;
}

// ---------------------------------------------------------------------------
// Decision enumeration oracles.

/// Per-example routing quantities read off a marginalized forward pass.
struct ExampleCosts {
  /// distribution[node] = decision probabilities (junctions only).
  std::vector<std::vector<double>> distribution;
  /// error[node] = c_err at terminals.
  std::vector<double> error;
};

inline double reference_cross_entropy(std::span<const real> logits, int label) {
  double top = -std::numeric_limits<double>::infinity();
  for (real v : logits) top = std::max(top, static_cast<double>(v));
  double z = 0;
  for (real v : logits) z += std::exp(v - top);
  return std::log(z) + top - logits[static_cast<std::size_t>(label)];
}

inline ExampleCosts example_costs(const MultipathNetwork& net, const MarginalForward& forward,
                                  std::span<const int> labels, std::size_t i) {
  ExampleCosts out;
  out.distribution.resize(net.size());
  out.error.assign(net.size(), 0.0);
  for (const LayerNode& node : net.nodes()) {
    const auto id = static_cast<std::size_t>(node.id);
    if (node.junction) {
      const std::size_t s = node.children.size();
      const auto d = forward.density.distribution[id].data().subspan(i * s, s);
      out.distribution[id].assign(d.begin(), d.end());
    }
    if (node.terminal()) {
      const Tensor& l = forward.logits[id];
      const std::size_t k = l.dim(1);
      out.error[id] = reference_cross_entropy(l.data().subspan(i * k, k), labels[i]);
    }
  }
  return out;
}

/// Calls `visit(decisions)` for every assignment of one decision to each
/// junction in `junctions` (a full decision vector over those junctions).
inline void for_each_assignment(const MultipathNetwork& net, const std::vector<int>& junctions,
                                const std::function<void(const std::map<int, std::size_t>&)>& visit) {
  std::map<int, std::size_t> d;
  std::function<void(std::size_t)> rec = [&](std::size_t k) {
    if (k == junctions.size()) {
      visit(d);
      return;
    }
    const int j = junctions[k];
    for (std::size_t c = 0; c < net.node(j).children.size(); ++c) {
      d[j] = c;
      rec(k + 1);
    }
  };
  rec(0);
}

/// Cost of following the decisions from `start` to a terminal:
/// error at the terminal plus k·ops of every visited node.
inline double path_cost(const MultipathNetwork& net, int start,
                        const std::map<int, std::size_t>& decisions, const ExampleCosts& costs,
                        double k_cpt) {
  double total = 0;
  int id = start;
  for (;;) {
    const LayerNode& node = net.node(id);
    total += k_cpt * static_cast<double>(node.n_ops());
    if (node.terminal()) return total + costs.error[static_cast<std::size_t>(id)];
    id = node.children.size() == 1 ? node.children.front()
                                   : node.children[decisions.at(id)];
  }
}

inline std::vector<int> junctions_in(const MultipathNetwork& net, int root) {
  std::vector<int> out;
  for (int id : net.subtree(root))
    if (net.node(id).junction) out.push_back(id);
  return out;
}

/// Σ_d Pr(d)·c_inf(d) over full decision vectors of the subnetwork at `root`.
inline double enumerated_expected_cost(const MultipathNetwork& net, int root,
                                       const ExampleCosts& costs, double k_cpt) {
  double total = 0;
  for_each_assignment(net, junctions_in(net, root), [&](const std::map<int, std::size_t>& d) {
    double pr = 1;
    for (const auto& [j, c] : d) pr *= costs.distribution[static_cast<std::size_t>(j)][c];
    total += pr * path_cost(net, root, d, costs, k_cpt);
  });
  return total;
}

/// min over decision vectors d' of c_inf(d') for the subnetwork at `root`.
inline double enumerated_min_cost(const MultipathNetwork& net, int root, const ExampleCosts& costs,
                                  double k_cpt) {
  double best = std::numeric_limits<double>::infinity();
  for_each_assignment(net, junctions_in(net, root), [&](const std::map<int, std::size_t>& d) {
    best = std::min(best, path_cost(net, root, d, costs, k_cpt));
  });
  return best;
}

/// Probability of reaching `node` under the example's routing distributions.
inline double enumerated_reach(const MultipathNetwork& net, int node, const ExampleCosts& costs) {
  double p = 1;
  const std::vector<int> path = net.path_to(node);
  for (std::size_t k = 0; k + 1 < path.size(); ++k) {
    const LayerNode& n = net.node(path[k]);
    if (!n.junction) continue;
    const auto c = std::find(n.children.begin(), n.children.end(), path[k + 1]) - n.children.begin();
    p *= costs.distribution[static_cast<std::size_t>(n.id)][static_cast<std::size_t>(c)];
  }
  return p;
}

// ---------------------------------------------------------------------------
// Synthetic data.

/// Fresh directory under the system temp path, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("multipath-test-" + std::to_string(Rng(std::random_device{}()).next()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

/// Ten classes of procedurally drawn 32x32 images. Classes 0-4 are thin
/// strokes marked as MNIST-origin; classes 5-9 are textured color fields
/// marked as CIFAR-origin.
inline Dataset synthetic_dataset(std::size_t count, std::uint64_t seed, int classes = 10) {
  Dataset d;
  d.kind = "hybrid";
  for (int c = 0; c < classes; ++c) d.class_names.push_back("class" + std::to_string(c));
  Rng rng(seed);
  const std::size_t side = kImageSide;
  for (std::size_t n = 0; n < count; ++n) {
    LabeledImage img;
    img.label = static_cast<int>(n % static_cast<std::size_t>(classes));
    img.origin = img.label < 5 ? Origin::mnist : Origin::cifar;
    img.pixels.assign(kImageValues, 0.0f);
    const double hue = rng.uniform();
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t r = 0; r < side; ++r)
        for (std::size_t c = 0; c < side; ++c) {
          double v;
          const int k = img.label;
          if (img.origin == Origin::mnist) {
            const double center = 8 + 4 * k + rng.uniform(-1, 1);
            const bool stroke = std::abs(static_cast<double>(k % 2 ? r : c) - center) < 1.5;
            v = stroke ? 0.9 - 0.2 * ch * hue : 0.1;
          } else {
            const double f = 0.2 * (k - 4);
            v = 0.5 + 0.4 * std::sin(f * static_cast<double>(r + ch * c) + hue);
          }
          v += 0.05 * rng.uniform(-1, 1);
          img.pixels[(ch * side + r) * side + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    d.images.push_back(std::move(img));
  }
  return d;
}

/// Every node's density set to `p` for all `n` examples.
inline PathDensity uniform_density(const MultipathNetwork& net, std::size_t n, real p) {
  PathDensity d;
  for (std::size_t id = 0; id < net.size(); ++id) d.node.emplace_back(Shape{n}, p);
  return d;
}

inline std::vector<std::vector<real>> snapshot(const MultipathNetwork& net) {
  std::vector<std::vector<real>> out;
  for (const ParameterEntry& p : net.parameters())
    out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

inline double variance(const std::vector<double>& xs) {
  double mean = 0, sq = 0;
  for (double x : xs) mean += x / static_cast<double>(xs.size());
  for (double x : xs) sq += (x - mean) * (x - mean);
  return sq / static_cast<double>(xs.size() - 1);
}

/// Variance of one step's update to a node's parameters when the node's
/// gradient is Σ_i p_i g_i over i.i.d. standard-normal per-example gradients.
inline double update_variance(double level, bool talr, std::size_t n_ex, int batches) {
  ArchitectureSchedule s = tiny_schedule();
  s.columns = 1;
  MultipathNetwork net = build_network(s);
  const int node = 0;
  const PathDensity density = uniform_density(net, n_ex, static_cast<real>(level));
  const auto factors = node_factors(net, density, talr);
  // Independent draws per level, so the ratios are measured rather than exact.
  Rng rng(2024 + static_cast<std::uint64_t>(level * 1000) + (talr ? 1 : 0));
  std::vector<double> updates;
  for (int b = 0; b < batches; ++b) {
    const auto before = snapshot(net);
    SgdMomentum opt(net, 0.0);
    for (const ParameterEntry& p : net.parameters()) {
      if (p.node != node) continue;
      auto g = p.tensor.ensure_grad();
      for (real& v : g) {
        double acc = 0;
        for (std::size_t i = 0; i < n_ex; ++i) acc += level * normal(rng);
        v = static_cast<real>(acc);
      }
    }
    opt.step(net, 1.0, factors);
    const auto after = snapshot(net);
    for (std::size_t p = 0; p < after.size(); ++p)
      for (std::size_t k = 0; k < after[p].size(); ++k)
        updates.push_back(static_cast<double>(after[p][k]) - before[p][k]);
    net.zero_grad();
    if (updates.size() >= 200000) break;
  }
  return variance(updates);
}

}  // namespace testing
}  // namespace MULTIPATH_NUMERIC_NS
}  // namespace multipath
