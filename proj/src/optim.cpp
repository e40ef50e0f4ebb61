#include "multipath/optim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "multipath/errors.hpp"

namespace multipath {
inline namespace MULTIPATH_NUMERIC_NS {

double Schedule::at(double iteration) const {
  return initial * std::exp2(-iteration / half_life);
}

void Schedule::validate() const {
  if (!(initial > 0)) throw ArgumentError("schedule: initial value must be positive");
  if (!(half_life > 0)) throw ArgumentError("schedule: half-life must be positive");
}

Schedule OptimizerConfig::temperature(Strategy strategy) const {
  return {is_critic(strategy) ? critic_temperature : actor_temperature, temperature_half_life};
}

void OptimizerConfig::validate() const {
  if (batch_size < 1) throw ConfigError("optim.batch_size", "must be at least 1");
  if (!(base_learning_rate > 0)) throw ConfigError("optim.base_learning_rate", "must be positive");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("optim.momentum", "must lie in [0,1)");
  if (!(lr_half_life > 0)) throw ConfigError("optim.lr_half_life", "must be positive");
  if (!(temperature_half_life > 0))
    throw ConfigError("optim.temperature_half_life", "must be positive");
  if (!(actor_temperature > 0)) throw ConfigError("optim.actor_temperature", "must be positive");
  if (!(critic_temperature > 0)) throw ConfigError("optim.critic_temperature", "must be positive");
}

double lr_at(const OptimizerConfig& config, std::uint64_t iteration) {
  return config.learning_rate().at(static_cast<double>(iteration));
}

double temperature_at(const OptimizerConfig& config, std::uint64_t iteration, Strategy strategy) {
  return config.temperature(strategy).at(static_cast<double>(iteration));
}

std::optional<double> talr_factor(std::span<const real> densities) {
  double s = 0;
  for (real p : densities) {
    if (!(p >= 0 && p <= 1 + 1e-6))
      throw ArgumentError("talr_factor: density " + std::to_string(p) + " outside [0,1]");
    s += static_cast<double>(p) * p;
  }
  if (s == 0) return std::nullopt;
  return 1.0 / std::sqrt(s);
}

std::vector<std::optional<double>> node_factors(const MultipathNetwork& net,
                                                const PathDensity& density, bool talr) {
  std::vector<std::optional<double>> out(net.size());
  for (std::size_t id = 0; id < net.size(); ++id) {
    const auto f = talr_factor(density.node[id].data());
    if (f) out[id] = talr ? *f : 1.0;
  }
  return out;
}

SgdMomentum::SgdMomentum(const MultipathNetwork& net, double momentum) : momentum_(momentum) {
  for (const ParameterEntry& entry : net.parameters())
    buffers_.emplace_back(entry.tensor.numel(), real(0));
}

void SgdMomentum::step(MultipathNetwork& net, double learning_rate,
                       std::span<const std::optional<double>> factors) {
  const auto params = net.parameters();
  if (params.size() != buffers_.size())
    throw ShapeError("sgd: optimizer state does not match the parameter registry");
  if (factors.size() != net.size()) throw ShapeError("sgd: one factor per node expected");
  for (std::size_t p = 0; p < params.size(); ++p) {
    const ParameterEntry& entry = params[p];
    const auto& factor = factors[static_cast<std::size_t>(entry.node)];
    if (!factor) continue;
    auto& buffer = buffers_[p];
    if (buffer.size() != entry.tensor.numel())
      throw ShapeError("sgd: momentum buffer shape mismatch for " + entry.id);
    Tensor param = entry.tensor;
    auto g = param.ensure_grad();
    auto w = param.data();
    const real mu = static_cast<real>(momentum_);
    const real a = static_cast<real>(*factor);
    const real lr = static_cast<real>(learning_rate);
    for (std::size_t k = 0; k < buffer.size(); ++k) {
      buffer[k] = mu * buffer[k] + a * g[k];
      w[k] -= lr * buffer[k];
    }
  }
}

namespace {

void xavier(Tensor t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  auto w = t.data();
  for (real& v : w) v = static_cast<real>(rng.uniform(-bound, bound));
}

void fill(Tensor t, real value) {
  auto w = t.data();
  std::fill(w.begin(), w.end(), value);
}

}  // namespace

void init_parameters(MultipathNetwork& net, Rng& rng) {
  for (const ParameterEntry& entry : net.parameters()) {
    const Shape& s = entry.tensor.shape();
    switch (entry.kind) {
      case ParameterKind::conv_kernel:
        xavier(entry.tensor, s[1] * 9, s[0] * 9, rng);
        break;
      case ParameterKind::routing_hidden_weights:
      case ParameterKind::head_weights:
        xavier(entry.tensor, s[1], s[0], rng);
        break;
      case ParameterKind::bn_gamma:
        fill(entry.tensor, real(1));
        break;
      case ParameterKind::routing_output_weights:
      case ParameterKind::routing_output_bias:
      case ParameterKind::conv_bias:
      case ParameterKind::routing_hidden_bias:
      case ParameterKind::head_bias:
      case ParameterKind::bn_beta:
        fill(entry.tensor, real(0));
        break;
    }
  }
  for (BatchNormState* state : net.batchnorm_states()) *state = BatchNormState{};
  net.zero_grad();
}

}  // namespace MULTIPATH_NUMERIC_NS
}  // namespace multipath
