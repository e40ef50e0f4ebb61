#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "multipath/config.hpp"
#include "multipath/data.hpp"
#include "multipath/network.hpp"
#include "multipath/optim.hpp"

namespace multipath {
inline namespace MULTIPATH_NUMERIC_NS {

struct Batch {
  Tensor images;
  std::vector<int> labels;
  std::vector<Origin> origins;
  /// Dataset index of every row.
  std::vector<std::size_t> indices;
};

/// Packs dataset rows [begin, begin+count) into a batch without augmentation.
Batch make_batch(const Dataset& dataset, std::size_t begin, std::size_t count);

/// Mini-batches drawn from per-epoch permutations; batch t depends only on
/// (seed, t), so resuming needs no sampler state.
class BatchSampler {
 public:
  BatchSampler(const Dataset& dataset, std::size_t batch_size, std::uint64_t seed, bool augment);
  Batch at(std::uint64_t iteration) const;

 private:
  const Dataset& dataset_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  bool augment_;
};

struct TerminalStats {
  int node = 0;
  /// Fraction of all evaluated examples exiting here.
  double fraction = 0;
  double accuracy = 0;
  std::size_t count = 0;
  /// Per class: fraction of all evaluated examples of that class exiting here.
  std::vector<double> class_fraction;
  double mnist_fraction = 0;
  double cifar_fraction = 0;
};

struct JunctionStats {
  int node = 0;
  std::size_t visits = 0;
  std::vector<double> decision_frequency;
};

struct EvalReport {
  std::size_t examples = 0;
  double accuracy = 0;
  double mean_ops = 0;
  double expected_cinf = 0;
  double k_cpt = 0;
  std::vector<TerminalStats> terminals;
  std::vector<JunctionStats> junctions;
  std::vector<std::string> class_names;
};

/// Runs the inference routing policy over a dataset. Networks conditioned on
/// k_cpt receive `k_cpt` as their routing feature.
EvalReport evaluate(MultipathNetwork& net, const Dataset& dataset, double k_cpt,
                    std::size_t batch_size = 250);

struct MetricsRow {
  std::uint64_t iteration = 0;
  double loss = 0;
  double val_accuracy = 0;
  double val_mean_ops = 0;
  std::vector<double> terminal_fractions;
};

/// Fixed header: iteration,loss,val_accuracy,val_mean_ops,terminal_<id>...
std::string metrics_header(const MultipathNetwork& net);
std::string metrics_line(const MetricsRow& row);

struct Checkpoint {
  ExperimentConfig config;
  std::uint64_t iteration = 0;
  std::string rng_state;
  std::vector<std::vector<real>> parameters;
  std::vector<BatchNormState> moments;
  std::vector<std::vector<real>> momentum;
  /// Training-loss accumulator of the current metrics window.
  double window_loss = 0;
  std::uint64_t window_steps = 0;
};

/// "MPCK" magic, u32 version, u32 byte-order mark, u32 sizeof(real), then
/// length-prefixed config text and digest, u64 iteration, RNG state, and the
/// parameter, batch-norm and momentum arrays, all little-endian.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Network state restored from a checkpoint.
MultipathNetwork restore_network(const Checkpoint& checkpoint);

/// One training run: network, optimizer and random stream.
class Trainer {
 public:
  Trainer(ExperimentConfig config, const Dataset& train);
  Trainer(const Checkpoint& checkpoint, const Dataset& train);

  /// Runs one iteration and returns the mean loss per example.
  double step();

  std::uint64_t iteration() const { return iteration_; }
  MultipathNetwork& network() { return net_; }
  const ExperimentConfig& config() const { return config_; }
  Checkpoint checkpoint() const;

  /// Mean training loss since the last call, then resets the window.
  double take_window_loss();

 private:
  Tensor sampled_critic_loss(Tape& tape, const Batch& batch, double temperature,
                             const std::optional<Tensor>& kcpt, const CostModel& cost,
                             std::uint64_t key, PathDensity& density);

  ExperimentConfig config_;
  MultipathNetwork net_;
  SgdMomentum optimizer_;
  BatchSampler sampler_;
  std::uint64_t iteration_ = 0;
  Rng rng_;
  double window_loss_ = 0;
  std::uint64_t window_steps_ = 0;
};

/// k_cpt values drawn for one batch (a single value unless sampling per example).
std::vector<double> draw_kcpt(const CostConfig& cost, std::size_t batch, Rng& rng);

struct RunCallbacks {
  std::function<void(const MetricsRow&)> metrics;
  std::function<void(const Checkpoint&)> checkpoint;
};

/// Trains until config.train.iterations, reporting validation metrics every
/// metrics_interval iterations (and at the last one).
void run_training(Trainer& trainer, const Dataset& validation, const RunCallbacks& callbacks);

struct CurvePoint {
  double k_cpt = 0;
  double mean_ops = 0;
  double accuracy = 0;
  std::string strategy;
  int columns = 0;
};

/// Trains one network per k_cpt value (or evaluates a single conditioned
/// network at every value), then the static baselines when enabled.
std::vector<CurvePoint> sweep(const ExperimentConfig& config, const Dataset& train,
                              const Dataset& validation,
                              const std::function<void(const std::string&)>& log = {});

/// Trains a network conditioned on k_cpt, drawing k_cpt per example.
Trainer train_adaptive(ExperimentConfig config, const Dataset& train, const Dataset& validation,
                       const RunCallbacks& callbacks = {});

struct PreparedData {
  Dataset train;
  Dataset validation;
  Dataset test;
};

/// Builds the configured dataset from canonical source files.
PreparedData prepare_data(const DataConfig& data);
/// Writes `<kind>-{train,validation,test}.mpds` plus a JSON sidecar.
void write_prepared(const PreparedData& prepared, const DataConfig& data,
                    const std::filesystem::path& directory);
/// Loads caches written by write_prepared, checking they match `data`.
PreparedData load_prepared(const DataConfig& data, const std::filesystem::path& directory);

/// Provenance record: digest, seeds, version and every hyperparameter as text.
std::string provenance_json(const ExperimentConfig& config, const std::vector<std::string>& overrides,
                            const std::string& command);

std::string report_json(const EvalReport& report);
std::string curve_csv(const std::vector<CurvePoint>& points);
std::string curve_json(const std::vector<CurvePoint>& points);

}  // namespace MULTIPATH_NUMERIC_NS
}  // namespace multipath
