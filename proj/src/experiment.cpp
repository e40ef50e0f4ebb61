#include "multipath/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "multipath/errors.hpp"
#include "multipath/routing.hpp"

namespace multipath {
inline namespace MULTIPATH_NUMERIC_NS {

namespace {

// Stream purposes mixed into derived seeds.
constexpr std::uint64_t kInitStream = 0x696e6974ULL;
constexpr std::uint64_t kSamplerStream = 0x73616d70ULL;
constexpr std::uint64_t kAugmentStream = 0x61756731ULL;
constexpr std::uint64_t kCostStream = 0x6b637074ULL;
constexpr std::uint64_t kRouteStream = 0x726f7574ULL;

void copy_image(const LabeledImage& image, real* out) {
  std::copy(image.pixels.begin(), image.pixels.end(), out);
}

}  // namespace

Batch make_batch(const Dataset& dataset, std::size_t begin, std::size_t count) {
  count = std::min(count, dataset.size() - std::min(begin, dataset.size()));
  Batch b;
  b.images = Tensor({count, kImageChannels, kImageSide, kImageSide});
  for (std::size_t r = 0; r < count; ++r) {
    const LabeledImage& image = dataset.images[begin + r];
    copy_image(image, b.images.data().data() + r * kImageValues);
    b.labels.push_back(image.label);
    b.origins.push_back(image.origin);
    b.indices.push_back(begin + r);
  }
  return b;
}

BatchSampler::BatchSampler(const Dataset& dataset, std::size_t batch_size, std::uint64_t seed,
                           bool augment)
    : dataset_(dataset), batch_size_(batch_size), seed_(seed), augment_(augment) {
  if (dataset.size() == 0) throw ArgumentError("batch sampler: empty dataset");
  if (batch_size == 0) throw ArgumentError("batch sampler: batch size must be positive");
}

Batch BatchSampler::at(std::uint64_t iteration) const {
  const std::size_t n = dataset_.size();
  Batch b;
  b.images = Tensor({batch_size_, kImageChannels, kImageSide, kImageSide});
  std::uint64_t cached_epoch = UINT64_MAX;
  std::vector<std::size_t> order;
  for (std::size_t r = 0; r < batch_size_; ++r) {
    const std::uint64_t position = iteration * batch_size_ + r;
    const std::uint64_t epoch = position / n;
    if (epoch != cached_epoch) {
      Rng rng = Rng::derive(seed_, {kSamplerStream, epoch});
      order = permutation(n, rng);
      cached_epoch = epoch;
    }
    const std::size_t index = order[position % n];
    const LabeledImage& image = dataset_.images[index];
    real* dst = b.images.data().data() + r * kImageValues;
    if (augment_) {
      Rng rng = Rng::derive(seed_, {kAugmentStream, iteration, r});
      const auto shifted = augment(image.pixels, image.origin, rng);
      std::copy(shifted.begin(), shifted.end(), dst);
    } else {
      copy_image(image, dst);
    }
    b.labels.push_back(image.label);
    b.origins.push_back(image.origin);
    b.indices.push_back(index);
  }
  return b;
}

EvalReport evaluate(MultipathNetwork& net, const Dataset& dataset, double k_cpt,
                    std::size_t batch_size) {
  const ArchitectureSchedule& schedule = net.schedule();
  if (dataset.classes() != static_cast<std::size_t>(schedule.classes))
    throw ConfigError("data.kind", "dataset has " + std::to_string(dataset.classes()) +
                                       " classes but the network predicts " +
                                       std::to_string(schedule.classes));
  const std::size_t classes = dataset.classes();
  EvalReport report;
  report.examples = dataset.size();
  report.k_cpt = k_cpt;
  report.class_names = dataset.class_names;

  const auto terminals = net.terminals();
  std::vector<std::size_t> exit_count(net.size(), 0), exit_correct(net.size(), 0),
      exit_mnist(net.size(), 0);
  std::vector<std::vector<std::size_t>> exit_class(net.size(), std::vector<std::size_t>(classes, 0));
  std::vector<std::vector<std::size_t>> decisions(net.size());
  for (int j : net.junctions())
    decisions[static_cast<std::size_t>(j)].assign(net.node(j).junction->sink_count, 0);

  std::size_t correct = 0;
  double ops_total = 0, cinf_total = 0;
  for (std::size_t begin = 0; begin < dataset.size(); begin += batch_size) {
    const Batch batch = make_batch(dataset, begin, batch_size);
    const std::size_t n = batch.labels.size();
    Tape tape(Tape::Mode::inference);
    ForwardContext ctx{tape, BatchNormMode::infer, false};
    std::optional<Tensor> kcpt;
    if (schedule.accepts_kcpt) kcpt = Tensor({n}, static_cast<real>(kcpt_feature(k_cpt)));
    const SampledForward sf =
        sampled_forward(net, batch.images, RoutingPolicy::argmax(), {}, kcpt, ctx);
    for (std::size_t i = 0; i < n; ++i) {
      const auto logits = sf.logits.data().subspan(i * classes, classes);
      const int label = batch.labels[i];
      const bool hit = static_cast<int>(infer_decision(logits)) == label;
      const auto t = static_cast<std::size_t>(sf.paths[i].terminal);
      correct += hit;
      ops_total += static_cast<double>(sf.ops[i]);
      cinf_total += c_err(logits, label, ErrorKind::cross_entropy) + c_cpt(sf.ops[i], k_cpt);
      ++exit_count[t];
      exit_correct[t] += hit;
      exit_mnist[t] += batch.origins[i] == Origin::mnist;
      ++exit_class[t][static_cast<std::size_t>(label)];
      const DecisionPath& path = sf.paths[i];
      for (std::size_t k = 0; k < path.junctions.size(); ++k)
        ++decisions[static_cast<std::size_t>(path.junctions[k])][path.decisions[k]];
    }
  }

  const double total = static_cast<double>(std::max<std::size_t>(dataset.size(), 1));
  report.accuracy = static_cast<double>(correct) / total;
  report.mean_ops = ops_total / total;
  report.expected_cinf = cinf_total / total;
  for (int t : terminals) {
    const auto id = static_cast<std::size_t>(t);
    TerminalStats s;
    s.node = t;
    s.count = exit_count[id];
    s.fraction = static_cast<double>(s.count) / total;
    s.accuracy = s.count ? static_cast<double>(exit_correct[id]) / static_cast<double>(s.count) : 0.0;
    for (std::size_t c = 0; c < classes; ++c)
      s.class_fraction.push_back(static_cast<double>(exit_class[id][c]) / total);
    if (s.count) {
      s.mnist_fraction = static_cast<double>(exit_mnist[id]) / static_cast<double>(s.count);
      s.cifar_fraction = 1.0 - s.mnist_fraction;
    }
    report.terminals.push_back(std::move(s));
  }
  for (int j : net.junctions()) {
    const auto id = static_cast<std::size_t>(j);
    JunctionStats s;
    s.node = j;
    for (std::size_t c : decisions[id]) s.visits += c;
    for (std::size_t c : decisions[id])
      s.decision_frequency.push_back(s.visits ? static_cast<double>(c) / static_cast<double>(s.visits) : 0.0);
    report.junctions.push_back(std::move(s));
  }
  return report;
}

std::string metrics_header(const MultipathNetwork& net) {
  std::string out = "iteration,loss,val_accuracy,val_mean_ops";
  for (int t : net.terminals()) out += ",terminal_" + std::to_string(t);
  return out;
}

std::string metrics_line(const MetricsRow& row) {
  std::string out = std::to_string(row.iteration) + "," + format_number(row.loss) + "," +
                    format_number(row.val_accuracy) + "," + format_number(row.val_mean_ops);
  for (double f : row.terminal_fractions) out += "," + format_number(f);
  return out;
}

std::vector<double> draw_kcpt(const CostConfig& cost, std::size_t batch, Rng& rng) {
  if (!cost.sample_per_example) return std::vector<double>(batch, cost.k_cpt);
  if (cost.k_cpt_set.empty()) throw ConfigError("cost.k_cpt_set", "empty set");
  std::vector<double> out(batch);
  for (double& k : out) k = cost.k_cpt_set[rng.below(cost.k_cpt_set.size())];
  return out;
}

namespace {

void require_classes(const ExperimentConfig& config, const Dataset& train) {
  if (train.classes() != static_cast<std::size_t>(config.architecture.classes))
    throw ConfigError("data.kind", "training set has " + std::to_string(train.classes()) +
                                       " classes but the architecture predicts " +
                                       std::to_string(config.architecture.classes));
}

std::uint64_t sampler_seed(const ExperimentConfig& config) {
  return splitmix64(config.train.seed ^ kSamplerStream);
}

}  // namespace

Trainer::Trainer(ExperimentConfig config, const Dataset& train)
    : config_((config.validate(), std::move(config))),
      net_(build_network(config_.architecture)),
      optimizer_(net_, config_.optim.momentum),
      sampler_(train, config_.optim.batch_size, sampler_seed(config_), config_.data.augment),
      rng_(Rng::derive(config_.train.seed, {kInitStream})) {
  require_classes(config_, train);
  init_parameters(net_, rng_);
}

Trainer::Trainer(const Checkpoint& checkpoint, const Dataset& train)
    : config_(checkpoint.config),
      net_(restore_network(checkpoint)),
      optimizer_(net_, config_.optim.momentum),
      sampler_(train, config_.optim.batch_size, sampler_seed(config_), config_.data.augment),
      iteration_(checkpoint.iteration),
      rng_(Rng::deserialize(checkpoint.rng_state)),
      window_loss_(checkpoint.window_loss),
      window_steps_(checkpoint.window_steps) {
  require_classes(config_, train);
  if (checkpoint.momentum.size() != optimizer_.buffers().size())
    throw FormatError("checkpoint: momentum buffers do not match the network");
  for (std::size_t p = 0; p < checkpoint.momentum.size(); ++p) {
    if (checkpoint.momentum[p].size() != optimizer_.buffers()[p].size())
      throw FormatError("checkpoint: momentum buffer size mismatch");
    optimizer_.mutable_buffers()[p] = checkpoint.momentum[p];
  }
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.config = config_;
  c.iteration = iteration_;
  c.rng_state = rng_.serialize();
  for (const ParameterEntry& entry : net_.parameters())
    c.parameters.emplace_back(entry.tensor.data().begin(), entry.tensor.data().end());
  for (const BatchNormState* s : net_.batchnorm_states()) c.moments.push_back(*s);
  for (const auto& b : optimizer_.buffers()) c.momentum.push_back(b);
  c.window_loss = window_loss_;
  c.window_steps = window_steps_;
  return c;
}

double Trainer::take_window_loss() {
  const double mean = window_steps_ ? window_loss_ / static_cast<double>(window_steps_) : 0.0;
  window_loss_ = 0;
  window_steps_ = 0;
  return mean;
}

Tensor Trainer::sampled_critic_loss(Tape& tape, const Batch& batch, double temperature,
                                    const std::optional<Tensor>& kcpt, const CostModel& cost,
                                    std::uint64_t key, PathDensity& density) {
  const std::size_t n = batch.labels.size();
  std::vector<Rng> streams;
  streams.reserve(n);
  for (std::size_t i = 0; i < n; ++i) streams.push_back(Rng::derive(key, {kRouteStream, i}));
  ForwardContext ctx{tape, BatchNormMode::train, true};
  const SampledForward sf = sampled_forward(net_, batch.images,
                                            RoutingPolicy::softmax(temperature), streams, kcpt, ctx);
  density = realized_density(net_, sf);

  Tensor loss = Tensor::scalar(0);
  for (int t : net_.terminals()) {
    const auto& members = sf.members[static_cast<std::size_t>(t)];
    if (members.empty()) continue;
    std::vector<int> labels;
    for (std::size_t e : members) labels.push_back(batch.labels[e]);
    loss = add(tape, loss, sum(tape, softmax_cross_entropy(tape, sf.terminal_logits[static_cast<std::size_t>(t)], labels)));
  }
  double compute = 0;
  for (std::size_t i = 0; i < n; ++i) compute += c_cpt(sf.ops[i], cost.k_for(i));
  loss = add(tape, loss, Tensor::scalar(static_cast<real>(compute)));

  const ErrorKind kind = config_.strategy == Strategy::pragmatic_critic_classification_error
                             ? ErrorKind::classification_error
                             : ErrorKind::cross_entropy;
  const TerminalErrors errors = terminal_errors(net_, sf, batch.labels, kind);
  const UtilityTargets targets = pragmatic_utilities(net_, sf, errors, cost);
  loss = add(tape, loss, utility_regression(tape, net_, density, sf.scores, sf.members, targets,
                                            config_.regularizer.k_ure));
  return add(tape, loss, activated_l2(tape, net_, density, config_.regularizer.k_L2));
}

double Trainer::step() {
  const Batch batch = sampler_.at(iteration_);
  const std::size_t n = batch.labels.size();
  const std::uint64_t key = rng_.next();

  Rng cost_rng = Rng::derive(key, {kCostStream});
  CostModel cost;
  cost.k_cpt = config_.cost.k_cpt;
  if (config_.cost.sample_per_example) cost.per_example = draw_kcpt(config_.cost, n, cost_rng);
  std::optional<Tensor> kcpt;
  if (config_.architecture.accepts_kcpt) {
    kcpt = Tensor({n});
    for (std::size_t i = 0; i < n; ++i)
      kcpt->data()[i] = static_cast<real>(kcpt_feature(cost.k_for(i)));
  }

  const Strategy strategy = config_.strategy;
  const double temperature = temperature_at(config_.optim, iteration_, strategy);
  Tape tape;
  ForwardContext ctx{tape, BatchNormMode::train, true};
  Tensor loss;
  PathDensity density;
  if (is_critic(strategy) && config_.train.critic_mode == CriticMode::sampled) {
    loss = sampled_critic_loss(tape, batch, temperature, kcpt, cost, key, density);
  } else if (is_critic(strategy)) {
    MarginalForward mf =
        marginalized_forward(net_, batch.images, temperature, kcpt, ctx, ScoreGradient::detached);
    density = mf.density;
    const ErrorKind kind = strategy == Strategy::pragmatic_critic_classification_error
                               ? ErrorKind::classification_error
                               : ErrorKind::cross_entropy;
    const TerminalErrors errors = terminal_errors(net_, mf.logits, batch.labels, kind);
    const UtilityTargets targets = strategy == Strategy::optimistic_critic
                                       ? optimistic_utilities(net_, errors, cost)
                                       : pragmatic_utilities(net_, density, errors, cost);
    loss = expected_inference_cost(tape, net_, density, mf.logits, batch.labels, cost);
    loss = add(tape, loss, utility_regression(tape, net_, density, density.scores, {}, targets,
                                              config_.regularizer.k_ure));
    loss = add(tape, loss, activated_l2(tape, net_, density, config_.regularizer.k_L2));
  } else {
    MarginalForward mf = marginalized_forward(net_, batch.images, temperature, kcpt, ctx,
                                              ScoreGradient::through_policy);
    density = mf.density;
    loss = expected_inference_cost(tape, net_, density, mf.logits, batch.labels, cost);
    loss = add(tape, loss, actor_regularizer(tape, net_, density, config_.regularizer.k_L2,
                                             config_.regularizer.k_dec));
  }

  const double value = loss.item();
  if (!std::isfinite(value)) {
    const auto culprit = tape.first_non_finite();
    throw NumericError("non-finite loss at iteration " + std::to_string(iteration_) +
                       "; first non-finite tensor: " + culprit.value_or("none recorded"));
  }
  net_.zero_grad();
  backward(tape, loss);
  for (const ParameterEntry& entry : net_.parameters())
    if (entry.tensor.has_grad() && !all_finite(entry.tensor.grad()))
      throw NumericError("non-finite gradient at iteration " + std::to_string(iteration_) +
                         " in parameter " + entry.id);
  optimizer_.step(net_, lr_at(config_.optim, iteration_),
                  node_factors(net_, density, config_.optim.talr));
  ++iteration_;
  const double mean = value / static_cast<double>(n);
  window_loss_ += mean;
  ++window_steps_;
  return mean;
}

void run_training(Trainer& trainer, const Dataset& validation, const RunCallbacks& callbacks) {
  const ExperimentConfig& config = trainer.config();
  const std::uint64_t end = config.train.iterations;
  while (trainer.iteration() < end) {
    trainer.step();
    const std::uint64_t it = trainer.iteration();
    if (it % config.train.metrics_interval == 0 || it == end) {
      MetricsRow row;
      row.iteration = it;
      row.loss = trainer.take_window_loss();
      const EvalReport report = evaluate(trainer.network(), validation, config.cost.k_cpt,
                                         config.train.eval_batch);
      row.val_accuracy = report.accuracy;
      row.val_mean_ops = report.mean_ops;
      for (const TerminalStats& t : report.terminals) row.terminal_fractions.push_back(t.fraction);
      if (callbacks.metrics) callbacks.metrics(row);
    }
    const bool periodic = config.train.checkpoint_interval > 0 &&
                          it % config.train.checkpoint_interval == 0;
    if (callbacks.checkpoint && (periodic || it == end)) callbacks.checkpoint(trainer.checkpoint());
  }
}

Trainer train_adaptive(ExperimentConfig config, const Dataset& train, const Dataset& validation,
                       const RunCallbacks& callbacks) {
  if (!config.architecture.accepts_kcpt)
    throw ConfigError("architecture.accepts_kcpt",
                      "adaptive training needs routing subnetworks conditioned on k_cpt");
  config.cost.sample_per_example = true;
  if (config.cost.k_cpt_set.empty()) config.cost.k_cpt_set = default_kcpt_sweep();
  Trainer trainer(std::move(config), train);
  run_training(trainer, validation, callbacks);
  return trainer;
}

std::vector<CurvePoint> sweep(const ExperimentConfig& config, const Dataset& train,
                              const Dataset& validation,
                              const std::function<void(const std::string&)>& log) {
  config.validate();
  const auto say = [&](const std::string& message) {
    if (log) log(message);
  };
  std::vector<CurvePoint> points;
  const std::vector<double> ks = config.sweep.k_cpt.empty() ? default_kcpt_sweep() : config.sweep.k_cpt;
  const std::string strategy(to_string(config.strategy));

  if (config.strategy != Strategy::static_baseline) {
    if (config.architecture.accepts_kcpt) {
      ExperimentConfig c = config;
      c.cost.k_cpt_set = ks;
      say("training one network conditioned on k_cpt");
      Trainer trainer = train_adaptive(c, train, validation);
      for (double k : ks) {
        const EvalReport r = evaluate(trainer.network(), validation, k, c.train.eval_batch);
        points.push_back({k, r.mean_ops, r.accuracy, strategy + "-dynamic-kcpt", c.architecture.columns});
      }
    } else {
      for (double k : ks) {
        ExperimentConfig c = config;
        c.cost.k_cpt = k;
        c.cost.sample_per_example = false;
        say("training k_cpt=" + format_number(k));
        Trainer trainer(c, train);
        run_training(trainer, validation, {});
        const EvalReport r = evaluate(trainer.network(), validation, k, c.train.eval_batch);
        points.push_back({k, r.mean_ops, r.accuracy, strategy, c.architecture.columns});
      }
    }
  }
  if (config.sweep.include_static || config.strategy == Strategy::static_baseline) {
    for (int columns = 1; columns <= config.sweep.static_max_columns; ++columns) {
      ExperimentConfig c = config;
      c.strategy = Strategy::static_baseline;
      c.architecture.statically_routed = true;
      c.architecture.accepts_kcpt = false;
      c.architecture.tree.clear();
      c.architecture.columns = columns;
      c.cost.sample_per_example = false;
      say("training static baseline with " + std::to_string(columns) + " columns");
      Trainer trainer(c, train);
      run_training(trainer, validation, {});
      const EvalReport r = evaluate(trainer.network(), validation, c.cost.k_cpt, c.train.eval_batch);
      points.push_back({c.cost.k_cpt, r.mean_ops, r.accuracy, "static-baseline", columns});
    }
  }
  return points;
}

}  // namespace MULTIPATH_NUMERIC_NS
}  // namespace multipath
