#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "multipath/ops.hpp"
#include "multipath/tape.hpp"
#include "multipath/tensor.hpp"

namespace multipath {
inline namespace MULTIPATH_NUMERIC_NS {

/// Layout of a multiscale multipath network.
///
/// The pyramid has one level per power-of-two scale from image_size down to
/// 1x1; level k holds base_width * growth^k channels.
struct ArchitectureSchedule {
  int columns = 3;
  int base_width = 4;
  int growth = 2;
  int image_size = 32;
  int image_channels = 3;
  int classes = 10;
  int routing_hidden = 16;
  bool accepts_kcpt = false;
  /// Chain of columns with a single head at the end and no junctions.
  bool statically_routed = false;
  /// Permits column counts outside 1..8.
  bool allow_any_column_count = false;
  /// Branching layout (see TreeSchedule::parse); empty selects the chain.
  std::string tree;
  double batchnorm_epsilon = 1e-6;
  double batchnorm_decay = 0.9;

  int levels() const;
  std::size_t channels(int level) const;
};

/// Recursive branching specification.
///
/// Text form: `T` is a column ending in a classification head, `H` is a bare
/// head reading its parent's features, and `[a,b]` / `[a,b,c]` is a column
/// followed by a 2- or 3-way junction over the listed sinks. The 3-column
/// chain is `[H,[H,T]]`.
struct TreeSchedule {
  bool column = true;
  std::vector<TreeSchedule> sinks;

  bool terminal() const { return sinks.empty(); }
  static TreeSchedule parse(std::string_view text);
  static TreeSchedule chain(int columns);
  std::string to_string() const;
};

struct DenseLayer {
  Tensor weights;
  Tensor bias;
};

/// One 3x3 convolution + batch norm + rectification producing pyramid level `level`.
struct ConvBlock {
  int level = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t extent = 0;
  /// Input concatenates the same level and the pooled next-finer level.
  bool reads_finer = false;
  bool reads_same = true;
  Tensor kernel;
  Tensor bias;
  Tensor gamma;
  Tensor beta;
  BatchNormState moments;

  std::uint64_t ops() const;
};

struct ColumnTransform {
  int input_finest = 0;
  int output_finest = 0;
  /// The root column builds the whole pyramid from the image.
  bool stem = false;
  std::vector<ConvBlock> blocks;

  std::uint64_t ops() const;
};

struct Junction {
  DenseLayer hidden;
  DenseLayer output;
  bool accepts_kcpt = false;
  std::size_t sink_count = 0;

  std::uint64_t ops() const;
};

struct LayerNode {
  int id = 0;
  int parent = -1;
  std::vector<int> children;
  std::optional<ColumnTransform> transform;
  std::optional<Junction> junction;
  std::optional<DenseLayer> head;
  /// Finest pyramid level available after this node.
  int output_finest = 0;
  int depth = 0;

  bool terminal() const { return head.has_value(); }
  std::uint64_t transform_ops() const;
  std::uint64_t routing_ops() const;
  std::uint64_t head_ops() const;
  /// Multiply-accumulates charged to this node: transform, routing subnetwork and head.
  std::uint64_t n_ops() const { return transform_ops() + routing_ops() + head_ops(); }
};

enum class ParameterKind {
  conv_kernel,
  conv_bias,
  bn_gamma,
  bn_beta,
  routing_hidden_weights,
  routing_hidden_bias,
  routing_output_weights,
  routing_output_bias,
  head_weights,
  head_bias,
};

/// Weight matrices and kernels (the tensors L2 regularization applies to).
bool is_weight(ParameterKind kind);
bool is_bias(ParameterKind kind);

struct ParameterEntry {
  std::string id;
  Tensor tensor;
  int node = 0;
  ParameterKind kind = ParameterKind::conv_kernel;
};

class MultipathNetwork {
 public:
  MultipathNetwork(ArchitectureSchedule schedule, std::vector<LayerNode> nodes);
  MultipathNetwork(MultipathNetwork&&) noexcept = default;
  MultipathNetwork& operator=(MultipathNetwork&&) noexcept = default;
  MultipathNetwork(const MultipathNetwork&) = delete;
  MultipathNetwork& operator=(const MultipathNetwork&) = delete;

  /// Deep copy with independent parameters and batch-norm state.
  MultipathNetwork clone() const;

  const ArchitectureSchedule& schedule() const { return schedule_; }
  std::span<const LayerNode> nodes() const { return nodes_; }
  std::span<LayerNode> nodes() { return nodes_; }
  const LayerNode& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  LayerNode& node(int id) { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return nodes_.size(); }
  int root() const { return 0; }

  std::vector<int> terminals() const;
  std::vector<int> junctions() const;
  /// Node ids of `id` and all of its descendants, in preorder.
  std::vector<int> subtree(int id) const;
  /// Root-to-node path, inclusive.
  std::vector<int> path_to(int id) const;

  std::span<const ParameterEntry> parameters() const { return parameters_; }
  std::size_t parameter_count() const;
  std::vector<BatchNormState*> batchnorm_states();
  std::vector<const BatchNormState*> batchnorm_states() const;

  void zero_grad();
  /// Checks the rooted-tree and registry invariants; throws on violation.
  void validate() const;

 private:
  void register_parameters();

  ArchitectureSchedule schedule_;
  std::vector<LayerNode> nodes_;
  std::vector<ParameterEntry> parameters_;
};

MultipathNetwork build_chain(const ArchitectureSchedule& schedule);
MultipathNetwork build_tree(const ArchitectureSchedule& schedule, const TreeSchedule& tree);
/// Dispatches on the schedule: static chain, branching tree, or dynamic chain.
MultipathNetwork build_network(const ArchitectureSchedule& schedule);

/// Levels of features at successive scales; levels[i] is pyramid level finest + i.
struct FeaturePyramid {
  int finest = 0;
  std::vector<Tensor> levels;

  const Tensor& level(int k) const { return levels.at(static_cast<std::size_t>(k - finest)); }
  const Tensor& coarsest() const { return levels.back(); }
  std::size_t batch() const { return levels.front().dim(0); }
};

/// Pyramid holding only the input images [N,C,H,W].
FeaturePyramid image_pyramid(const Tensor& images);

struct ForwardContext {
  Tape& tape;
  BatchNormMode bn_mode = BatchNormMode::infer;
  bool update_moments = true;
};

/// Applies a node's column transform. `weights` ([N] or undefined) weights the
/// batch-norm moments in train mode.
FeaturePyramid forward_column(LayerNode& node, const FeaturePyramid& input,
                              const ForwardContext& ctx, const Tensor& weights,
                              const ArchitectureSchedule& schedule);

/// [N,C,1,1] -> [N,C].
Tensor global_descriptor(Tape& tape, const FeaturePyramid& pyramid);

/// Routing-subnetwork input feature for a cost coefficient, in units of cost
/// per ten million operations.
double kcpt_feature(double k_cpt);

/// Score vectors s_j = output(relu(hidden(descriptor ++ kcpt))).
/// descriptor: [N,C] (or [C]); kcpt: [N] (or scalar) and required exactly when
/// the junction accepts the cost feature.
Tensor routing_scores(Tape& tape, const Junction& junction, const Tensor& descriptor,
                      const std::optional<Tensor>& kcpt = std::nullopt);

Tensor head_logits(Tape& tape, const DenseLayer& head, const Tensor& descriptor);

std::uint64_t count_ops(const LayerNode& node);
std::uint64_t count_ops(const MultipathNetwork& net, std::span<const int> node_ids);
/// Subnetwork rooted at `id` (the node and all descendants).
std::uint64_t count_subnetwork_ops(const MultipathNetwork& net, int id);

}  // namespace MULTIPATH_NUMERIC_NS
}  // namespace multipath
