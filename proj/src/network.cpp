#include "multipath/network.hpp"

#include <algorithm>
#include <cctype>
#include <functional>
#include <set>

#include "multipath/errors.hpp"

namespace multipath {
inline namespace MULTIPATH_NUMERIC_NS {

namespace {

constexpr int kMaxDefaultColumns = 8;

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

Tensor fresh_parameter(Shape shape, real fill = real(0)) {
  Tensor t(std::move(shape), fill);
  t.set_requires_grad(true);
  return t;
}

Tensor clone_parameter(const Tensor& t) {
  if (!t.defined()) return t;
  Tensor copy = t.clone();
  copy.set_requires_grad(t.requires_grad());
  return copy;
}

DenseLayer make_dense(std::size_t out, std::size_t in) {
  return DenseLayer{fresh_parameter({out, in}), fresh_parameter({out})};
}

DenseLayer clone_dense(const DenseLayer& d) {
  return DenseLayer{clone_parameter(d.weights), clone_parameter(d.bias)};
}

ConvBlock make_block(const ArchitectureSchedule& s, int level, std::size_t in_channels,
                     bool reads_same, bool reads_finer) {
  ConvBlock b;
  b.level = level;
  b.in_channels = in_channels;
  b.out_channels = s.channels(level);
  b.extent = static_cast<std::size_t>(s.image_size >> level);
  b.reads_same = reads_same;
  b.reads_finer = reads_finer;
  b.kernel = fresh_parameter({b.out_channels, in_channels, 3, 3});
  b.bias = fresh_parameter({b.out_channels});
  b.gamma = fresh_parameter({b.out_channels}, real(1));
  b.beta = fresh_parameter({b.out_channels});
  return b;
}

ColumnTransform make_column(const ArchitectureSchedule& s, int input_finest, bool stem) {
  const int top = s.levels() - 1;
  ColumnTransform col;
  col.stem = stem;
  col.input_finest = input_finest;
  if (stem) {
    col.output_finest = std::min(1, top);
    for (int k = 0; k <= top; ++k) {
      if (k == 0)
        col.blocks.push_back(
            make_block(s, 0, static_cast<std::size_t>(s.image_channels), true, false));
      else
        col.blocks.push_back(make_block(s, k, s.channels(k - 1), false, true));
    }
    return col;
  }
  col.output_finest = std::min(input_finest + 1, top);
  for (int k = col.output_finest; k <= top; ++k) {
    const bool finer = k - 1 >= input_finest;
    const std::size_t in = s.channels(k) + (finer ? s.channels(k - 1) : 0);
    col.blocks.push_back(make_block(s, k, in, true, finer));
  }
  return col;
}

Junction make_junction(const ArchitectureSchedule& s, std::size_t sinks) {
  Junction j;
  j.accepts_kcpt = s.accepts_kcpt;
  j.sink_count = sinks;
  const std::size_t in = s.channels(s.levels() - 1) + (s.accepts_kcpt ? 1 : 0);
  const auto hidden = static_cast<std::size_t>(s.routing_hidden);
  j.hidden = make_dense(hidden, in);
  j.output = make_dense(sinks, hidden);
  return j;
}

DenseLayer make_head(const ArchitectureSchedule& s) {
  return make_dense(static_cast<std::size_t>(s.classes), s.channels(s.levels() - 1));
}

void check_schedule(const ArchitectureSchedule& s) {
  if (!is_power_of_two(s.image_size) || s.image_size < 2)
    throw ConfigError("architecture.image_size", "must be a power of two >= 2");
  if (s.base_width < 1) throw ConfigError("architecture.base_width", "must be >= 1");
  if (s.growth < 1) throw ConfigError("architecture.growth", "must be >= 1");
  if (s.classes < 2) throw ConfigError("architecture.classes", "must be >= 2");
  if (s.image_channels < 1) throw ConfigError("architecture.image_channels", "must be >= 1");
  if (s.routing_hidden < 1) throw ConfigError("architecture.routing_hidden", "must be >= 1");
}

void check_depth(const ArchitectureSchedule& s, int columns) {
  if (columns < 1) throw ConfigError("architecture.columns", "at least one column is required");
  if (!s.allow_any_column_count && columns > kMaxDefaultColumns)
    throw ConfigError("architecture.columns",
                      "column count " + std::to_string(columns) +
                          " outside 1..8 (set architecture.allow_any_column_count to override)");
}

struct TreeBuilder {
  const ArchitectureSchedule& s;
  std::vector<LayerNode> nodes;
  int max_depth = 0;

  int add(const TreeSchedule& spec, int parent) {
    const int id = static_cast<int>(nodes.size());
    nodes.emplace_back();
    LayerNode n;
    n.id = id;
    n.parent = parent;
    if (spec.column) {
      const bool stem = parent < 0;
      const int input_finest = stem ? 0 : nodes[static_cast<std::size_t>(parent)].output_finest;
      n.transform = make_column(s, input_finest, stem);
      n.output_finest = n.transform->output_finest;
      n.depth = (stem ? 0 : nodes[static_cast<std::size_t>(parent)].depth) + 1;
    } else {
      if (parent < 0)
        throw ConfigError("architecture.tree", "the root must be a column, not a bare head");
      n.output_finest = nodes[static_cast<std::size_t>(parent)].output_finest;
      n.depth = nodes[static_cast<std::size_t>(parent)].depth;
      if (!spec.terminal())
        throw ConfigError("architecture.tree", "a bare head cannot own a junction");
    }
    max_depth = std::max(max_depth, n.depth);
    if (spec.terminal()) {
      n.head = make_head(s);
    } else {
      if (spec.sinks.size() < 2 || spec.sinks.size() > 3)
        throw ConfigError("architecture.tree",
                          "junction arity " + std::to_string(spec.sinks.size()) +
                              " outside {2,3}");
      n.junction = make_junction(s, spec.sinks.size());
    }
    nodes[static_cast<std::size_t>(id)] = std::move(n);
    for (const TreeSchedule& sink : spec.sinks) {
      const int child = add(sink, id);
      nodes[static_cast<std::size_t>(id)].children.push_back(child);
    }
    return id;
  }
};

struct TreeParser {
  std::string_view text;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError("architecture.tree",
                      what + " at offset " + std::to_string(pos) + " in \"" + std::string(text) +
                          "\"");
  }
  void skip() {
    while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
  }
  TreeSchedule node() {
    skip();
    if (pos >= text.size()) fail("unexpected end");
    const char c = text[pos];
    if (c == 'T' || c == 't') {
      ++pos;
      return TreeSchedule{true, {}};
    }
    if (c == 'H' || c == 'h') {
      ++pos;
      return TreeSchedule{false, {}};
    }
    if (c != '[') fail(std::string("unexpected '") + c + "'");
    ++pos;
    TreeSchedule out;
    out.sinks.push_back(node());
    for (;;) {
      skip();
      if (pos >= text.size()) fail("unterminated junction");
      if (text[pos] == ']') {
        ++pos;
        break;
      }
      if (text[pos] != ',') fail("expected ',' or ']'");
      ++pos;
      out.sinks.push_back(node());
    }
    if (out.sinks.size() < 2 || out.sinks.size() > 3)
      fail("junction arity " + std::to_string(out.sinks.size()) + " outside {2,3}");
    return out;
  }
};

}  // namespace

int ArchitectureSchedule::levels() const {
  int count = 1;
  for (int extent = image_size; extent > 1; extent /= 2) ++count;
  return count;
}

std::size_t ArchitectureSchedule::channels(int level) const {
  std::size_t c = static_cast<std::size_t>(base_width);
  for (int k = 0; k < level; ++k) c *= static_cast<std::size_t>(growth);
  return c;
}

TreeSchedule TreeSchedule::parse(std::string_view text) {
  TreeParser parser{text};
  TreeSchedule out = parser.node();
  parser.skip();
  if (parser.pos != text.size()) parser.fail("trailing characters");
  return out;
}

TreeSchedule TreeSchedule::chain(int columns) {
  if (columns <= 1) return TreeSchedule{true, {}};
  return TreeSchedule{true, {TreeSchedule{false, {}}, chain(columns - 1)}};
}

std::string TreeSchedule::to_string() const {
  if (terminal()) return column ? "T" : "H";
  std::string out = "[";
  for (std::size_t i = 0; i < sinks.size(); ++i) out += (i ? "," : "") + sinks[i].to_string();
  return out + "]";
}

std::uint64_t ConvBlock::ops() const {
  return static_cast<std::uint64_t>(extent) * extent * 9 * in_channels * out_channels;
}

std::uint64_t ColumnTransform::ops() const {
  std::uint64_t total = 0;
  for (const ConvBlock& b : blocks) total += b.ops();
  return total;
}

std::uint64_t Junction::ops() const {
  return static_cast<std::uint64_t>(hidden.weights.numel()) + output.weights.numel();
}

std::uint64_t LayerNode::transform_ops() const { return transform ? transform->ops() : 0; }
std::uint64_t LayerNode::routing_ops() const { return junction ? junction->ops() : 0; }
std::uint64_t LayerNode::head_ops() const { return head ? head->weights.numel() : 0; }

bool is_weight(ParameterKind kind) {
  return kind == ParameterKind::conv_kernel || kind == ParameterKind::routing_hidden_weights ||
         kind == ParameterKind::routing_output_weights || kind == ParameterKind::head_weights;
}

bool is_bias(ParameterKind kind) {
  return kind == ParameterKind::conv_bias || kind == ParameterKind::routing_hidden_bias ||
         kind == ParameterKind::routing_output_bias || kind == ParameterKind::head_bias;
}

MultipathNetwork::MultipathNetwork(ArchitectureSchedule schedule, std::vector<LayerNode> nodes)
    : schedule_(std::move(schedule)), nodes_(std::move(nodes)) {
  register_parameters();
  validate();
}

void MultipathNetwork::register_parameters() {
  parameters_.clear();
  for (const LayerNode& n : nodes_) {
    const std::string prefix = "n" + std::to_string(n.id) + ".";
    if (n.transform)
      for (const ConvBlock& b : n.transform->blocks) {
        const std::string p = prefix + "conv" + std::to_string(b.level) + ".";
        parameters_.push_back({p + "kernel", b.kernel, n.id, ParameterKind::conv_kernel});
        parameters_.push_back({p + "bias", b.bias, n.id, ParameterKind::conv_bias});
        parameters_.push_back({p + "gamma", b.gamma, n.id, ParameterKind::bn_gamma});
        parameters_.push_back({p + "beta", b.beta, n.id, ParameterKind::bn_beta});
      }
    if (n.junction) {
      parameters_.push_back({prefix + "route.hidden.weights", n.junction->hidden.weights, n.id,
                             ParameterKind::routing_hidden_weights});
      parameters_.push_back({prefix + "route.hidden.bias", n.junction->hidden.bias, n.id,
                             ParameterKind::routing_hidden_bias});
      parameters_.push_back({prefix + "route.output.weights", n.junction->output.weights, n.id,
                             ParameterKind::routing_output_weights});
      parameters_.push_back({prefix + "route.output.bias", n.junction->output.bias, n.id,
                             ParameterKind::routing_output_bias});
    }
    if (n.head) {
      parameters_.push_back(
          {prefix + "head.weights", n.head->weights, n.id, ParameterKind::head_weights});
      parameters_.push_back({prefix + "head.bias", n.head->bias, n.id, ParameterKind::head_bias});
    }
  }
}

MultipathNetwork MultipathNetwork::clone() const {
  std::vector<LayerNode> copy = nodes_;
  for (LayerNode& n : copy) {
    if (n.transform)
      for (ConvBlock& b : n.transform->blocks) {
        b.kernel = clone_parameter(b.kernel);
        b.bias = clone_parameter(b.bias);
        b.gamma = clone_parameter(b.gamma);
        b.beta = clone_parameter(b.beta);
      }
    if (n.junction) {
      n.junction->hidden = clone_dense(n.junction->hidden);
      n.junction->output = clone_dense(n.junction->output);
    }
    if (n.head) n.head = clone_dense(*n.head);
  }
  return MultipathNetwork(schedule_, std::move(copy));
}

std::vector<int> MultipathNetwork::terminals() const {
  std::vector<int> out;
  for (const LayerNode& n : nodes_)
    if (n.terminal()) out.push_back(n.id);
  return out;
}

std::vector<int> MultipathNetwork::junctions() const {
  std::vector<int> out;
  for (const LayerNode& n : nodes_)
    if (n.junction) out.push_back(n.id);
  return out;
}

std::vector<int> MultipathNetwork::subtree(int id) const {
  std::vector<int> out;
  std::vector<int> stack{id};
  while (!stack.empty()) {
    const int cur = stack.back();
    stack.pop_back();
    out.push_back(cur);
    const auto& kids = node(cur).children;
    for (auto it = kids.rbegin(); it != kids.rend(); ++it) stack.push_back(*it);
  }
  return out;
}

std::vector<int> MultipathNetwork::path_to(int id) const {
  std::vector<int> out;
  for (int cur = id; cur >= 0; cur = node(cur).parent) out.push_back(cur);
  std::reverse(out.begin(), out.end());
  return out;
}

std::size_t MultipathNetwork::parameter_count() const {
  std::size_t total = 0;
  for (const ParameterEntry& p : parameters_) total += p.tensor.numel();
  return total;
}

std::vector<BatchNormState*> MultipathNetwork::batchnorm_states() {
  std::vector<BatchNormState*> out;
  for (LayerNode& n : nodes_)
    if (n.transform)
      for (ConvBlock& b : n.transform->blocks) out.push_back(&b.moments);
  return out;
}

std::vector<const BatchNormState*> MultipathNetwork::batchnorm_states() const {
  std::vector<const BatchNormState*> out;
  for (const LayerNode& n : nodes_)
    if (n.transform)
      for (const ConvBlock& b : n.transform->blocks) out.push_back(&b.moments);
  return out;
}

void MultipathNetwork::zero_grad() {
  for (ParameterEntry& p : parameters_) p.tensor.zero_grad();
}

void MultipathNetwork::validate() const {
  if (nodes_.empty()) throw StateError("network: no nodes");
  if (nodes_[0].parent != -1) throw StateError("network: root has a parent");
  std::vector<int> seen(nodes_.size(), 0);
  for (const LayerNode& n : nodes_) {
    if (n.id < 0 || static_cast<std::size_t>(n.id) >= nodes_.size() ||
        &nodes_[static_cast<std::size_t>(n.id)] != &n)
      throw StateError("network: node ids must match positions");
    if (n.id != 0) {
      if (n.parent < 0 || static_cast<std::size_t>(n.parent) >= nodes_.size())
        throw StateError("network: node " + std::to_string(n.id) + " has no parent");
      const auto& siblings = node(n.parent).children;
      if (std::count(siblings.begin(), siblings.end(), n.id) != 1)
        throw StateError("network: parent/child links disagree at node " + std::to_string(n.id));
    }
    for (int c : n.children) {
      if (c <= 0 || static_cast<std::size_t>(c) >= nodes_.size() || node(c).parent != n.id)
        throw StateError("network: bad child link " + std::to_string(n.id) + "->" +
                         std::to_string(c));
      if (++seen[static_cast<std::size_t>(c)] > 1)
        throw StateError("network: node " + std::to_string(c) + " has two parents");
    }
    if (n.children.empty() && !n.head)
      throw StateError("network: leaf " + std::to_string(n.id) + " lacks a classification head");
    if (!n.children.empty() && n.head)
      throw StateError("network: internal node " + std::to_string(n.id) + " owns a head");
    if (n.children.size() > 1 && (!n.junction || n.junction->sink_count != n.children.size()))
      throw StateError("network: node " + std::to_string(n.id) + " branches without a junction");
    if (n.junction && n.junction->sink_count != n.children.size())
      throw StateError("network: junction arity mismatch at node " + std::to_string(n.id));
  }
  if (subtree(0).size() != nodes_.size()) throw StateError("network: unreachable nodes");

  std::set<const void*> storages;
  std::set<std::string> ids;
  for (const ParameterEntry& p : parameters_) {
    if (!storages.insert(p.tensor.data().data()).second || !ids.insert(p.id).second)
      throw StateError("network: parameter " + p.id + " registered twice");
  }
}

MultipathNetwork build_tree(const ArchitectureSchedule& schedule, const TreeSchedule& tree) {
  check_schedule(schedule);
  TreeBuilder builder{schedule, {}};
  builder.add(tree, -1);
  check_depth(schedule, builder.max_depth);
  return MultipathNetwork(schedule, std::move(builder.nodes));
}

MultipathNetwork build_chain(const ArchitectureSchedule& schedule) {
  check_schedule(schedule);
  check_depth(schedule, schedule.columns);
  if (!schedule.statically_routed) return build_tree(schedule, TreeSchedule::chain(schedule.columns));

  std::vector<LayerNode> nodes;
  int finest = 0;
  for (int i = 0; i < schedule.columns; ++i) {
    LayerNode n;
    n.id = i;
    n.parent = i - 1;
    n.transform = make_column(schedule, finest, i == 0);
    n.output_finest = n.transform->output_finest;
    n.depth = i + 1;
    finest = n.output_finest;
    if (i + 1 < schedule.columns)
      n.children.push_back(i + 1);
    else
      n.head = make_head(schedule);
    nodes.push_back(std::move(n));
  }
  return MultipathNetwork(schedule, std::move(nodes));
}

MultipathNetwork build_network(const ArchitectureSchedule& schedule) {
  if (!schedule.tree.empty()) {
    if (schedule.statically_routed)
      throw ConfigError("architecture.tree", "a branching tree cannot be statically routed");
    return build_tree(schedule, TreeSchedule::parse(schedule.tree));
  }
  return build_chain(schedule);
}

FeaturePyramid image_pyramid(const Tensor& images) {
  if (images.rank() != 4) throw ShapeError("image_pyramid: expected [N,C,H,W]");
  return FeaturePyramid{0, {images}};
}

FeaturePyramid forward_column(LayerNode& node, const FeaturePyramid& input,
                              const ForwardContext& ctx, const Tensor& weights,
                              const ArchitectureSchedule& schedule) {
  if (!node.transform) return input;
  ColumnTransform& col = *node.transform;
  Tape& tape = ctx.tape;
  const BatchNormOptions bn{schedule.batchnorm_epsilon, schedule.batchnorm_decay,
                            ctx.update_moments};
  auto apply = [&](ConvBlock& b, const Tensor& x) {
    if (x.rank() != 4 || x.dim(1) != b.in_channels || x.dim(2) != b.extent)
      throw ShapeError("forward_column: block at level " + std::to_string(b.level) +
                       " expects [N," + std::to_string(b.in_channels) + "," +
                       std::to_string(b.extent) + "," + std::to_string(b.extent) + "], got " +
                       to_string(x.shape()));
    Tensor y = conv2d_3x3(tape, x, b.kernel, b.bias);
    y = batchnorm(tape, y, b.gamma, b.beta, b.moments, ctx.bn_mode, weights, bn);
    return relu(tape, y);
  };

  FeaturePyramid out;
  out.finest = col.output_finest;
  if (col.stem) {
    if (input.finest != 0 || input.levels.empty())
      throw ShapeError("forward_column: stem column expects an image pyramid");
    Tensor previous;
    for (ConvBlock& b : col.blocks) {
      Tensor x = b.level == 0 ? input.level(0) : maxpool_2x2(tape, previous);
      previous = apply(b, x);
      if (b.level >= col.output_finest) out.levels.push_back(previous);
    }
    return out;
  }

  if (input.finest != col.input_finest)
    throw ShapeError("forward_column: expected a pyramid starting at level " +
                     std::to_string(col.input_finest) + ", got " + std::to_string(input.finest));
  for (ConvBlock& b : col.blocks) {
    Tensor x = input.level(b.level);
    if (b.reads_finer) x = concat_channels(tape, x, maxpool_2x2(tape, input.level(b.level - 1)));
    out.levels.push_back(apply(b, x));
  }
  return out;
}

Tensor global_descriptor(Tape& tape, const FeaturePyramid& pyramid) {
  const Tensor& top = pyramid.coarsest();
  if (top.rank() != 4 || top.dim(2) != 1 || top.dim(3) != 1)
    throw ShapeError("global_descriptor: coarsest level is not 1x1: " + to_string(top.shape()));
  return reshape(tape, top, {top.dim(0), top.dim(1)});
}

double kcpt_feature(double k_cpt) { return k_cpt * 1e7; }

Tensor routing_scores(Tape& tape, const Junction& junction, const Tensor& descriptor,
                      const std::optional<Tensor>& kcpt) {
  if (kcpt.has_value() != junction.accepts_kcpt)
    throw ArgumentError(junction.accepts_kcpt
                            ? "routing_scores: junction requires the k_cpt feature"
                            : "routing_scores: junction does not accept a k_cpt feature");
  const bool single = descriptor.rank() == 1;
  Tensor x = single ? reshape(tape, descriptor, {1, descriptor.dim(0)}) : descriptor;
  if (x.rank() != 2) throw ShapeError("routing_scores: descriptor must be [C] or [N,C]");
  const std::size_t n = x.dim(0);
  if (kcpt) {
    Tensor feature = *kcpt;
    if (feature.numel() == 1 && n != 1) {
      feature = Tensor({n}, feature.item());
    }
    if (feature.numel() != n)
      throw ShapeError("routing_scores: k_cpt feature has " + std::to_string(feature.numel()) +
                       " entries for " + std::to_string(n) + " examples");
    x = concat_columns(tape, x, reshape(tape, feature, {n, 1}));
  }
  Tensor h = relu(tape, dense(tape, x, junction.hidden.weights, junction.hidden.bias));
  Tensor s = dense(tape, h, junction.output.weights, junction.output.bias);
  return single ? reshape(tape, s, {junction.sink_count}) : s;
}

Tensor head_logits(Tape& tape, const DenseLayer& head, const Tensor& descriptor) {
  return dense(tape, descriptor, head.weights, head.bias);
}

std::uint64_t count_ops(const LayerNode& node) { return node.n_ops(); }

std::uint64_t count_ops(const MultipathNetwork& net, std::span<const int> node_ids) {
  std::uint64_t total = 0;
  for (int id : node_ids) total += net.node(id).n_ops();
  return total;
}

std::uint64_t count_subnetwork_ops(const MultipathNetwork& net, int id) {
  const auto ids = net.subtree(id);
  return count_ops(net, ids);
}

}  // namespace MULTIPATH_NUMERIC_NS
}  // namespace multipath
