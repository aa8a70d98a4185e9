#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nowcast/tensor.hpp"

namespace nowcast {

enum class NodeKind {
    input,
    conv2d_valid,     // param = weight [k,k,Cin,Cout]
    upsample_nearest, // attr factor
    center_crop,      // attrs crop_h, crop_w
    concat_channels,  // two or more inputs
    relu,
    linear_bias,      // param = bias [C]
    mse_cropped,      // inputs (pred, truth); attrs crop_h, crop_w; scalar out
    sum_scalar,       // sum of scalar inputs
    avgpool           // attr factor
};

struct Node {
    NodeKind kind{};
    std::string name;
    std::vector<int> inputs;
    int param = -1; // index into the ParameterSet, -1 if none
    std::int64_t stride = 1;
    std::int64_t crop_h = 0, crop_w = 0;
    std::int64_t factor = 0;
    Shape shape; // statically inferred at add time
};

struct ParameterSet {
    struct Entry {
        std::string name;
        Tensor value;
    };
    std::vector<Entry> entries;

    int add(std::string name, Tensor value);
    int find(const std::string& name) const; // -1 if absent
    std::int64_t total_elements() const;
    std::uint64_t content_hash() const;
    bool same_structure(const ParameterSet& o) const;
};

// Ordered gradient tensors, one per ParameterSet entry, same order and shapes.
struct GradientSet {
    std::vector<Tensor> grads;

    static GradientSet zeros_like(const ParameterSet& p);
    void zero();
    void accumulate(const GradientSet& o);
    void scale(Scalar s);
    bool same_structure(const GradientSet& o) const;
};

// Static, acyclic computation graph. Nodes may only reference earlier nodes,
// so node id order is a topological order. Shapes are inferred when a node is
// added; errors name the offending node. Immutable once built and shareable
// read-only across workers; per-worker state lives in Workspace.
class Graph {
public:
    int add_input(const std::string& name, Shape shape);
    int add_conv(const std::string& name, int input, int param, Shape weight_shape,
                 std::int64_t stride);
    int add_bias(const std::string& name, int input, int param, Shape bias_shape);
    int add_relu(const std::string& name, int input);
    int add_upsample(const std::string& name, int input, std::int64_t factor);
    int add_center_crop(const std::string& name, int input, std::int64_t h, std::int64_t w);
    int add_concat(const std::string& name, std::span<const int> inputs);
    int add_avgpool(const std::string& name, int input, std::int64_t factor);
    int add_mse_cropped(const std::string& name, int pred, int truth, std::int64_t h,
                        std::int64_t w);
    int add_sum_scalar(const std::string& name, std::span<const int> inputs);

    int size() const { return static_cast<int>(nodes_.size()); }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

    // Marks every ancestor of the given targets (targets included).
    std::vector<char> ancestor_mask(std::span<const int> targets) const;
    // Marks every node reachable from the given sources (sources included).
    std::vector<char> descendant_mask(std::span<const int> sources) const;
    // Nodes referencing the given parameter index.
    std::vector<int> nodes_of_param(int param) const;

private:
    int push(Node n);
    std::vector<Node> nodes_;
};

// Per-worker evaluation state: node values, adjoints, parameter gradients.
class Workspace {
public:
    explicit Workspace(const Graph& g);

    void bind(int input_id, Tensor value);

    // Evaluates all ancestors of `targets`. Bound inputs persist across calls.
    void forward(const ParameterSet& params, std::span<const int> targets);
    void forward(const ParameterSet& params, std::initializer_list<int> targets) {
        forward(params, std::span<const int>(targets.begin(), targets.size()));
    }

    // Re-evaluates only the descendants of `changed` that feed `targets`;
    // every other needed node must already be computed by a previous forward
    // with identical bindings. Results are bit-identical to a full forward.
    void forward_partial(const ParameterSet& params, std::span<const int> targets,
                         std::span<const int> changed);

    // Reverse-mode pass seeded at a scalar node evaluated by the last forward.
    // Fills gradients() (one tensor per parameter) and per-node adjoints.
    void backward(const ParameterSet& params, int loss_id);

    const Tensor& value(int id) const;
    const Tensor& adjoint(int id) const;
    const GradientSet& gradients() const { return grads_; }

private:
    void run_nodes(const ParameterSet& params, const std::vector<char>& recompute);

    const Graph* graph_;
    std::vector<Tensor> values_;
    std::vector<Tensor> adjoints_;
    std::vector<char> bound_;
    std::vector<char> computed_;
    std::vector<char> reachable_; // scratch for the current pass
    GradientSet grads_;
};

} // namespace nowcast
