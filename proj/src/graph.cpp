#include "nowcast/graph.hpp"

#include <algorithm>

#include "nowcast/kernels.hpp"

namespace nowcast {

int ParameterSet::add(std::string name, Tensor value) {
    entries.push_back({std::move(name), std::move(value)});
    return static_cast<int>(entries.size()) - 1;
}

int ParameterSet::find(const std::string& name) const {
    for (std::size_t i = 0; i < entries.size(); ++i)
        if (entries[i].name == name) return static_cast<int>(i);
    return -1;
}

std::int64_t ParameterSet::total_elements() const {
    std::int64_t n = 0;
    for (const auto& e : entries) n += e.value.numel();
    return n;
}

std::uint64_t ParameterSet::content_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& e : entries)
        h = fnv1a(e.value.data.data(), e.value.data.size() * sizeof(Scalar), h);
    return h;
}

bool ParameterSet::same_structure(const ParameterSet& o) const {
    if (entries.size() != o.entries.size()) return false;
    for (std::size_t i = 0; i < entries.size(); ++i)
        if (entries[i].name != o.entries[i].name ||
            entries[i].value.shape != o.entries[i].value.shape)
            return false;
    return true;
}

GradientSet GradientSet::zeros_like(const ParameterSet& p) {
    GradientSet g;
    g.grads.reserve(p.entries.size());
    for (const auto& e : p.entries) g.grads.emplace_back(e.value.shape);
    return g;
}

void GradientSet::zero() {
    for (auto& t : grads) t.fill(0);
}

void GradientSet::accumulate(const GradientSet& o) {
    if (!same_structure(o)) fail(ErrorCode::shape, "gradient set structure mismatch");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        Scalar* a = grads[i].ptr();
        const Scalar* b = o.grads[i].ptr();
        const std::int64_t n = grads[i].numel();
        for (std::int64_t k = 0; k < n; ++k) a[k] += b[k];
    }
}

void GradientSet::scale(Scalar s) {
    for (auto& t : grads)
        for (auto& v : t.data) v *= s;
}

bool GradientSet::same_structure(const GradientSet& o) const {
    if (grads.size() != o.grads.size()) return false;
    for (std::size_t i = 0; i < grads.size(); ++i)
        if (grads[i].shape != o.grads[i].shape) return false;
    return true;
}

int Graph::push(Node n) {
    for (int in : n.inputs)
        if (in < 0 || in >= size())
            fail(ErrorCode::shape, n.name + ": input node id out of range");
    nodes_.push_back(std::move(n));
    return size() - 1;
}

int Graph::add_input(const std::string& name, Shape shape) {
    Node n;
    n.kind = NodeKind::input;
    n.name = name;
    n.shape = shape;
    return push(std::move(n));
}

int Graph::add_conv(const std::string& name, int input, int param, Shape weight_shape,
                    std::int64_t stride) {
    Node n;
    n.kind = NodeKind::conv2d_valid;
    n.name = name;
    n.inputs = {input};
    n.param = param;
    n.stride = stride;
    const Shape& in = node(input).shape;
    if (weight_shape.rank != 4)
        fail(ErrorCode::shape, name + ": conv weight must be rank 4");
    if (weight_shape.d[2] != in.d[3])
        fail(ErrorCode::shape, name + ": weight expects " + std::to_string(weight_shape.d[2]) +
                                   " input channels, input has " + std::to_string(in.d[3]));
    const std::int64_t ho = conv_output_extent(in.d[1], weight_shape.d[0], stride, name);
    const std::int64_t wo = conv_output_extent(in.d[2], weight_shape.d[1], stride, name);
    n.shape = Shape{in.d[0], ho, wo, weight_shape.d[3]};
    return push(std::move(n));
}

int Graph::add_bias(const std::string& name, int input, int param, Shape bias_shape) {
    Node n;
    n.kind = NodeKind::linear_bias;
    n.name = name;
    n.inputs = {input};
    n.param = param;
    const Shape& in = node(input).shape;
    if (bias_shape.rank != 1 || bias_shape.d[0] != in.d[3])
        fail(ErrorCode::shape, name + ": bias shape does not match channels");
    n.shape = in;
    return push(std::move(n));
}

int Graph::add_relu(const std::string& name, int input) {
    Node n;
    n.kind = NodeKind::relu;
    n.name = name;
    n.inputs = {input};
    n.shape = node(input).shape;
    return push(std::move(n));
}

int Graph::add_upsample(const std::string& name, int input, std::int64_t factor) {
    Node n;
    n.kind = NodeKind::upsample_nearest;
    n.name = name;
    n.inputs = {input};
    n.factor = factor;
    const Shape& in = node(input).shape;
    n.shape = Shape{in.d[0], in.d[1] * factor, in.d[2] * factor, in.d[3]};
    return push(std::move(n));
}

int Graph::add_center_crop(const std::string& name, int input, std::int64_t h, std::int64_t w) {
    Node n;
    n.kind = NodeKind::center_crop;
    n.name = name;
    n.inputs = {input};
    n.crop_h = h;
    n.crop_w = w;
    const Shape& in = node(input).shape;
    if (h > in.d[1] || w > in.d[2])
        fail(ErrorCode::negative_extent,
             name + ": crop target (" + std::to_string(h) + "," + std::to_string(w) +
                 ") exceeds input " + in.str());
    n.shape = Shape{in.d[0], h, w, in.d[3]};
    return push(std::move(n));
}

int Graph::add_concat(const std::string& name, std::span<const int> inputs) {
    if (inputs.size() < 2) fail(ErrorCode::shape, name + ": concat needs >= 2 inputs");
    Node n;
    n.kind = NodeKind::concat_channels;
    n.name = name;
    n.inputs.assign(inputs.begin(), inputs.end());
    const Shape& first = node(inputs[0]).shape;
    std::int64_t channels = 0;
    for (int id : inputs) {
        const Shape& s = node(id).shape;
        if (s.d[0] != first.d[0] || s.d[1] != first.d[1] || s.d[2] != first.d[2])
            fail(ErrorCode::shape, name + ": concat spatial mismatch " + s.str() + " vs " +
                                       first.str());
        channels += s.d[3];
    }
    n.shape = Shape{first.d[0], first.d[1], first.d[2], channels};
    return push(std::move(n));
}

int Graph::add_avgpool(const std::string& name, int input, std::int64_t factor) {
    Node n;
    n.kind = NodeKind::avgpool;
    n.name = name;
    n.inputs = {input};
    n.factor = factor;
    const Shape& in = node(input).shape;
    if (in.d[1] % factor != 0 || in.d[2] % factor != 0)
        fail(ErrorCode::shape, name + ": avgpool extents " + in.str() + " not divisible by " +
                                   std::to_string(factor));
    n.shape = Shape{in.d[0], in.d[1] / factor, in.d[2] / factor, in.d[3]};
    return push(std::move(n));
}

int Graph::add_mse_cropped(const std::string& name, int pred, int truth, std::int64_t h,
                           std::int64_t w) {
    Node n;
    n.kind = NodeKind::mse_cropped;
    n.name = name;
    n.inputs = {pred, truth};
    n.crop_h = h;
    n.crop_w = w;
    const Shape& p = node(pred).shape;
    const Shape& t = node(truth).shape;
    if (p.d[0] != t.d[0] || p.d[3] != t.d[3])
        fail(ErrorCode::shape, name + ": mse batch/channel mismatch");
    if (h > p.d[1] || w > p.d[2] || h > t.d[1] || w > t.d[2])
        fail(ErrorCode::negative_extent, name + ": mse crop exceeds operand extent");
    n.shape = Shape{1};
    return push(std::move(n));
}

int Graph::add_sum_scalar(const std::string& name, std::span<const int> inputs) {
    Node n;
    n.kind = NodeKind::sum_scalar;
    n.name = name;
    n.inputs.assign(inputs.begin(), inputs.end());
    for (int id : inputs)
        if (node(id).shape.numel() != 1)
            fail(ErrorCode::shape, name + ": sum_scalar input is not scalar");
    n.shape = Shape{1};
    return push(std::move(n));
}

std::vector<char> Graph::ancestor_mask(std::span<const int> targets) const {
    std::vector<char> mask(nodes_.size(), 0);
    std::vector<int> stack(targets.begin(), targets.end());
    while (!stack.empty()) {
        int id = stack.back();
        stack.pop_back();
        if (id < 0 || id >= size()) fail(ErrorCode::shape, "target node id out of range");
        if (mask[static_cast<std::size_t>(id)]) continue;
        mask[static_cast<std::size_t>(id)] = 1;
        for (int in : nodes_[static_cast<std::size_t>(id)].inputs) stack.push_back(in);
    }
    return mask;
}

std::vector<char> Graph::descendant_mask(std::span<const int> sources) const {
    std::vector<char> mask(nodes_.size(), 0);
    for (int id : sources) {
        if (id < 0 || id >= size()) fail(ErrorCode::shape, "source node id out of range");
        mask[static_cast<std::size_t>(id)] = 1;
    }
    for (int id = 0; id < size(); ++id) {
        if (mask[static_cast<std::size_t>(id)]) continue;
        for (int in : nodes_[static_cast<std::size_t>(id)].inputs)
            if (mask[static_cast<std::size_t>(in)]) {
                mask[static_cast<std::size_t>(id)] = 1;
                break;
            }
    }
    return mask;
}

std::vector<int> Graph::nodes_of_param(int param) const {
    std::vector<int> out;
    for (int id = 0; id < size(); ++id)
        if (nodes_[static_cast<std::size_t>(id)].param == param) out.push_back(id);
    return out;
}

Workspace::Workspace(const Graph& g)
    : graph_(&g),
      values_(static_cast<std::size_t>(g.size())),
      adjoints_(static_cast<std::size_t>(g.size())),
      bound_(static_cast<std::size_t>(g.size()), 0),
      computed_(static_cast<std::size_t>(g.size()), 0) {}

void Workspace::bind(int input_id, Tensor value) {
    const Node& n = graph_->node(input_id);
    if (n.kind != NodeKind::input)
        fail(ErrorCode::shape, n.name + ": only input nodes can be bound");
    if (value.shape != n.shape)
        fail(ErrorCode::shape, n.name + ": bound value shape " + value.shape.str() +
                                   " does not match declared " + n.shape.str());
    values_[static_cast<std::size_t>(input_id)] = std::move(value);
    bound_[static_cast<std::size_t>(input_id)] = 1;
}

static void ensure_shape(Tensor& t, const Shape& s) {
    if (t.shape != s) t = Tensor(s);
}

void Workspace::forward(const ParameterSet& params, std::span<const int> targets) {
    reachable_ = graph_->ancestor_mask(targets);
    std::fill(computed_.begin(), computed_.end(), 0);
    run_nodes(params, reachable_);
}

void Workspace::forward_partial(const ParameterSet& params, std::span<const int> targets,
                                std::span<const int> changed) {
    const std::vector<char> needed = graph_->ancestor_mask(targets);
    std::vector<char> dirty = graph_->descendant_mask(changed);
    for (int id = 0; id < graph_->size(); ++id) {
        const auto i = static_cast<std::size_t>(id);
        if (!needed[i]) {
            dirty[i] = 0;
            continue;
        }
        if (dirty[i]) {
            computed_[i] = 0;
        } else if (!computed_[i]) {
            fail(ErrorCode::shape, graph_->node(id).name +
                                       ": forward_partial requires previously computed values");
        }
    }
    run_nodes(params, dirty);
}

void Workspace::run_nodes(const ParameterSet& params, const std::vector<char>& recompute) {
    for (int id = 0; id < graph_->size(); ++id) {
        if (!recompute[static_cast<std::size_t>(id)]) continue;
        const Node& n = graph_->node(id);
        Tensor& out = values_[static_cast<std::size_t>(id)];
        auto in = [&](int k) -> const Tensor& {
            return values_[static_cast<std::size_t>(n.inputs[static_cast<std::size_t>(k)])];
        };
        switch (n.kind) {
        case NodeKind::input:
            if (!bound_[static_cast<std::size_t>(id)])
                fail(ErrorCode::shape, n.name + ": input not bound before forward");
            break;
        case NodeKind::conv2d_valid:
            conv2d_forward(in(0), params.entries[static_cast<std::size_t>(n.param)].value,
                           n.stride, out);
            break;
        case NodeKind::linear_bias:
            bias_add_forward(in(0), params.entries[static_cast<std::size_t>(n.param)].value, out);
            break;
        case NodeKind::relu:
            relu_forward(in(0), out);
            break;
        case NodeKind::upsample_nearest:
            upsample_nearest_forward(in(0), n.factor, out);
            break;
        case NodeKind::center_crop:
            center_crop_forward(in(0), n.crop_h, n.crop_w, out);
            break;
        case NodeKind::avgpool:
            avgpool_forward(in(0), n.factor, out);
            break;
        case NodeKind::concat_channels: {
            if (n.inputs.size() == 2) {
                concat_channels_forward(in(0), in(1), out);
            } else {
                Tensor tmp = in(0);
                for (std::size_t k = 1; k < n.inputs.size(); ++k) {
                    Tensor next;
                    concat_channels_forward(tmp, in(static_cast<int>(k)), next);
                    tmp = std::move(next);
                }
                out = std::move(tmp);
            }
            break;
        }
        case NodeKind::mse_cropped: {
            ensure_shape(out, Shape{1});
            out.data[0] = mse_cropped(in(0), in(1), n.crop_h, n.crop_w);
            break;
        }
        case NodeKind::sum_scalar: {
            ensure_shape(out, Shape{1});
            Scalar acc = 0;
            for (std::size_t k = 0; k < n.inputs.size(); ++k)
                acc += in(static_cast<int>(k)).data[0];
            out.data[0] = acc;
            break;
        }
        }
        if (out.shape != n.shape)
            fail(ErrorCode::shape, n.name + ": computed shape " + out.shape.str() +
                                       " differs from inferred " + n.shape.str());
        computed_[static_cast<std::size_t>(id)] = 1;
    }
}

void Workspace::backward(const ParameterSet& params, int loss_id) {
    const Node& loss = graph_->node(loss_id);
    if (loss.shape.numel() != 1)
        fail(ErrorCode::shape, loss.name + ": backward requires a scalar node");
    if (!computed_[static_cast<std::size_t>(loss_id)])
        fail(ErrorCode::shape, loss.name + ": forward must run before backward");

    if (grads_.grads.empty()) grads_ = GradientSet::zeros_like(params);
    grads_.zero();

    const int targets[1] = {loss_id};
    std::vector<char> needed = graph_->ancestor_mask(targets);
    for (int id = 0; id <= loss_id; ++id) {
        if (!needed[static_cast<std::size_t>(id)]) continue;
        ensure_shape(adjoints_[static_cast<std::size_t>(id)], graph_->node(id).shape);
        adjoints_[static_cast<std::size_t>(id)].fill(0);
    }
    adjoints_[static_cast<std::size_t>(loss_id)].data[0] = 1;

    for (int id = loss_id; id >= 0; --id) {
        if (!needed[static_cast<std::size_t>(id)]) continue;
        const Node& n = graph_->node(id);
        const Tensor& gout = adjoints_[static_cast<std::size_t>(id)];
        auto val = [&](int k) -> const Tensor& {
            return values_[static_cast<std::size_t>(n.inputs[static_cast<std::size_t>(k)])];
        };
        auto adj = [&](int k) -> Tensor& {
            return adjoints_[static_cast<std::size_t>(n.inputs[static_cast<std::size_t>(k)])];
        };
        switch (n.kind) {
        case NodeKind::input:
            break;
        case NodeKind::conv2d_valid: {
            const Tensor& w = params.entries[static_cast<std::size_t>(n.param)].value;
            conv2d_backward_input(w, gout, n.stride, adj(0));
            conv2d_backward_weight(val(0), gout, n.stride,
                                   grads_.grads[static_cast<std::size_t>(n.param)]);
            break;
        }
        case NodeKind::linear_bias:
            bias_add_backward(gout, adj(0), grads_.grads[static_cast<std::size_t>(n.param)]);
            break;
        case NodeKind::relu:
            relu_backward(val(0), gout, adj(0));
            break;
        case NodeKind::upsample_nearest:
            upsample_nearest_backward(gout, n.factor, adj(0));
            break;
        case NodeKind::center_crop:
            center_crop_backward(gout, adj(0));
            break;
        case NodeKind::avgpool:
            avgpool_backward(gout, n.factor, adj(0));
            break;
        case NodeKind::concat_channels: {
            const std::int64_t B = n.shape.d[0], H = n.shape.d[1], W = n.shape.d[2];
            const std::int64_t Cout = n.shape.d[3];
            std::int64_t offset = 0;
            for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                Tensor& ga = adj(static_cast<int>(k));
                const std::int64_t C = ga.shape.d[3];
                const Scalar* gp = gout.ptr();
                Scalar* ap = ga.ptr();
                for (std::int64_t i = 0; i < B * H * W; ++i)
                    for (std::int64_t c = 0; c < C; ++c)
                        ap[i * C + c] += gp[i * Cout + offset + c];
                offset += C;
            }
            break;
        }
        case NodeKind::mse_cropped:
            mse_cropped_backward(val(0), val(1), n.crop_h, n.crop_w, gout.data[0], adj(0),
                                 adj(1));
            break;
        case NodeKind::sum_scalar:
            for (std::size_t k = 0; k < n.inputs.size(); ++k)
                adj(static_cast<int>(k)).data[0] += gout.data[0];
            break;
        }
    }
}

const Tensor& Workspace::value(int id) const {
    if (!computed_[static_cast<std::size_t>(id)])
        fail(ErrorCode::shape, graph_->node(id).name + ": value not computed");
    return values_[static_cast<std::size_t>(id)];
}

const Tensor& Workspace::adjoint(int id) const {
    return adjoints_[static_cast<std::size_t>(id)];
}

} // namespace nowcast
