#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nowcast/graph.hpp"
#include "nowcast/tensor.hpp"

namespace nowcast {

// Declarative description of the multi-scale encoder/decoder net. The encoder
// runs `stage_convs.size()` resolution stages (3x3 valid convs + ReLU), each
// followed by a strided 2x2 downsampling conv, and ends in a bottleneck conv.
// The decoder mirrors the stages: upsample x2, center-crop skip, concat, conv.
// Each output resolution gets a linear head; the finest (1 km) output comes
// from the final conv stack instead of a 1x1 head.
struct ModelConfig {
    int input_frames = 7;
    int output_frames = 6;
    std::vector<int> stage_convs;    // convs per encoder stage, finest first
    std::vector<int> stage_channels; // channels per encoder stage
    int bottleneck_channels = 0;
    std::vector<int> decoder_channels; // one per decode stage, deepest first
    std::vector<int> final_channels;   // 1 km conv stack; last entry == output_frames
    bool bottleneck_head = false;      // emit an output at the bottleneck resolution
    int conv_kernel = 3;
    int down_kernel = 2;
    int down_stride = 2;
    int head_kernel = 1;
    int loss_crop_km = 48;
    int train_patch = 256;

    int stages() const { return static_cast<int>(stage_convs.size()); }
    // Number of output resolutions (1 km, 2 km, ...).
    int levels() const { return stages() + (bottleneck_head ? 1 : 0); }
    // Input offsets must be multiples of this for translation equivariance.
    int alignment() const { return 1 << stages(); }

    void validate() const;
    std::uint64_t hash() const;
};

ModelConfig canonical_config();
ModelConfig tiny_config();

// Per-layer spatial extents for one input size (square extents handled as
// (h, w) pairs throughout).
struct ShapePlan {
    std::int64_t input_h = 0, input_w = 0;
    // (layer name, h, w) in evaluation order; the arithmetic audit trail.
    std::vector<std::pair<std::string, std::pair<std::int64_t, std::int64_t>>> layers;
    // Output extents per level, coarsest first (e.g. 8 km, 4 km, 2 km, 1 km).
    std::vector<std::pair<std::int64_t, std::int64_t>> head_extents;
    std::vector<int> head_level; // level index per head (0 = 1 km)
    // Loss crop extent per head (48 km / 2^level pixels).
    std::vector<std::int64_t> loss_crop;

    std::pair<std::int64_t, std::int64_t> finest() const { return head_extents.back(); }
    std::int64_t extent_of(const std::string& layer) const;
};

// Computes the full extent table for `input_hw`, enforcing that every skip and
// head-chain crop difference is even. Throws OddCrop / NegativeExtent naming
// the offending layer.
ShapePlan infer_shapes(const ModelConfig& config, std::int64_t input_h, std::int64_t input_w);

// Graph plus the node ids a caller needs to run it.
struct GraphBundle {
    Graph graph;
    int input_x = -1;
    int input_y = -1; // -1 when built without the loss
    std::vector<int> heads; // coarsest first, finest (1 km) last
    int loss = -1;
    ShapePlan plan;
};

struct NowcastModel {
    ModelConfig config;
    ParameterSet params;
};

// Builds the model for its configured training patch size and initializes
// parameters (fan-in scaled uniform weights, zero biases) from the seed.
// Parameter order is fixed by config traversal, independent of seed.
NowcastModel build_model(const ModelConfig& config, std::uint64_t seed);

// Builds the evaluation graph for an arbitrary valid input size. with_loss
// additionally wires the multi-scale MSE against a truth input of the same
// spatial size (requires the patch extent to be divisible by 2^(levels-1)).
GraphBundle build_graph(const ModelConfig& config, std::int64_t input_h, std::int64_t input_w,
                        bool with_loss);

// One tensor per output resolution, coarsest first; channels = output_frames.
using MultiScaleOutput = std::vector<Tensor>;

MultiScaleOutput model_forward(const NowcastModel& model, const Tensor& x);

// Sum over levels of MSE between the center-cropped head output and the
// average-pooled, identically-cropped truth; equal weights, concentric crops.
Scalar multiscale_loss(const ModelConfig& config, const MultiScaleOutput& outputs,
                       const Tensor& y);

// "NWW1" weights container: magic, version, config hash, then named tensors
// with extents and little-endian f64 payloads. Round-trips byte-exactly;
// loading verifies the config hash.
void save_weights(const ParameterSet& params, const ModelConfig& config,
                  const std::string& path);
ParameterSet load_weights(const std::string& path, const ModelConfig& config);

// Inner tensor payload shared by the weights and checkpoint containers.
class BinaryWriter;
class BinaryReader;
void write_param_payload(BinaryWriter& w, const ParameterSet& params);
ParameterSet read_param_payload(BinaryReader& r);

} // namespace nowcast
