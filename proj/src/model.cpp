#include "nowcast/model.hpp"

#include <cmath>

#include "nowcast/io_util.hpp"
#include "nowcast/kernels.hpp"
#include "nowcast/rng.hpp"

namespace nowcast {

void ModelConfig::validate() const {
    if (stages() < 1) fail(ErrorCode::config, "model: at least one encoder stage required");
    if (levels() < 2) fail(ErrorCode::config, "model: at least two output levels required");
    if (static_cast<int>(stage_channels.size()) != stages())
        fail(ErrorCode::config, "model: stage_channels size mismatch");
    if (static_cast<int>(decoder_channels.size()) != stages())
        fail(ErrorCode::config, "model: decoder_channels size mismatch");
    if (final_channels.empty() || final_channels.back() != output_frames)
        fail(ErrorCode::config, "model: final conv stack must end in output_frames channels");
    if (bottleneck_channels < 1) fail(ErrorCode::config, "model: bottleneck_channels < 1");
    for (int c : stage_convs)
        if (c < 1) fail(ErrorCode::config, "model: stage conv count < 1");
    if (input_frames < 1 || output_frames < 1)
        fail(ErrorCode::config, "model: frame counts must be >= 1");
    if (conv_kernel < 1 || down_kernel < 1 || down_stride < 1 || head_kernel < 1)
        fail(ErrorCode::config, "model: kernel/stride must be >= 1");
    if (loss_crop_km < 1 || loss_crop_km % (1 << (levels() - 1)) != 0)
        fail(ErrorCode::config, "model: loss_crop_km must be divisible by 2^(levels-1)");
    if (train_patch < 1) fail(ErrorCode::config, "model: train_patch < 1");
}

static void hash_i64(std::uint64_t& h, std::int64_t v) {
    h = fnv1a(&v, sizeof(v), h);
}

std::uint64_t ModelConfig::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    hash_i64(h, input_frames);
    hash_i64(h, output_frames);
    hash_i64(h, static_cast<std::int64_t>(stage_convs.size()));
    for (int v : stage_convs) hash_i64(h, v);
    for (int v : stage_channels) hash_i64(h, v);
    hash_i64(h, bottleneck_channels);
    hash_i64(h, static_cast<std::int64_t>(decoder_channels.size()));
    for (int v : decoder_channels) hash_i64(h, v);
    hash_i64(h, static_cast<std::int64_t>(final_channels.size()));
    for (int v : final_channels) hash_i64(h, v);
    hash_i64(h, bottleneck_head ? 1 : 0);
    hash_i64(h, conv_kernel);
    hash_i64(h, down_kernel);
    hash_i64(h, down_stride);
    hash_i64(h, head_kernel);
    hash_i64(h, loss_crop_km);
    hash_i64(h, train_patch);
    return h;
}

ModelConfig canonical_config() {
    ModelConfig c;
    c.stage_convs = {2, 1, 1, 1};
    c.stage_channels = {32, 64, 128, 192};
    c.bottleneck_channels = 256;
    c.decoder_channels = {128, 96, 64, 48};
    c.final_channels = {32, 32, 6};
    c.bottleneck_head = false;
    c.train_patch = 256;
    return c;
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.stage_convs = {1};
    c.stage_channels = {8};
    c.bottleneck_channels = 16;
    c.decoder_channels = {16};
    c.final_channels = {6};
    c.bottleneck_head = true;
    c.train_patch = 70;
    return c;
}

std::int64_t ShapePlan::extent_of(const std::string& layer) const {
    for (const auto& [name, hw] : layers)
        if (name == layer) return hw.first;
    fail(ErrorCode::shape, "shape plan has no layer named " + layer);
}

namespace {

struct ParamSpec {
    std::string name;
    Shape shape;
    std::int64_t fan_in;
};

// Single architecture traversal used by shape inference, parameter creation
// and graph building, so parameter order and layer arithmetic can never drift
// apart.
struct Builder {
    const ModelConfig& cfg;
    std::int64_t H, W;
    bool with_loss;

    Graph g;
    ShapePlan plan;
    std::vector<ParamSpec> specs;
    std::vector<int> heads;
    std::vector<int> head_level;
    int input_x = -1, input_y = -1, loss = -1;

    explicit Builder(const ModelConfig& c, std::int64_t h, std::int64_t w, bool loss_mode)
        : cfg(c), H(h), W(w), with_loss(loss_mode) {}

    int param(const std::string& name, Shape shape, std::int64_t fan_in) {
        specs.push_back({name, shape, fan_in});
        return static_cast<int>(specs.size()) - 1;
    }

    void record(const std::string& name, int node) {
        const Shape& s = g.node(node).shape;
        plan.layers.push_back({name, {s.d[1], s.d[2]}});
    }

    // conv + bias (+ optional relu); returns the last node id.
    int conv_block(const std::string& name, int in, std::int64_t k, std::int64_t stride,
                   std::int64_t out_ch, bool relu) {
        const std::int64_t in_ch = g.node(in).shape.d[3];
        const int w = param(name + ".w", Shape{k, k, in_ch, out_ch}, k * k * in_ch);
        const int b = param(name + ".b", Shape{out_ch}, 0);
        int id = g.add_conv(name, in, w, Shape{k, k, in_ch, out_ch}, stride);
        id = g.add_bias(name + ".bias", id, b, Shape{out_ch});
        if (relu) id = g.add_relu(name + ".relu", id);
        record(name, id);
        return id;
    }

    // Center-crop `big` to the spatial extent of `ref`, requiring an even,
    // non-negative difference (skip and head-chain alignment).
    int aligned_crop(const std::string& name, int big, int ref) {
        const Shape& bs = g.node(big).shape;
        const Shape& rs = g.node(ref).shape;
        const std::int64_t dh = bs.d[1] - rs.d[1];
        const std::int64_t dw = bs.d[2] - rs.d[2];
        if (dh < 0 || dw < 0)
            fail(ErrorCode::negative_extent,
                 "NegativeExtent at " + name + ": cannot crop " + bs.str() + " to " + rs.str());
        if (dh % 2 != 0 || dw % 2 != 0)
            fail(ErrorCode::odd_crop, "OddCrop at " + name + ": difference (" +
                                          std::to_string(dh) + "," + std::to_string(dw) +
                                          ") is odd");
        int id = g.add_center_crop(name, big, rs.d[1], rs.d[2]);
        record(name, id);
        return id;
    }

    void build() {
        cfg.validate();
        plan.input_h = H;
        plan.input_w = W;
        const int E = cfg.stages();

        input_x = g.add_input("input", Shape{1, H, W, cfg.input_frames});
        plan.layers.push_back({"input", {H, W}});

        // Encoder: per-stage valid convs, then a strided downsampling conv.
        std::vector<int> skips;
        int feat = input_x;
        for (int s = 0; s < E; ++s) {
            for (int c = 0; c < cfg.stage_convs[static_cast<std::size_t>(s)]; ++c)
                feat = conv_block("enc" + std::to_string(s) + ".conv" + std::to_string(c), feat,
                                  cfg.conv_kernel, 1, cfg.stage_channels[static_cast<std::size_t>(s)],
                                  true);
            skips.push_back(feat);
            const int next_ch = s + 1 < E ? cfg.stage_channels[static_cast<std::size_t>(s) + 1]
                                          : cfg.bottleneck_channels;
            feat = conv_block("down" + std::to_string(s), feat, cfg.down_kernel, cfg.down_stride,
                              next_ch, true);
        }
        feat = conv_block("bottleneck", feat, cfg.conv_kernel, 1, cfg.bottleneck_channels, true);

        int prev_head = -1;
        if (cfg.bottleneck_head) {
            const int h = conv_block("head" + std::to_string(E), feat, cfg.head_kernel, 1,
                                     cfg.output_frames, false);
            heads.push_back(h);
            head_level.push_back(E);
            prev_head = h;
        }

        // Decoder: upsample, crop the skip, concatenate, convolve. Heads chain
        // coarse-to-fine; the 1 km output is the final conv stack.
        int dec = feat;
        for (int s = E - 1; s >= 0; --s) {
            const std::string tag = "dec" + std::to_string(s);
            int up = g.add_upsample(tag + ".up", dec, 2);
            record(tag + ".up", up);
            int sk = aligned_crop(tag + ".skip_crop", skips[static_cast<std::size_t>(s)], up);
            const int cat_in[2] = {up, sk};
            int cat = g.add_concat(tag + ".concat", cat_in);
            dec = conv_block(tag + ".conv", cat, cfg.conv_kernel, 1,
                             cfg.decoder_channels[static_cast<std::size_t>(E - 1 - s)], true);

            int head_in = dec;
            if (prev_head >= 0) {
                const std::string htag = "head" + std::to_string(s);
                int hup = g.add_upsample(htag + ".up", prev_head, 2);
                record(htag + ".up", hup);
                int hcrop = aligned_crop(htag + ".crop", hup, dec);
                const int hcat_in[2] = {dec, hcrop};
                head_in = g.add_concat(htag + ".concat", hcat_in);
            }
            if (s >= 1) {
                const int h = conv_block("head" + std::to_string(s), head_in, cfg.head_kernel, 1,
                                         cfg.output_frames, false);
                heads.push_back(h);
                head_level.push_back(s);
                prev_head = h;
            } else {
                int fin = head_in;
                const int n = static_cast<int>(cfg.final_channels.size());
                for (int t = 0; t < n; ++t)
                    fin = conv_block("final.conv" + std::to_string(t), fin, cfg.conv_kernel, 1,
                                     cfg.final_channels[static_cast<std::size_t>(t)], t + 1 < n);
                heads.push_back(fin);
                head_level.push_back(0);
            }
        }

        for (std::size_t i = 0; i < heads.size(); ++i) {
            const Shape& s = g.node(heads[i]).shape;
            plan.head_extents.push_back({s.d[1], s.d[2]});
            plan.head_level.push_back(head_level[i]);
            plan.loss_crop.push_back(cfg.loss_crop_km >> head_level[i]);
        }

        if (with_loss) build_loss();
    }

    void build_loss() {
        input_y = g.add_input("truth", Shape{1, H, W, cfg.output_frames});
        std::vector<int> terms;
        for (std::size_t i = 0; i < heads.size(); ++i) {
            const int level = head_level[i];
            const std::int64_t pool = std::int64_t(1) << level;
            const std::int64_t crop = cfg.loss_crop_km >> level;
            const std::string tag = "loss" + std::to_string(level);
            int truth = input_y;
            if (pool > 1) {
                if (H % pool != 0 || W % pool != 0)
                    fail(ErrorCode::shape, tag + ".pool: patch extent " + std::to_string(H) +
                                               " not divisible by " + std::to_string(pool));
                truth = g.add_avgpool(tag + ".pool", input_y, pool);
            }
            const Shape& hs = g.node(heads[i]).shape;
            const Shape& ts = g.node(truth).shape;
            if (hs.d[1] < crop || hs.d[2] < crop || ts.d[1] < crop || ts.d[2] < crop)
                fail(ErrorCode::negative_extent,
                     "NegativeExtent at " + tag + ".mse: loss crop " + std::to_string(crop) +
                         " exceeds head extent " + hs.str());
            terms.push_back(g.add_mse_cropped(tag + ".mse", heads[i], truth, crop, crop));
        }
        loss = g.add_sum_scalar("loss.total", terms);
    }
};

GraphBundle to_bundle(Builder&& b) {
    GraphBundle out;
    out.graph = std::move(b.g);
    out.input_x = b.input_x;
    out.input_y = b.input_y;
    out.heads = std::move(b.heads);
    out.loss = b.loss;
    out.plan = std::move(b.plan);
    return out;
}

} // namespace

ShapePlan infer_shapes(const ModelConfig& config, std::int64_t input_h, std::int64_t input_w) {
    Builder b(config, input_h, input_w, false);
    b.build();
    return std::move(b.plan);
}

GraphBundle build_graph(const ModelConfig& config, std::int64_t input_h, std::int64_t input_w,
                        bool with_loss) {
    Builder b(config, input_h, input_w, with_loss);
    b.build();
    return to_bundle(std::move(b));
}

NowcastModel build_model(const ModelConfig& config, std::uint64_t seed) {
    Builder b(config, config.train_patch, config.train_patch, true);
    b.build();

    NowcastModel m;
    m.config = config;
    Rng rng(derive_seed(seed, 0x77e17e5));
    for (const auto& spec : b.specs) {
        Tensor t(spec.shape);
        if (spec.fan_in > 0) {
            const double bound = std::sqrt(6.0 / static_cast<double>(spec.fan_in));
            for (auto& v : t.data)
                v = static_cast<Scalar>(rng.uniform(-bound, bound));
        }
        m.params.add(spec.name, std::move(t));
    }
    return m;
}

MultiScaleOutput model_forward(const NowcastModel& model, const Tensor& x) {
    if (x.shape.rank != 4 || x.shape.d[3] != model.config.input_frames)
        fail(ErrorCode::shape, "model_forward: input must be [B,H,W," +
                                   std::to_string(model.config.input_frames) + "], got " +
                                   x.shape.str());
    GraphBundle bundle = build_graph(model.config, x.shape.d[1], x.shape.d[2], false);

    // Graphs are declared for batch 1; rebind the input with the actual batch.
    // All ops are batch-wise, so shapes only differ in the leading extent.
    Graph& g = bundle.graph;
    Workspace ws(g);
    if (x.shape.d[0] == 1) {
        ws.bind(bundle.input_x, x);
        ws.forward(model.params, bundle.heads);
        MultiScaleOutput out;
        for (int id : bundle.heads) out.push_back(ws.value(id));
        return out;
    }
    // Batched evaluation: run per sample and stack. Keeps workspaces small and
    // the arithmetic identical to the single-sample path.
    const std::int64_t B = x.shape.d[0];
    MultiScaleOutput out;
    for (std::int64_t b = 0; b < B; ++b) {
        Tensor xi(Shape{1, x.shape.d[1], x.shape.d[2], x.shape.d[3]});
        const std::int64_t n = xi.numel();
        for (std::int64_t k = 0; k < n; ++k) xi.data[static_cast<std::size_t>(k)] =
            x.data[static_cast<std::size_t>(b * n + k)];
        ws.bind(bundle.input_x, std::move(xi));
        ws.forward(model.params, bundle.heads);
        for (std::size_t h = 0; h < bundle.heads.size(); ++h) {
            const Tensor& v = ws.value(bundle.heads[h]);
            if (b == 0)
                out.emplace_back(Shape{B, v.shape.d[1], v.shape.d[2], v.shape.d[3]});
            const std::int64_t m = v.numel();
            for (std::int64_t k = 0; k < m; ++k)
                out[h].data[static_cast<std::size_t>(b * m + k)] =
                    v.data[static_cast<std::size_t>(k)];
        }
    }
    return out;
}

Scalar multiscale_loss(const ModelConfig& config, const MultiScaleOutput& outputs,
                       const Tensor& y) {
    ShapePlan plan = infer_shapes(config, y.shape.d[1], y.shape.d[2]);
    if (outputs.size() != plan.head_extents.size())
        fail(ErrorCode::shape, "multiscale_loss: expected " +
                                   std::to_string(plan.head_extents.size()) + " outputs, got " +
                                   std::to_string(outputs.size()));
    Scalar total = 0;
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        const int level = plan.head_level[i];
        const std::int64_t pool = std::int64_t(1) << level;
        const std::int64_t crop = plan.loss_crop[i];
        Tensor truth;
        if (pool > 1)
            avgpool_forward(y, pool, truth);
        else
            truth = y;
        total += mse_cropped(outputs[i], truth, crop, crop);
    }
    return total;
}

static constexpr std::uint16_t kWeightsVersion = 1;

void write_param_payload(BinaryWriter& w, const ParameterSet& params) {
    w.u32(static_cast<std::uint32_t>(params.entries.size()));
    for (const auto& e : params.entries) {
        w.str(e.name);
        w.u32(static_cast<std::uint32_t>(e.value.shape.rank));
        for (int i = 0; i < e.value.shape.rank; ++i)
            w.u32(static_cast<std::uint32_t>(e.value.shape.d[i]));
        for (Scalar v : e.value.data) w.f64(static_cast<double>(v));
    }
}

ParameterSet read_param_payload(BinaryReader& r) {
    const std::uint32_t count = r.u32();
    ParameterSet p;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.str();
        const std::uint32_t rank = r.u32();
        if (rank < 1 || rank > 4) fail(ErrorCode::io, r.path() + ": bad tensor rank");
        Shape s;
        s.rank = static_cast<int>(rank);
        for (std::uint32_t k = 0; k < rank; ++k)
            s.d[k] = static_cast<std::int64_t>(r.u32());
        s.validate();
        Tensor t(s);
        for (auto& v : t.data) v = static_cast<Scalar>(r.f64());
        p.add(std::move(name), std::move(t));
    }
    return p;
}

void save_weights(const ParameterSet& params, const ModelConfig& config,
                  const std::string& path) {
    BinaryWriter w(path);
    w.magic("NWW1");
    w.u16(kWeightsVersion);
    w.u64(config.hash());
    write_param_payload(w, params);
    w.commit();
}

ParameterSet load_weights(const std::string& path, const ModelConfig& config) {
    BinaryReader r(path);
    r.expect_magic("NWW1");
    const std::uint16_t version = r.u16();
    if (version != kWeightsVersion)
        fail(ErrorCode::io, path + ": unsupported weights version " + std::to_string(version));
    const std::uint64_t hash = r.u64();
    if (hash != config.hash())
        fail(ErrorCode::config_hash_mismatch,
             "ConfigHashMismatch: " + path + " was saved for a different model config");
    return read_param_payload(r);
}

} // namespace nowcast
