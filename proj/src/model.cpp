#include "uda/model.hpp"

#include <cmath>
#include <numeric>

namespace uda {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EncoderConfig, kind, patch_size, embed_dim, depth, num_heads,
                                                mlp_ratio, weights_path, freeze)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AdapterConfig, spatial_prior, width)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PyramidDecoderConfig, channel_schedule, num_classes)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ProjectorConfig, teacher_dim, kind)

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"encoder", c.encoder}, {"adapter", c.adapter}, {"decoder", c.decoder}, {"projector", c.projector}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    c = ModelConfig{};
    if (j.contains("encoder")) c.encoder = j.at("encoder").get<EncoderConfig>();
    if (j.contains("adapter")) c.adapter = j.at("adapter").get<AdapterConfig>();
    if (j.contains("decoder")) c.decoder = j.at("decoder").get<PyramidDecoderConfig>();
    if (j.contains("projector")) c.projector = j.at("projector").get<ProjectorConfig>();
}

void PyramidDecoderConfig::validate() const {
    if (channel_schedule.size() != 4)
        throw std::invalid_argument("decoder channel_schedule must have 4 entries, got " +
                                    std::to_string(channel_schedule.size()));
    for (std::size_t i = 0; i < channel_schedule.size(); ++i) {
        if (channel_schedule[i] <= 0) throw std::invalid_argument("decoder channel widths must be positive");
        if (i > 0 && channel_schedule[i] >= channel_schedule[i - 1])
            throw std::invalid_argument("decoder channel widths must strictly decrease toward higher resolution");
    }
    if (num_classes < 1) throw std::invalid_argument("num_classes must be positive");
}

int ModelConfig::size_multiple() const { return std::lcm(encoder.patch_size, kPyramidStrides.back()); }

void ModelConfig::validate() const {
    decoder.validate();
    if (encoder.kind != "toy-transformer" && encoder.kind != "external-pretrained")
        throw std::invalid_argument("unknown encoder kind " + encoder.kind);
    if (encoder.kind == "external-pretrained" && encoder.weights_path.empty())
        throw std::invalid_argument("external-pretrained encoder needs model.encoder.weights_path");
    if (encoder.patch_size < 1 || encoder.depth < 1 || encoder.embed_dim % 4 != 0 || encoder.num_heads < 1 ||
        encoder.embed_dim % encoder.num_heads != 0)
        throw std::invalid_argument("invalid encoder geometry");
    if (adapter.width < 2) throw std::invalid_argument("adapter width must be >= 2");
    if (projector.kind != "linear" && projector.kind != "mlp")
        throw std::invalid_argument("unknown projector kind " + projector.kind);
    if (projector.teacher_dim < 1) throw std::invalid_argument("projector teacher_dim must be positive");
}

namespace {

Tensor sincos_positions(int h, int w, int dim) {
    Tensor pos({h * w, dim});
    const int quarter = dim / 4;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int n = y * w + x;
            for (int k = 0; k < quarter; ++k) {
                const Real omega = 1.0 / std::pow(10000.0, static_cast<Real>(k) / quarter);
                pos[static_cast<std::size_t>(n) * dim + k] = std::sin(y * omega);
                pos[static_cast<std::size_t>(n) * dim + quarter + k] = std::cos(y * omega);
                pos[static_cast<std::size_t>(n) * dim + 2 * quarter + k] = std::sin(x * omega);
                pos[static_cast<std::size_t>(n) * dim + 3 * quarter + k] = std::cos(x * omega);
            }
        }
    return pos;
}

constexpr Real kPixelMean = 0.5;
constexpr Real kPixelStd = 0.25;

Tensor normalize_pixels(const Tensor& images) {
    Tensor out = images;
    for (auto& v : out.values()) v = (v - kPixelMean) / kPixelStd;
    return out;
}

int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

}  // namespace

ToyTransformerEncoder::ToyTransformerEncoder(const EncoderConfig& cfg, ParameterSet& ps, Rng& rng,
                                             const std::string& prefix)
    : cfg_(cfg) {
    const int d = cfg.embed_dim, p = cfg.patch_size;
    const Real std = 0.02;
    patch_embed_ = make_linear(ps, prefix + ".patch_embed.0", 3 * p * p, d, {ParamKind::encoder_embed}, rng,
                               1.0 / std::sqrt(3.0 * p * p));
    for (int i = 0; i < cfg.depth; ++i) {
        const ParamGroup g{ParamKind::encoder_block, i};
        const std::string b = prefix + ".blocks." + std::to_string(i);
        Block blk;
        blk.norm1 = make_layer_norm(ps, b + ".norm1", d, g);
        blk.qkv = make_linear(ps, b + ".qkv", d, 3 * d, g, rng, std);
        blk.proj = make_linear(ps, b + ".proj", d, d, g, rng, std);
        blk.norm2 = make_layer_norm(ps, b + ".norm2", d, g);
        blk.fc1 = make_linear(ps, b + ".fc1", d, cfg.mlp_ratio * d, g, rng, std);
        blk.fc2 = make_linear(ps, b + ".fc2", cfg.mlp_ratio * d, d, g, rng, std);
        blocks_.push_back(std::move(blk));
    }
    final_norm_ = make_layer_norm(ps, prefix + ".head.0.norm", d, {ParamKind::encoder_head});
}

TokenGrid ToyTransformerEncoder::encode(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != 3) throw ShapeError("encode expects [B, 3, H, W], got " + shape_str(images.shape()));
    const int B = images.dim(0), H = images.dim(2), W = images.dim(3), p = cfg_.patch_size;
    if (H % p != 0 || W % p != 0)
        throw ShapeError("input " + std::to_string(H) + "x" + std::to_string(W) + " is not divisible by patch size " +
                         std::to_string(p));
    const int gh = H / p, gw = W / p, N = gh * gw, K = 3 * p * p;
    Tensor patches({B, N, K});
    for (int b = 0; b < B; ++b)
        for (int ty = 0; ty < gh; ++ty)
            for (int tx = 0; tx < gw; ++tx) {
                Real* dst = patches.data() + (static_cast<std::size_t>(b) * N + ty * gw + tx) * K;
                for (int c = 0; c < 3; ++c)
                    for (int ky = 0; ky < p; ++ky)
                        for (int kx = 0; kx < p; ++kx)
                            *dst++ = (images.at(b, c, ty * p + ky, tx * p + kx) - kPixelMean) / kPixelStd;
            }
    Var x = patch_embed_(Var(std::move(patches)));
    x = ops::add_broadcast(x, Var(sincos_positions(gh, gw, cfg_.embed_dim)));
    for (const auto& blk : blocks_) {
        Var a = ops::self_attention(blk.qkv(blk.norm1(x)), cfg_.num_heads);
        x = ops::add(x, blk.proj(a));
        x = ops::add(x, blk.fc2(ops::gelu(blk.fc1(blk.norm2(x)))));
    }
    return {final_norm_(x), gh, gw};
}

MultiScaleAdapter::MultiScaleAdapter(const AdapterConfig& cfg, int embed_dim, ParameterSet& ps, Rng& rng)
    : cfg_(cfg) {
    const ParamGroup g{ParamKind::adapter};
    const int w = cfg.width;
    if (cfg.spatial_prior) {
        const std::array<std::pair<int, int>, 5> io{{{3, w / 2}, {w / 2, w}, {w, w}, {w, w}, {w, w}}};
        for (std::size_t i = 0; i < io.size(); ++i) {
            const std::string n = "adapter.prior." + std::to_string(i);
            auto conv = make_conv(ps, n + ".conv", io[i].first, io[i].second, 3, 2, g, rng);
            auto bn = make_batch_norm(ps, n + ".bn", io[i].second, g);
            prior_.emplace_back(std::move(conv), std::move(bn));
        }
    }
    for (int l = 0; l < 4; ++l) {
        token_proj_[l] = make_conv(ps, "adapter.token_proj." + std::to_string(l), embed_dim, w, 1, 1, g, rng);
        if (cfg.spatial_prior) fusion_[l] = make_conv(ps, "adapter.fusion." + std::to_string(l), w, w, 1, 1, g, rng);
    }
}

void MultiScaleAdapter::zero_fusion() {
    for (auto& f : fusion_) {
        if (!f.weight.defined()) continue;
        f.weight.mutable_value().fill(0.0);
        f.bias.mutable_value().fill(0.0);
    }
}

MultiScaleFeatures MultiScaleAdapter::adapt(const TokenGrid& tokens, const Tensor& images, bool training) const {
    const int H = images.dim(2), W = images.dim(3);
    if (tokens.h <= 0 || H % tokens.h != 0 || W % tokens.w != 0 || H / tokens.h != W / tokens.w ||
        tokens.tokens.dim(0) != images.dim(0))
        throw ShapeError("token grid " + std::to_string(tokens.h) + "x" + std::to_string(tokens.w) +
                         " does not match image " + shape_str(images.shape()));
    if (H % kPyramidStrides.back() != 0 || W % kPyramidStrides.back() != 0)
        throw ShapeError("adapter input must be a multiple of 32, got " + shape_str(images.shape()));

    Var tok_map = ops::tokens_to_map(tokens.tokens, tokens.h, tokens.w);
    std::array<Var, 4> prior_levels;
    if (cfg_.spatial_prior) {
        Var x(normalize_pixels(images));
        for (std::size_t i = 0; i < prior_.size(); ++i) {
            x = ops::relu(prior_[i].second(prior_[i].first(x), training));
            if (i >= 1) prior_levels[i - 1] = x;
        }
    }
    MultiScaleFeatures out;
    for (int l = 0; l < 4; ++l) {
        const int s = kPyramidStrides[l];
        Var level = ops::resize_bilinear(token_proj_[l](tok_map), H / s, W / s);
        if (cfg_.spatial_prior) level = ops::add(level, fusion_[l](prior_levels[l]));
        out.levels[l] = level;
    }
    return out;
}

BasicPyramidDecoder::BasicPyramidDecoder(const PyramidDecoderConfig& cfg, int in_width, ParameterSet& ps, Rng& rng)
    : cfg_(cfg) {
    cfg.validate();
    const ParamGroup g{ParamKind::decoder};
    const auto& ch = cfg.channel_schedule;
    for (int i = 0; i < 4; ++i)
        lateral_[i] = make_conv(ps, "decoder.lateral." + std::to_string(i), in_width, ch[i], 1, 1, g, rng);
    for (int i = 0; i < 3; ++i) {
        const std::string n = "decoder.stage." + std::to_string(i);
        auto conv = make_conv(ps, n + ".conv", ch[i], ch[i + 1], 3, 1, g, rng);
        auto bn = make_batch_norm(ps, n + ".bn", ch[i + 1], g);
        stages_[i] = {std::move(conv), std::move(bn)};
    }
    classifier_ = make_conv(ps, "decoder.classifier.0", ch[3], cfg.num_classes, 1, 1, g, rng);
}

Var BasicPyramidDecoder::decode(const MultiScaleFeatures& features, int out_h, int out_w, bool training) const {
    for (int l = 1; l < 4; ++l) {
        const auto& fine = features.levels[l - 1].shape();
        const auto& coarse = features.levels[l].shape();
        if (fine[2] != 2 * coarse[2] || fine[3] != 2 * coarse[3])
            throw ShapeError("feature levels are not a factor-2 pyramid");
    }
    Var x = lateral_[0](features.levels[3]);
    for (int i = 0; i < 3; ++i) {
        x = ops::upsample_nearest(x, 2);
        x = ops::relu(stages_[i].second(stages_[i].first(x), training));
        x = ops::add(x, lateral_[i + 1](features.levels[2 - i]));
    }
    return ops::resize_bilinear(classifier_(x), out_h, out_w);
}

FeatureProjector::FeatureProjector(const ProjectorConfig& cfg, int embed_dim, ParameterSet& ps, Rng& rng)
    : cfg_(cfg) {
    const ParamGroup g{ParamKind::projector};
    layers_.push_back(make_linear(ps, "projector.layer.0", embed_dim, cfg.teacher_dim, g, rng,
                                  1.0 / std::sqrt(static_cast<Real>(embed_dim))));
    if (cfg.kind == "mlp")
        layers_.push_back(make_linear(ps, "projector.layer.1", cfg.teacher_dim, cfg.teacher_dim, g, rng,
                                      1.0 / std::sqrt(static_cast<Real>(cfg.teacher_dim))));
}

Var FeatureProjector::project(const Var& tokens) const {
    Var x = layers_[0](tokens);
    for (std::size_t i = 1; i < layers_.size(); ++i) x = layers_[i](ops::gelu(x));
    return x;
}

SegmentationModel::SegmentationModel(ModelConfig cfg, std::uint64_t init_seed)
    : cfg_(std::move(cfg)), params_(std::make_unique<ParameterSet>()) {
    cfg_.validate();
    Rng rng = Rng::derive(init_seed, {0x6d6f64656cULL});
    encoder_ = std::make_unique<ToyTransformerEncoder>(cfg_.encoder, *params_, rng);
    if (cfg_.encoder.kind == "external-pretrained") {
        const Archive ar = load_archive(cfg_.encoder.weights_path);
        std::map<std::string, Tensor> enc;
        for (const auto& [name, t] : ar.tensors)
            if (name.rfind("encoder.", 0) == 0) enc.emplace(name, t);
        params_->load_state(enc, /*allow_missing=*/true);
        for (const auto& p : params_->params())
            if (p.name.rfind("encoder.", 0) == 0 && !enc.count(p.name))
                throw StructureError("pretrained encoder archive lacks " + p.name);
    }
    if (cfg_.encoder.freeze)
        for (auto& p : params_->params())
            if (p.name.rfind("encoder.", 0) == 0) p.var.node()->requires_grad = false;
    adapter_ = std::make_unique<MultiScaleAdapter>(cfg_.adapter, cfg_.encoder.embed_dim, *params_, rng);
    decoder_ = std::make_unique<BasicPyramidDecoder>(cfg_.decoder, cfg_.adapter.width, *params_, rng);
    projector_ = std::make_unique<FeatureProjector>(cfg_.projector, cfg_.encoder.embed_dim, *params_, rng);
}

std::unique_ptr<SegmentationModel> SegmentationModel::clone() const {
    auto copy = std::make_unique<SegmentationModel>(cfg_, 0);
    copy->params_->copy_from(*params_);
    return copy;
}

TokenGrid SegmentationModel::encode(const Tensor& images) const { return encoder_->encode(images); }

MultiScaleFeatures SegmentationModel::adapt(const TokenGrid& tokens, const Tensor& images, bool training) const {
    return adapter_->adapt(tokens, images, training);
}

Var SegmentationModel::decode(const MultiScaleFeatures& features, int out_h, int out_w, bool training) const {
    return decoder_->decode(features, out_h, out_w, training);
}

Var SegmentationModel::project(const Var& tokens) const { return projector_->project(tokens); }

ForwardResult SegmentationModel::forward(const Tensor& images, bool training) const {
    if (images.rank() != 4 || images.dim(1) != 3) throw ShapeError("forward expects [B, 3, H, W], got " + shape_str(images.shape()));
    const int H = images.dim(2), W = images.dim(3), m = cfg_.size_multiple();
    const int ph = (H + m - 1) / m * m, pw = (W + m - 1) / m * m;
    const bool padded = ph != H || pw != W;
    const Tensor padded_images = padded ? reflect_pad(images, ph, pw) : Tensor();
    const Tensor& x = padded ? padded_images : images;
    TokenGrid tokens = encode(x);
    Var logits = decode(adapt(tokens, x, training), ph, pw, training);
    if (padded) logits = crop(logits, H, W);
    return {logits, tokens};
}

ReferenceExtractor::ReferenceExtractor(const EncoderConfig& cfg, std::uint64_t seed) {
    Rng rng = Rng::derive(seed, {0x726566ULL});
    encoder_ = std::make_unique<ToyTransformerEncoder>(cfg, params_, rng, "reference");
    for (auto& p : params_.params()) p.var.node()->requires_grad = false;
}

Tensor ReferenceExtractor::features(const Tensor& images) const {
    NoGradGuard guard;
    return encoder_->encode(images).tokens.value();
}

Tensor reflect_pad(const Tensor& images, int out_h, int out_w) {
    const int B = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
    if (out_h < H || out_w < W) throw ShapeError("reflect_pad cannot shrink");
    Tensor out({B, C, out_h, out_w});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < out_h; ++y)
                for (int x = 0; x < out_w; ++x)
                    out.at(b, c, y, x) = images.at(b, c, reflect_index(y, H), reflect_index(x, W));
    return out;
}

Var crop(const Var& x, int out_h, int out_w) {
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (out_h > H || out_w > W) throw ShapeError("crop larger than input");
    if (out_h == H && out_w == W) return x;
    Tensor out({B, C, out_h, out_w});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < out_h; ++y)
                for (int xx = 0; xx < out_w; ++xx) out.at(b, c, y, xx) = x.value().at(b, c, y, xx);
    return make_op(std::move(out), {x}, [x, B, C, out_h, out_w](const Tensor& g) {
        if (Tensor* gx = grad_sink(x))
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c)
                    for (int y = 0; y < out_h; ++y)
                        for (int xx = 0; xx < out_w; ++xx) gx->at(b, c, y, xx) += g.at(b, c, y, xx);
    });
}

void save_model(const std::filesystem::path& path, const SegmentationModel& model) {
    save_archive(path, {{"kind", "model"}, {"config", model.config()}}, model.parameters().state());
}

std::unique_ptr<SegmentationModel> load_model(const std::filesystem::path& path) {
    const Archive ar = load_archive(path);
    const auto& cfg_json = ar.meta.contains("model_config") ? ar.meta.at("model_config") : ar.meta.at("config");
    auto model = std::make_unique<SegmentationModel>(cfg_json.get<ModelConfig>(), 0);
    std::map<std::string, Tensor> tensors;
    // Training checkpoints prefix the student tree with "student/".
    for (const auto& [name, t] : ar.tensors) {
        if (name.rfind("student/", 0) == 0)
            tensors.emplace(name.substr(8), t);
        else if (name.find('/') == std::string::npos)
            tensors.emplace(name, t);
    }
    model->parameters().load_state(tensors);
    return model;
}

}  // namespace uda
