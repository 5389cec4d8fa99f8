#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "uda/nn.hpp"

namespace uda {

struct EncoderConfig {
    /// "toy-transformer" (random init) or "external-pretrained" (weights
    /// loaded from `weights_path`, an archive holding `encoder.*` tensors).
    std::string kind = "toy-transformer";
    int patch_size = 16;
    int embed_dim = 64;
    int depth = 4;
    int num_heads = 4;
    int mlp_ratio = 2;
    std::string weights_path;
    bool freeze = false;
};

struct AdapterConfig {
    /// false gives the adapter-free variant: levels come from resampled tokens only.
    bool spatial_prior = true;
    int width = 64;
};

struct PyramidDecoderConfig {
    /// Widths from the stride-32 stage down to the stride-4 stage.
    std::vector<int> channel_schedule{256, 128, 64, 32};
    int num_classes = 6;

    void validate() const;
};

struct ProjectorConfig {
    int teacher_dim = 96;
    /// "linear" or "mlp" (two pointwise layers with a GELU between).
    std::string kind = "linear";
};

struct ModelConfig {
    EncoderConfig encoder;
    AdapterConfig adapter;
    PyramidDecoderConfig decoder;
    ProjectorConfig projector;

    /// Inputs are reflection-padded to a multiple of this (patch size and the
    /// coarsest pyramid stride must both divide the padded extent).
    int size_multiple() const;
    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct TokenGrid {
    Var tokens;  // [B, h*w, D]
    int h = 0, w = 0;
};

inline constexpr std::array<int, 4> kPyramidStrides{4, 8, 16, 32};

struct MultiScaleFeatures {
    std::array<Var, 4> levels;  // strides 4, 8, 16, 32
};

/// Maps images to a single-scale token grid.
class TokenEncoder {
public:
    virtual ~TokenEncoder() = default;
    virtual int patch_size() const = 0;
    virtual int embed_dim() const = 0;
    virtual int depth() const = 0;
    /// images: [B, 3, H, W] in [0, 1]; H and W must be multiples of patch_size().
    virtual TokenGrid encode(const Tensor& images) const = 0;
};

/// Plain pre-norm vision transformer over non-overlapping patches with fixed
/// 2-D sine-cosine position codes.
class ToyTransformerEncoder final : public TokenEncoder {
public:
    ToyTransformerEncoder(const EncoderConfig& cfg, ParameterSet& ps, Rng& rng, const std::string& prefix = "encoder");

    int patch_size() const override { return cfg_.patch_size; }
    int embed_dim() const override { return cfg_.embed_dim; }
    int depth() const override { return cfg_.depth; }
    TokenGrid encode(const Tensor& images) const override;

private:
    struct Block {
        LayerNorm norm1, norm2;
        Linear qkv, proj, fc1, fc2;
    };

    EncoderConfig cfg_;
    Linear patch_embed_;
    std::vector<Block> blocks_;
    LayerNorm final_norm_;
};

/// Simplified multi-scale adapter: a strided convolutional spatial prior over
/// the raw image, fused by addition with pointwise projections of the
/// bilinearly resampled token grid.
class MultiScaleAdapter {
public:
    MultiScaleAdapter(const AdapterConfig& cfg, int embed_dim, ParameterSet& ps, Rng& rng);

    MultiScaleFeatures adapt(const TokenGrid& tokens, const Tensor& images, bool training) const;
    int width() const { return cfg_.width; }

    /// Zeroes the prior-to-level fusion projections.
    void zero_fusion();

private:
    AdapterConfig cfg_;
    std::vector<std::pair<Conv2d, BatchNorm2d>> prior_;  // stem (2 convs) + 3 downsamplers
    std::array<Conv2d, 4> token_proj_;
    std::array<Conv2d, 4> fusion_;
};

/// Segmentation head over multi-scale features.
class Decoder {
public:
    virtual ~Decoder() = default;
    virtual Var decode(const MultiScaleFeatures& features, int out_h, int out_w, bool training) const = 0;
};

/// Coarse-to-fine pyramid: each stage upsamples 2x, applies 3x3 conv, BN and
/// ReLU while narrowing channels, then adds a pointwise-matched skip level.
class BasicPyramidDecoder final : public Decoder {
public:
    BasicPyramidDecoder(const PyramidDecoderConfig& cfg, int in_width, ParameterSet& ps, Rng& rng);
    Var decode(const MultiScaleFeatures& features, int out_h, int out_w, bool training) const override;

private:
    PyramidDecoderConfig cfg_;
    std::array<Conv2d, 4> lateral_;  // stride 32, 16, 8, 4
    std::array<std::pair<Conv2d, BatchNorm2d>, 3> stages_;
    Conv2d classifier_;
};

/// Pointwise map from student tokens to the reference feature width.
class FeatureProjector {
public:
    FeatureProjector(const ProjectorConfig& cfg, int embed_dim, ParameterSet& ps, Rng& rng);
    Var project(const Var& tokens) const;

private:
    ProjectorConfig cfg_;
    std::vector<Linear> layers_;
};

struct ForwardResult {
    Var logits;  // [B, C, H, W]
    TokenGrid tokens;
};

class SegmentationModel {
public:
    SegmentationModel(ModelConfig cfg, std::uint64_t init_seed);

    SegmentationModel(const SegmentationModel&) = delete;
    SegmentationModel& operator=(const SegmentationModel&) = delete;
    SegmentationModel(SegmentationModel&&) = default;
    SegmentationModel& operator=(SegmentationModel&&) = default;

    /// Fresh instance with identical configuration and state.
    std::unique_ptr<SegmentationModel> clone() const;

    TokenGrid encode(const Tensor& images) const;
    MultiScaleFeatures adapt(const TokenGrid& tokens, const Tensor& images, bool training) const;
    Var decode(const MultiScaleFeatures& features, int out_h, int out_w, bool training) const;
    Var project(const Var& tokens) const;

    /// encode -> adapt -> decode. Inputs whose size is not a multiple of
    /// size_multiple() are reflection-padded and the logits cropped back.
    ForwardResult forward(const Tensor& images, bool training) const;

    const ModelConfig& config() const { return cfg_; }
    ParameterSet& parameters() { return *params_; }
    const ParameterSet& parameters() const { return *params_; }
    MultiScaleAdapter& adapter() { return *adapter_; }

private:
    ModelConfig cfg_;
    std::unique_ptr<ParameterSet> params_;
    std::unique_ptr<TokenEncoder> encoder_;
    std::unique_ptr<MultiScaleAdapter> adapter_;
    std::unique_ptr<Decoder> decoder_;
    std::unique_ptr<FeatureProjector> projector_;
};

/// Frozen token encoder used as the feature-distance reference. Built from a
/// fixed seed so every run shares it.
class ReferenceExtractor {
public:
    ReferenceExtractor(const EncoderConfig& cfg, std::uint64_t seed);
    Tensor features(const Tensor& images) const;
    int dim() const { return encoder_->embed_dim(); }

private:
    ParameterSet params_;
    std::unique_ptr<TokenEncoder> encoder_;
};

/// Reflection padding of [B, C, H, W] at the bottom/right to (out_h, out_w).
Tensor reflect_pad(const Tensor& images, int out_h, int out_w);
/// Top-left crop of a [B, C, H, W] variable.
Var crop(const Var& x, int out_h, int out_w);

void save_model(const std::filesystem::path& path, const SegmentationModel& model);
std::unique_ptr<SegmentationModel> load_model(const std::filesystem::path& path);

}  // namespace uda
