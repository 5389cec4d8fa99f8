#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "uda/autograd.hpp"
#include "uda/rng.hpp"

namespace uda {

/// Raised when two parameter trees do not line up (names or shapes).
class StructureError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class ParamKind { encoder_embed, encoder_block, encoder_head, adapter, decoder, projector };

struct ParamGroup {
    ParamKind kind = ParamKind::decoder;
    int block = -1;  // encoder block index for ParamKind::encoder_block
};

struct NamedParam {
    std::string name;
    Var var;
    ParamGroup group;
};

/// Ordered registry of trainable parameters and batch-norm buffers. Layers
/// keep handles to the same nodes, so values can be read and written here.
class ParameterSet {
public:
    Var add(std::string name, Tensor init, ParamGroup group);
    std::shared_ptr<BatchNormState> add_batch_norm_state(const std::string& prefix, int channels);

    const std::vector<NamedParam>& params() const { return params_; }
    std::vector<NamedParam>& params() { return params_; }
    std::size_t parameter_count() const;

    /// Buffers are exposed as named tensors: `<prefix>.running_mean` / `.running_var`.
    std::vector<std::pair<std::string, Tensor*>> buffers();
    std::vector<std::pair<std::string, const Tensor*>> buffers() const;

    /// Every named tensor (parameters then buffers), in registration order.
    std::vector<std::pair<std::string, Tensor>> state() const;
    void load_state(const std::map<std::string, Tensor>& tensors, bool allow_missing = false);
    void copy_from(const ParameterSet& other);
    void zero_grad();

private:
    std::vector<NamedParam> params_;
    std::vector<std::pair<std::string, std::shared_ptr<BatchNormState>>> bn_states_;
};

struct Linear {
    Var weight, bias;
    Var operator()(const Var& x) const { return ops::linear(x, weight, bias); }
};

struct Conv2d {
    Var weight, bias;
    int stride = 1, padding = 0;
    Var operator()(const Var& x) const { return ops::conv2d(x, weight, bias, stride, padding); }
};

struct BatchNorm2d {
    Var gamma, beta;
    std::shared_ptr<BatchNormState> state;
    Var operator()(const Var& x, bool training) const { return ops::batch_norm2d(x, gamma, beta, *state, training); }
};

struct LayerNorm {
    Var gamma, beta;
    Var operator()(const Var& x) const { return ops::layer_norm(x, gamma, beta); }
};

Linear make_linear(ParameterSet& ps, const std::string& name, int in, int out, ParamGroup group, Rng& rng,
                   Real init_std, bool bias = true);
Conv2d make_conv(ParameterSet& ps, const std::string& name, int in, int out, int kernel, int stride, ParamGroup group,
                 Rng& rng);
BatchNorm2d make_batch_norm(ParameterSet& ps, const std::string& name, int channels, ParamGroup group);
LayerNorm make_layer_norm(ParameterSet& ps, const std::string& name, int dim, ParamGroup group);

/// Single-file archive: magic line, JSON header (metadata plus a tensor
/// index), then raw little-endian float64 payload.
struct Archive {
    nlohmann::json meta;
    std::map<std::string, Tensor> tensors;
};

void save_archive(const std::filesystem::path& path, const nlohmann::json& meta,
                  const std::vector<std::pair<std::string, Tensor>>& tensors);
Archive load_archive(const std::filesystem::path& path);

}  // namespace uda
