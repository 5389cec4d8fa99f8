#include "uda/nn.hpp"

#include <cstring>
#include <fstream>

namespace uda {

namespace {
constexpr char kMagic[] = "UDAFORGE-ARCHIVE-1\n";
}

Var ParameterSet::add(std::string name, Tensor init, ParamGroup group) {
    for (const auto& p : params_)
        if (p.name == name) throw StructureError("duplicate parameter name " + name);
    Var v(std::move(init), true);
    params_.push_back({std::move(name), v, group});
    return v;
}

std::shared_ptr<BatchNormState> ParameterSet::add_batch_norm_state(const std::string& prefix, int channels) {
    auto st = std::make_shared<BatchNormState>();
    st->running_mean = Tensor({channels}, 0.0);
    st->running_var = Tensor({channels}, 1.0);
    bn_states_.emplace_back(prefix, st);
    return st;
}

std::size_t ParameterSet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.value().numel();
    return n;
}

std::vector<std::pair<std::string, Tensor*>> ParameterSet::buffers() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto& [prefix, st] : bn_states_) {
        out.emplace_back(prefix + ".running_mean", &st->running_mean);
        out.emplace_back(prefix + ".running_var", &st->running_var);
    }
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> ParameterSet::buffers() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (const auto& [prefix, st] : bn_states_) {
        out.emplace_back(prefix + ".running_mean", &st->running_mean);
        out.emplace_back(prefix + ".running_var", &st->running_var);
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>> ParameterSet::state() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& p : params_) out.emplace_back(p.name, p.var.value());
    for (const auto& [name, t] : buffers()) out.emplace_back(name, *t);
    return out;
}

void ParameterSet::load_state(const std::map<std::string, Tensor>& tensors, bool allow_missing) {
    auto assign = [&](const std::string& name, Tensor& dst) {
        auto it = tensors.find(name);
        if (it == tensors.end()) {
            if (allow_missing) return;
            throw StructureError("missing tensor " + name);
        }
        if (it->second.shape() != dst.shape())
            throw StructureError("shape mismatch for " + name + ": " + shape_str(it->second.shape()) + " vs " +
                                 shape_str(dst.shape()));
        dst = it->second;
    };
    for (auto& p : params_) assign(p.name, p.var.mutable_value());
    for (auto& [name, t] : buffers()) assign(name, *t);
}

void ParameterSet::copy_from(const ParameterSet& other) {
    if (other.params_.size() != params_.size() || other.bn_states_.size() != bn_states_.size())
        throw StructureError("parameter trees differ in size");
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto& src = other.params_[i];
        auto& dst = params_[i];
        if (src.name != dst.name || src.var.shape() != dst.var.shape())
            throw StructureError("parameter trees differ at " + dst.name);
        dst.var.mutable_value() = src.var.value();
    }
    for (std::size_t i = 0; i < bn_states_.size(); ++i) {
        if (bn_states_[i].first != other.bn_states_[i].first)
            throw StructureError("buffer trees differ at " + bn_states_[i].first);
        bn_states_[i].second->running_mean = other.bn_states_[i].second->running_mean;
        bn_states_[i].second->running_var = other.bn_states_[i].second->running_var;
    }
}

void ParameterSet::zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
}

Linear make_linear(ParameterSet& ps, const std::string& name, int in, int out, ParamGroup group, Rng& rng,
                   Real init_std, bool bias) {
    Tensor w({out, in});
    for (auto& v : w.values()) v = init_std * rng.normal();
    Linear l;
    l.weight = ps.add(name + ".weight", std::move(w), group);
    if (bias) l.bias = ps.add(name + ".bias", Tensor({out}, 0.0), group);
    return l;
}

Conv2d make_conv(ParameterSet& ps, const std::string& name, int in, int out, int kernel, int stride, ParamGroup group,
                 Rng& rng) {
    Tensor w({out, in, kernel, kernel});
    const Real std = std::sqrt(2.0 / (in * kernel * kernel));
    for (auto& v : w.values()) v = std * rng.normal();
    Conv2d c;
    c.weight = ps.add(name + ".weight", std::move(w), group);
    c.bias = ps.add(name + ".bias", Tensor({out}, 0.0), group);
    c.stride = stride;
    c.padding = kernel / 2;
    return c;
}

BatchNorm2d make_batch_norm(ParameterSet& ps, const std::string& name, int channels, ParamGroup group) {
    BatchNorm2d bn;
    bn.gamma = ps.add(name + ".gamma", Tensor({channels}, 1.0), group);
    bn.beta = ps.add(name + ".beta", Tensor({channels}, 0.0), group);
    bn.state = ps.add_batch_norm_state(name, channels);
    return bn;
}

LayerNorm make_layer_norm(ParameterSet& ps, const std::string& name, int dim, ParamGroup group) {
    return {ps.add(name + ".gamma", Tensor({dim}, 1.0), group), ps.add(name + ".beta", Tensor({dim}, 0.0), group)};
}

void save_archive(const std::filesystem::path& path, const nlohmann::json& meta,
                  const std::vector<std::pair<std::string, Tensor>>& tensors) {
    nlohmann::json header;
    header["meta"] = meta;
    header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        offset += t.numel();
    }
    const std::string text = header.dump();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write archive " + path.string());
        out.write(kMagic, sizeof(kMagic) - 1);
        const std::uint64_t len = text.size();
        out.write(reinterpret_cast<const char*>(&len), sizeof(len));
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& [name, t] : tensors)
            out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(Real)));
        if (!out) throw std::runtime_error("short write on archive " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

Archive load_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open archive " + path.string());
    std::string magic(sizeof(kMagic) - 1, '\0');
    in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
    if (magic != kMagic) throw std::runtime_error("not an archive: " + path.string());
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw std::runtime_error("truncated archive header: " + path.string());
    const auto header = nlohmann::json::parse(text);
    const auto payload_start = in.tellg();
    Archive ar;
    ar.meta = header.at("meta");
    for (const auto& entry : header.at("tensors")) {
        Tensor t(entry.at("shape").get<Shape>());
        const auto offset = entry.at("offset").get<std::uint64_t>();
        in.seekg(payload_start + static_cast<std::streamoff>(offset * sizeof(Real)));
        in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(Real)));
        if (!in) throw std::runtime_error("truncated archive payload: " + path.string());
        ar.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
    }
    return ar;
}

}  // namespace uda
