#include "uda/harness.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace uda {

namespace fs = std::filesystem;
using nlohmann::json;

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ToyConfig, image_size, num_classes, num_source, num_target_train, num_target_val,
                                   shift)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ToyDataConfig, generator, seed, out_of_target_shift)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DataConfig, kind, toy, source, target, target_val, out_of_target)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ScheduleConfig, base_lr_decoder, base_lr_encoder, layerwise_decay, warmup_iters,
                                   total_iters, batch_size, weight_decay, crop_size, grad_clip)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Toggles, ema, pseudo_weight, lr_multiplier, dacs, rcs, mic, fd_loss)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(UdaConstants, tau, mask_ratio, mask_patch, ema_alpha, rcs_temperature, lambda_fd,
                                   lambda_mask, mix_jitter, mask_mixed, pseudo_flip)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(InferConfig, window, stride, flip, tile_batch, workers)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(RunConfig, eval_interval, checkpoint_interval, log_interval, reference_seed)

ConfigError::ConfigError(const std::string& key, const std::string& message)
    : std::runtime_error("config error at '" + key + "': " + message), key_(key) {}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return exit_config;
    if (dynamic_cast<const DataError*>(&e)) return exit_data;
    if (dynamic_cast<const NumericError*>(&e)) return exit_numeric;
    return exit_failure;
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

ScheduleConfig toy_schedule() {
    ScheduleConfig s;
    s.total_iters = 4000;
    s.warmup_iters = 150;
    s.batch_size = 4;
    s.crop_size = 64;
    return s;
}

UdaConstants toy_constants() {
    UdaConstants c;
    c.ema_alpha = 0.99;
    return c;
}

InferConfig manifest_infer() {
    InferConfig c;
    c.window = 1024;
    c.stride = 768;
    c.tile_batch = 2;
    return c;
}

std::string join(const std::string& prefix, const std::string& key) { return prefix.empty() ? key : prefix + "." + key; }

bool is_int(const json& j) { return j.is_number_integer() || j.is_number_unsigned(); }

void check_type(const json& expected, const json& given, const std::string& key) {
    auto fail = [&] {
        throw ConfigError(key, std::string("expected ") + expected.type_name() + ", got " + given.type_name() + " " +
                                   given.dump());
    };
    if (expected.is_object()) {
        if (!given.is_object()) fail();
    } else if (expected.is_number_float()) {
        if (!given.is_number()) fail();
    } else if (is_int(expected)) {
        if (!is_int(given)) fail();
        if (expected.is_number_unsigned() && given.is_number_integer() && given.get<std::int64_t>() < 0) fail();
    } else if (expected.is_array()) {
        if (!given.is_array()) fail();
        if (!expected.empty())
            for (std::size_t i = 0; i < given.size(); ++i) check_type(expected[0], given[i], key + "[" + std::to_string(i) + "]");
    } else if (expected.type() != given.type()) {
        fail();
    }
}

void merge_into(json& base, const json& patch, const std::string& prefix) {
    if (!patch.is_object()) throw ConfigError(prefix.empty() ? "<root>" : prefix, "expected an object");
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        const std::string key = join(prefix, it.key());
        if (!base.contains(it.key())) throw ConfigError(key, "unknown key");
        json& slot = base[it.key()];
        check_type(slot, it.value(), key);
        if (slot.is_object())
            merge_into(slot, it.value(), key);
        else
            slot = it.value();
    }
}

std::vector<std::string> split_key(const std::string& key) {
    std::vector<std::string> parts;
    std::stringstream ss(key);
    for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
    return parts;
}

void apply_override(json& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json* slot = &cfg;
    for (const auto& part : split_key(key)) {
        if (!slot->is_object() || !slot->contains(part)) throw ConfigError(key, "unknown key");
        slot = &(*slot)[part];
    }
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded() || (slot->is_string() && !value.is_string())) value = raw;
    check_type(*slot, value, key);
    if (slot->is_object())
        merge_into(*slot, value, key);
    else
        *slot = value;
}

std::string peek_data_kind(const json& file_json, const std::vector<std::string>& overrides) {
    std::string kind = "toy";
    if (file_json.is_object() && file_json.contains("data") && file_json["data"].is_object() &&
        file_json["data"].contains("kind") && file_json["data"]["kind"].is_string())
        kind = file_json["data"]["kind"].get<std::string>();
    for (const auto& o : overrides)
        if (o.rfind("data.kind=", 0) == 0) kind = o.substr(10);
    if (kind != "toy" && kind != "manifest") throw ConfigError("data.kind", "expected 'toy' or 'manifest', got '" + kind + "'");
    return kind;
}

template <class T>
T field(const json& j, const std::string& key) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(key, e.what());
    }
}

template <class F>
void guarded(const std::string& key, F&& f) {
    try {
        f();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(key, e.what());
    }
}

void validate(const ExperimentConfig& c) {
    guarded("schedule", [&] { c.train.schedule.validate(); });
    guarded("model", [&] { c.model.validate(); });
    guarded("infer", [&] { c.infer.validate(); });
    const auto& k = c.train.constants;
    if (!(k.tau > 0 && k.tau < 1)) throw ConfigError("constants.tau", "must be in (0, 1)");
    if (!(k.mask_ratio >= 0 && k.mask_ratio <= 1)) throw ConfigError("constants.mask_ratio", "must be in [0, 1]");
    if (!(k.ema_alpha >= 0 && k.ema_alpha <= 1)) throw ConfigError("constants.ema_alpha", "must be in [0, 1]");
    if (!(k.rcs_temperature > 0)) throw ConfigError("constants.rcs_temperature", "must be positive");
    if (k.lambda_fd < 0 || k.lambda_mask < 0) throw ConfigError("constants", "loss weights must be non-negative");
    if (!(k.mix_jitter >= 0 && k.mix_jitter <= 1)) throw ConfigError("constants.mix_jitter", "must be in [0, 1]");
    const int crop = c.train.schedule.crop_size;
    if (crop % c.model.size_multiple() != 0)
        throw ConfigError("schedule.crop_size", "must be a multiple of " + std::to_string(c.model.size_multiple()));
    if (k.mask_patch < 1 || crop % k.mask_patch != 0)
        throw ConfigError("constants.mask_patch", "must divide the crop size " + std::to_string(crop));
    if (c.infer.window < c.model.size_multiple())
        throw ConfigError("infer.window", "must be at least " + std::to_string(c.model.size_multiple()));
    if (c.model.projector.teacher_dim % c.model.encoder.num_heads != 0)
        throw ConfigError("model.projector.teacher_dim", "must be divisible by model.encoder.num_heads");
    if (c.run.log_interval < 1) throw ConfigError("run.log_interval", "must be positive");
    if (c.run.eval_interval < 0 || c.run.checkpoint_interval < 0) throw ConfigError("run", "intervals must be >= 0");
    if (c.data.kind == "toy") {
        guarded("data.toy.generator", [&] { c.data.toy.generator.validate(); });
        if (c.model.decoder.num_classes != c.data.toy.generator.num_classes)
            throw ConfigError("model.decoder.num_classes", "must equal data.toy.generator.num_classes (" +
                                                               std::to_string(c.data.toy.generator.num_classes) + ")");
        if (crop > c.data.toy.generator.image_size)
            throw ConfigError("schedule.crop_size", "exceeds data.toy.generator.image_size");
    } else {
        auto need = [&](const std::string& v, const char* key) {
            if (v.empty()) throw ConfigError(key, "required for mode " + to_string(c.mode));
        };
        need(c.data.target_val, "data.target_val");
        if (c.mode != TrainMode::oracle) need(c.data.source, "data.source");
        if (c.mode != TrainMode::source_only) need(c.data.target, "data.target");
    }
}

}  // namespace

json default_config_json(const std::string& data_kind) {
    const bool toy = data_kind == "toy";
    DataConfig data;
    data.kind = data_kind;
    return {{"mode", "uda"},
            {"seed", std::uint64_t{0}},
            {"out_dir", "runs/default"},
            {"data", data},
            {"model", ModelConfig{}},
            {"schedule", toy ? toy_schedule() : ScheduleConfig{}},
            {"toggles", Toggles{}},
            {"constants", toy ? toy_constants() : UdaConstants{}},
            {"ignore_index", 255},
            {"infer", toy ? InferConfig{} : manifest_infer()},
            {"run", RunConfig{}}};
}

json ExperimentConfig::to_json() const {
    return {{"mode", uda::to_string(mode)},
            {"seed", seed},
            {"out_dir", out_dir},
            {"data", data},
            {"model", model},
            {"schedule", train.schedule},
            {"toggles", train.toggles},
            {"constants", train.constants},
            {"ignore_index", train.ignore_index},
            {"infer", infer},
            {"run", run}};
}

ExperimentConfig resolve_config_json(const json& file_json, const std::vector<std::string>& overrides) {
    json cfg = default_config_json(peek_data_kind(file_json, overrides));
    if (!file_json.is_null()) merge_into(cfg, file_json, "");
    for (const auto& o : overrides) apply_override(cfg, o);

    ExperimentConfig c;
    guarded("mode", [&] { c.mode = train_mode_from_string(cfg.at("mode").get<std::string>()); });
    c.seed = field<std::uint64_t>(cfg, "seed");
    c.out_dir = field<std::string>(cfg, "out_dir");
    c.data = field<DataConfig>(cfg, "data");
    c.model = field<ModelConfig>(cfg, "model");
    c.train.mode = c.mode;
    c.train.schedule = field<ScheduleConfig>(cfg, "schedule");
    c.train.toggles = field<Toggles>(cfg, "toggles");
    c.train.constants = field<UdaConstants>(cfg, "constants");
    c.train.ignore_index = field<int>(cfg, "ignore_index");
    c.infer = field<InferConfig>(cfg, "infer");
    c.run = field<RunConfig>(cfg, "run");
    validate(c);
    return c;
}

ExperimentConfig resolve_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides) {
    json j;
    if (file) {
        std::ifstream in(*file);
        if (!in) throw ConfigError("--config", "cannot open " + file->string());
        std::stringstream ss;
        ss << in.rdbuf();
        const std::string text = ss.str();
        if (!text.empty() && text.find_first_not_of(" \t\r\n") != std::string::npos) {
            j = json::parse(text, nullptr, false);
            if (j.is_discarded()) throw ConfigError("--config", file->string() + " is not valid JSON");
        }
    }
    return resolve_config_json(j, overrides);
}

json resolved_dump(const ExperimentConfig& config) {
    static const std::vector<std::pair<std::string, json>> published = {
        {"schedule.base_lr_decoder", 1.4e-4}, {"schedule.base_lr_encoder", 1.4e-5}, {"schedule.layerwise_decay", 0.9},
        {"schedule.warmup_iters", 1500},      {"schedule.total_iters", 40000},      {"schedule.batch_size", 8},
        {"constants.tau", 0.968},             {"constants.mask_ratio", 0.7},        {"constants.pseudo_flip", true},
    };
    json dump = config.to_json();
    json prov = json::object();
    for (const char* section : {"schedule", "constants"})
        for (auto it = dump[section].begin(); it != dump[section].end(); ++it) {
            const std::string key = std::string(section) + "." + it.key();
            std::string tag = "default";
            for (const auto& [k, v] : published)
                if (k == key && v == it.value()) tag = "paper";
            prov[key] = tag;
        }
    dump["provenance"] = prov;
    return dump;
}

// ---------------------------------------------------------------------------
// Training runs

namespace {

void write_text(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + path.string());
        out << text;
    }
    fs::rename(tmp, path);
}

class MetricsStream {
public:
    MetricsStream(fs::path path, int resume_step) : path_(std::move(path)) {
        std::string kept;
        if (resume_step > 0 && fs::exists(path_)) {
            std::ifstream in(path_);
            for (std::string line; std::getline(in, line);) {
                const json j = json::parse(line, nullptr, false);
                if (!j.is_discarded() && j.value("step", 0) <= resume_step) kept += line + "\n";
            }
        }
        write_text(path_, kept);
        out_.open(path_, std::ios::app);
    }
    void append(const json& j) { out_ << j.dump() << '\n' << std::flush; }

private:
    fs::path path_;
    std::ofstream out_;
};

struct RunData {
    ClassSpace class_space;
    Dataset train_source;
    std::optional<Dataset> target;
    Dataset val;
    std::optional<Dataset> out_of_target;
};

RunData load_run_data(const ExperimentConfig& c) {
    RunData d;
    if (c.data.kind == "toy") {
        ToyDomains toy = generate_toy_domains(c.data.toy.generator, c.data.toy.seed);
        d.class_space = toy.source.class_space;
        d.train_source = c.mode == TrainMode::oracle ? std::move(toy.target_train_labeled) : std::move(toy.source);
        if (c.mode == TrainMode::uda) d.target = std::move(toy.target_train);
        d.val = std::move(toy.target_val);
        if (c.data.toy.out_of_target_shift > 0) {
            ToyConfig g = c.data.toy.generator;
            g.shift = c.data.toy.out_of_target_shift;
            g.num_source = g.num_target_train = 1;
            d.out_of_target = std::move(generate_toy_domains(g, c.data.toy.seed + 1).target_val);
        }
        return d;
    }
    const fs::path first = c.mode == TrainMode::oracle ? fs::path(c.data.target) : fs::path(c.data.source);
    d.class_space = read_manifest_class_space(first);
    if (c.mode == TrainMode::oracle) {
        d.train_source = load_dataset(load_manifest(c.data.target, Domain::target, d.class_space));
        if (!d.train_source.has_labels()) throw DataError("oracle mode needs labels for every target sample");
    } else {
        d.train_source = load_dataset(load_manifest(c.data.source, Domain::source, d.class_space));
    }
    if (c.mode == TrainMode::uda)
        d.target = load_dataset(load_manifest(c.data.target, Domain::target, d.class_space)).without_labels();
    d.val = load_dataset(load_manifest(c.data.target_val, Domain::target, d.class_space));
    if (!d.val.has_labels()) throw DataError("evaluation set " + c.data.target_val + " lacks labels");
    if (!c.data.out_of_target.empty())
        d.out_of_target = load_dataset(load_manifest(c.data.out_of_target, Domain::target, d.class_space));
    return d;
}

void write_report(const fs::path& dir, const std::string& stem, const EvalReport& r) {
    write_text(dir / (stem + ".json"), r.to_json().dump(2) + "\n");
    write_text(dir / (stem + ".csv"), r.to_csv());
}

std::string checkpoint_name(int step) {
    std::ostringstream os;
    os << "step_" << std::setw(6) << std::setfill('0') << step << ".ckpt";
    return os.str();
}

}  // namespace

RunResult run_training(const ExperimentConfig& config, const RunOptions& options) {
    auto log = [&](const std::string& msg) {
        if (options.log) options.log(msg);
    };
    validate(config);
    const fs::path out = config.out_dir;
    const fs::path ckpt_dir = out / "checkpoints";
    fs::create_directories(ckpt_dir);
    write_text(out / "config.resolved.json", resolved_dump(config).dump(2) + "\n");

    const RunData data = load_run_data(config);
    if (data.class_space.num_classes() != config.model.decoder.num_classes)
        throw ConfigError("model.decoder.num_classes", "dataset has " + std::to_string(data.class_space.num_classes()) +
                                                           " classes");
    if (data.class_space.ignore_index != config.train.ignore_index)
        throw ConfigError("ignore_index", "dataset uses " + std::to_string(data.class_space.ignore_index));

    const TrainConfig& tc = config.train;
    TrainingState state = make_training_state(config.model, config.seed, tc.constants.ema_alpha);
    std::optional<ReferenceExtractor> reference;
    if (config.mode == TrainMode::uda && tc.toggles.fd_loss) {
        EncoderConfig ec = config.model.encoder;
        ec.kind = "toy-transformer";
        ec.weights_path.clear();
        ec.embed_dim = config.model.projector.teacher_dim;
        reference.emplace(ec, config.run.reference_seed);
    }
    std::optional<RareClassIndex> rcs;
    if (tc.toggles.rcs)
        rcs = build_rare_class_index(compute_class_frequencies(data.train_source), data.train_source,
                                     tc.constants.rcs_temperature);
    const BatchSampler source_sampler(data.train_source, tc.schedule.crop_size, tc.schedule.batch_size, rcs);
    std::optional<BatchSampler> target_sampler;
    if (data.target) target_sampler.emplace(*data.target, tc.schedule.crop_size, tc.schedule.batch_size);

    int start = 0;
    if (options.resume) {
        load_training_checkpoint(*options.resume, state);
        start = state.step;
        log("resumed from " + options.resume->string() + " at step " + std::to_string(start));
    }
    MetricsStream metrics(out / "metrics.jsonl", start);

    auto evaluate_student = [&](const Dataset& ds, const std::string& id) {
        const ModelPredictor predictor(*state.student);
        return evaluate(predictor, ds, config.infer, id);
    };

    const int total = tc.schedule.total_iters;
    const int depth = config.model.encoder.depth;
    fs::path last_ckpt;
    for (int s = start; s < total; ++s) {
        const auto step = static_cast<std::uint64_t>(s);
        Rng source_rng = Rng::derive(config.seed, {1, step});
        Rng target_rng = Rng::derive(config.seed, {2, step});
        Rng step_rng = Rng::derive(config.seed, {3, step});
        const Batch source = source_sampler.sample(source_rng);
        std::optional<Batch> target;
        if (target_sampler) target = target_sampler->sample(target_rng);
        LossReport rep;
        try {
            rep = train_step(state, reference ? &*reference : nullptr, source, target ? &*target : nullptr, tc, step_rng);
        } catch (const NumericError& e) {
            metrics.append({{"event", "abort"}, {"step", s + 1}, {"component", e.component()}, {"what", e.what()}});
            log(e.what());
            throw;
        }
        const int done = s + 1;
        if (done % config.run.log_interval == 0 || done == total) {
            json line = rep.to_json();
            line["step"] = done;
            line["lr_decoder"] = lr_at(tc.schedule, s, {ParamKind::decoder, 0}, depth, tc.toggles.lr_multiplier);
            line["lr_encoder_top"] =
                lr_at(tc.schedule, s, {ParamKind::encoder_block, depth - 1}, depth, tc.toggles.lr_multiplier);
            metrics.append(line);
        }
        if (config.run.eval_interval > 0 && done % config.run.eval_interval == 0 && done < total) {
            const EvalReport r = evaluate_student(data.val, "target_val");
            metrics.append({{"event", "eval"}, {"step", done}, {"miou", r.miou}});
            log("step " + std::to_string(done) + " target-val mIoU " + std::to_string(r.miou * 100));
        }
        const bool stop_here = options.stop_after && done == *options.stop_after && done < total;
        if ((config.run.checkpoint_interval > 0 && done % config.run.checkpoint_interval == 0) || stop_here) {
            const fs::path p = ckpt_dir / checkpoint_name(done);
            save_training_checkpoint(p, state, {{"config", config.to_json()}});
            if (!last_ckpt.empty() && last_ckpt != p) fs::remove(last_ckpt);
            last_ckpt = p;
        }
        if (stop_here) {
            log("stopped after step " + std::to_string(done));
            return {out, done, {}, std::nullopt};
        }
    }

    RunResult result{out, total, evaluate_student(data.val, "target_val"), std::nullopt};
    write_report(out, "report", result.report);
    json summary = {{"steps", total}, {"miou", result.report.miou}, {"mode", to_string(config.mode)}};
    if (data.out_of_target) {
        result.out_of_target = evaluate_student(*data.out_of_target, "out_of_target");
        write_report(out, "report_out_of_target", *result.out_of_target);
        summary["out_of_target_miou"] = result.out_of_target->miou;
    }
    metrics.append({{"event", "final"}, {"step", total}, {"miou", result.report.miou}});
    save_training_checkpoint(ckpt_dir / "final.ckpt", state, {{"config", config.to_json()}});
    if (!last_ckpt.empty() && last_ckpt != ckpt_dir / "final.ckpt") fs::remove(last_ckpt);
    save_model(out / "model.archive", *state.student);
    write_text(out / "summary.json", summary.dump(2) + "\n");
    log("final target-val mIoU " + std::to_string(result.report.miou * 100));
    return result;
}

// ---------------------------------------------------------------------------
// Stability

bool StabilityReport::all_succeeded() const {
    for (const auto& m : miou)
        if (!m) return false;
    return true;
}

json StabilityReport::to_json() const {
    json runs = json::array();
    for (std::size_t i = 0; i < seeds.size(); ++i)
        runs.push_back({{"seed", seeds[i]},
                        {"miou", miou[i] ? json(*miou[i]) : json(nullptr)},
                        {"error", errors[i].empty() ? json(nullptr) : json(errors[i])}});
    return {{"runs", runs}, {"best", best}, {"worst", worst}, {"average", average}, {"std_dev", std_dev}};
}

double population_std(const std::vector<double>& values) {
    if (values.empty()) return 0.0;
    double mean = 0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double ss = 0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return std::sqrt(ss / static_cast<double>(values.size()));
}

StabilityReport summarize_stability(const std::vector<std::uint64_t>& seeds, const std::vector<std::optional<double>>& miou,
                                    const std::vector<std::string>& errors) {
    StabilityReport r{seeds, miou, errors};
    std::vector<double> ok;
    for (const auto& m : miou)
        if (m) ok.push_back(*m);
    if (ok.empty()) return r;
    r.best = *std::max_element(ok.begin(), ok.end());
    r.worst = *std::min_element(ok.begin(), ok.end());
    for (double v : ok) r.average += v;
    r.average /= static_cast<double>(ok.size());
    r.std_dev = population_std(ok);
    return r;
}

StabilityReport run_stability(const ExperimentConfig& config, const std::vector<std::uint64_t>& seeds,
                              const RunOptions& options) {
    if (seeds.size() < 2) throw ConfigError("seeds", "stability analysis needs at least two seeds");
    std::vector<std::optional<double>> miou;
    std::vector<std::string> errors;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        ExperimentConfig c = config;
        c.seed = seeds[i];
        c.out_dir = (fs::path(config.out_dir) / ("run" + std::to_string(i) + "_seed" + std::to_string(seeds[i]))).string();
        try {
            miou.push_back(run_training(c, options).report.miou);
            errors.emplace_back();
        } catch (const std::exception& e) {
            miou.push_back(std::nullopt);
            errors.emplace_back(e.what());
            if (options.log) options.log("seed " + std::to_string(seeds[i]) + " failed: " + e.what());
        }
    }
    StabilityReport r = summarize_stability(seeds, miou, errors);
    fs::create_directories(config.out_dir);
    write_text(fs::path(config.out_dir) / "stability.json", r.to_json().dump(2) + "\n");
    return r;
}

// ---------------------------------------------------------------------------
// Ablation

const std::vector<std::string>& toggle_names() {
    static const std::vector<std::string> names = {"ema", "pseudo_weight", "lr_multiplier", "dacs", "rcs", "mic", "fd_loss"};
    return names;
}

Toggles without(Toggles t, const std::string& name) {
    if (name == "ema") t.ema = false;
    else if (name == "pseudo_weight") t.pseudo_weight = false;
    else if (name == "lr_multiplier") t.lr_multiplier = false;
    else if (name == "dacs") t.dacs = false;
    else if (name == "rcs") t.rcs = false;
    else if (name == "mic") t.mic = false;
    else if (name == "fd_loss") t.fd_loss = false;
    else throw ConfigError("toggles." + name, "unknown toggle");
    return t;
}

std::string AblationTable::to_text() const {
    std::ostringstream os;
    os << "| EMA model | Pseudo weight | LR multiplier | DACS | RCS | MIC | FD loss | mIoU | delta |\n"
       << "|---|---|---|---|---|---|---|---|---|\n"
       << std::fixed << std::setprecision(1);
    auto mark = [](bool on) { return on ? "x" : " "; };
    for (const auto& r : rows) {
        const auto& t = r.toggles;
        os << "| " << mark(t.ema) << " | " << mark(t.pseudo_weight) << " | " << mark(t.lr_multiplier) << " | "
           << mark(t.dacs) << " | " << mark(t.rcs) << " | " << mark(t.mic) << " | " << mark(t.fd_loss) << " | "
           << r.miou * 100 << " | ";
        if (r.removed.empty())
            os << "-";
        else
            os << std::showpos << r.delta * 100 << std::noshowpos;
        os << " |\n";
    }
    return os.str();
}

json AblationTable::to_json() const {
    json out = json::array();
    for (const auto& r : rows)
        out.push_back({{"removed", r.removed.empty() ? json(nullptr) : json(r.removed)},
                       {"toggles", r.toggles},
                       {"miou", r.miou},
                       {"delta", r.delta}});
    return out;
}

AblationTable run_ablation_suite(const ExperimentConfig& base, const std::vector<std::string>& toggles,
                                 const RunOptions& options) {
    for (const auto& name : toggles) (void)without(base.train.toggles, name);
    AblationTable table;
    ExperimentConfig b = base;
    b.out_dir = (fs::path(base.out_dir) / "base").string();
    const double base_miou = run_training(b, options).report.miou;
    table.rows.push_back({"", base.train.toggles, base_miou, 0.0});
    for (const auto& name : toggles) {
        ExperimentConfig c = base;
        c.train.toggles = without(base.train.toggles, name);
        c.out_dir = (fs::path(base.out_dir) / ("no_" + name)).string();
        const double m = run_training(c, options).report.miou;
        table.rows.push_back({name, c.train.toggles, m, m - base_miou});
    }
    fs::create_directories(base.out_dir);
    write_text(fs::path(base.out_dir) / "ablation.json", table.to_json().dump(2) + "\n");
    write_text(fs::path(base.out_dir) / "ablation.md", table.to_text());
    return table;
}

}  // namespace uda
