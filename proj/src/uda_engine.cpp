#include "uda/uda_engine.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace uda {

NumericError::NumericError(const std::string& component, int step, double value)
    : std::runtime_error("non-finite " + component + " (" + std::to_string(value) + ") at step " + std::to_string(step)),
      component_(component),
      step_(step) {}

void ScheduleConfig::validate() const {
    if (!(warmup_iters > 0 && warmup_iters < total_iters))
        throw std::invalid_argument("schedule requires 0 < warmup_iters < total_iters");
    if (!(layerwise_decay > 0 && layerwise_decay <= 1)) throw std::invalid_argument("layerwise_decay must be in (0, 1]");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
    if (base_lr_decoder < 0 || base_lr_encoder < 0 || weight_decay < 0) throw std::invalid_argument("negative rate");
    if (crop_size < 1) throw std::invalid_argument("crop_size must be positive");
    if (!(grad_clip > 0)) throw std::invalid_argument("grad_clip must be positive");
}

std::string to_string(TrainMode m) {
    switch (m) {
        case TrainMode::uda: return "uda";
        case TrainMode::source_only: return "source_only";
        case TrainMode::oracle: return "oracle";
    }
    return "uda";
}

TrainMode train_mode_from_string(const std::string& s) {
    if (s == "uda") return TrainMode::uda;
    if (s == "source_only") return TrainMode::source_only;
    if (s == "oracle") return TrainMode::oracle;
    throw std::invalid_argument("unknown mode '" + s + "' (expected uda, source_only or oracle)");
}

double lr_at(const ScheduleConfig& schedule, int step, const ParamGroup& group, int encoder_depth, bool lr_multiplier) {
    if (step < 0 || step > schedule.total_iters)
        throw std::out_of_range("step " + std::to_string(step) + " outside [0, " + std::to_string(schedule.total_iters) + "]");
    double base = 0;
    switch (group.kind) {
        case ParamKind::encoder_block:
            base = schedule.base_lr_encoder * std::pow(schedule.layerwise_decay, encoder_depth - 1 - group.block);
            break;
        case ParamKind::encoder_embed:
            base = schedule.base_lr_encoder * std::pow(schedule.layerwise_decay, encoder_depth);
            break;
        case ParamKind::encoder_head:
            base = schedule.base_lr_encoder;
            break;
        case ParamKind::adapter:
        case ParamKind::decoder:
        case ParamKind::projector:
            base = lr_multiplier ? schedule.base_lr_decoder : schedule.base_lr_encoder;
            break;
    }
    const double factor =
        step < schedule.warmup_iters
            ? static_cast<double>(step) / schedule.warmup_iters
            : static_cast<double>(schedule.total_iters - step) / (schedule.total_iters - schedule.warmup_iters);
    return base * factor;
}

TeacherState make_teacher(const SegmentationModel& student, double momentum) {
    return {student.clone(), momentum};
}

void ema_update(TeacherState& teacher, const SegmentationModel& student) {
    auto& tp = teacher.model->parameters();
    const auto& sp = student.parameters();
    if (tp.params().size() != sp.params().size()) throw StructureError("teacher and student parameter trees differ");
    const double a = teacher.momentum;
    for (std::size_t i = 0; i < tp.params().size(); ++i) {
        auto& t = tp.params()[i];
        const auto& s = sp.params()[i];
        if (t.name != s.name || t.var.shape() != s.var.shape())
            throw StructureError("teacher and student differ at " + t.name);
        Tensor& tv = t.var.mutable_value();
        const Tensor& sv = s.var.value();
        for (std::size_t k = 0; k < tv.numel(); ++k) tv[k] = a * tv[k] + (1.0 - a) * sv[k];
    }
    auto tb = tp.buffers();
    const auto sb = sp.buffers();
    if (tb.size() != sb.size()) throw StructureError("teacher and student buffer trees differ");
    for (std::size_t i = 0; i < tb.size(); ++i) {
        if (tb[i].first != sb[i].first) throw StructureError("teacher and student differ at " + tb[i].first);
        *tb[i].second = *sb[i].second;
    }
}

Tensor PseudoLabelBatch::weights() const {
    Tensor w(labels.shape());
    const std::size_t per = labels.numel() / std::max<std::size_t>(1, q.size());
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = q[i / per];
    return w;
}

Tensor softmax_channels(const Tensor& logits) {
    const int B = logits.dim(0), C = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
    Tensor p(logits.shape());
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < HW; ++i) {
            const std::size_t base = static_cast<std::size_t>(b) * C * HW + i;
            Real mx = logits[base];
            for (int c = 1; c < C; ++c) mx = std::max(mx, logits[base + static_cast<std::size_t>(c) * HW]);
            Real s = 0;
            for (int c = 0; c < C; ++c) s += p[base + static_cast<std::size_t>(c) * HW] =
                                             std::exp(logits[base + static_cast<std::size_t>(c) * HW] - mx);
            for (int c = 0; c < C; ++c) p[base + static_cast<std::size_t>(c) * HW] /= s;
        }
    return p;
}

Tensor predict_probabilities(const SegmentationModel& model, const Tensor& images, bool flip) {
    NoGradGuard no_grad;
    if (!flip) return softmax_channels(model.forward(images, false).logits.value());
    const int B = images.dim(0);
    const Tensor probs = softmax_channels(model.forward(concat0(images, flip_last(images)), false).logits.value());
    Tensor direct = probs.slice0(0, B);
    const Tensor mirrored = flip_last(probs.slice0(B, 2 * B));
    for (std::size_t i = 0; i < direct.numel(); ++i) direct[i] = (direct[i] + mirrored[i]) * 0.5;
    return direct;
}

PseudoLabelBatch pseudo_labels_from_probabilities(const Tensor& probs, double tau) {
    const int B = probs.dim(0), C = probs.dim(1), H = probs.dim(2), W = probs.dim(3), HW = H * W;
    PseudoLabelBatch pl;
    pl.labels = LabelTensor({B, H, W});
    pl.confidence = Tensor({B, H, W});
    pl.q.assign(B, 0.0);
    for (int b = 0; b < B; ++b) {
        std::size_t accepted = 0;
        for (int i = 0; i < HW; ++i) {
            const std::size_t base = static_cast<std::size_t>(b) * C * HW + i;
            int best = 0;
            Real best_p = probs[base];
            for (int c = 1; c < C; ++c) {
                const Real v = probs[base + static_cast<std::size_t>(c) * HW];
                if (v > best_p) {
                    best_p = v;
                    best = c;
                }
            }
            pl.labels[static_cast<std::size_t>(b) * HW + i] = best;
            pl.confidence[static_cast<std::size_t>(b) * HW + i] = best_p;
            accepted += best_p >= tau ? 1 : 0;
        }
        pl.q[b] = static_cast<double>(accepted) / HW;
    }
    return pl;
}

PseudoLabelBatch generate_pseudo_labels(const TeacherState& teacher, const Tensor& target_images, double tau, bool flip) {
    if (!(tau > 0 && tau < 1)) throw std::invalid_argument("pseudo-label threshold must be in (0, 1)");
    return pseudo_labels_from_probabilities(predict_probabilities(*teacher.model, target_images, flip), tau);
}

MixResult dacs_mix(const SegmentationSample& source, const Tensor& target_image, const LabelTensor& pseudo_label,
                   double q, Rng& rng, int ignore_index) {
    if (!source.label) throw std::invalid_argument("dacs_mix needs a labeled source sample");
    const LabelTensor& sl = *source.label;
    const int H = source.height(), W = source.width();
    if (target_image.shape() != source.image.shape() || sl.shape() != Shape{H, W} || pseudo_label.shape() != sl.shape())
        throw ShapeError("dacs_mix: source, target and pseudo-label sizes differ");
    std::vector<int> classes;
    for (int v : sl.values())
        if (v != ignore_index && std::find(classes.begin(), classes.end(), v) == classes.end()) classes.push_back(v);
    if (classes.empty()) throw std::invalid_argument("dacs_mix: source sample has no labeled pixels");
    std::sort(classes.begin(), classes.end());
    for (std::size_t i = classes.size() - 1; i > 0; --i)
        std::swap(classes[i], classes[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i) + 1))]);
    std::vector<int> selected(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>((classes.size() + 1) / 2));
    std::sort(selected.begin(), selected.end());

    MixResult r;
    r.selected_classes = selected;
    r.image = target_image;
    r.label = pseudo_label;
    r.weight = Tensor({H, W}, q);
    r.mask = LabelTensor({H, W}, 0);
    const std::size_t HW = static_cast<std::size_t>(H) * W;
    for (std::size_t i = 0; i < HW; ++i) {
        if (!std::binary_search(selected.begin(), selected.end(), sl[i])) continue;
        r.mask[i] = 1;
        r.label[i] = sl[i];
        r.weight[i] = 1.0;
        for (int c = 0; c < 3; ++c) r.image[c * HW + i] = source.image[c * HW + i];
    }
    return r;
}

MaskedImage mask_image(const Tensor& image, int patch, double ratio, Rng& rng) {
    if (!(ratio >= 0 && ratio <= 1)) throw std::invalid_argument("mask ratio must be in [0, 1]");
    if (image.rank() != 3) throw ShapeError("mask_image expects [3, H, W]");
    const int H = image.dim(1), W = image.dim(2);
    if (patch < 1 || H % patch != 0 || W % patch != 0)
        throw ShapeError("mask patch " + std::to_string(patch) + " does not divide " + std::to_string(H) + "x" +
                         std::to_string(W));
    const int gh = H / patch, gw = W / patch;
    MaskedImage m{image, LabelTensor({gh, gw}, 1)};
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            if (!rng.bernoulli(ratio)) continue;
            m.keep[static_cast<std::size_t>(gy) * gw + gx] = 0;
            for (int c = 0; c < image.dim(0); ++c)
                for (int y = gy * patch; y < (gy + 1) * patch; ++y)
                    for (int x = gx * patch; x < (gx + 1) * patch; ++x) m.image.at(c, y, x) = 0.0;
        }
    return m;
}

Tensor color_augment(const Tensor& image, double strength, Rng& rng) {
    if (!(strength >= 0 && strength <= 1)) throw std::invalid_argument("jitter strength must be in [0, 1]");
    if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("color_augment expects [3, H, W]");
    if (strength == 0) return image;
    const std::size_t HW = static_cast<std::size_t>(image.dim(1)) * image.dim(2);
    const double brightness = rng.uniform(1 - strength, 1 + strength);
    const double contrast = rng.uniform(1 - strength, 1 + strength);
    const double saturation = rng.uniform(1 - strength, 1 + strength);
    const double hue = rng.uniform(-strength, strength) * std::numbers::pi / 2;
    const double co = std::cos(hue), si = std::sin(hue);
    const double a = co + (1 - co) / 3, b = (1 - co) / 3 - si / std::sqrt(3.0), d = (1 - co) / 3 + si / std::sqrt(3.0);
    Tensor out(image.shape());
    double mean = 0;
    for (std::size_t i = 0; i < 3 * HW; ++i) mean += image[i];
    mean = mean / (3 * HW) * brightness;
    for (std::size_t i = 0; i < HW; ++i) {
        double px[3];
        for (int c = 0; c < 3; ++c) px[c] = image[c * HW + i] * brightness;
        const double grey = (px[0] + px[1] + px[2]) / 3;
        for (double& v : px) v = grey + saturation * (v - grey);
        const double r = a * px[0] + b * px[1] + d * px[2], g = d * px[0] + a * px[1] + b * px[2],
                     bl = b * px[0] + d * px[1] + a * px[2];
        out[i] = mean + contrast * (r - mean);
        out[HW + i] = mean + contrast * (g - mean);
        out[2 * HW + i] = mean + contrast * (bl - mean);
    }
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::clamp(out[i], 0.0, 1.0);
    if (!rng.bernoulli(0.5)) return out;
    const double sigma = rng.uniform(0.15, 1.15);
    const int radius = static_cast<int>(std::ceil(2 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    double ks = 0;
    for (int t = -radius; t <= radius; ++t) ks += kernel[t + radius] = std::exp(-0.5 * t * t / (sigma * sigma));
    for (double& k : kernel) k /= ks;
    const int H = image.dim(1), W = image.dim(2);
    Tensor tmp(image.shape());
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double s = 0;
                for (int t = -radius; t <= radius; ++t) s += kernel[t + radius] * out.at(c, y, std::clamp(x + t, 0, W - 1));
                tmp.at(c, y, x) = s;
            }
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double s = 0;
                for (int t = -radius; t <= radius; ++t) s += kernel[t + radius] * tmp.at(c, std::clamp(y + t, 0, H - 1), x);
                out.at(c, y, x) = s;
            }
    return out;
}

Var feature_distance_loss(const Var& student_proj, const Tensor& reference) {
    return ops::cosine_distance(student_proj, reference, 1e-8);
}

nlohmann::json LossReport::to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"ce_source", opt(ce_source)}, {"ce_mixed", opt(ce_mixed)},   {"ce_masked", opt(ce_masked)},
            {"fd_source", opt(fd_source)}, {"fd_target", opt(fd_target)}, {"total", total},
            {"q_mean", opt(q_mean)}};
}

void adamw_step(ParameterSet& params, OptimizerState& state, const std::vector<double>& lrs, double weight_decay) {
    auto& ps = params.params();
    if (lrs.size() != ps.size()) throw std::invalid_argument("one learning rate per parameter expected");
    if (state.exp_avg.empty()) {
        for (const auto& p : ps) {
            state.exp_avg.emplace_back(p.var.shape(), 0.0);
            state.exp_avg_sq.emplace_back(p.var.shape(), 0.0);
        }
    }
    if (state.exp_avg.size() != ps.size()) throw StructureError("optimizer state does not match parameters");
    ++state.steps;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.steps));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.steps));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        if (!ps[i].var.has_grad()) continue;
        Tensor& w = ps[i].var.mutable_value();
        const Tensor& g = ps[i].var.grad();
        Tensor& m = state.exp_avg[i];
        Tensor& v = state.exp_avg_sq[i];
        const double lr = lrs[i];
        for (std::size_t k = 0; k < w.numel(); ++k) {
            m[k] = state.beta1 * m[k] + (1 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1 - state.beta2) * g[k] * g[k];
            w[k] -= lr * weight_decay * w[k];
            w[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + state.eps);
        }
    }
}

double clip_grad_norm(ParameterSet& params, double max_norm) {
    double sq = 0;
    for (const auto& p : params.params())
        if (p.var.has_grad())
            for (Real g : p.var.grad().values()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double s = max_norm / (norm + 1e-6);
        for (auto& p : params.params())
            if (p.var.has_grad())
                for (Real& g : p.var.node()->grad.values()) g *= s;
    }
    return norm;
}

BatchSampler::BatchSampler(const Dataset& dataset, int crop_size, int batch_size, std::optional<RareClassIndex> rcs)
    : dataset_(&dataset), crop_size_(crop_size), batch_size_(batch_size), rcs_(std::move(rcs)) {
    if (dataset.samples.empty()) throw DataError("cannot sample from an empty dataset");
    for (const auto& s : dataset.samples)
        if (s.height() < crop_size || s.width() < crop_size)
            throw DataError("sample '" + s.id + "' is smaller than the crop size " + std::to_string(crop_size));
}

Batch BatchSampler::sample(Rng& rng) const {
    const bool labeled = dataset_->has_labels();
    const int n = crop_size_;
    Batch batch;
    batch.images = Tensor({batch_size_, 3, n, n});
    if (labeled) batch.labels = LabelTensor({batch_size_, n, n});
    for (int b = 0; b < batch_size_; ++b) {
        std::size_t idx;
        int wanted = -1;
        if (rcs_) {
            const RareClassDraw d = draw_rare_class(*rcs_, rng);
            idx = dataset_->index_of(d.sample_id);
            wanted = d.class_id;
        } else {
            idx = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(dataset_->samples.size())));
        }
        const auto& s = dataset_->samples[idx];
        const int H = s.height(), W = s.width();
        int y0 = 0, x0 = 0;
        for (int attempt = 0; attempt < 10; ++attempt) {
            y0 = rng.uniform_int(H - n + 1);
            x0 = rng.uniform_int(W - n + 1);
            if (wanted < 0 || !s.label) break;
            bool found = false;
            for (int y = y0; y < y0 + n && !found; ++y)
                for (int x = x0; x < x0 + n; ++x)
                    if ((*s.label)[static_cast<std::size_t>(y) * W + x] == wanted) {
                        found = true;
                        break;
                    }
            if (found) break;
        }
        const bool flip = rng.bernoulli(0.5);
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                const int sx = x0 + (flip ? n - 1 - x : x);
                for (int c = 0; c < 3; ++c) batch.images.at(b, c, y, x) = s.image.at(c, y0 + y, sx);
                if (labeled)
                    batch.labels->at(b, y, x) = (*s.label)[static_cast<std::size_t>(y0 + y) * W + sx];
            }
    }
    return batch;
}

TrainingState make_training_state(const ModelConfig& model_config, std::uint64_t seed, double ema_alpha) {
    TrainingState st;
    st.student = std::make_unique<SegmentationModel>(model_config, seed);
    st.teacher = make_teacher(*st.student, ema_alpha);
    return st;
}

namespace {

Var checked(Var v, const char* name, int step, std::optional<double>& slot) {
    const double x = v.value()[0];
    if (!std::isfinite(x)) throw NumericError(name, step, x);
    slot = x;
    return v;
}

Tensor image_at(const Tensor& batch, int b) {
    Tensor t = batch.slice0(b, b + 1);
    return t.reshaped({batch.dim(1), batch.dim(2), batch.dim(3)});
}

LabelTensor label_at(const LabelTensor& batch, int b) {
    LabelTensor t = batch.slice0(b, b + 1);
    return t.reshaped({batch.dim(1), batch.dim(2)});
}

}  // namespace

LossReport train_step(TrainingState& state, const ReferenceExtractor* reference, const Batch& source, const Batch* target,
                      const TrainConfig& config, Rng& rng) {
    SegmentationModel& student = *state.student;
    const Toggles& tg = config.toggles;
    const UdaConstants& k = config.constants;
    const int step = state.step;
    if (!source.labels) throw std::invalid_argument("train_step: source batch must be labeled");
    const bool uda = config.mode == TrainMode::uda;
    if (uda && !target) throw std::invalid_argument("train_step: UDA mode needs a target batch");
    if (uda && tg.fd_loss && !reference) throw std::invalid_argument("train_step: FD loss needs a reference extractor");

    student.parameters().zero_grad();
    LossReport rep;
    std::vector<Var> terms;

    const ForwardResult src = student.forward(source.images, true);
    terms.push_back(checked(ops::weighted_cross_entropy(src.logits, *source.labels, Tensor(source.labels->shape(), 1.0),
                                                        config.ignore_index),
                            "ce_source", step, rep.ce_source));

    if (uda) {
        const int B = target->images.dim(0);
        PseudoLabelBatch pl = generate_pseudo_labels(state.teacher, target->images, k.tau, k.pseudo_flip);
        if (!tg.pseudo_weight) std::fill(pl.q.begin(), pl.q.end(), 1.0);
        double q_sum = 0;
        for (double q : pl.q) q_sum += q;
        rep.q_mean = q_sum / B;

        Tensor mixed_images;
        LabelTensor mixed_labels;
        Tensor mixed_weights;
        if (tg.dacs) {
            std::vector<Tensor> imgs, wts;
            std::vector<LabelTensor> lbls;
            for (int b = 0; b < B; ++b) {
                SegmentationSample s;
                s.image = image_at(source.images, b);
                s.label = label_at(*source.labels, b);
                const MixResult mix =
                    dacs_mix(s, image_at(target->images, b), label_at(pl.labels, b), pl.q[b], rng, config.ignore_index);
                imgs.push_back(color_augment(mix.image, k.mix_jitter, rng));
                lbls.push_back(mix.label);
                wts.push_back(mix.weight);
            }
            mixed_images = stack(imgs);
            mixed_labels = stack(lbls);
            mixed_weights = stack(wts);
            const Var logits = student.forward(mixed_images, true).logits;
            terms.push_back(checked(ops::weighted_cross_entropy(logits, mixed_labels, mixed_weights, config.ignore_index),
                                    "ce_mixed", step, rep.ce_mixed));
        }

        if (tg.mic) {
            const bool use_mixed = k.mask_mixed && tg.dacs;
            const Tensor& base = use_mixed ? mixed_images : target->images;
            std::vector<Tensor> masked;
            for (int b = 0; b < B; ++b) masked.push_back(mask_image(image_at(base, b), k.mask_patch, k.mask_ratio, rng).image);
            const Var logits = student.forward(stack(masked), true).logits;
            Var ce = checked(ops::weighted_cross_entropy(logits, use_mixed ? mixed_labels : pl.labels,
                                                         use_mixed ? mixed_weights : pl.weights(), config.ignore_index),
                             "ce_masked", step, rep.ce_masked);
            terms.push_back(ops::scale(ce, k.lambda_mask));
        }

        if (tg.fd_loss) {
            Var fd_s = checked(feature_distance_loss(student.project(src.tokens.tokens), reference->features(source.images)),
                               "fd_source", step, rep.fd_source);
            const TokenGrid tgt_tokens = student.encode(target->images);
            Var fd_t = checked(feature_distance_loss(student.project(tgt_tokens.tokens), reference->features(target->images)),
                               "fd_target", step, rep.fd_target);
            terms.push_back(ops::scale(ops::add(fd_s, fd_t), k.lambda_fd));
        }
    }

    const Var total = ops::sum_scalars(terms);
    rep.total = total.value()[0];
    if (!std::isfinite(rep.total)) throw NumericError("total", step, rep.total);
    backward(total);
    clip_grad_norm(student.parameters(), config.schedule.grad_clip);

    const int depth = student.config().encoder.depth;
    std::vector<double> lrs;
    for (const auto& p : student.parameters().params())
        lrs.push_back(lr_at(config.schedule, step, p.group, depth, tg.lr_multiplier));
    adamw_step(student.parameters(), state.optimizer, lrs, config.schedule.weight_decay);

    state.teacher.momentum = tg.ema ? k.ema_alpha : 0.0;
    ema_update(state.teacher, student);
    ++state.step;
    return rep;
}

void save_training_checkpoint(const std::filesystem::path& path, const TrainingState& state, const nlohmann::json& meta) {
    std::vector<std::pair<std::string, Tensor>> tensors;
    for (auto& [n, t] : state.student->parameters().state()) tensors.emplace_back("student/" + n, std::move(t));
    for (auto& [n, t] : state.teacher.model->parameters().state()) tensors.emplace_back("teacher/" + n, std::move(t));
    const auto& ps = state.student->parameters().params();
    for (std::size_t i = 0; i < state.optimizer.exp_avg.size(); ++i) {
        tensors.emplace_back("optim/exp_avg/" + ps[i].name, state.optimizer.exp_avg[i]);
        tensors.emplace_back("optim/exp_avg_sq/" + ps[i].name, state.optimizer.exp_avg_sq[i]);
    }
    nlohmann::json m = meta;
    m["kind"] = "training";
    m["step"] = state.step;
    m["optimizer_steps"] = state.optimizer.steps;
    m["teacher_momentum"] = state.teacher.momentum;
    m["model_config"] = state.student->config();
    save_archive(path, m, tensors);
}

nlohmann::json load_training_checkpoint(const std::filesystem::path& path, TrainingState& state) {
    const Archive ar = load_archive(path);
    if (ar.meta.value("kind", "") != "training") throw StructureError(path.string() + " is not a training checkpoint");
    const auto cfg = ar.meta.at("model_config").get<ModelConfig>();
    if (!state.student) state.student = std::make_unique<SegmentationModel>(cfg, 0);
    if (!state.teacher.model) state.teacher.model = state.student->clone();
    std::map<std::string, Tensor> student, teacher;
    for (const auto& [name, t] : ar.tensors) {
        if (name.rfind("student/", 0) == 0) student.emplace(name.substr(8), t);
        if (name.rfind("teacher/", 0) == 0) teacher.emplace(name.substr(8), t);
    }
    state.student->parameters().load_state(student);
    state.teacher.model->parameters().load_state(teacher);
    state.teacher.momentum = ar.meta.at("teacher_momentum").get<double>();
    state.optimizer = OptimizerState{};
    state.optimizer.steps = ar.meta.at("optimizer_steps").get<std::int64_t>();
    if (state.optimizer.steps > 0) {
        for (const auto& p : state.student->parameters().params()) {
            auto m = ar.tensors.find("optim/exp_avg/" + p.name);
            auto v = ar.tensors.find("optim/exp_avg_sq/" + p.name);
            if (m == ar.tensors.end() || v == ar.tensors.end())
                throw StructureError("checkpoint lacks optimizer state for " + p.name);
            state.optimizer.exp_avg.push_back(m->second);
            state.optimizer.exp_avg_sq.push_back(v->second);
        }
    }
    state.step = ar.meta.at("step").get<int>();
    return ar.meta;
}

}  // namespace uda
