#include "uda/eval.hpp"

#include <algorithm>
#include <atomic>
#include <iomanip>
#include <sstream>
#include <thread>

#include "uda/uda_engine.hpp"

namespace uda {

ConfusionMatrix::ConfusionMatrix(int num_classes, int ignore_index)
    : num_classes_(num_classes), ignore_index_(ignore_index) {
    if (num_classes < 1) throw std::invalid_argument("confusion matrix needs at least one class");
    counts_.assign(static_cast<std::size_t>(num_classes) * num_classes, 0);
}

void ConfusionMatrix::update(const LabelTensor& pred, const LabelTensor& gt) {
    if (pred.shape() != gt.shape())
        throw ShapeError("prediction " + shape_str(pred.shape()) + " vs ground truth " + shape_str(gt.shape()));
    for (std::size_t i = 0; i < gt.numel(); ++i) {
        const int p = pred[i];
        if (p < 0 || p >= num_classes_)
            throw std::invalid_argument("prediction holds " + std::to_string(p) + ", not a class id");
    }
    for (std::size_t i = 0; i < gt.numel(); ++i) {
        const int g = gt[i];
        if (g == ignore_index_) continue;
        if (g < 0 || g >= num_classes_) throw DataError("ground-truth label " + std::to_string(g) + " out of range");
        ++counts_[static_cast<std::size_t>(g) * num_classes_ + pred[i]];
    }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.num_classes_ != num_classes_) throw std::invalid_argument("confusion matrices differ in size");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::int64_t ConfusionMatrix::total() const {
    std::int64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
}

EvalReport compute_iou(const ConfusionMatrix& cm, const std::vector<std::string>& class_names,
                       const std::string& dataset_id) {
    const int C = cm.num_classes();
    if (cm.total() == 0) throw DataError("no labeled pixels");
    EvalReport r;
    r.dataset_id = dataset_id;
    r.class_names = class_names;
    if (r.class_names.empty())
        for (int c = 0; c < C; ++c) r.class_names.push_back("class" + std::to_string(c));
    if (static_cast<int>(r.class_names.size()) != C) throw std::invalid_argument("class name count mismatch");
    r.iou.assign(C, 0.0);
    r.defined.assign(C, false);
    r.tp.assign(C, 0);
    r.fp.assign(C, 0);
    r.fn.assign(C, 0);
    r.pixel_count = cm.total();
    double sum = 0;
    int n = 0;
    for (int c = 0; c < C; ++c) {
        r.tp[c] = cm.at(c, c);
        for (int k = 0; k < C; ++k) {
            if (k == c) continue;
            r.fp[c] += cm.at(k, c);
            r.fn[c] += cm.at(c, k);
        }
        const std::int64_t denom = r.tp[c] + r.fp[c] + r.fn[c];
        if (denom == 0) continue;
        r.defined[c] = true;
        r.iou[c] = static_cast<double>(r.tp[c]) / static_cast<double>(denom);
        sum += r.iou[c];
        ++n;
    }
    r.miou = sum / n;
    return r;
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json classes = nlohmann::json::array();
    for (std::size_t c = 0; c < iou.size(); ++c)
        classes.push_back({{"class", class_names[c]},
                           {"iou", defined[c] ? nlohmann::json(iou[c]) : nlohmann::json(nullptr)},
                           {"tp", tp[c]},
                           {"fp", fp[c]},
                           {"fn", fn[c]}});
    return {{"dataset", dataset_id}, {"miou", miou}, {"pixel_count", pixel_count}, {"classes", classes}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    EvalReport r;
    r.dataset_id = j.at("dataset").get<std::string>();
    r.miou = j.at("miou").get<double>();
    r.pixel_count = j.at("pixel_count").get<std::int64_t>();
    for (const auto& c : j.at("classes")) {
        r.class_names.push_back(c.at("class").get<std::string>());
        r.defined.push_back(!c.at("iou").is_null());
        r.iou.push_back(c.at("iou").is_null() ? 0.0 : c.at("iou").get<double>());
        r.tp.push_back(c.at("tp").get<std::int64_t>());
        r.fp.push_back(c.at("fp").get<std::int64_t>());
        r.fn.push_back(c.at("fn").get<std::int64_t>());
    }
    return r;
}

std::string EvalReport::to_csv() const {
    std::ostringstream os;
    os << "class,iou,tp,fp,fn\n" << std::setprecision(17);
    for (std::size_t c = 0; c < iou.size(); ++c) {
        os << class_names[c] << ',';
        if (defined[c]) os << iou[c];
        os << ',' << tp[c] << ',' << fp[c] << ',' << fn[c] << '\n';
    }
    return os.str();
}

std::string EvalReport::to_table() const {
    std::ostringstream os;
    std::vector<std::size_t> widths;
    for (const auto& n : class_names) widths.push_back(std::max<std::size_t>(n.size(), 5));
    os << std::left;
    for (std::size_t c = 0; c < class_names.size(); ++c) os << std::setw(static_cast<int>(widths[c])) << class_names[c] << ' ';
    os << "mIoU\n" << std::right << std::fixed << std::setprecision(1);
    for (std::size_t c = 0; c < iou.size(); ++c) {
        os << std::setw(static_cast<int>(widths[c]));
        if (defined[c])
            os << iou[c] * 100;
        else
            os << "-";
        os << ' ';
    }
    os << std::setw(4) << miou * 100 << '\n';
    return os.str();
}

Tensor ModelPredictor::probabilities(const Tensor& images) const {
    return predict_probabilities(*model_, images, false);
}

void InferConfig::validate() const {
    if (window < 1) throw std::invalid_argument("window must be positive");
    if (stride < 1 || stride > window) throw std::invalid_argument("stride must be in [1, window]");
    if (tile_batch < 1) throw std::invalid_argument("tile_batch must be positive");
    if (workers < 1) throw std::invalid_argument("workers must be positive");
}

std::vector<int> window_offsets(int extent, int window, int stride) {
    const int grids = std::max(extent - window + stride - 1, 0) / stride + 1;
    std::vector<int> out;
    for (int i = 0; i < grids; ++i) out.push_back(std::max(std::min(i * stride + window, extent) - window, 0));
    return out;
}

namespace {

Tensor infer_once(const Predictor& predictor, const Tensor& image, const InferConfig& cfg) {
    const int H = image.dim(1), W = image.dim(2), C = predictor.num_classes();
    const int win = cfg.window;
    const int ph = std::max(H, win), pw = std::max(W, win);
    const Tensor padded =
        (ph == H && pw == W) ? image : reflect_pad(image.reshaped({1, 3, H, W}), ph, pw).reshaped({3, ph, pw});

    std::vector<std::pair<int, int>> tiles;
    for (int y : window_offsets(ph, win, cfg.stride))
        for (int x : window_offsets(pw, win, cfg.stride)) tiles.emplace_back(y, x);

    Tensor acc({C, ph, pw}, 0.0);
    std::vector<int> coverage(static_cast<std::size_t>(ph) * pw, 0);
    for (std::size_t t0 = 0; t0 < tiles.size(); t0 += cfg.tile_batch) {
        const std::size_t t1 = std::min(tiles.size(), t0 + cfg.tile_batch);
        Tensor batch({static_cast<int>(t1 - t0), 3, win, win});
        for (std::size_t t = t0; t < t1; ++t)
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < win; ++y)
                    for (int x = 0; x < win; ++x)
                        batch.at(static_cast<int>(t - t0), c, y, x) = padded.at(c, tiles[t].first + y, tiles[t].second + x);
        const Tensor probs = predictor.probabilities(batch);
        for (std::size_t t = t0; t < t1; ++t) {
            const auto [ty, tx] = tiles[t];
            for (int y = 0; y < win; ++y)
                for (int x = 0; x < win; ++x) {
                    ++coverage[static_cast<std::size_t>(ty + y) * pw + tx + x];
                    for (int c = 0; c < C; ++c) acc.at(c, ty + y, tx + x) += probs.at(static_cast<int>(t - t0), c, y, x);
                }
        }
    }
    Tensor out({C, H, W});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                out.at(c, y, x) = acc.at(c, y, x) / coverage[static_cast<std::size_t>(y) * pw + x];
    return out;
}

}  // namespace

Tensor sliding_window_infer(const Predictor& predictor, const Tensor& image, const InferConfig& config) {
    config.validate();
    if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("sliding_window_infer expects [3, H, W]");
    if (config.window < predictor.min_input_size())
        throw std::invalid_argument("window " + std::to_string(config.window) + " below the model minimum input " +
                                    std::to_string(predictor.min_input_size()));
    Tensor direct = infer_once(predictor, image, config);
    if (!config.flip) return direct;
    const Tensor mirrored = flip_last(infer_once(predictor, flip_last(image), config));
    for (std::size_t i = 0; i < direct.numel(); ++i) direct[i] = (direct[i] + mirrored[i]) * 0.5;
    return direct;
}

LabelTensor argmax_channels(const Tensor& probs) {
    const int C = probs.dim(0), H = probs.dim(1), W = probs.dim(2);
    LabelTensor out({H, W}, 0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            int best = 0;
            for (int c = 1; c < C; ++c)
                if (probs.at(c, y, x) > probs.at(best, y, x)) best = c;
            out.at(y, x) = best;
        }
    return out;
}

EvalReport evaluate(const Predictor& predictor, const Dataset& dataset, const InferConfig& config,
                    const std::string& dataset_id) {
    config.validate();
    if (!dataset.has_labels()) throw DataError("evaluation needs a labeled dataset");
    const int C = dataset.class_space.num_classes();
    if (predictor.num_classes() != C)
        throw std::invalid_argument("model predicts " + std::to_string(predictor.num_classes()) + " classes, dataset has " +
                                    std::to_string(C));
    const int workers = std::min<int>(config.workers, static_cast<int>(std::max<std::size_t>(1, dataset.samples.size())));
    std::vector<ConfusionMatrix> partial(workers, ConfusionMatrix(C, dataset.class_space.ignore_index));
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    auto work = [&](int w) {
        try {
            NoGradGuard no_grad;
            for (std::size_t i = next++; i < dataset.samples.size(); i = next++) {
                const auto& s = dataset.samples[i];
                partial[w].update(argmax_channels(sliding_window_infer(predictor, s.image, config)), *s.label);
            }
        } catch (...) {
            errors[w] = std::current_exception();
            next = dataset.samples.size();
        }
    };
    if (workers == 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(work, w);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    ConfusionMatrix cm(C, dataset.class_space.ignore_index);
    for (const auto& p : partial) cm.merge(p);
    return compute_iou(cm, dataset.class_space.names, dataset_id);
}

EvalReport evaluate(const Predictor& predictor, const DatasetManifest& manifest, const InferConfig& config) {
    return evaluate(predictor, load_dataset(manifest), config, manifest.root.string());
}

}  // namespace uda
