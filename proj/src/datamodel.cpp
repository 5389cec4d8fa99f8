#include "uda/datamodel.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

namespace uda {

namespace fs = std::filesystem;

void ClassSpace::validate() const {
    if (names.empty()) throw std::invalid_argument("class space has no classes");
    std::set<std::string> seen;
    for (const auto& n : names) {
        if (n.empty()) throw std::invalid_argument("class names must be non-empty");
        if (!seen.insert(n).second) throw std::invalid_argument("duplicate class name " + n);
    }
    if (ignore_index >= 0 && ignore_index < num_classes())
        throw std::invalid_argument("ignore_index " + std::to_string(ignore_index) + " collides with a class id");
}

ClassSpace ClassSpace::toy(int num_classes) {
    static const std::array<const char*, 6> base{"ground", "sky", "building", "disk", "sign", "pole"};
    ClassSpace cs;
    for (int c = 0; c < num_classes; ++c)
        cs.names.push_back(c < static_cast<int>(base.size()) ? base[c] : "object" + std::to_string(c));
    return cs;
}

std::string to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

Domain domain_from_string(const std::string& s) {
    if (s == "source") return Domain::source;
    if (s == "target") return Domain::target;
    throw DataError("unknown domain '" + s + "'");
}

bool DatasetManifest::has_labels() const {
    return !entries.empty() && std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.label.has_value(); });
}

bool Dataset::has_labels() const {
    return !samples.empty() &&
           std::all_of(samples.begin(), samples.end(), [](const auto& s) { return s.label.has_value(); });
}

std::size_t Dataset::index_of(const std::string& id) const {
    auto it = std::lower_bound(samples.begin(), samples.end(), id, [](const auto& s, const std::string& v) { return s.id < v; });
    if (it != samples.end() && it->id == id) return static_cast<std::size_t>(it - samples.begin());
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (samples[i].id == id) return i;
    throw DataError("unknown sample id " + id);
}

Dataset Dataset::without_labels() const {
    Dataset d = *this;
    for (auto& s : d.samples) s.label.reset();
    return d;
}

Tensor read_rgb_png(const fs::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (m.empty()) throw DataError("cannot decode image " + path.string());
    Tensor t({3, m.rows, m.cols});
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) {
            const auto px = m.at<cv::Vec3b>(y, x);
            for (int c = 0; c < 3; ++c) t.at(c, y, x) = px[2 - c] / 255.0;
        }
    return t;
}

LabelTensor read_label_png(const fs::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (m.empty()) throw DataError("cannot decode label " + path.string());
    if (m.channels() != 1 || (m.depth() != CV_8U && m.depth() != CV_16U))
        throw DataError("label " + path.string() + " is not a single-channel integer image");
    LabelTensor t({m.rows, m.cols});
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x)
            t[static_cast<std::size_t>(y) * m.cols + x] =
                m.depth() == CV_8U ? m.at<std::uint8_t>(y, x) : m.at<std::uint16_t>(y, x);
    return t;
}

void write_rgb_png(const fs::path& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) throw DataError("write_rgb_png expects [3, H, W]");
    const int H = image.dim(1), W = image.dim(2);
    cv::Mat m(H, W, CV_8UC3);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            cv::Vec3b px;
            for (int c = 0; c < 3; ++c)
                px[2 - c] = static_cast<std::uint8_t>(std::lround(std::clamp(image.at(c, y, x), 0.0, 1.0) * 255.0));
            m.at<cv::Vec3b>(y, x) = px;
        }
    if (!cv::imwrite(path.string(), m)) throw DataError("cannot write " + path.string());
}

void write_label_png(const fs::path& path, const LabelTensor& label) {
    const int H = label.dim(0), W = label.dim(1);
    cv::Mat m(H, W, CV_8UC1);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const int v = label[static_cast<std::size_t>(y) * W + x];
            if (v < 0 || v > 255) throw DataError("label value " + std::to_string(v) + " does not fit 8 bits");
            m.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(v);
        }
    if (!cv::imwrite(path.string(), m)) throw DataError("cannot write " + path.string());
}

namespace {

fs::path manifest_file(const fs::path& path) {
    return fs::is_directory(path) ? path / "manifest.json" : path;
}

nlohmann::json read_manifest_json(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw DataError("missing manifest " + file.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed manifest " + file.string() + ": " + e.what());
    }
}

void validate_label(const LabelTensor& label, const ClassSpace& cs, const std::string& id) {
    for (int v : label.values())
        if (!cs.valid_label(v))
            throw DataError("entry '" + id + "': label value " + std::to_string(v) + " outside the class space");
}

}  // namespace

ClassSpace read_manifest_class_space(const fs::path& path) {
    const auto j = read_manifest_json(manifest_file(path));
    ClassSpace cs;
    cs.names = j.at("class_names").get<std::vector<std::string>>();
    cs.ignore_index = j.value("ignore_index", 255);
    return cs;
}

DatasetManifest load_manifest(const fs::path& path, Domain domain, const ClassSpace& class_space) {
    class_space.validate();
    const fs::path file = manifest_file(path);
    const auto j = read_manifest_json(file);
    DatasetManifest m;
    m.root = file.parent_path();
    m.class_space = class_space;
    m.domain = domain;
    try {
        if (j.contains("domain") && domain_from_string(j.at("domain").get<std::string>()) != domain)
            throw DataError("manifest " + file.string() + " declares domain " + j.at("domain").get<std::string>());
        if (j.contains("class_names") && j.at("class_names").get<std::vector<std::string>>() != class_space.names)
            throw DataError("manifest " + file.string() + " class names differ from the configured class space");
        if (j.contains("ignore_index") && j.at("ignore_index").get<int>() != class_space.ignore_index)
            throw DataError("manifest " + file.string() + " ignore_index differs from the configured class space");
        for (const auto& e : j.at("entries")) {
            ManifestEntry entry;
            entry.id = e.at("id").get<std::string>();
            entry.image = m.root / "images" / (entry.id + ".png");
            const fs::path label = m.root / "labels" / (entry.id + ".png");
            if (!fs::exists(entry.image)) throw DataError("entry '" + entry.id + "': missing image " + entry.image.string());
            if (fs::exists(label)) {
                entry.label = label;
            } else if (domain == Domain::source) {
                throw DataError("entry '" + entry.id + "': source sample lacks label " + label.string());
            }
            m.entries.push_back(std::move(entry));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed manifest " + file.string() + ": " + e.what());
    }
    std::sort(m.entries.begin(), m.entries.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    for (std::size_t i = 1; i < m.entries.size(); ++i)
        if (m.entries[i].id == m.entries[i - 1].id) throw DataError("duplicate entry id '" + m.entries[i].id + "'");
    for (const auto& e : m.entries)
        if (e.label) {
            LabelTensor l;
            try {
                l = read_label_png(*e.label);
            } catch (const DataError& err) {
                throw DataError("entry '" + e.id + "': " + err.what());
            }
            validate_label(l, class_space, e.id);
        }
    return m;
}


Dataset load_dataset(const DatasetManifest& manifest) {
    Dataset d;
    d.class_space = manifest.class_space;
    d.domain = manifest.domain;
    for (const auto& e : manifest.entries) {
        SegmentationSample s;
        s.id = e.id;
        s.domain = manifest.domain;
        s.image = read_rgb_png(e.image);
        if (e.label) {
            s.label = read_label_png(*e.label);
            validate_label(*s.label, manifest.class_space, e.id);
            if (s.label->dim(0) != s.height() || s.label->dim(1) != s.width())
                throw DataError("entry '" + e.id + "': image and label sizes differ");
        }
        d.samples.push_back(std::move(s));
    }
    return d;
}

void write_dataset(const Dataset& dataset, const fs::path& root) {
    fs::create_directories(root / "images");
    nlohmann::json entries = nlohmann::json::array();
    bool any_label = false;
    for (const auto& s : dataset.samples) {
        write_rgb_png(root / "images" / (s.id + ".png"), s.image);
        if (s.label) {
            if (!any_label) fs::create_directories(root / "labels");
            any_label = true;
            write_label_png(root / "labels" / (s.id + ".png"), *s.label);
        }
        entries.push_back({{"id", s.id}});
    }
    const nlohmann::json j = {{"domain", to_string(dataset.domain)},
                              {"class_names", dataset.class_space.names},
                              {"ignore_index", dataset.class_space.ignore_index},
                              {"entries", entries}};
    std::ofstream(root / "manifest.json") << j.dump(2) << '\n';
}

namespace {

void accumulate_frequencies(ClassFrequencyTable& t, const LabelTensor& label, const ClassSpace& cs) {
    std::vector<bool> present(cs.num_classes(), false);
    for (int v : label.values()) {
        if (v == cs.ignore_index) continue;
        ++t.pixel_count[v];
        present[v] = true;
    }
    for (int c = 0; c < cs.num_classes(); ++c) t.image_count[c] += present[c] ? 1 : 0;
    ++t.num_images;
}

void finish_frequencies(ClassFrequencyTable& t) {
    std::int64_t total = 0;
    for (auto v : t.pixel_count) total += v;
    if (total == 0) throw DataError("no labeled pixels");
    t.frequency.resize(t.pixel_count.size());
    for (std::size_t c = 0; c < t.pixel_count.size(); ++c)
        t.frequency[c] = static_cast<double>(t.pixel_count[c]) / static_cast<double>(total);
}

ClassFrequencyTable empty_table(int C) {
    ClassFrequencyTable t;
    t.pixel_count.assign(C, 0);
    t.image_count.assign(C, 0);
    return t;
}

std::vector<bool> class_presence(const LabelTensor& label, const ClassSpace& cs) {
    std::vector<bool> present(cs.num_classes(), false);
    for (int v : label.values())
        if (v != cs.ignore_index) present[v] = true;
    return present;
}

RareClassIndex finish_index(const ClassFrequencyTable& freqs, std::vector<std::vector<std::string>> pools,
                            double temperature) {
    std::vector<bool> non_empty(pools.size());
    for (std::size_t c = 0; c < pools.size(); ++c) non_empty[c] = !pools[c].empty();
    RareClassIndex idx;
    idx.probabilities = rare_class_distribution(freqs.frequency, non_empty, temperature);
    idx.pools = std::move(pools);
    idx.temperature = temperature;
    return idx;
}

}  // namespace

ClassFrequencyTable ClassFrequencyTable::merge(const ClassFrequencyTable& a, const ClassFrequencyTable& b) {
    if (a.pixel_count.size() != b.pixel_count.size()) throw std::invalid_argument("merging tables of different class counts");
    ClassFrequencyTable t = empty_table(static_cast<int>(a.pixel_count.size()));
    for (std::size_t c = 0; c < t.pixel_count.size(); ++c) {
        t.pixel_count[c] = a.pixel_count[c] + b.pixel_count[c];
        t.image_count[c] = a.image_count[c] + b.image_count[c];
    }
    t.num_images = a.num_images + b.num_images;
    finish_frequencies(t);
    return t;
}

std::string ClassFrequencyTable::to_csv(const ClassSpace& space) const {
    std::ostringstream os;
    os << "class,pixel_count,image_count,frequency\n";
    os << std::setprecision(17);
    for (std::size_t c = 0; c < pixel_count.size(); ++c)
        os << space.names.at(c) << ',' << pixel_count[c] << ',' << image_count[c] << ',' << frequency[c] << '\n';
    return os.str();
}

ClassFrequencyTable compute_class_frequencies(const Dataset& dataset) {
    if (!dataset.has_labels()) throw DataError("class frequencies need a labeled dataset");
    ClassFrequencyTable t = empty_table(dataset.class_space.num_classes());
    for (const auto& s : dataset.samples) accumulate_frequencies(t, *s.label, dataset.class_space);
    finish_frequencies(t);
    return t;
}

ClassFrequencyTable compute_class_frequencies(const DatasetManifest& manifest) {
    if (!manifest.has_labels()) throw DataError("class frequencies need a labeled manifest");
    ClassFrequencyTable t = empty_table(manifest.class_space.num_classes());
    for (const auto& e : manifest.entries) accumulate_frequencies(t, read_label_png(*e.label), manifest.class_space);
    finish_frequencies(t);
    return t;
}

std::vector<double> rare_class_distribution(const std::vector<double>& frequency, const std::vector<bool>& non_empty,
                                            double temperature) {
    if (!(temperature > 0)) throw std::invalid_argument("rare class temperature must be positive");
    if (frequency.size() != non_empty.size()) throw std::invalid_argument("frequency / pool size mismatch");
    // Shift by the largest exponent before exponentiating; T = 1e-4 would overflow otherwise.
    double max_logit = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < frequency.size(); ++c)
        if (non_empty[c]) max_logit = std::max(max_logit, (1.0 - frequency[c]) / temperature);
    if (!std::isfinite(max_logit)) throw DataError("rare class index needs at least one non-empty class pool");
    std::vector<double> p(frequency.size(), 0.0);
    double total = 0;
    for (std::size_t c = 0; c < frequency.size(); ++c)
        if (non_empty[c]) total += p[c] = std::exp((1.0 - frequency[c]) / temperature - max_logit);
    for (auto& v : p) v /= total;
    return p;
}

RareClassIndex build_rare_class_index(const ClassFrequencyTable& freqs, const Dataset& dataset, double temperature) {
    if (!(temperature > 0)) throw std::invalid_argument("rare class temperature must be positive");
    if (!dataset.has_labels()) throw DataError("rare class sampling needs a labeled dataset");
    std::vector<std::vector<std::string>> pools(dataset.class_space.num_classes());
    for (const auto& s : dataset.samples) {
        const auto present = class_presence(*s.label, dataset.class_space);
        for (std::size_t c = 0; c < present.size(); ++c)
            if (present[c]) pools[c].push_back(s.id);
    }
    return finish_index(freqs, std::move(pools), temperature);
}

RareClassIndex build_rare_class_index(const ClassFrequencyTable& freqs, const DatasetManifest& manifest,
                                      double temperature) {
    if (!(temperature > 0)) throw std::invalid_argument("rare class temperature must be positive");
    if (!manifest.has_labels()) throw DataError("rare class sampling needs a labeled manifest");
    std::vector<std::vector<std::string>> pools(manifest.class_space.num_classes());
    for (const auto& e : manifest.entries) {
        const auto present = class_presence(read_label_png(*e.label), manifest.class_space);
        for (std::size_t c = 0; c < present.size(); ++c)
            if (present[c]) pools[c].push_back(e.id);
    }
    return finish_index(freqs, std::move(pools), temperature);
}

RareClassDraw draw_rare_class(const RareClassIndex& index, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0;
    int chosen = -1;
    for (std::size_t c = 0; c < index.probabilities.size(); ++c) {
        if (index.probabilities[c] <= 0) continue;
        chosen = static_cast<int>(c);
        acc += index.probabilities[c];
        if (u < acc) break;
    }
    if (chosen < 0) throw DataError("rare class index has no sampleable class");
    const auto& pool = index.pools[static_cast<std::size_t>(chosen)];
    return {chosen, pool[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(pool.size())))]};
}

std::string sample_source(const RareClassIndex& index, Rng& rng) { return draw_rare_class(index, rng).sample_id; }

void ToyConfig::validate() const {
    if (image_size < 32 || image_size > 1024) throw std::invalid_argument("toy image_size must be in [32, 1024]");
    if (num_classes < 2 || num_classes > 200) throw std::invalid_argument("toy num_classes must be in [2, 200]");
    if (num_source < 1 || num_target_train < 1 || num_target_val < 1)
        throw std::invalid_argument("toy sample counts must be positive");
    if (!(shift >= 0)) throw std::invalid_argument("toy shift must be non-negative");
}

namespace {

using Color = std::array<double, 3>;

Color class_color(int c) {
    static const std::array<Color, 6> palette{{{0.45, 0.42, 0.38},
                                              {0.55, 0.72, 0.92},
                                              {0.78, 0.52, 0.32},
                                              {0.22, 0.62, 0.28},
                                              {0.92, 0.84, 0.22},
                                              {0.40, 0.36, 0.72}}};
    if (c < 6) return palette[static_cast<std::size_t>(c)];
    const double h = std::fmod(c * 0.618033988749895, 1.0) * 2 * std::numbers::pi;
    return {0.5 + 0.3 * std::cos(h), 0.5 + 0.3 * std::cos(h - 2.094), 0.5 + 0.3 * std::cos(h + 2.094)};
}

/// Appearance model of one domain; the target applies a small hue rotation,
/// lower contrast, a brightness offset, stronger sensor noise and an
/// illumination ramp.
struct DomainStyle {
    double hue_radians = 0;
    double gain = 1, offset = 0;
    double noise_std = 0.03;
    double ramp = 0;

    static DomainStyle make(Domain d, double shift) {
        DomainStyle s;
        if (d == Domain::source) return s;
        s.hue_radians = shift * 10.0 * std::numbers::pi / 180.0;
        s.gain = 1.0 - 0.35 * shift;
        s.offset = 0.15 * shift;
        s.noise_std = 0.03 + 0.08 * shift;
        s.ramp = 0.5 * shift;
        return s;
    }

    Color apply_color(const Color& c) const {
        const double co = std::cos(hue_radians), si = std::sin(hue_radians);
        const double a = co + (1 - co) / 3, b = (1 - co) / 3 - si / std::sqrt(3.0), d = (1 - co) / 3 + si / std::sqrt(3.0);
        const Color r{a * c[0] + b * c[1] + d * c[2], d * c[0] + a * c[1] + b * c[2], b * c[0] + d * c[1] + a * c[2]};
        return {gain * r[0] + offset, gain * r[1] + offset, gain * r[2] + offset};
    }
};

struct Canvas {
    int size;
    LabelTensor label;
    Tensor color;  // [3, H, W] in source palette space

    explicit Canvas(int n) : size(n), label({n, n}, 0), color({3, n, n}, 0.0) {}

    void paint(int y, int x, int cls, const Color& c) {
        if (y < 0 || y >= size || x < 0 || x >= size) return;
        label[static_cast<std::size_t>(y) * size + x] = cls;
        for (int k = 0; k < 3; ++k) color.at(k, y, x) = c[static_cast<std::size_t>(k)];
    }
};

Color jitter(const Color& c, Rng& rng, double amount) {
    return {c[0] + rng.uniform(-amount, amount), c[1] + rng.uniform(-amount, amount), c[2] + rng.uniform(-amount, amount)};
}

Color scaled(const Color& c, double k) { return {c[0] * k, c[1] * k, c[2] * k}; }

void draw_background(Canvas& cv, Rng& rng, int horizon) {
    const Color ground = jitter(class_color(0), rng, 0.05), sky = jitter(class_color(1), rng, 0.05);
    const double fy = rng.uniform(0.1, 0.3), fx = rng.uniform(0.1, 0.3), phase = rng.uniform(0, 6.28);
    for (int y = 0; y < cv.size; ++y)
        for (int x = 0; x < cv.size; ++x) {
            if (y < horizon) {
                const double k = 0.85 + 0.25 * y / std::max(1, horizon);
                cv.paint(y, x, 1, scaled(sky, k));
            } else {
                const double k = 1.0 + 0.08 * std::sin(fy * y + phase) * std::cos(fx * x);
                cv.paint(y, x, 0, scaled(ground, k));
            }
        }
}

void draw_building(Canvas& cv, Rng& rng, int horizon, int cls) {
    const int n = cv.size;
    const int w = static_cast<int>(rng.uniform(0.14, 0.32) * n), h = static_cast<int>(rng.uniform(0.2, 0.42) * n);
    const int x0 = rng.uniform_int(n - w / 2) - w / 4, bottom = horizon + rng.uniform_int(std::max(1, n / 16));
    const Color base = jitter(class_color(cls), rng, 0.07);
    for (int y = bottom - h; y < bottom; ++y)
        for (int x = x0; x < x0 + w; ++x) {
            const bool window = (x - x0) % 6 >= 2 && (x - x0) % 6 < 5 && (y - bottom) % 8 >= 3 && (y - bottom) % 8 < 6;
            cv.paint(y, x, cls, window ? scaled(base, 0.72) : base);
        }
}

void draw_disk(Canvas& cv, Rng& rng, int horizon, int cls) {
    const int n = cv.size;
    const double r = rng.uniform(0.05, 0.12) * n;
    const double cy = rng.uniform(horizon, n), cx = rng.uniform(0, n);
    const Color base = jitter(class_color(cls), rng, 0.07);
    for (int y = static_cast<int>(cy - r); y <= static_cast<int>(cy + r) + 1; ++y)
        for (int x = static_cast<int>(cx - r); x <= static_cast<int>(cx + r) + 1; ++x) {
            const double d = std::hypot(y + 0.5 - cy, x + 0.5 - cx);
            if (d <= r) cv.paint(y, x, cls, scaled(base, 1.1 - 0.3 * d / r));
        }
}

void draw_triangle(Canvas& cv, Rng& rng, int cls) {
    const int n = cv.size;
    const double base_w = rng.uniform(0.12, 0.24) * n, h = rng.uniform(0.1, 0.2) * n;
    const double cx = rng.uniform(0, n), top = rng.uniform(0, n - h);
    const Color base = jitter(class_color(cls), rng, 0.07);
    for (int y = static_cast<int>(top); y < static_cast<int>(top + h); ++y) {
        const double half = 0.5 * base_w * (y + 0.5 - top) / h;
        for (int x = static_cast<int>(cx - half); x <= static_cast<int>(cx + half); ++x)
            if (std::abs(x + 0.5 - cx) <= half) cv.paint(y, x, cls, base);
    }
}

void draw_pole(Canvas& cv, Rng& rng, int horizon, int cls) {
    const int n = cv.size;
    const int w = 2 + rng.uniform_int(3), x0 = rng.uniform_int(n);
    const int top = horizon - static_cast<int>(rng.uniform(0.1, 0.35) * n);
    const int bottom = horizon + static_cast<int>(rng.uniform(0.05, 0.3) * n);
    const Color base = jitter(class_color(cls), rng, 0.07);
    for (int y = top; y < bottom; ++y)
        for (int x = x0; x < x0 + w; ++x) cv.paint(y, x, cls, (y / 4) % 2 ? base : scaled(base, 0.8));
}

SegmentationSample render_scene(const ToyConfig& cfg, Domain domain, const std::string& id, Rng& rng) {
    const int n = cfg.image_size, C = cfg.num_classes;
    Canvas cv(n);
    const int horizon = static_cast<int>(rng.uniform(0.3, 0.5) * n);
    draw_background(cv, rng, horizon);
    // Object classes cycle through four shape families.
    std::vector<int> order;
    for (int c = 2; c < C; ++c) order.push_back(c);
    std::stable_sort(order.begin(), order.end(), [](int a, int b) { return (a - 2) % 4 == 0 && (b - 2) % 4 != 0; });
    for (int c : order) {
        const int family = (c - 2) % 4;
        const int count = family == 3 ? rng.uniform_int(4) : rng.uniform_int(3);
        for (int k = 0; k < count; ++k) {
            switch (family) {
                case 0: draw_building(cv, rng, horizon, c); break;
                case 1: draw_disk(cv, rng, horizon, c); break;
                case 2: draw_triangle(cv, rng, c); break;
                default: draw_pole(cv, rng, horizon, c); break;
            }
        }
    }
    const DomainStyle style = DomainStyle::make(domain, cfg.shift);
    const double angle = rng.uniform(0, 2 * std::numbers::pi);
    const double dy = std::sin(angle), dx = std::cos(angle);
    SegmentationSample s;
    s.id = id;
    s.domain = domain;
    s.image = Tensor({3, n, n});
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const Color c = style.apply_color({cv.color.at(0, y, x), cv.color.at(1, y, x), cv.color.at(2, y, x)});
            const double ramp = 1.0 + style.ramp * ((y + 0.5) / n - 0.5) * dy * 2 + style.ramp * ((x + 0.5) / n - 0.5) * dx * 2;
            for (int k = 0; k < 3; ++k) {
                const double v = c[static_cast<std::size_t>(k)] * ramp + style.noise_std * rng.normal();
                // Quantised to 8 bits so that PNG export round-trips exactly.
                s.image.at(k, y, x) = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
            }
        }
    s.label = cv.label;
    return s;
}

Dataset render_split(const ToyConfig& cfg, Domain domain, const std::string& prefix, int count, std::uint64_t seed,
                     std::uint64_t split_id) {
    Dataset d;
    d.class_space = ClassSpace::toy(cfg.num_classes);
    d.domain = domain;
    const int digits = std::max(4, static_cast<int>(std::to_string(count).size()));
    for (int i = 0; i < count; ++i) {
        std::ostringstream id;
        id << prefix << '_' << std::setw(digits) << std::setfill('0') << i;
        Rng rng = Rng::derive(seed, {split_id, static_cast<std::uint64_t>(i)});
        d.samples.push_back(render_scene(cfg, domain, id.str(), rng));
    }
    return d;
}

}  // namespace

ToyDomains generate_toy_domains(const ToyConfig& config, std::uint64_t seed) {
    config.validate();
    ToyDomains out;
    out.source = render_split(config, Domain::source, "src", config.num_source, seed, 1);
    out.target_train_labeled = render_split(config, Domain::target, "tgt", config.num_target_train, seed, 2);
    out.target_train = out.target_train_labeled.without_labels();
    out.target_val = render_split(config, Domain::target, "val", config.num_target_val, seed, 3);
    return out;
}

}  // namespace uda
