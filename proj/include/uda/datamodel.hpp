#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "uda/rng.hpp"
#include "uda/tensor.hpp"

namespace uda {

/// Bad or inconsistent input data (missing files, malformed labels, ...).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ClassSpace {
    std::vector<std::string> names;
    int ignore_index = 255;

    int num_classes() const { return static_cast<int>(names.size()); }
    bool valid_label(int v) const { return v == ignore_index || (v >= 0 && v < num_classes()); }
    /// Throws std::invalid_argument when names are empty/duplicated or the
    /// ignore index collides with a class id.
    void validate() const;

    static ClassSpace toy(int num_classes);
};

enum class Domain { source, target };

std::string to_string(Domain d);
Domain domain_from_string(const std::string& s);

struct SegmentationSample {
    std::string id;
    Tensor image;                     // [3, H, W], values in [0, 1]
    std::optional<LabelTensor> label;  // [H, W]
    Domain domain = Domain::source;

    int height() const { return image.dim(1); }
    int width() const { return image.dim(2); }
};

struct ManifestEntry {
    std::string id;
    std::filesystem::path image;
    std::optional<std::filesystem::path> label;
};

/// On-disk layout:
///   <root>/manifest.json       {domain, class_names, ignore_index, entries:[{id}]}
///   <root>/images/<id>.png     8-bit RGB
///   <root>/labels/<id>.png     8-bit single channel, value = class id
struct DatasetManifest {
    std::filesystem::path root;
    std::vector<ManifestEntry> entries;  // sorted by id
    ClassSpace class_space;
    Domain domain = Domain::source;

    bool has_labels() const;
};

/// Samples held in memory.
struct Dataset {
    ClassSpace class_space;
    Domain domain = Domain::source;
    std::vector<SegmentationSample> samples;

    bool has_labels() const;
    std::size_t index_of(const std::string& id) const;
    Dataset without_labels() const;
};

/// `path` is the dataset root or its manifest.json.
DatasetManifest load_manifest(const std::filesystem::path& path, Domain domain, const ClassSpace& class_space);
/// Reads the class space stored in a manifest.json.
ClassSpace read_manifest_class_space(const std::filesystem::path& path);
Dataset load_dataset(const DatasetManifest& manifest);
void write_dataset(const Dataset& dataset, const std::filesystem::path& root);

Tensor read_rgb_png(const std::filesystem::path& path);
LabelTensor read_label_png(const std::filesystem::path& path);
void write_rgb_png(const std::filesystem::path& path, const Tensor& image);
void write_label_png(const std::filesystem::path& path, const LabelTensor& label);

struct ClassFrequencyTable {
    std::vector<std::int64_t> pixel_count;
    std::vector<std::int64_t> image_count;
    std::vector<double> frequency;
    std::int64_t num_images = 0;

    /// Count-weighted merge; equals the table of the concatenated data.
    static ClassFrequencyTable merge(const ClassFrequencyTable& a, const ClassFrequencyTable& b);
    std::string to_csv(const ClassSpace& space) const;
};

ClassFrequencyTable compute_class_frequencies(const Dataset& dataset);
ClassFrequencyTable compute_class_frequencies(const DatasetManifest& manifest);

struct RareClassIndex {
    std::vector<std::vector<std::string>> pools;  // per class: ids of samples containing it
    std::vector<double> probabilities;
    double temperature = 0.01;
};

/// p_c proportional to exp((1 - f_c) / T) over classes with non-empty pools.
std::vector<double> rare_class_distribution(const std::vector<double>& frequency,
                                            const std::vector<bool>& non_empty, double temperature);
RareClassIndex build_rare_class_index(const ClassFrequencyTable& freqs, const Dataset& dataset, double temperature);
RareClassIndex build_rare_class_index(const ClassFrequencyTable& freqs, const DatasetManifest& manifest,
                                      double temperature);

struct RareClassDraw {
    int class_id = -1;
    std::string sample_id;
};

RareClassDraw draw_rare_class(const RareClassIndex& index, Rng& rng);
std::string sample_source(const RareClassIndex& index, Rng& rng);

struct ToyConfig {
    int image_size = 96;
    int num_classes = 6;
    int num_source = 400;
    int num_target_train = 400;
    int num_target_val = 100;
    /// Scales every appearance difference between the domains; 0 makes them identical in distribution.
    double shift = 1.0;

    void validate() const;
};

struct ToyDomains {
    Dataset source;                // labeled
    Dataset target_train;          // unlabeled
    Dataset target_val;            // labeled, held out
    Dataset target_train_labeled;  // same images as target_train with labels (oracle runs only)
};

ToyDomains generate_toy_domains(const ToyConfig& config, std::uint64_t seed);

}  // namespace uda
