#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "uda/datamodel.hpp"
#include "uda/model.hpp"

namespace uda {

class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int num_classes, int ignore_index = 255);

    /// pred, gt: [H, W]. Ground-truth pixels equal to the ignore index are skipped.
    void update(const LabelTensor& pred, const LabelTensor& gt);
    void merge(const ConfusionMatrix& other);

    int num_classes() const { return num_classes_; }
    int ignore_index() const { return ignore_index_; }
    std::int64_t at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt) * num_classes_ + pred]; }
    std::int64_t total() const;
    bool operator==(const ConfusionMatrix&) const = default;

private:
    int num_classes_;
    int ignore_index_;
    std::vector<std::int64_t> counts_;  // row = ground truth, column = prediction
};

struct EvalReport {
    std::string dataset_id;
    std::vector<std::string> class_names;
    std::vector<double> iou;        // 0 where undefined
    std::vector<bool> defined;      // false when the class is absent from both prediction and ground truth
    std::vector<std::int64_t> tp, fp, fn;
    double miou = 0;
    std::int64_t pixel_count = 0;

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
    /// Header `class,iou,tp,fp,fn`; undefined classes have an empty iou field.
    std::string to_csv() const;
    /// Per-class table with one column per class and the mean in the last column.
    std::string to_table() const;
    bool operator==(const EvalReport&) const = default;
};

/// Throws DataError("no labeled pixels") for an empty matrix.
EvalReport compute_iou(const ConfusionMatrix& cm, const std::vector<std::string>& class_names = {},
                       const std::string& dataset_id = "");

/// Anything that maps an image batch to per-pixel class probabilities.
class Predictor {
public:
    virtual ~Predictor() = default;
    virtual int num_classes() const = 0;
    /// Smallest accepted tile side.
    virtual int min_input_size() const = 0;
    /// images [B, 3, h, w] -> probabilities [B, C, h, w]. Must be safe to call concurrently.
    virtual Tensor probabilities(const Tensor& images) const = 0;
};

class ModelPredictor final : public Predictor {
public:
    explicit ModelPredictor(const SegmentationModel& model) : model_(&model) {}
    int num_classes() const override { return model_->config().decoder.num_classes; }
    int min_input_size() const override { return model_->config().size_multiple(); }
    Tensor probabilities(const Tensor& images) const override;

private:
    const SegmentationModel* model_;
};

struct InferConfig {
    int window = 64;
    int stride = 48;
    bool flip = true;
    /// Tiles per forward pass.
    int tile_batch = 8;
    int workers = 1;

    void validate() const;
};

/// Tile start offsets along one axis of length `extent` (>= window).
std::vector<int> window_offsets(int extent, int window, int stride);

/// image [3, H, W] -> averaged probabilities [C, H, W]. Images smaller than the
/// window are reflection-padded to it and the result cropped back.
Tensor sliding_window_infer(const Predictor& predictor, const Tensor& image, const InferConfig& config);

LabelTensor argmax_channels(const Tensor& probs);

EvalReport evaluate(const Predictor& predictor, const Dataset& dataset, const InferConfig& config,
                    const std::string& dataset_id = "");
EvalReport evaluate(const Predictor& predictor, const DatasetManifest& manifest, const InferConfig& config);

}  // namespace uda
