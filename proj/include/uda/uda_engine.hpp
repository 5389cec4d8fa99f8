#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "uda/datamodel.hpp"
#include "uda/model.hpp"

namespace uda {

/// A loss component came out NaN or infinite.
class NumericError : public std::runtime_error {
public:
    NumericError(const std::string& component, int step, double value);
    const std::string& component() const { return component_; }
    int step() const { return step_; }

private:
    std::string component_;
    int step_;
};

struct ScheduleConfig {
    double base_lr_decoder = 1.4e-4;
    double base_lr_encoder = 1.4e-5;
    double layerwise_decay = 0.9;
    int warmup_iters = 1500;
    int total_iters = 40000;
    int batch_size = 8;
    double weight_decay = 0.01;
    int crop_size = 512;
    double grad_clip = 1.0;

    void validate() const;
};

/// Switches for the individual training strategies.
struct Toggles {
    bool ema = true;
    bool pseudo_weight = true;
    bool lr_multiplier = true;
    bool dacs = true;
    bool rcs = true;
    bool mic = true;
    bool fd_loss = true;
};

struct UdaConstants {
    double tau = 0.968;
    double mask_ratio = 0.7;
    int mask_patch = 16;
    double ema_alpha = 0.999;
    double rcs_temperature = 0.01;
    double lambda_fd = 0.5;
    double lambda_mask = 1.0;
    /// Strength of the colour jitter and blur applied to mixed images; 0 disables.
    double mix_jitter = 0.45;
    /// Mask the DACS-mixed image instead of the raw target image.
    bool mask_mixed = false;
    /// Horizontal-flip aggregation of teacher predictions during training.
    bool pseudo_flip = true;
};

enum class TrainMode { uda, source_only, oracle };

std::string to_string(TrainMode m);
TrainMode train_mode_from_string(const std::string& s);

struct TrainConfig {
    TrainMode mode = TrainMode::uda;
    ScheduleConfig schedule;
    Toggles toggles;
    UdaConstants constants;
    int ignore_index = 255;
};

/// Learning rate of a parameter group at `step`: linear warm-up to the base
/// rate, then linear decay to zero at total_iters. Encoder block i of n runs
/// at base_lr_encoder * decay^(n-1-i); the patch embedding sits one level
/// below block 0. Without the LR multiplier the decoder-side groups fall back
/// to the encoder base rate.
double lr_at(const ScheduleConfig& schedule, int step, const ParamGroup& group, int encoder_depth,
             bool lr_multiplier = true);

struct TeacherState {
    std::unique_ptr<SegmentationModel> model;
    double momentum = 0.999;
};

TeacherState make_teacher(const SegmentationModel& student, double momentum);

/// theta_T <- alpha * theta_T + (1 - alpha) * theta_S; normalisation
/// statistics are copied from the student.
void ema_update(TeacherState& teacher, const SegmentationModel& student);

struct PseudoLabelBatch {
    LabelTensor labels;      // [B, H, W]
    Tensor confidence;       // [B, H, W] max aggregated probability
    std::vector<double> q;   // [B] fraction of pixels with confidence >= tau

    /// q broadcast to a [B, H, W] weight map.
    Tensor weights() const;
};

/// Softmax over the class axis of [B, C, H, W] logits.
Tensor softmax_channels(const Tensor& logits);

/// Eval-mode class probabilities; with `flip`, averaged with the un-flipped
/// prediction of the mirrored batch.
Tensor predict_probabilities(const SegmentationModel& model, const Tensor& images, bool flip);

/// Argmax (ties to the lowest class id), confidence and q from probabilities.
PseudoLabelBatch pseudo_labels_from_probabilities(const Tensor& probs, double tau);

PseudoLabelBatch generate_pseudo_labels(const TeacherState& teacher, const Tensor& target_images, double tau,
                                        bool flip = true);

struct MixResult {
    Tensor image;      // [3, H, W]
    LabelTensor label; // [H, W]
    Tensor weight;     // [H, W]
    LabelTensor mask;  // [H, W], 1 = pixel taken from the source
    std::vector<int> selected_classes;
};

/// Class-mix: pastes the pixels of half (rounded up) of the source classes
/// onto the target image.
MixResult dacs_mix(const SegmentationSample& source, const Tensor& target_image, const LabelTensor& pseudo_label,
                   double q, Rng& rng, int ignore_index);

struct MaskedImage {
    Tensor image;     // [3, H, W]
    LabelTensor keep; // [H / patch, W / patch], 1 = kept, 0 = dropped
};

MaskedImage mask_image(const Tensor& image, int patch, double ratio, Rng& rng);

/// Photometric jitter (brightness, contrast, saturation, hue) followed by a
/// Gaussian blur with probability 1/2. strength 0 returns the image unchanged.
Tensor color_augment(const Tensor& image, double strength, Rng& rng);

/// Mean over grid positions of 1 - cos(student, reference).
Var feature_distance_loss(const Var& student_proj, const Tensor& reference);

struct LossReport {
    std::optional<double> ce_source, ce_mixed, ce_masked, fd_source, fd_target;
    double total = 0;
    std::optional<double> q_mean;

    nlohmann::json to_json() const;
    bool operator==(const LossReport&) const = default;
};

struct OptimizerState {
    std::vector<Tensor> exp_avg, exp_avg_sq;
    std::int64_t steps = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

/// Decoupled-weight-decay Adam over a parameter set with per-parameter rates.
void adamw_step(ParameterSet& params, OptimizerState& state, const std::vector<double>& lrs, double weight_decay);

/// Scales gradients so their global L2 norm is at most max_norm; returns the pre-clip norm.
double clip_grad_norm(ParameterSet& params, double max_norm);

struct Batch {
    Tensor images;                     // [B, 3, h, w]
    std::optional<LabelTensor> labels; // [B, h, w]
};

/// Draws training crops. Source crops go through rare-class sampling when an
/// index is given (the crop is re-drawn up to 10 times to contain the drawn
/// class); all crops get a random horizontal flip.
class BatchSampler {
public:
    BatchSampler(const Dataset& dataset, int crop_size, int batch_size, std::optional<RareClassIndex> rcs = std::nullopt);
    Batch sample(Rng& rng) const;
    const Dataset& dataset() const { return *dataset_; }

private:
    const Dataset* dataset_;
    int crop_size_, batch_size_;
    std::optional<RareClassIndex> rcs_;
};

struct TrainingState {
    std::unique_ptr<SegmentationModel> student;
    TeacherState teacher;
    OptimizerState optimizer;
    int step = 0;
};

TrainingState make_training_state(const ModelConfig& model_config, std::uint64_t seed, double ema_alpha);

/// One optimisation step (see README for the stream order). `target` is
/// ignored outside UDA mode; `reference` may be null when the FD loss is off.
LossReport train_step(TrainingState& state, const ReferenceExtractor* reference, const Batch& source, const Batch* target,
                      const TrainConfig& config, Rng& rng);

void save_training_checkpoint(const std::filesystem::path& path, const TrainingState& state, const nlohmann::json& meta);
/// Returns the stored metadata.
nlohmann::json load_training_checkpoint(const std::filesystem::path& path, TrainingState& state);

}  // namespace uda
