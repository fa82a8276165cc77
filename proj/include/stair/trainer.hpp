#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "stair/datagen.hpp"
#include "stair/model.hpp"
#include "stair/objective.hpp"
#include "stair/vocab.hpp"

namespace stair {

struct StageSpec {
    std::string name;
    std::uint32_t steps = 0;
    double peak_lr = 1e-3;
    std::uint32_t warmup_steps = 0;
    bool mask_text = false;
    bool freeze_image = false;
    double lambda_image = 0.0;
    double lambda_text = 0.0;
    std::uint32_t lambda_warmup_steps = 1;

    friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

struct StagePlan {
    std::vector<StageSpec> stages;
    std::uint32_t batch_size = 32;

    /// Throws a config error: empty plan, zero-step stage, warmup > steps,
    /// non-positive lr, negative lambda, zero lambda warmup, batch < 2.
    void validate() const;

    /// "paper-desk", "single-stage", or "lambda-sweep-<lambda>" with lambda in
    /// {0, 1e-4, 1e-3, 1e-1} (one run of the sweep).
    static StagePlan preset(const std::string& name);
    static std::vector<std::string> preset_names();

    friend bool operator==(const StagePlan&, const StagePlan&) = default;
};

/// The FLOPs weights the sweep preset visits, in increasing order.
std::vector<double> lambda_sweep_values();
std::string lambda_sweep_preset(double lambda);

/// target * min(1, (step / warmup)^2).
double lambda_schedule(double target, std::uint32_t warmup, std::uint32_t step);

/// Linear ramp 0 -> peak over [0, warmup], then linear to 0 at total.
double lr_schedule(double peak, std::uint32_t warmup, std::uint32_t total, std::uint32_t step);

/// Adam moments with decoupled weight decay on matrices.
class AdamW {
public:
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;

    void reset() {
        first_.clear();
        second_.clear();
        step_ = 0;
    }
    std::uint64_t step() const { return step_; }

    /// One update of every parameter not in `frozen`; grads are in
    /// visit_params order, one per parameter (frozen entries ignored).
    void apply(Model& model, const std::vector<Tensor>& grads, double lr, const std::vector<ParamGroup>& frozen);

private:
    std::vector<Tensor> first_;
    std::vector<Tensor> second_;
    std::uint64_t step_ = 0;
};

/// A tokenized training pair.
struct TrainExample {
    PatchGrid image;
    TokenSeq text;
    MaskVec mask;
};

std::vector<TrainExample> make_examples(const Vocabulary& vocab, std::span<const PairedSample> samples,
                                        std::uint32_t max_text_len);

struct StepFlags {
    bool mask_text = false;
    bool freeze_image = false;
    double lr = 0.0;
    double lambda_image = 0.0;
    double lambda_text = 0.0;
};

/// One logged row of the training log.
struct StepRecord {
    std::string stage;
    std::uint32_t global_step = 0;
    std::uint32_t stage_step = 0;
    double loss = 0.0;
    double contrastive = 0.0;
    double flops_image = 0.0;
    double flops_text = 0.0;
    double lambda_image = 0.0;
    double lambda_text = 0.0;
    double lr = 0.0;
    double temperature = 0.0;
    double active_image = 0.0; // mean activated tokens per embedding
    double active_text = 0.0;
    // Text weights left outside each sample's token mask after masking.
    // Always 0 on a masked stage; reported so the log proves it.
    std::uint32_t mask_violations = 0;
    bool masked = false;

    friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

/// Loss of one batch recorded on the tape that owns `bound`, with the
/// per-pair pooled embeddings it was computed from.
struct ForwardPass {
    LossVars loss;
    std::vector<ad::Var> image_rows;
    std::vector<ad::Var> text_rows;
};
ForwardPass forward_loss(const ModelConfig& cfg, const BoundParams& bound, std::span<const TrainExample* const> batch,
                         const StepFlags& flags, TokenId pad_id);

/// Parameter groups a stage holds fixed.
std::vector<ParamGroup> frozen_groups(bool freeze_image);

/// Forward, backward and one optimizer update. Throws a numeric error with
/// a diagnostic message when the loss is not finite; the model is then
/// left unchanged.
StepRecord train_step(Model& model, std::span<const TrainExample* const> batch, const StepFlags& flags, AdamW& opt,
                      TokenId pad_id);

/// SHA-256 over the bytes of the image tower's parameters.
std::string image_tower_hash(const Model& model);

struct StageSummary {
    std::string name;
    std::filesystem::path checkpoint;
    std::string image_hash_before;
    std::string image_hash_after;
    double peak_lr = 0.0;
    std::uint32_t steps = 0;
    std::uint32_t masked_steps = 0;
    std::uint32_t steps_with_violations = 0;
    bool resumed = false; // loaded from an existing checkpoint instead of trained
};

struct TrainResult {
    Model model;
    std::vector<StageSummary> stages;
    std::vector<StepRecord> log;
};

struct TrainOptions {
    std::uint64_t seed = 1;
    /// Reuse per-stage checkpoints that already exist in the output dir.
    bool resume = false;
    /// Called after every step; may be empty.
    std::function<void(const StepRecord&)> on_step;
};

/// Runs the stages in order from `initial`, writing stage<i>-<name>.ckpt
/// and train_log.tsv into out_dir. Batches are drawn by a per-stage
/// shuffle derived from the seed, so a resumed run matches a fresh one.
TrainResult run_stages(const Model& initial, const StagePlan& plan, std::span<const TrainExample> data,
                       const Vocabulary& vocab, const std::filesystem::path& out_dir, const TrainOptions& options);

/// Tab-separated log with a header line.
void write_train_log(std::ostream& out, std::span<const StepRecord> log);
std::vector<StepRecord> read_train_log(std::istream& in);

} // namespace stair
