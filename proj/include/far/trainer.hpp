#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "far/data.hpp"
#include "far/losses.hpp"
#include "far/network.hpp"

namespace far {

enum class TrainMode { DG, UDA };

struct TrainConfig {
    TrainMode mode = TrainMode::DG;
    int epochs = 40;
    int batch_per_domain = 16;
    double lr_init = 0.05;
    double lr_min = 0.0;
    double momentum = 0.9;
    LossWeights weights;
    std::uint64_t seed = 0;

    void validate() const;
};

// eta_min + 0.5 (eta_init - eta_min)(1 + cos(pi t / T)); t past T clamps to eta_min.
double cosine_lr(int t, int total_steps, double lr_init, double lr_min);

// Classical momentum: v <- momentum v + g; w <- w - lr v.
void sgd_momentum_step(Tensor& param, const Tensor& grad, Tensor& velocity, double lr,
                       double momentum);

struct OptimizerState {
    std::vector<Tensor> velocity;  // aligned with FarModel::params

    static OptimizerState zeros_like(const FarModel& model);
};

struct StepRow {
    int epoch = 0;
    int step = 0;
    double lr = 0;
    LossBundle losses;
};

struct EpochRow {
    int epoch = 0;
    double lr = 0;                      // lr at the last step of the epoch
    LossBundle mean_losses;             // averaged over the epoch's steps
    std::vector<double> acc_per_domain; // test accuracy, one entry per eval set
};

struct MetricLog {
    std::vector<StepRow> steps;
    std::vector<EpochRow> epochs;
};

// Owns the model and optimizer state and runs the four-pass routed update:
// (a) weighted classification loss updates every group, (b) alignment loss
// updates the alignment module only, (c) DRE updates restoration only,
// (d) consistency updates the shared classifier only.
class Trainer {
public:
    Trainer(FarModel model, TrainConfig cfg);

    // One optimization step on a batch. Gradients of sub-steps (b)-(d) flow
    // through the whole network during backprop but are applied only to the
    // designated group. Throws on a non-finite loss.
    LossBundle routed_step(const MultiDomainBatch& batch, double lr);

    // Full loop. `target_train` must be non-null in UDA mode (its labels are
    // never read) and null in DG mode. `eval_sets` are scored after every
    // epoch. `start_epoch` > 0 resumes from a loaded checkpoint; batch
    // sampling is re-derived per epoch from (seed, epoch), so a resumed run
    // reproduces the uninterrupted sequence. `end_epoch` < cfg.epochs stops
    // early (for checkpointing) while keeping the full cosine schedule.
    MetricLog train(const std::vector<LabeledSet>& source_train, const LabeledSet* target_train,
                    const std::vector<LabeledSet>& eval_sets, int start_epoch = 0,
                    int end_epoch = -1);

    const FarModel& model() const { return model_; }
    FarModel& model() { return model_; }
    const TrainConfig& config() const { return cfg_; }
    OptimizerState& opt() { return opt_; }

    void save_checkpoint(const std::string& path, int epoch) const;
    // Restores params/velocities into the existing architecture; returns the
    // stored epoch. Shape or name mismatches raise FormatError naming the
    // parameter.
    int load_checkpoint(const std::string& path);

private:
    FarModel model_;
    TrainConfig cfg_;
    OptimizerState opt_;

    std::vector<char> group_flags(unsigned group_mask) const;
    // Alignment-pass scope: the alignment module phi when the variant has
    // one, otherwise the final backbone block.
    std::vector<char> align_flags() const;
    void apply_update(TapeT<float>& tape, const std::vector<Tape::Var>& pvars,
                      Tape::Var weighted_root, const std::vector<char>& flags, double lr);
};

}  // namespace far
