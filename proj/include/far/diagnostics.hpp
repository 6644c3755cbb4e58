#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "far/data.hpp"
#include "far/network.hpp"
#include "far/trainer.hpp"

namespace far {

// Fraction of predict(x) == label over a labeled set.
double accuracy(const FarModel& model, const LabeledSet& set);

// Mean over feature dimensions of the symmetric KL divergence between
// univariate Gaussian fits (variance floored at 1e-6) of the two sides.
double symmetric_kl(const std::vector<Tensor>& features_a, const std::vector<Tensor>& features_b);

enum class FeatureStage { F, A, APlusRPlus };

const char* stage_name(FeatureStage s);

struct DivergenceReport {
    FeatureStage stage;
    std::vector<std::vector<double>> pairwise;  // symmetric, zero diagonal
    double mean_off_diagonal = 0;
};

// Pooled per-domain features at the three stages (F, A, A+R+) and their
// pairwise divergences. Stages a variant lacks fall back to the previous
// stage (Baseline: A := F; no restoration: A+R+ := A).
std::vector<DivergenceReport> divergence_profile(const FarModel& model,
                                                 const std::vector<LabeledSet>& sets);

// Pooled features of every sample of `set` at one stage, for export.
std::vector<Tensor> stage_features(const FarModel& model, const LabeledSet& set, FeatureStage stage);

// Channel-summed map with spatial l2 normalization; all-zero input stays zero.
Tensor activation_map(const Tensor& feature);

// A full leave-one-domain-out experiment definition on the synthetic
// benchmark: domain specs, split sizes, and training hyperparameters.
struct BenchmarkConfig {
    std::vector<DomainSpec> domains;
    int held_out = 3;
    int n_train = 256;
    int n_test = 128;
    int n_classes = 4;
    int image_h = 16;
    int image_w = 16;
    ModelConfig model;   // variant field is overridden by run_variant
    TrainConfig train;   // seed field is overridden by run_variant
};

// Three correlated-texture source domains plus an uncorrelated target.
BenchmarkConfig default_benchmark();

struct VariantResult {
    VariantId variant;
    std::uint64_t seed = 0;
    double target_acc = 0;
    std::vector<double> final_acc_per_domain;  // sources then target
    MetricLog log;
    FarModel model;
};

// Generates the benchmark data, trains `variant` on the configured
// leave-one-domain-out split, and evaluates every domain's test set (target
// last). Deterministic given (cfg, seed).
VariantResult run_variant(VariantId variant, const BenchmarkConfig& cfg, std::uint64_t seed);

}  // namespace far
