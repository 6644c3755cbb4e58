#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "far/losses.hpp"
#include "far/tensor.hpp"

namespace far {

// Controls one synthetic domain: channels 1-2 carry a domain style whose
// correlation with the class label is set by rho (texture is predictive at
// rho near 1 and pure noise at rho = 0).
struct DomainSpec {
    int domain_id = 0;
    std::array<float, 2> style_shift = {0.0f, 0.0f};  // channels 1, 2
    std::array<float, 2> style_scale = {1.0f, 1.0f};
    float rho = 0.0f;       // texture-class correlation, in [-1, 1]
    float noise_std = 0.1f; // Gaussian pixel noise

    void validate() const;
};

struct LabeledSet {
    Tensor images;            // [n, channels, h, w]
    std::vector<int> labels;  // size n, or empty for an unlabeled set
    int domain_id = 0;
    int n_classes = 0;

    int n() const { return images.ndim() == 4 ? images.dim(0) : 0; }
    int channels() const { return images.dim(1); }
    int height() const { return images.dim(2); }
    int width() const { return images.dim(3); }
    Tensor image(int i) const;
};

// Pure function of its arguments: channel 0 carries the class signal as a
// Gaussian blob at a fixed per-class grid position; channels 1-2 carry the
// domain style; Gaussian noise on all channels.
LabeledSet generate(const DomainSpec& spec, int n, int n_classes, int h, int w, std::uint64_t seed);

// (sources with labels kept, target). The caller decides whether the target
// images are exposed to training (UDA) or test-only (DG).
std::pair<std::vector<LabeledSet>, LabeledSet> leave_one_domain_out(
    const std::vector<LabeledSet>& domains, int held_out);

// FARD binary format, little-endian, bit-exact round trip.
void save_fard(const LabeledSet& set, const std::string& path);
LabeledSet load_fard(const std::string& path);

using DomainBlock = DomainBlockT<float>;
using MultiDomainBatch = std::vector<DomainBlock>;

// Draws m samples per domain per call, uniformly without replacement within
// an epoch; reshuffles every domain at the epoch boundary. Single-consumer.
class BatchSampler {
public:
    // `target` may be null (DG). Target labels are never read.
    BatchSampler(const std::vector<LabeledSet>* sources, const LabeledSet* target, int m,
                 std::uint64_t seed);

    int steps_per_epoch() const { return steps_per_epoch_; }
    MultiDomainBatch next();

private:
    const std::vector<LabeledSet>* sources_;
    const LabeledSet* target_;
    int m_;
    Rng rng_;
    int steps_per_epoch_ = 0;
    int cursor_ = 0;  // steps taken in the current epoch
    std::vector<std::vector<int>> order_;  // one index list per domain (sources, then target)

    void reshuffle();
};

}  // namespace far
