#include "far/data.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

#include "far/binio.hpp"
#include "far/error.hpp"
#include "far/rng.hpp"

namespace far {

void DomainSpec::validate() const {
    if (style_scale[0] <= 0.0f || style_scale[1] <= 0.0f)
        throw ConfigError("domain spec: style_scale components must be positive");
    if (rho < -1.0f || rho > 1.0f) throw ConfigError("domain spec: |rho| must be <= 1");
    if (noise_std < 0.0f) throw ConfigError("domain spec: noise_std must be non-negative");
}

Tensor LabeledSet::image(int i) const {
    int c = channels(), h = height(), w = width();
    auto out = Tensor::zeros({c, h, w});
    std::size_t stride = static_cast<std::size_t>(c) * h * w;
    std::memcpy(out.data.data(), images.data.data() + static_cast<std::size_t>(i) * stride,
                stride * sizeof(float));
    return out;
}

LabeledSet generate(const DomainSpec& spec, int n, int n_classes, int h, int w, std::uint64_t seed) {
    spec.validate();
    if (n < n_classes) throw ConfigError("generate: need at least one sample per class");
    if (h < 8 || w < 8) throw ConfigError("generate: image must be at least 8x8");

    Rng rng(mix_seed(seed, 0xDA7Aull ^ static_cast<std::uint64_t>(spec.domain_id)));

    // balanced labels, shuffled order
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % n_classes;
    rng.shuffle(labels.begin(), labels.end());

    // per-class blob centers on a g x g grid
    int g = 1;
    while (g * g < n_classes) ++g;
    auto center = [&](int cls) {
        int r = cls / g, c = cls % g;
        return std::pair<double, double>{(2.0 * r + 1.0) * h / (2.0 * g),
                                         (2.0 * c + 1.0) * w / (2.0 * g)};
    };
    auto class_code = [&](int cls) {
        return n_classes < 2 ? 0.0 : -1.0 + 2.0 * cls / (n_classes - 1);
    };

    const double blob_sigma = 2.0;
    const double rho = spec.rho;
    const double mix = std::sqrt(std::max(0.0, 1.0 - rho * rho));

    LabeledSet set;
    set.domain_id = spec.domain_id;
    set.n_classes = n_classes;
    set.labels = labels;
    set.images = Tensor::zeros({n, 3, h, w});

    std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int i = 0; i < n; ++i) {
        float* img = set.images.data.data() + static_cast<std::size_t>(i) * 3 * plane;
        int cls = labels[static_cast<std::size_t>(i)];
        auto [cy, cx] = center(cls);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                img[static_cast<std::size_t>(y) * w + x] =
                    static_cast<float>(std::exp(-d2 / (2.0 * blob_sigma * blob_sigma)));
            }
        }
        double s = rho * class_code(cls) + mix * rng.uniform(-1.0, 1.0);
        for (int ch = 1; ch < 3; ++ch) {
            float base = spec.style_shift[static_cast<std::size_t>(ch - 1)] +
                         spec.style_scale[static_cast<std::size_t>(ch - 1)] * static_cast<float>(s);
            for (std::size_t p = 0; p < plane; ++p) img[static_cast<std::size_t>(ch) * plane + p] = base;
        }
        if (spec.noise_std > 0.0f) {
            for (std::size_t p = 0; p < 3 * plane; ++p)
                img[p] += static_cast<float>(spec.noise_std * rng.normal());
        }
    }
    return set;
}

std::pair<std::vector<LabeledSet>, LabeledSet> leave_one_domain_out(
    const std::vector<LabeledSet>& domains, int held_out) {
    std::vector<LabeledSet> sources;
    const LabeledSet* target = nullptr;
    for (const auto& d : domains) {
        if (d.domain_id == held_out) {
            target = &d;
        } else {
            sources.push_back(d);
        }
    }
    if (!target) throw ContractError("leave_one_domain_out: unknown domain id " + std::to_string(held_out));
    return {std::move(sources), *target};
}

// ---- FARD binary format -------------------------------------------------
//
// magic "FARD" | version u32 = 1 | endian u8 = 1 | n u32 | channels u32 |
// h u32 | w u32 | n_classes u32 | domain_id u32 | has_labels u8 |
// n*channels*h*w f32 row-major | (if has_labels) n u32 labels

using namespace binio;

void save_fard(const LabeledSet& set, const std::string& path) {
    File file(std::fopen(path.c_str(), "wb"));
    if (!file.f) throw FormatError("cannot open for writing: " + path, 0);
    std::FILE* f = file.f;
    write_raw(f, "FARD", 4);
    write_u32(f, 1);
    write_u8(f, 1);  // little-endian payload
    write_u32(f, static_cast<std::uint32_t>(set.n()));
    write_u32(f, static_cast<std::uint32_t>(set.channels()));
    write_u32(f, static_cast<std::uint32_t>(set.height()));
    write_u32(f, static_cast<std::uint32_t>(set.width()));
    write_u32(f, static_cast<std::uint32_t>(set.n_classes));
    write_u32(f, static_cast<std::uint32_t>(set.domain_id));
    write_u8(f, set.labels.empty() ? 0 : 1);
    write_raw(f, set.images.data.data(), set.images.data.size() * sizeof(float));
    if (!set.labels.empty()) {
        for (int v : set.labels) write_u32(f, static_cast<std::uint32_t>(v));
    }
}

LabeledSet load_fard(const std::string& path) {
    File file(std::fopen(path.c_str(), "rb"));
    if (!file.f) throw FormatError("cannot open: " + path, 0);
    std::FILE* f = file.f;

    char magic[4];
    read_raw(f, magic, 4);
    if (std::memcmp(magic, "FARD", 4) != 0) throw FormatError("bad magic, expected FARD", 0);
    std::uint32_t version = read_u32(f);
    if (version != 1) throw FormatError("unsupported FARD version " + std::to_string(version), 4);
    std::uint8_t endian = read_u8(f);
    if (endian != 1) throw FormatError("big-endian FARD payloads are not supported", 8);

    int n = static_cast<int>(read_u32(f));
    int channels = static_cast<int>(read_u32(f));
    int h = static_cast<int>(read_u32(f));
    int w = static_cast<int>(read_u32(f));
    LabeledSet set;
    set.n_classes = static_cast<int>(read_u32(f));
    set.domain_id = static_cast<int>(read_u32(f));
    bool has_labels = read_u8(f) != 0;

    set.images = Tensor::zeros({n, channels, h, w});
    read_raw(f, set.images.data.data(), set.images.data.size() * sizeof(float));
    if (has_labels) {
        set.labels.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) set.labels[static_cast<std::size_t>(i)] = static_cast<int>(read_u32(f));
    }
    return set;
}

// ---- batch sampler --------------------------------------------------------

BatchSampler::BatchSampler(const std::vector<LabeledSet>* sources, const LabeledSet* target, int m,
                           std::uint64_t seed)
    : sources_(sources), target_(target), m_(m), rng_(mix_seed(seed, 0xBA7C4)) {
    if (m_ < 2) throw ContractError("sampler: batch size per domain must be >= 2");
    int min_n = -1;
    auto account = [&](const LabeledSet& s) {
        if (s.n() < m_) throw ContractError("sampler: domain has fewer samples than batch size");
        order_.emplace_back();
        if (min_n < 0 || s.n() < min_n) min_n = s.n();
    };
    for (const auto& s : *sources_) account(s);
    if (target_) account(*target_);
    steps_per_epoch_ = min_n / m_;
    reshuffle();
}

void BatchSampler::reshuffle() {
    std::size_t d = 0;
    auto fill = [&](const LabeledSet& s) {
        auto& ord = order_[d++];
        ord.resize(static_cast<std::size_t>(s.n()));
        for (int i = 0; i < s.n(); ++i) ord[static_cast<std::size_t>(i)] = i;
        rng_.shuffle(ord.begin(), ord.end());
    };
    for (const auto& s : *sources_) fill(s);
    if (target_) fill(*target_);
    cursor_ = 0;
}

MultiDomainBatch BatchSampler::next() {
    if (cursor_ >= steps_per_epoch_) reshuffle();
    MultiDomainBatch batch;
    std::size_t d = 0;
    auto take = [&](const LabeledSet& s, bool is_target, int expert_index) {
        const auto& ord = order_[d++];
        DomainBlock blk;
        blk.domain_id = s.domain_id;
        blk.is_target = is_target;
        blk.expert_index = expert_index;
        for (int i = 0; i < m_; ++i) {
            int idx = ord[static_cast<std::size_t>(cursor_ * m_ + i)];
            blk.images.push_back(s.image(idx));
            if (!is_target) blk.labels.push_back(s.labels[static_cast<std::size_t>(idx)]);
        }
        batch.push_back(std::move(blk));
    };
    for (std::size_t i = 0; i < sources_->size(); ++i)
        take((*sources_)[i], false, static_cast<int>(i));
    if (target_) take(*target_, true, -1);
    ++cursor_;
    return batch;
}

}  // namespace far
