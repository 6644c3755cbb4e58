#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "far/error.hpp"
#include "far/rng.hpp"
#include "far/tape.hpp"
#include "far/tensor.hpp"

namespace far {

// Training/ablation schemes. Names follow the comparison ladder and the
// design-variant study.
enum class VariantId {
    Baseline,
    BaselineAlign,
    BaselineAttAlign,
    FAR,
    FARConv,
    FARGateC,
    FARGateS,
    FARNoDRE,
    FARNoDREPlus,
    FARNoDREMinus,
    FARNoRanking,
    FARNoTS,
};

struct VariantTraits {
    bool has_fa = false;       // any feature-alignment transform exists
    bool attention_fa = false; // FA via spatial/channel attention (vs 1x1 conv map)
    bool channel_gate = true;  // channel branch active (when attention)
    bool spatial_gate = true;  // spatial branch active (when attention)
    bool has_fr = false;       // restoration path exists
    bool align_loss = false;
    bool dre_plus = true;
    bool dre_minus = true;
    bool dre_ranking = true;   // false: direct entropy min/max instead of ranking
    bool dre_weighted = true;  // false: l_dre reported but weight forced to 0
    bool experts = false;      // per-domain expert classifiers + consistency loss
};

inline VariantTraits traits_of(VariantId v) {
    VariantTraits t;
    switch (v) {
        case VariantId::Baseline:
            return t;
        case VariantId::BaselineAlign:
            t.align_loss = true;
            return t;
        case VariantId::BaselineAttAlign:
            t.has_fa = t.attention_fa = t.align_loss = true;
            return t;
        case VariantId::FARConv:
            t.has_fa = t.has_fr = t.align_loss = t.experts = true;
            return t;
        case VariantId::FARGateC:
            t.has_fa = t.attention_fa = t.has_fr = t.align_loss = t.experts = true;
            t.spatial_gate = false;
            return t;
        case VariantId::FARGateS:
            t.has_fa = t.attention_fa = t.has_fr = t.align_loss = t.experts = true;
            t.channel_gate = false;
            return t;
        case VariantId::FARNoDRE:
            t.has_fa = t.attention_fa = t.has_fr = t.align_loss = t.experts = true;
            t.dre_weighted = false;
            return t;
        case VariantId::FARNoDREPlus:
            t.has_fa = t.attention_fa = t.has_fr = t.align_loss = t.experts = true;
            t.dre_plus = false;
            return t;
        case VariantId::FARNoDREMinus:
            t.has_fa = t.attention_fa = t.has_fr = t.align_loss = t.experts = true;
            t.dre_minus = false;
            return t;
        case VariantId::FARNoRanking:
            t.has_fa = t.attention_fa = t.has_fr = t.align_loss = t.experts = true;
            t.dre_ranking = false;
            return t;
        case VariantId::FARNoTS:
            t.has_fa = t.attention_fa = t.has_fr = t.align_loss = true;
            return t;
        case VariantId::FAR:
        default:
            t.has_fa = t.attention_fa = t.has_fr = t.align_loss = t.experts = true;
            return t;
    }
}

const char* variant_name(VariantId v);
VariantId variant_from_string(const std::string& name);

// Counts gate-branch evaluations; lets tests assert that baseline variants
// never touch attention parameters.
extern std::atomic<long long> gate_eval_count;

enum class ParamGroup : std::uint8_t {
    Backbone = 0,   // theta
    Align = 1,      // phi
    Restore = 2,    // psi
    Shared = 3,     // omega
    Expert = 4,     // omega_i
};

inline const char* group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::Backbone: return "backbone";
        case ParamGroup::Align: return "align";
        case ParamGroup::Restore: return "restore";
        case ParamGroup::Shared: return "shared";
        case ParamGroup::Expert: return "expert";
    }
    return "?";
}

constexpr unsigned group_bit(ParamGroup g) { return 1u << static_cast<unsigned>(g); }
constexpr unsigned kAllGroups = 0x1f;

template <typename T>
struct ParamT {
    std::string name;
    ParamGroup group;
    TensorT<T> value;
};

struct ModelConfig {
    int in_channels = 3;
    int image_h = 16;
    int image_w = 16;
    std::vector<int> widths = {16, 32, 32};  // output channels per backbone block
    int n_classes = 4;
    int n_experts = 3;   // one per source domain
    int reduction = 8;   // gate dimension reduction ratio r
    VariantId variant = VariantId::FAR;
};

// Parameter indices of one spatial/channel attention gate (or of the 1x1
// conv map replacing it in the conv-map variant).
struct GateLayout {
    int w1c = -1, b1c = -1;  // [c/r, c], [c/r]
    int w2c = -1, b2c = -1;  // [c, c/r], [c]
    int s1 = -1, sb1 = -1;   // conv [2, 2, 3, 3], [2]
    int s2 = -1, sb2 = -1;   // conv [1, 2, 3, 3], [1]
    int conv = -1, cb = -1;  // conv-map variant: [c, c, 1, 1], [c]
};

// The FAR model: a flat named parameter store plus index layout. Values are
// mutated only by the trainer; forward passes read a frozen snapshot.
template <typename T>
struct FarModelT {
    ModelConfig cfg;
    std::vector<ParamT<T>> params;

    std::vector<int> conv_w, conv_b;
    GateLayout fa, fr;
    int shared_w = -1, shared_b = -1;
    std::vector<int> expert_w, expert_b;

    int feature_channels() const { return cfg.widths.back(); }
    int feature_h() const { return cfg.image_h >> static_cast<int>(cfg.widths.size()); }
    int feature_w() const { return cfg.image_w >> static_cast<int>(cfg.widths.size()); }

    int find(const std::string& name) const {
        for (std::size_t i = 0; i < params.size(); ++i)
            if (params[i].name == name) return static_cast<int>(i);
        return -1;
    }

    template <typename U>
    FarModelT<U> cast() const {
        FarModelT<U> m;
        m.cfg = cfg;
        m.conv_w = conv_w;
        m.conv_b = conv_b;
        m.fa = fa;
        m.fr = fr;
        m.shared_w = shared_w;
        m.shared_b = shared_b;
        m.expert_w = expert_w;
        m.expert_b = expert_b;
        m.params.reserve(params.size());
        for (const auto& p : params)
            m.params.push_back({p.name, p.group, p.value.template cast<U>()});
        return m;
    }

    static FarModelT init(const ModelConfig& cfg, std::uint64_t seed) {
        VariantTraits tr = traits_of(cfg.variant);
        int c = cfg.widths.back();
        if (tr.attention_fa && c % cfg.reduction != 0) {
            throw ConfigError("model: feature channels must be divisible by reduction ratio");
        }
        FarModelT m;
        m.cfg = cfg;
        Rng rng(mix_seed(seed, 0xA11));

        auto kaiming = [&rng](std::vector<int> shape, int fan_in) {
            auto t = TensorT<T>::zeros(shape);
            double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
            for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
            return t;
        };

        auto push = [&m](std::string name, ParamGroup g, TensorT<T> v) {
            m.params.push_back({std::move(name), g, std::move(v)});
            return static_cast<int>(m.params.size()) - 1;
        };

        int cin = cfg.in_channels;
        for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
            int cout = cfg.widths[i];
            m.conv_w.push_back(push("backbone.conv" + std::to_string(i) + ".w", ParamGroup::Backbone,
                                    kaiming({cout, cin, 3, 3}, cin * 9)));
            m.conv_b.push_back(push("backbone.conv" + std::to_string(i) + ".b", ParamGroup::Backbone,
                                    TensorT<T>::zeros({cout})));
            cin = cout;
        }

        auto make_gate = [&](const std::string& prefix, ParamGroup g, bool channel, bool spatial) {
            GateLayout lay;
            if (channel) {
                int hidden = c / cfg.reduction;
                lay.w1c = push(prefix + ".w1c", g, kaiming({hidden, c}, c));
                lay.b1c = push(prefix + ".b1c", g, TensorT<T>::zeros({hidden}));
                lay.w2c = push(prefix + ".w2c", g, kaiming({c, hidden}, hidden));
                lay.b2c = push(prefix + ".b2c", g, TensorT<T>::zeros({c}));
            }
            if (spatial) {
                lay.s1 = push(prefix + ".s1", g, kaiming({2, 2, 3, 3}, 2 * 9));
                lay.sb1 = push(prefix + ".sb1", g, TensorT<T>::zeros({2}));
                lay.s2 = push(prefix + ".s2", g, kaiming({1, 2, 3, 3}, 2 * 9));
                lay.sb2 = push(prefix + ".sb2", g, TensorT<T>::zeros({1}));
            }
            return lay;
        };

        if (tr.has_fa) {
            if (cfg.variant == VariantId::FARConv) {
                m.fa.conv = push("fa.conv", ParamGroup::Align, kaiming({c, c, 1, 1}, c));
                m.fa.cb = push("fa.cb", ParamGroup::Align, TensorT<T>::zeros({c}));
            } else {
                m.fa = make_gate("fa", ParamGroup::Align, tr.channel_gate, tr.spatial_gate);
            }
        }
        if (tr.has_fr) {
            if (cfg.variant == VariantId::FARConv) {
                m.fr.conv = push("fr.conv", ParamGroup::Restore, kaiming({c, c, 1, 1}, c));
                m.fr.cb = push("fr.cb", ParamGroup::Restore, TensorT<T>::zeros({c}));
            } else {
                m.fr = make_gate("fr", ParamGroup::Restore, true, true);
            }
        }

        m.shared_w = push("shared.w", ParamGroup::Shared, kaiming({cfg.n_classes, c}, c));
        m.shared_b = push("shared.b", ParamGroup::Shared, TensorT<T>::zeros({cfg.n_classes}));

        if (tr.experts) {
            for (int e = 0; e < cfg.n_experts; ++e) {
                m.expert_w.push_back(push("expert" + std::to_string(e) + ".w", ParamGroup::Expert,
                                          kaiming({cfg.n_classes, c}, c)));
                m.expert_b.push_back(push("expert" + std::to_string(e) + ".b", ParamGroup::Expert,
                                          TensorT<T>::zeros({cfg.n_classes})));
            }
        }
        return m;
    }
};

using FarModel = FarModelT<float>;

// Push every model parameter onto a tape as a leaf. `grad_groups` is a
// bitmask of group_bit() values selecting which groups require gradients.
template <typename T>
std::vector<typename TapeT<T>::Var> push_params(TapeT<T>& tape, const FarModelT<T>& model,
                                                unsigned grad_groups) {
    std::vector<typename TapeT<T>::Var> vars;
    vars.reserve(model.params.size());
    for (const auto& p : model.params) {
        vars.push_back(tape.leaf(p.value, (grad_groups & group_bit(p.group)) != 0));
    }
    return vars;
}

// Per-parameter variant for masks finer than a whole group.
template <typename T>
std::vector<typename TapeT<T>::Var> push_params(TapeT<T>& tape, const FarModelT<T>& model,
                                                const std::vector<char>& grad_flags) {
    std::vector<typename TapeT<T>::Var> vars;
    vars.reserve(model.params.size());
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        vars.push_back(tape.leaf(model.params[i].value, grad_flags[i] != 0));
    }
    return vars;
}

// Which pieces of the forward pass a caller needs. Sub-steps of the routed
// trainer request only what their loss reads.
struct ForwardNeeds {
    bool align = true;
    bool fr = true;
    bool classify = true;
    bool experts = true;
};

// All intermediates of one forward pass, as tape variables. Fields not
// requested (or absent in the variant) are left invalid.
template <typename T>
struct BundleVars {
    using Var = typename TapeT<T>::Var;
    Var F;              // backbone feature map [c,h,w]
    Var fF;             // pool(F)
    Var A, R, Rp, Rm;   // aligned map, residual, task-relevant/-irrelevant split
    Var f, fp, fm;      // pool(A), pool(A+R+), pool(A+R-)
    Var logits_plus, logits_ref, logits_minus;
    std::vector<Var> expert_logits;
    Var align_feature;  // pooled feature entering the moment loss
    Var cls_feature;    // feature the shared classifier scores at inference
    Var cls_logits;     // shared logits on cls_feature
};

// Channel gate: sigmoid(W2 relu(W1 pool(x))). Spatial gate: sigmoid(conv2
// relu(conv1 channel_pool(x))). Both branches read the same input map.
template <typename T>
struct GateResponse {
    typename TapeT<T>::Var channel;  // [c] or invalid
    typename TapeT<T>::Var spatial;  // [1,h,w] or invalid
};

template <typename T>
GateResponse<T> eval_gate(TapeT<T>& tape, const std::vector<typename TapeT<T>::Var>& pv,
                          const GateLayout& lay, typename TapeT<T>::Var x,
                          bool channel_branch, bool spatial_branch) {
    gate_eval_count.fetch_add(1, std::memory_order_relaxed);
    GateResponse<T> g;
    if (channel_branch) {
        auto pooled = tape.global_avg_pool(x);
        auto h1 = tape.relu(tape.linear(pooled, pv[static_cast<std::size_t>(lay.w1c)],
                                        pv[static_cast<std::size_t>(lay.b1c)]));
        g.channel = tape.sigmoid(tape.linear(h1, pv[static_cast<std::size_t>(lay.w2c)],
                                             pv[static_cast<std::size_t>(lay.b2c)]));
    }
    if (spatial_branch) {
        auto cp = tape.channel_pool(x);
        auto t1 = tape.relu(tape.add_channel_bias(tape.conv2d(cp, pv[static_cast<std::size_t>(lay.s1)], 1),
                                                  pv[static_cast<std::size_t>(lay.sb1)]));
        g.spatial = tape.sigmoid(tape.add_channel_bias(tape.conv2d(t1, pv[static_cast<std::size_t>(lay.s2)], 1),
                                                       pv[static_cast<std::size_t>(lay.sb2)]));
    }
    return g;
}

template <typename T>
typename TapeT<T>::Var apply_gate(TapeT<T>& tape, typename TapeT<T>::Var x, const GateResponse<T>& g) {
    auto y = x;
    if (g.channel.valid()) y = tape.scale_channels(y, g.channel);
    if (g.spatial.valid()) y = tape.scale_spatial(y, g.spatial);
    return y;
}

// One sample through the network. `x` is a [in_channels, H, W] tape var;
// `pv` comes from push_params on the same tape.
template <typename T>
BundleVars<T> forward_sample(TapeT<T>& tape, const FarModelT<T>& model,
                             const std::vector<typename TapeT<T>::Var>& pv,
                             typename TapeT<T>::Var x, const ForwardNeeds& needs = {}) {
    using Var = typename TapeT<T>::Var;
    const VariantTraits tr = traits_of(model.cfg.variant);
    BundleVars<T> b;

    const auto& in = tape.value(x);
    if (in.ndim() != 3 || in.dim(0) != model.cfg.in_channels || in.dim(1) != model.cfg.image_h ||
        in.dim(2) != model.cfg.image_w) {
        throw DimensionError("forward: input shape mismatch, got " + Tensor::shape_str(in.shape));
    }

    Var h = x;
    for (std::size_t i = 0; i < model.conv_w.size(); ++i) {
        h = tape.conv2d(h, pv[static_cast<std::size_t>(model.conv_w[i])], 1);
        h = tape.add_channel_bias(h, pv[static_cast<std::size_t>(model.conv_b[i])]);
        h = tape.relu(h);
        h = tape.avg_pool2(h);
    }
    b.F = h;
    b.fF = tape.global_avg_pool(b.F);

    if (!tr.has_fa) {
        b.align_feature = b.fF;
        b.cls_feature = b.fF;
    } else {
        if (model.cfg.variant == VariantId::FARConv) {
            b.A = tape.relu(tape.add_channel_bias(
                tape.conv2d(b.F, pv[static_cast<std::size_t>(model.fa.conv)], 0),
                pv[static_cast<std::size_t>(model.fa.cb)]));
        } else {
            auto g = eval_gate(tape, pv, model.fa, b.F, tr.channel_gate, tr.spatial_gate);
            b.A = apply_gate(tape, b.F, g);
        }
        b.f = tape.global_avg_pool(b.A);
        b.align_feature = b.f;
        b.cls_feature = b.f;
    }

    if (tr.has_fr && needs.fr) {
        b.R = tape.sub(b.F, b.A);
        if (model.cfg.variant == VariantId::FARConv) {
            b.Rp = tape.relu(tape.add_channel_bias(
                tape.conv2d(b.R, pv[static_cast<std::size_t>(model.fr.conv)], 0),
                pv[static_cast<std::size_t>(model.fr.cb)]));
        } else {
            auto g = eval_gate(tape, pv, model.fr, b.R, true, true);
            b.Rp = apply_gate(tape, b.R, g);
        }
        b.Rm = tape.sub(b.R, b.Rp);
        b.fp = tape.global_avg_pool(tape.add(b.A, b.Rp));
        b.fm = tape.global_avg_pool(tape.add(b.A, b.Rm));
        b.cls_feature = b.fp;
    }

    if (needs.classify) {
        auto shared_logits = [&](Var feat) {
            return tape.linear(feat, pv[static_cast<std::size_t>(model.shared_w)],
                               pv[static_cast<std::size_t>(model.shared_b)]);
        };
        b.cls_logits = shared_logits(b.cls_feature);
        if (tr.has_fr && needs.fr) {
            b.logits_plus = b.cls_logits;  // cls_feature == fp here
            b.logits_ref = shared_logits(b.f);
            b.logits_minus = shared_logits(b.fm);
        }
        if (tr.experts && needs.experts) {
            for (std::size_t e = 0; e < model.expert_w.size(); ++e) {
                b.expert_logits.push_back(tape.linear(b.fF,
                                                      pv[static_cast<std::size_t>(model.expert_w[e])],
                                                      pv[static_cast<std::size_t>(model.expert_b[e])]));
            }
        }
    }
    return b;
}

// Inference: argmax of the shared classifier's logits on the variant's
// classification feature. Ties break to the lowest class index; expert
// classifiers are never consulted.
template <typename T>
int predict(const FarModelT<T>& model, const TensorT<T>& image) {
    TapeT<T> tape;
    auto pv = push_params(tape, model, 0u);
    ForwardNeeds needs;
    needs.experts = false;
    auto b = forward_sample(tape, model, pv, tape.constant(image), needs);
    const auto& logits = tape.value(b.cls_logits);
    int best = 0;
    for (int i = 1; i < logits.size(); ++i) {
        if (logits.data[static_cast<std::size_t>(i)] > logits.data[static_cast<std::size_t>(best)]) best = i;
    }
    return best;
}

}  // namespace far
