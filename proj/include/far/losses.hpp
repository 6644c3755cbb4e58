#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "far/error.hpp"
#include "far/network.hpp"
#include "far/tape.hpp"

namespace far {

// ---- weighted composition ---------------------------------------------

struct LossWeights {
    double align = 0.5;
    double dre = 0.1;
    double cls = 1.0;
    double consist = 100.0;
};

inline void validate_weights(const LossWeights& w) {
    if (w.align < 0 || w.dre < 0 || w.cls < 0 || w.consist < 0) {
        throw ConfigError("loss weights must be non-negative");
    }
}

// Component losses of one step, as plain numbers for logging and
// composition. The gradient path lives on the tape, not here.
struct LossBundle {
    double l_align = 0;
    double l_dre_plus = 0;
    double l_dre_minus = 0;
    double l_cls = 0;
    double l_consist = 0;
    LossWeights weights;

    double total() const {
        validate_weights(weights);
        return weights.align * l_align + weights.dre * (l_dre_plus + l_dre_minus) +
               weights.cls * l_cls + weights.consist * l_consist;
    }
};

// ---- tape-level objective builders --------------------------------------

namespace detail {
template <typename T>
typename TapeT<T>::Var mean_of(TapeT<T>& tape, const std::vector<typename TapeT<T>::Var>& vs) {
    auto acc = vs[0];
    for (std::size_t i = 1; i < vs.size(); ++i) acc = tape.add(acc, vs[i]);
    return tape.scale(acc, T(1) / static_cast<T>(vs.size()));
}

template <typename T>
typename TapeT<T>::Var l2_norm(TapeT<T>& tape, typename TapeT<T>::Var d) {
    return tape.sqrt_op(tape.sum(tape.mul(d, d)));
}
}  // namespace detail

// Moment-distance alignment loss over per-domain batches of pooled feature
// vectors. Per domain: batch mean and population variance per dimension;
// the loss sums L2 distances of means and of variances, source-to-target
// (when a target batch is given) and pairwise source-to-source.
template <typename T>
typename TapeT<T>::Var moment_distance(TapeT<T>& tape,
                                       const std::vector<std::vector<typename TapeT<T>::Var>>& sources,
                                       const std::vector<typename TapeT<T>::Var>* target) {
    using Var = typename TapeT<T>::Var;
    const int n_dom = static_cast<int>(sources.size());
    if (n_dom == 0) throw ContractError("moment_distance: no source domains");
    for (const auto& s : sources)
        if (s.empty()) throw ContractError("moment_distance: empty domain batch");
    if (target && target->empty()) throw ContractError("moment_distance: empty target batch");

    auto moments = [&tape](const std::vector<Var>& feats) {
        Var mu = detail::mean_of(tape, feats);
        // population variance; 0 for single-sample batches
        std::vector<Var> sq;
        sq.reserve(feats.size());
        for (auto f : feats) {
            auto d = tape.sub(f, mu);
            sq.push_back(tape.mul(d, d));
        }
        Var var = detail::mean_of(tape, sq);
        return std::pair<Var, Var>(mu, var);
    };

    std::vector<std::pair<Var, Var>> src_m;
    src_m.reserve(static_cast<std::size_t>(n_dom));
    for (const auto& s : sources) src_m.push_back(moments(s));

    Var total = tape.scalar_const(T(0));
    if (target) {
        auto [mu_t, var_t] = moments(*target);
        Var acc_mu = tape.scalar_const(T(0));
        Var acc_var = tape.scalar_const(T(0));
        for (const auto& [mu, var] : src_m) {
            acc_mu = tape.add(acc_mu, detail::l2_norm(tape, tape.sub(mu, mu_t)));
            acc_var = tape.add(acc_var, detail::l2_norm(tape, tape.sub(var, var_t)));
        }
        total = tape.add(total, tape.scale(tape.add(acc_mu, acc_var), T(1) / static_cast<T>(n_dom)));
    }
    if (n_dom >= 2) {
        Var acc = tape.scalar_const(T(0));
        for (int i = 0; i < n_dom; ++i) {
            for (int j = i + 1; j < n_dom; ++j) {
                acc = tape.add(acc, detail::l2_norm(tape, tape.sub(src_m[i].first, src_m[j].first)));
                acc = tape.add(acc, detail::l2_norm(tape, tape.sub(src_m[i].second, src_m[j].second)));
            }
        }
        T inv_pairs = T(2) / (static_cast<T>(n_dom) * static_cast<T>(n_dom - 1));
        total = tape.add(total, tape.scale(acc, inv_pairs));
    }
    return total;
}

template <typename T>
typename TapeT<T>::Var entropy_of_logits(TapeT<T>& tape, typename TapeT<T>::Var logits) {
    return tape.entropy(tape.softmax(logits));
}

// Dual ranking entropy terms for one sample:
//   l+ = softplus(E(p+) - E(p))   l- = softplus(E(p) - E(p-))
template <typename T>
std::pair<typename TapeT<T>::Var, typename TapeT<T>::Var> dre_sample(
    TapeT<T>& tape, typename TapeT<T>::Var logits_plus, typename TapeT<T>::Var logits_ref,
    typename TapeT<T>::Var logits_minus) {
    auto ep = entropy_of_logits(tape, logits_plus);
    auto er = entropy_of_logits(tape, logits_ref);
    auto em = entropy_of_logits(tape, logits_minus);
    return {tape.softplus(tape.sub(ep, er)), tape.softplus(tape.sub(er, em))};
}

// Non-ranking alternative: minimize E(p+) directly and maximize E(p-) via
// the bounded complement ln(n) - E(p-), clamped at zero.
template <typename T>
std::pair<typename TapeT<T>::Var, typename TapeT<T>::Var> dre_sample_no_ranking(
    TapeT<T>& tape, typename TapeT<T>::Var logits_plus, typename TapeT<T>::Var logits_minus) {
    int n = tape.value(logits_plus).dim(0);
    auto ln_n = tape.scalar_const(static_cast<T>(std::log(static_cast<double>(n))));
    auto plus = entropy_of_logits(tape, logits_plus);
    auto minus = tape.relu(tape.sub(ln_n, entropy_of_logits(tape, logits_minus)));
    return {plus, minus};
}

// L1 distance between two probability vectors. Inputs are contract-checked;
// the caller decides which side is detached.
template <typename T>
typename TapeT<T>::Var consist_l1(TapeT<T>& tape, typename TapeT<T>::Var expert_probs,
                                  typename TapeT<T>::Var shared_probs) {
    for (auto v : {expert_probs, shared_probs}) {
        const auto& P = tape.value(v);
        T s = 0;
        for (T x : P.data) {
            if (x < T(-1e-6)) throw ContractError("consist_l1: negative probability component");
            s += x;
        }
        if (std::abs(static_cast<double>(s) - 1.0) > 1e-4)
            throw ContractError("consist_l1: input is not a probability vector");
    }
    return tape.sum(tape.abs_op(tape.sub(expert_probs, shared_probs)));
}

// ---- batched loss construction over a multi-domain batch ----------------

// One domain's slice of a training batch. `expert_index` selects the
// teacher classifier for labeled source blocks; the target block in UDA
// carries no labels and no expert.
template <typename T>
struct DomainBlockT {
    int domain_id = 0;
    bool is_target = false;
    int expert_index = -1;
    std::vector<TensorT<T>> images;
    std::vector<int> labels;  // empty for the target block
};

struct LossSelect {
    bool align = false;
    bool dre = false;
    bool cls = false;
    bool consist = false;
};

template <typename T>
struct BatchLossVars {
    typename TapeT<T>::Var align, dre_plus, dre_minus, cls, consist;
};

// Builds the selected objectives for a whole batch on one tape. Source
// blocks contribute to every selected loss; a target block contributes only
// to the alignment and DRE terms.
template <typename T>
BatchLossVars<T> build_losses(TapeT<T>& tape, const FarModelT<T>& model,
                              const std::vector<typename TapeT<T>::Var>& pv,
                              const std::vector<DomainBlockT<T>>& blocks, const LossSelect& sel) {
    using Var = typename TapeT<T>::Var;
    const VariantTraits tr = traits_of(model.cfg.variant);

    ForwardNeeds needs;
    needs.fr = tr.has_fr && (sel.cls || sel.dre || sel.consist);
    needs.classify = sel.cls || sel.dre || sel.consist;
    needs.experts = tr.experts && (sel.cls || sel.consist);
    needs.align = true;

    std::vector<std::vector<Var>> source_feats;
    std::vector<Var> target_feats;
    std::vector<Var> cls_terms, expert_terms, consist_terms, dre_plus_terms, dre_minus_terms;
    int n_sources = 0;

    for (const auto& blk : blocks) {
        if (!blk.is_target) ++n_sources;
        if (!blk.is_target && blk.labels.size() != blk.images.size())
            throw ContractError("build_losses: source block must be fully labeled");
        std::vector<Var> feats;
        for (std::size_t s = 0; s < blk.images.size(); ++s) {
            auto x = tape.constant(blk.images[s]);
            auto b = forward_sample(tape, model, pv, x, needs);
            feats.push_back(b.align_feature);

            if (tr.has_fr && sel.dre && needs.fr) {
                if (tr.dre_ranking) {
                    auto [lp, lm] = dre_sample(tape, b.logits_plus, b.logits_ref, b.logits_minus);
                    if (tr.dre_plus) dre_plus_terms.push_back(lp);
                    if (tr.dre_minus) dre_minus_terms.push_back(lm);
                } else {
                    auto [lp, lm] = dre_sample_no_ranking(tape, b.logits_plus, b.logits_minus);
                    dre_plus_terms.push_back(lp);
                    dre_minus_terms.push_back(lm);
                }
            }

            if (!blk.is_target) {
                int label = blk.labels[s];
                if (sel.cls) {
                    cls_terms.push_back(tape.cross_entropy(b.cls_logits, label));
                    if (tr.experts) {
                        if (blk.expert_index < 0 ||
                            blk.expert_index >= static_cast<int>(b.expert_logits.size()))
                            throw ContractError("build_losses: bad expert index");
                        expert_terms.push_back(tape.cross_entropy(
                            b.expert_logits[static_cast<std::size_t>(blk.expert_index)], label));
                    }
                }
                if (sel.consist && tr.experts) {
                    auto p_expert = tape.softmax(tape.detach(
                        b.expert_logits[static_cast<std::size_t>(blk.expert_index)]));
                    auto p_shared = tape.softmax(b.cls_logits);
                    consist_terms.push_back(consist_l1(tape, p_expert, p_shared));
                }
            }
        }
        if (blk.is_target) {
            target_feats = std::move(feats);
        } else {
            source_feats.push_back(std::move(feats));
        }
    }

    BatchLossVars<T> out;
    if (sel.align) {
        out.align = moment_distance(tape, source_feats,
                                    target_feats.empty() ? nullptr : &target_feats);
    }
    if (sel.cls && !cls_terms.empty()) {
        out.cls = detail::mean_of(tape, cls_terms);
        if (!expert_terms.empty()) {
            out.cls = tape.add(out.cls, tape.scale(detail::mean_of(tape, expert_terms),
                                                   T(1) / static_cast<T>(n_sources)));
        }
    }
    if (sel.dre && !dre_plus_terms.empty()) out.dre_plus = detail::mean_of(tape, dre_plus_terms);
    if (sel.dre && !dre_minus_terms.empty()) out.dre_minus = detail::mean_of(tape, dre_minus_terms);
    if (sel.consist && !consist_terms.empty()) out.consist = detail::mean_of(tape, consist_terms);
    return out;
}

}  // namespace far
