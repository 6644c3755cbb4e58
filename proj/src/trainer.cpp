#include "far/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <stdexcept>

#include "far/binio.hpp"
#include "far/diagnostics.hpp"
#include "far/error.hpp"

namespace far {

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
    if (batch_per_domain < 2) throw ConfigError("train config: batch per domain must be >= 2");
    if (lr_init < 0 || lr_min < 0 || lr_min > lr_init)
        throw ConfigError("train config: need 0 <= lr_min <= lr_init");
    if (momentum < 0 || momentum >= 1) throw ConfigError("train config: momentum must be in [0,1)");
    validate_weights(weights);
}

double cosine_lr(int t, int total_steps, double lr_init, double lr_min) {
    if (total_steps <= 0) throw ContractError("cosine_lr: total steps must be positive");
    if (t < 0) throw ContractError("cosine_lr: negative step index");
    if (t >= total_steps) return lr_min;
    constexpr double kPi = 3.14159265358979323846;
    return lr_min + 0.5 * (lr_init - lr_min) *
                        (1.0 + std::cos(kPi * static_cast<double>(t) / static_cast<double>(total_steps)));
}

void sgd_momentum_step(Tensor& param, const Tensor& grad, Tensor& velocity, double lr,
                       double momentum) {
    if (!param.same_shape(grad) || !param.same_shape(velocity))
        throw ContractError("sgd step: parameter/gradient/velocity shape mismatch");
    for (std::size_t i = 0; i < param.data.size(); ++i) {
        velocity.data[i] = static_cast<float>(momentum * velocity.data[i] + grad.data[i]);
        param.data[i] = static_cast<float>(param.data[i] - lr * velocity.data[i]);
    }
}

OptimizerState OptimizerState::zeros_like(const FarModel& model) {
    OptimizerState st;
    st.velocity.reserve(model.params.size());
    for (const auto& p : model.params) st.velocity.push_back(Tensor::zeros(p.value.shape));
    return st;
}

Trainer::Trainer(FarModel model, TrainConfig cfg)
    : model_(std::move(model)), cfg_(cfg), opt_(OptimizerState::zeros_like(model_)) {
    cfg_.validate();
}

std::vector<char> Trainer::group_flags(unsigned group_mask) const {
    std::vector<char> flags(model_.params.size(), 0);
    for (std::size_t i = 0; i < model_.params.size(); ++i) {
        flags[i] = (group_mask & group_bit(model_.params[i].group)) != 0;
    }
    return flags;
}

std::vector<char> Trainer::align_flags() const {
    // The alignment pass updates the alignment module phi and nothing else.
    // Variants without phi still report the alignment loss but have no
    // parameters in its update set.
    return group_flags(group_bit(ParamGroup::Align));
}

void Trainer::apply_update(TapeT<float>& tape, const std::vector<Tape::Var>& pvars,
                           Tape::Var weighted_root, const std::vector<char>& flags, double lr) {
    auto grads = tape.backward(weighted_root);
    for (std::size_t i = 0; i < model_.params.size(); ++i) {
        if (!flags[i]) continue;
        Tensor g = grads.get(pvars[i], tape);
        sgd_momentum_step(model_.params[i].value, g, opt_.velocity[i], lr, cfg_.momentum);
    }
}

LossBundle Trainer::routed_step(const MultiDomainBatch& batch, double lr) {
    const VariantTraits tr = traits_of(model_.cfg.variant);
    const LossWeights& w = cfg_.weights;

    LossBundle report;
    report.weights = w;
    if (!tr.dre_weighted) report.weights.dre = 0.0;
    const double w_dre = report.weights.dre;

    auto checked = [](double v, const char* name) {
        if (!std::isfinite(v))
            throw std::runtime_error(std::string("non-finite ") + name + " loss, aborting step");
        return v;
    };

    // (a) weighted classification loss updates every group; the same tape
    // also evaluates the remaining losses for the step report.
    {
        Tape tape;
        auto pv = push_params(tape, model_, w.cls > 0 ? kAllGroups : 0u);
        LossSelect sel;
        sel.cls = true;
        sel.align = tr.align_loss;
        sel.dre = tr.has_fr;
        sel.consist = tr.experts;
        auto L = build_losses(tape, model_, pv, batch, sel);
        if (L.cls.valid()) report.l_cls = checked(tape.value(L.cls).item(), "classification");
        if (L.align.valid()) report.l_align = checked(tape.value(L.align).item(), "alignment");
        if (L.dre_plus.valid()) report.l_dre_plus = checked(tape.value(L.dre_plus).item(), "DRE+");
        if (L.dre_minus.valid()) report.l_dre_minus = checked(tape.value(L.dre_minus).item(), "DRE-");
        if (L.consist.valid()) report.l_consist = checked(tape.value(L.consist).item(), "consistency");
        if (w.cls > 0 && L.cls.valid()) {
            apply_update(tape, pv, tape.scale(L.cls, static_cast<float>(w.cls)),
                         group_flags(kAllGroups), lr);
        }
    }

    // (b) alignment loss updates the alignment module; with no alignment
    // parameters the update set is empty and the pass is a no-op.
    if (tr.align_loss && w.align > 0 && tr.has_fa) {
        auto flags = align_flags();
        Tape tape;
        auto pv = push_params(tape, model_, flags);
        LossSelect sel;
        sel.align = true;
        auto L = build_losses(tape, model_, pv, batch, sel);
        checked(tape.value(L.align).item(), "alignment");
        apply_update(tape, pv, tape.scale(L.align, static_cast<float>(w.align)), flags, lr);
    }

    // (c) DRE updates the restoration module only.
    if (tr.has_fr && w_dre > 0) {
        auto flags = group_flags(group_bit(ParamGroup::Restore));
        Tape tape;
        auto pv = push_params(tape, model_, group_bit(ParamGroup::Restore));
        LossSelect sel;
        sel.dre = true;
        auto L = build_losses(tape, model_, pv, batch, sel);
        Tape::Var root;
        if (L.dre_plus.valid()) root = L.dre_plus;
        if (L.dre_minus.valid()) root = root.valid() ? tape.add(root, L.dre_minus) : L.dre_minus;
        if (root.valid()) {
            checked(tape.value(root).item(), "DRE");
            apply_update(tape, pv, tape.scale(root, static_cast<float>(w_dre)), flags, lr);
        }
    }

    // (d) teacher-student consistency updates the shared classifier only.
    if (tr.experts && w.consist > 0) {
        Tape tape;
        auto pv = push_params(tape, model_, group_bit(ParamGroup::Shared));
        LossSelect sel;
        sel.consist = true;
        auto L = build_losses(tape, model_, pv, batch, sel);
        if (L.consist.valid()) {
            checked(tape.value(L.consist).item(), "consistency");
            apply_update(tape, pv, tape.scale(L.consist, static_cast<float>(w.consist)),
                         group_flags(group_bit(ParamGroup::Shared)), lr);
        }
    }

    return report;
}

MetricLog Trainer::train(const std::vector<LabeledSet>& source_train, const LabeledSet* target_train,
                         const std::vector<LabeledSet>& eval_sets, int start_epoch, int end_epoch) {
    cfg_.validate();
    if (cfg_.mode == TrainMode::UDA && !target_train)
        throw ContractError("train: UDA mode requires a target training set");
    if (cfg_.mode == TrainMode::DG && target_train)
        throw ContractError("train: DG mode must not see target training data");
    if (end_epoch < 0) end_epoch = cfg_.epochs;
    if (start_epoch < 0 || start_epoch > end_epoch || end_epoch > cfg_.epochs)
        throw ContractError("train: epoch range out of bounds");

    const int spe =
        BatchSampler(&source_train, target_train, cfg_.batch_per_domain, cfg_.seed).steps_per_epoch();
    if (spe < 1) throw ContractError("train: no full batch per epoch; reduce batch size");
    const int total_steps = cfg_.epochs * spe;

    MetricLog log;
    for (int epoch = start_epoch; epoch < end_epoch; ++epoch) {
        // Per-epoch sampler seeded from (seed, epoch): a resumed run draws
        // the same batches as the uninterrupted one.
        BatchSampler sampler(&source_train, target_train, cfg_.batch_per_domain,
                             mix_seed(cfg_.seed, 0xE70C00ull + static_cast<std::uint64_t>(epoch)));
        LossBundle sum;
        sum.weights = cfg_.weights;
        double lr_last = 0.0;
        for (int s = 0; s < spe; ++s) {
            double lr = cosine_lr(epoch * spe + s, total_steps, cfg_.lr_init, cfg_.lr_min);
            auto batch = sampler.next();
            LossBundle b = routed_step(batch, lr);
            log.steps.push_back({epoch, s, lr, b});
            sum.l_align += b.l_align;
            sum.l_dre_plus += b.l_dre_plus;
            sum.l_dre_minus += b.l_dre_minus;
            sum.l_cls += b.l_cls;
            sum.l_consist += b.l_consist;
            sum.weights = b.weights;
            lr_last = lr;
        }

        EpochRow row;
        row.epoch = epoch;
        row.lr = lr_last;
        row.mean_losses = sum;
        row.mean_losses.l_align /= spe;
        row.mean_losses.l_dre_plus /= spe;
        row.mean_losses.l_dre_minus /= spe;
        row.mean_losses.l_cls /= spe;
        row.mean_losses.l_consist /= spe;
        for (const auto& set : eval_sets) row.acc_per_domain.push_back(accuracy(model_, set));
        log.epochs.push_back(std::move(row));
    }
    return log;
}

// ---- FARC checkpoint format ----------------------------------------------
//
// magic "FARC" | version u32 = 1 | epoch u32 | n_params u32 |
// per parameter: name (u32 length + bytes) | group u8 | ndim u32 | dims u32... |
// all parameter payloads f32 | all velocity payloads f32

void Trainer::save_checkpoint(const std::string& path, int epoch) const {
    using namespace binio;
    File file(std::fopen(path.c_str(), "wb"));
    if (!file.f) throw FormatError("cannot open for writing: " + path, 0);
    std::FILE* f = file.f;
    write_raw(f, "FARC", 4);
    write_u32(f, 1);
    write_u32(f, static_cast<std::uint32_t>(epoch));
    write_u32(f, static_cast<std::uint32_t>(model_.params.size()));
    for (const auto& p : model_.params) {
        write_str(f, p.name);
        write_u8(f, static_cast<std::uint8_t>(p.group));
        write_u32(f, static_cast<std::uint32_t>(p.value.ndim()));
        for (int d : p.value.shape) write_u32(f, static_cast<std::uint32_t>(d));
    }
    for (const auto& p : model_.params)
        write_raw(f, p.value.data.data(), p.value.data.size() * sizeof(float));
    for (const auto& v : opt_.velocity) write_raw(f, v.data.data(), v.data.size() * sizeof(float));
}

int Trainer::load_checkpoint(const std::string& path) {
    using namespace binio;
    File file(std::fopen(path.c_str(), "rb"));
    if (!file.f) throw FormatError("cannot open: " + path, 0);
    std::FILE* f = file.f;

    char magic[4];
    read_raw(f, magic, 4);
    if (std::memcmp(magic, "FARC", 4) != 0) throw FormatError("bad magic, expected FARC", 0);
    std::uint32_t version = read_u32(f);
    if (version != 1) throw FormatError("unsupported FARC version " + std::to_string(version), 4);
    int epoch = static_cast<int>(read_u32(f));

    long long at = tell(f);
    std::uint32_t n_params = read_u32(f);
    if (n_params != model_.params.size())
        throw FormatError("checkpoint holds " + std::to_string(n_params) + " parameters, model has " +
                              std::to_string(model_.params.size()),
                          at);
    for (const auto& p : model_.params) {
        at = tell(f);
        std::string name = read_str(f);
        if (name != p.name)
            throw FormatError("parameter mismatch: checkpoint has '" + name + "', model expects '" +
                                  p.name + "'",
                              at);
        std::uint8_t group = read_u8(f);
        if (group != static_cast<std::uint8_t>(p.group))
            throw FormatError("group mismatch for parameter '" + p.name + "'", at);
        at = tell(f);
        std::uint32_t ndim = read_u32(f);
        std::vector<int> shape;
        for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(static_cast<int>(read_u32(f)));
        if (shape != p.value.shape)
            throw FormatError("shape mismatch for parameter '" + p.name + "': checkpoint " +
                                  Tensor::shape_str(shape) + ", model " +
                                  Tensor::shape_str(p.value.shape),
                              at);
    }
    for (auto& p : model_.params)
        read_raw(f, p.value.data.data(), p.value.data.size() * sizeof(float));
    for (auto& v : opt_.velocity) read_raw(f, v.data.data(), v.data.size() * sizeof(float));
    return epoch;
}

}  // namespace far
