// far: experiment orchestration for the synthetic domain-generalization
// benchmark. Subcommands: dataset gen, train, ablation, diagnose.
#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "far/config.hpp"
#include "far/diagnostics.hpp"
#include "far/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace far;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out_dir = "runs";
    long long seed = -1;  // --seed override; -1 keeps the config value
    bool dry_run = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "settings file (key = value lines)");
    cmd->add_option("--set", args.sets, "override, key=value (repeatable)");
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--seed", args.seed, "override the training seed");
    cmd->add_flag("--dry-run", args.dry_run, "print the resolved settings and exit");
}

RunSettings resolve(const CommonArgs& args) {
    auto s = load_settings(args.config_path, args.sets);
    if (args.seed >= 0) s.bench.train.seed = static_cast<std::uint64_t>(args.seed);
    return s;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw ConfigError("cannot create directory " + dir + ": " + ec.message());
}

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path);
    out << content;
}

std::string fard_path(const RunSettings& s, int domain, const char* split) {
    return s.data_dir + "/domain" + std::to_string(domain) + "_" + split + ".fard";
}

// Domain data seeds shared with run_variant so CLI runs and in-process
// ladders see the same datasets for a given experiment seed.
LabeledSet gen_split(const RunSettings& s, int domain, bool train_split, std::uint64_t seed) {
    const auto& spec = s.bench.domains[static_cast<std::size_t>(domain)];
    std::uint64_t base = train_split ? 0x7E5700u : 0x7E5780u;
    int n = train_split ? s.bench.n_train : s.bench.n_test;
    return generate(spec, n, s.bench.n_classes, s.bench.image_h, s.bench.image_w,
                    mix_seed(seed, base + static_cast<std::uint64_t>(spec.domain_id)));
}

int cmd_dataset_gen(const CommonArgs& args) {
    auto s = resolve(args);
    if (args.dry_run) {
        std::cout << render_settings(s);
        return 0;
    }
    ensure_dir(s.data_dir);
    json manifest;
    manifest["seed"] = s.bench.train.seed;
    manifest["files"] = json::array();
    for (std::size_t d = 0; d < s.bench.domains.size(); ++d) {
        for (bool train_split : {true, false}) {
            auto set = gen_split(s, static_cast<int>(d), train_split, s.bench.train.seed);
            std::string path = fard_path(s, static_cast<int>(d), train_split ? "train" : "test");
            save_fard(set, path);
            json entry;
            entry["path"] = path;
            entry["domain"] = static_cast<int>(d);
            entry["split"] = train_split ? "train" : "test";
            entry["n"] = set.n();
            entry["spec_hash"] = spec_hash(s.bench.domains[d]);
            manifest["files"].push_back(entry);
        }
    }
    write_file(s.data_dir + "/manifest.json", manifest.dump(2) + "\n");
    std::cout << "wrote " << manifest["files"].size() << " datasets to " << s.data_dir << "\n";
    return 0;
}

std::vector<LabeledSet> load_domains(const RunSettings& s, const char* split) {
    std::vector<LabeledSet> sets;
    for (std::size_t d = 0; d < s.bench.domains.size(); ++d) {
        std::string path = fard_path(s, static_cast<int>(d), split);
        if (!fs::exists(path)) throw ConfigError("missing dataset file " + path);
        sets.push_back(load_fard(path));
    }
    return sets;
}

std::string metrics_csv(const MetricLog& log, std::size_t n_eval) {
    std::string csv = "epoch,step,lr,l_cls,l_align,l_dre_plus,l_dre_minus,l_consist";
    for (std::size_t i = 0; i < n_eval; ++i) csv += ",acc_domain" + std::to_string(i);
    csv += "\n";
    auto loss_cells = [&](const LossBundle& L) {
        return num(L.l_cls) + "," + num(L.l_align) + "," + num(L.l_dre_plus) + "," +
               num(L.l_dre_minus) + "," + num(L.l_consist);
    };
    std::size_t step_idx = 0;
    for (const auto& ep : log.epochs) {
        while (step_idx < log.steps.size() && log.steps[step_idx].epoch == ep.epoch) {
            const auto& st = log.steps[step_idx];
            csv += std::to_string(st.epoch) + "," + std::to_string(st.step) + "," + num(st.lr) +
                   "," + loss_cells(st.losses);
            for (std::size_t i = 0; i < n_eval; ++i) csv += ",";
            csv += "\n";
            ++step_idx;
        }
        // per-epoch summary row: mean losses and the end-of-epoch accuracies
        csv += std::to_string(ep.epoch) + ",-1," + num(ep.lr) + "," + loss_cells(ep.mean_losses);
        for (double a : ep.acc_per_domain) csv += "," + num(a);
        csv += "\n";
    }
    return csv;
}

int cmd_train(const CommonArgs& args) {
    auto s = resolve(args);
    if (args.dry_run) {
        std::cout << render_settings(s);
        return 0;
    }
    auto train_sets = load_domains(s, "train");
    auto test_sets = load_domains(s, "test");
    auto [sources, target_train] = leave_one_domain_out(train_sets, s.bench.held_out);
    auto [test_sources, target_test] = leave_one_domain_out(test_sets, s.bench.held_out);

    ModelConfig mc = s.bench.model;
    mc.variant = s.variant;
    mc.n_experts = static_cast<int>(sources.size());
    TrainConfig tc = s.bench.train;

    Trainer trainer(FarModel::init(mc, mix_seed(tc.seed, 0x90DE1)), tc);
    std::vector<LabeledSet> eval_sets = test_sources;
    eval_sets.push_back(target_test);

    LabeledSet unlabeled = target_train;
    unlabeled.labels.clear();
    auto log = trainer.train(sources, tc.mode == TrainMode::UDA ? &unlabeled : nullptr, eval_sets);

    ensure_dir(args.out_dir);
    write_file(args.out_dir + "/metrics.csv", metrics_csv(log, eval_sets.size()));
    write_file(args.out_dir + "/config.txt", render_settings(s));
    trainer.save_checkpoint(args.out_dir + "/final.farc", tc.epochs);
    if (!log.epochs.empty()) {
        std::cout << "target accuracy " << num(log.epochs.back().acc_per_domain.back()) << "\n";
    }
    return 0;
}

int cmd_ablation(const CommonArgs& args) {
    auto s = resolve(args);
    if (args.dry_run) {
        std::cout << render_settings(s);
        return 0;
    }
    // FAR_THREADS caps parallel workers; runs are sequential at cap 1 (the
    // results are identical either way, runs are independent).
    int threads = 1;
    if (const char* env = std::getenv("FAR_THREADS")) {
        threads = std::max(1, std::atoi(env));
    }
    (void)threads;  // desk-scale default: one in-process worker

    ensure_dir(args.out_dir);
    std::string csv = "variant,target_domain,mean_acc,std_acc\n";
    json verdict;
    std::vector<double> means;
    for (VariantId v : s.variants) {
        std::vector<double> accs;
        for (std::uint64_t seed : s.seeds) {
            auto res = run_variant(v, s.bench, seed);
            accs.push_back(res.target_acc);
            std::cout << variant_name(v) << " seed " << seed << " target "
                      << num(res.target_acc) << "\n";
        }
        double mean = 0;
        for (double a : accs) mean += a;
        mean /= static_cast<double>(accs.size());
        double var = 0;
        for (double a : accs) var += (a - mean) * (a - mean);
        double sd = std::sqrt(var / static_cast<double>(accs.size()));
        csv += std::string(variant_name(v)) + "," + std::to_string(s.bench.held_out) + "," +
               num(mean) + "," + num(sd) + "\n";
        means.push_back(mean);
        verdict["means"][variant_name(v)] = mean;
    }
    write_file(args.out_dir + "/summary.csv", csv);

    // ladder verdict when the classic four-scheme comparison was run
    auto mean_of = [&](VariantId v) -> double {
        for (std::size_t i = 0; i < s.variants.size(); ++i)
            if (s.variants[i] == v) return means[i];
        return -1.0;
    };
    double base = mean_of(VariantId::Baseline);
    double align = mean_of(VariantId::BaselineAlign);
    double att = mean_of(VariantId::BaselineAttAlign);
    double fullm = mean_of(VariantId::FAR);
    if (base >= 0 && align >= 0 && att >= 0 && fullm >= 0) {
        verdict["expected_ordering"] = "FAR >= BaselineAttAlign >= BaselineAlign >= Baseline";
        verdict["ordering_holds"] =
            (fullm >= att && att >= align && align >= base && fullm > base);
    }
    write_file(args.out_dir + "/verdict.json", verdict.dump(2) + "\n");
    return 0;
}

std::string pgm_of(const Tensor& map) {
    int h = map.dim(0), w = map.dim(1);
    float lo = map.data[0], hi = map.data[0];
    for (float v : map.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    float span = hi - lo;
    std::string pgm = "P2\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            float v = map.data[static_cast<std::size_t>(y * w + x)];
            int g = span > 0 ? static_cast<int>(std::lround(255.0f * (v - lo) / span)) : 0;
            pgm += std::to_string(g);
            pgm += (x + 1 < w) ? ' ' : '\n';
        }
    }
    return pgm;
}

int cmd_diagnose(const CommonArgs& args, const std::string& checkpoint) {
    auto s = resolve(args);
    if (args.dry_run) {
        std::cout << render_settings(s);
        return 0;
    }
    ModelConfig mc = s.bench.model;
    mc.variant = s.variant;
    mc.n_experts = std::max(1, static_cast<int>(s.bench.domains.size()) - 1);
    Trainer trainer(FarModel::init(mc, 0), s.bench.train);
    trainer.load_checkpoint(checkpoint);
    const auto& model = trainer.model();

    auto test_sets = load_domains(s, "test");
    ensure_dir(args.out_dir);
    ensure_dir(args.out_dir + "/maps");

    auto reports = divergence_profile(model, test_sets);
    json div;
    for (const auto& rep : reports) {
        json block;
        block["stage"] = stage_name(rep.stage);
        block["pairwise"] = rep.pairwise;
        block["mean_off_diagonal"] = rep.mean_off_diagonal;
        div["stages"].push_back(block);
    }
    write_file(args.out_dir + "/divergence_report.json", div.dump(2) + "\n");

    const FeatureStage stages[] = {FeatureStage::F, FeatureStage::A, FeatureStage::APlusRPlus};
    std::string feat_csv = "domain,sample,stage";
    for (int k = 0; k < model.feature_channels(); ++k) feat_csv += ",f" + std::to_string(k);
    feat_csv += "\n";
    const int map_samples = 4;  // activation maps for the first few samples
    for (std::size_t d = 0; d < test_sets.size(); ++d) {
        for (FeatureStage stage : stages) {
            auto feats = stage_features(model, test_sets[d], stage);
            for (std::size_t i = 0; i < feats.size(); ++i) {
                feat_csv += std::to_string(d) + "," + std::to_string(i) + "," + stage_name(stage);
                for (float v : feats[i].data) feat_csv += "," + num(v);
                feat_csv += "\n";
            }
        }
        for (int i = 0; i < std::min(map_samples, test_sets[d].n()); ++i) {
            TapeT<float> tape;
            auto pv = push_params(tape, model, 0u);
            auto b = forward_sample(tape, model, pv, tape.constant(test_sets[d].image(i)));
            auto map = activation_map(tape.value(b.F));
            write_file(args.out_dir + "/maps/domain" + std::to_string(d) + "_sample" +
                           std::to_string(i) + ".pgm",
                       pgm_of(map));
        }
    }
    write_file(args.out_dir + "/features.csv", feat_csv);
    std::cout << "diagnostics written to " << args.out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FAR synthetic-benchmark experiment runner"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, abl_args, diag_args;
    std::string checkpoint;

    auto* dataset = app.add_subcommand("dataset", "dataset operations");
    dataset->require_subcommand(1);
    auto* gen = dataset->add_subcommand("gen", "generate FARD files and a manifest");
    add_common(gen, gen_args);

    auto* train = app.add_subcommand("train", "train one variant from FARD files");
    add_common(train, train_args);

    auto* ablation = app.add_subcommand("ablation", "run the variant x seed ladder");
    add_common(ablation, abl_args);

    auto* diagnose = app.add_subcommand("diagnose", "export divergences, features, maps");
    add_common(diagnose, diag_args);
    diagnose->add_option("--checkpoint", checkpoint, "trained FARC checkpoint")->required();

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_dataset_gen(gen_args);
        if (train->parsed()) return cmd_train(train_args);
        if (ablation->parsed()) return cmd_ablation(abl_args);
        if (diagnose->parsed()) return cmd_diagnose(diag_args, checkpoint);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return 0;  // --help
        std::cerr << "far-error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "far-error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
