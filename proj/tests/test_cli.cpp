#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "far/config.hpp"
#include "far/error.hpp"

using namespace far;
namespace fs = std::filesystem;

namespace {

const std::string kCli = FAR_CLI_PATH;

struct CmdResult {
    int code = -1;
    std::string out;  // stdout + stderr combined
};

CmdResult run_cli(const std::string& args) {
    std::string cmd = kCli + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    CmdResult r;
    char buf[512];
    while (fgets(buf, sizeof(buf), pipe)) r.out += buf;
    int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct TmpDir {
    fs::path path;
    explicit TmpDir(const char* name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TmpDir() { fs::remove_all(path); }
    std::string operator/(const char* sub) const { return (path / sub).string(); }
};

// settings small enough for test-speed runs
std::string fast_flags(const std::string& data_dir) {
    return "--set data_dir=" + data_dir +
           " --set n_train=16 --set n_test=8 --set epochs=2 --set batch_per_domain=4";
}

}  // namespace

TEST_CASE("settings: defaults, overrides, and rejection of unknown keys") {
    auto s = default_settings();
    CHECK(s.bench.domains.size() == 4);
    CHECK(s.variants.size() == 4);
    CHECK(s.seeds.size() == 5);

    apply_setting(s, "epochs", "7");
    CHECK(s.bench.train.epochs == 7);
    apply_setting(s, "mode", "uda");
    CHECK(s.bench.train.mode == TrainMode::UDA);
    apply_setting(s, "w_consist", "12.5");
    CHECK(s.bench.train.weights.consist == 12.5);
    apply_setting(s, "widths", "8,16");
    CHECK(s.bench.model.widths == std::vector<int>{8, 16});
    apply_setting(s, "domain1.rho", "0.3");
    CHECK(s.bench.domains[1].rho == doctest::Approx(0.3f));
    apply_setting(s, "domain5.shift", "1.5,-0.5");
    REQUIRE(s.bench.domains.size() == 6);
    CHECK(s.bench.domains[5].style_shift[0] == doctest::Approx(1.5f));
    CHECK(s.bench.domains[5].domain_id == 5);

    CHECK_THROWS_AS(apply_setting(s, "epohcs", "3"), ConfigError);
    CHECK_THROWS_AS(apply_setting(s, "domain0.color", "1"), ConfigError);
    CHECK_THROWS_AS(apply_setting(s, "epochs", "ten"), ConfigError);
    CHECK_THROWS_AS(apply_setting(s, "epochs", "3.5"), ConfigError);
    CHECK_THROWS_AS(apply_setting(s, "mode", "both"), ConfigError);
    CHECK_THROWS_AS(apply_setting(s, "variant", "FARMega"), ConfigError);
    CHECK_THROWS_AS(apply_setting(s, "domain0.shift", "1"), ConfigError);
}

TEST_CASE("settings: file parsing with comments and override precedence") {
    std::string text =
        "# benchmark tweaks\n"
        "epochs = 9\n"
        "lr_init = 0.01   # trailing comment\n"
        "\n"
        "variant = Baseline\n";
    auto s = parse_settings(text, {"epochs=3", "seed=42"});
    CHECK(s.bench.train.epochs == 3);  // override wins
    CHECK(s.bench.train.lr_init == doctest::Approx(0.01));
    CHECK(s.bench.train.seed == 42);
    CHECK(s.variant == VariantId::Baseline);

    CHECK_THROWS_AS(parse_settings("novalue\n", {}), ConfigError);
    CHECK_THROWS_AS(parse_settings("", {"epochs"}), ConfigError);
}

TEST_CASE("settings: render/parse round trip is exact") {
    auto s = default_settings();
    apply_setting(s, "epochs", "17");
    apply_setting(s, "lr_init", "0.0123456789");
    apply_setting(s, "variants", "FAR,Baseline");
    apply_setting(s, "domain2.scale", "1.25,0.75");
    auto text = render_settings(s);
    auto s2 = parse_settings(text, {});
    CHECK(render_settings(s2) == text);
    CHECK(s2.bench.train.epochs == 17);
    CHECK(s2.bench.train.lr_init == s.bench.train.lr_init);
    CHECK(s2.variants == s.variants);
}

TEST_CASE("spec_hash: sensitive to every field") {
    DomainSpec a;
    auto h0 = spec_hash(a);
    auto tweak = [&](auto f) {
        DomainSpec d;
        f(d);
        return spec_hash(d);
    };
    CHECK(tweak([](DomainSpec& d) { d.rho = 0.5f; }) != h0);
    CHECK(tweak([](DomainSpec& d) { d.noise_std = 0.2f; }) != h0);
    CHECK(tweak([](DomainSpec& d) { d.style_shift[1] = 1.0f; }) != h0);
    CHECK(tweak([](DomainSpec& d) { d.style_scale[0] = 2.0f; }) != h0);
    CHECK(tweak([](DomainSpec& d) { d.domain_id = 3; }) != h0);
    CHECK(spec_hash(DomainSpec{}) == h0);  // deterministic
}

TEST_CASE("cli: dataset gen writes 8 files plus a manifest, reproducibly") {
    TmpDir tmp("far_cli_gen");
    auto data = tmp / "data";
    auto r = run_cli("dataset gen " + fast_flags(data));
    CHECK(r.code == 0);
    int fard_count = 0;
    for (int d = 0; d < 4; ++d) {
        for (const char* split : {"train", "test"}) {
            auto p = data + "/domain" + std::to_string(d) + "_" + split + ".fard";
            if (fs::exists(p)) ++fard_count;
        }
    }
    CHECK(fard_count == 8);
    REQUIRE(fs::exists(data + "/manifest.json"));
    auto manifest = slurp(data + "/manifest.json");
    CHECK(manifest.find("spec_hash") != std::string::npos);

    // byte-identical on re-generation
    auto before = slurp(data + "/domain0_train.fard");
    auto r2 = run_cli("dataset gen " + fast_flags(data));
    CHECK(r2.code == 0);
    CHECK(slurp(data + "/domain0_train.fard") == before);

    // changing a spec field changes that domain's data
    auto r3 = run_cli("dataset gen " + fast_flags(data) + " --set domain0.rho=0.1");
    CHECK(r3.code == 0);
    CHECK(slurp(data + "/domain0_train.fard") != before);
}

TEST_CASE("cli: train produces metrics.csv, checkpoint, config snapshot; byte-reproducible") {
    TmpDir tmp("far_cli_train");
    auto data = tmp / "data";
    REQUIRE(run_cli("dataset gen " + fast_flags(data)).code == 0);

    auto run1 = tmp / "run1";
    auto run2 = tmp / "run2";
    auto r1 = run_cli("train " + fast_flags(data) + " --out " + run1);
    CHECK(r1.code == 0);
    REQUIRE(fs::exists(run1 + "/metrics.csv"));
    REQUIRE(fs::exists(run1 + "/final.farc"));
    REQUIRE(fs::exists(run1 + "/config.txt"));

    auto r2 = run_cli("train " + fast_flags(data) + " --out " + run2);
    CHECK(r2.code == 0);
    CHECK(slurp(run1 + "/metrics.csv") == slurp(run2 + "/metrics.csv"));
    CHECK(slurp(run1 + "/final.farc") == slurp(run2 + "/final.farc"));

    // row count: epochs x (steps + 1 summary); 16 train, batch 4 -> 4 steps
    auto csv = slurp(run1 + "/metrics.csv");
    int rows = 0;
    for (char c : csv) rows += c == '\n';
    CHECK(rows == 1 + 2 * (4 + 1));  // header + 2 epochs x 5

    // the resolved snapshot re-feeds to an identical run
    auto run3 = tmp / "run3";
    auto r3 = run_cli("train --config " + run1 + "/config.txt --out " + run3);
    CHECK(r3.code == 0);
    CHECK(slurp(run3 + "/metrics.csv") == slurp(run1 + "/metrics.csv"));
}

TEST_CASE("cli: dry-run prints settings and trains nothing") {
    TmpDir tmp("far_cli_dry");
    auto out = tmp / "out";
    auto r = run_cli("train --dry-run --set epochs=5 --out " + out);
    CHECK(r.code == 0);
    CHECK(r.out.find("epochs = 5") != std::string::npos);
    CHECK_FALSE(fs::exists(out + "/metrics.csv"));
}

TEST_CASE("cli: errors exit nonzero with the far-error prefix") {
    TmpDir tmp("far_cli_err");
    auto r = run_cli("train --set no_such_key=1");
    CHECK(r.code == 1);
    CHECK(r.out.find("far-error:") != std::string::npos);

    auto r2 = run_cli("train --set data_dir=" + (tmp / "missing"));
    CHECK(r2.code == 1);
    CHECK(r2.out.find("far-error:") != std::string::npos);
    CHECK(r2.out.find("domain0_train.fard") != std::string::npos);
}

TEST_CASE("cli: ablation writes a summary row per variant and a verdict") {
    TmpDir tmp("far_cli_abl");
    auto out = tmp / "abl";
    auto r = run_cli("ablation --set n_train=8 --set n_test=8 --set epochs=1"
                     " --set batch_per_domain=4 --set seeds=0,1 --set variants=Baseline,FAR"
                     " --out " + out);
    CHECK(r.code == 0);
    auto csv = slurp(out + "/summary.csv");
    CHECK(csv.find("variant,target_domain,mean_acc,std_acc") == 0);
    CHECK(csv.find("Baseline,3,") != std::string::npos);
    CHECK(csv.find("FAR,3,") != std::string::npos);
    auto verdict = slurp(out + "/verdict.json");
    CHECK(verdict.find("means") != std::string::npos);
    // partial ladders carry no ordering verdict
    CHECK(verdict.find("ordering_holds") == std::string::npos);
}

TEST_CASE("cli: diagnose exports divergences, features, and PGM maps") {
    TmpDir tmp("far_cli_diag");
    auto data = tmp / "data";
    auto run = tmp / "run";
    auto diag = tmp / "diag";
    REQUIRE(run_cli("dataset gen " + fast_flags(data)).code == 0);
    REQUIRE(run_cli("train " + fast_flags(data) + " --out " + run).code == 0);

    auto r = run_cli("diagnose " + fast_flags(data) + " --checkpoint " + run + "/final.farc" +
                     " --out " + diag);
    CHECK(r.code == 0);

    auto div = slurp(diag + "/divergence_report.json");
    for (const char* stage : {"\"F\"", "\"A\"", "\"A_plus_R_plus\""})
        CHECK(div.find(stage) != std::string::npos);

    // features.csv rows = samples x stages per domain (+ header)
    auto feats = slurp(diag + "/features.csv");
    int rows = 0;
    for (char c : feats) rows += c == '\n';
    CHECK(rows == 1 + 4 * 8 * 3);  // 4 domains x 8 test samples x 3 stages

    // PGM maps exist with feature-map dimensions (16x16 image, 3 blocks -> 2x2)
    auto pgm_path = diag + "/maps/domain0_sample0.pgm";
    REQUIRE(fs::exists(pgm_path));
    auto pgm = slurp(pgm_path);
    CHECK(pgm.rfind("P2\n2 2\n255\n", 0) == 0);

    // a checkpoint trained with another architecture is rejected
    auto r2 = run_cli("diagnose " + fast_flags(data) + " --set widths=8,8" +
                      " --checkpoint " + run + "/final.farc --out " + (tmp / "diag2"));
    CHECK(r2.code == 1);
    CHECK(r2.out.find("far-error:") != std::string::npos);
}
