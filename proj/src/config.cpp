#include "far/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "far/error.hpp"

namespace far {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::string cur;
    std::stringstream ss(v);
    while (std::getline(ss, cur, ',')) {
        cur = trim(cur);
        if (!cur.empty()) out.push_back(cur);
    }
    return out;
}

double parse_num(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double d;
    try {
        d = std::stod(v, &used);
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' needs a number, got '" + v + "'");
    }
    if (used != v.size())
        throw ConfigError("config: key '" + key + "' has trailing characters in '" + v + "'");
    return d;
}

int parse_int(const std::string& key, const std::string& v) {
    double d = parse_num(key, v);
    int i = static_cast<int>(d);
    if (static_cast<double>(i) != d)
        throw ConfigError("config: key '" + key + "' needs an integer, got '" + v + "'");
    return i;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

// "domainN.field" accessor; grows the domain list up to N on demand.
DomainSpec& domain_at(RunSettings& s, const std::string& key, std::size_t n) {
    if (n >= 64) throw ConfigError("config: key '" + key + "' exceeds the domain limit");
    while (s.bench.domains.size() <= n) {
        DomainSpec d;
        d.domain_id = static_cast<int>(s.bench.domains.size());
        s.bench.domains.push_back(d);
    }
    return s.bench.domains[n];
}

}  // namespace

RunSettings default_settings() {
    RunSettings s;
    s.bench = default_benchmark();
    s.variants = {VariantId::Baseline, VariantId::BaselineAlign, VariantId::BaselineAttAlign,
                  VariantId::FAR};
    s.seeds = {0, 1, 2, 3, 4};
    return s;
}

void apply_setting(RunSettings& s, const std::string& key, const std::string& value) {
    auto& b = s.bench;
    auto& t = b.train;
    if (key == "mode") {
        if (value == "dg") t.mode = TrainMode::DG;
        else if (value == "uda") t.mode = TrainMode::UDA;
        else throw ConfigError("config: mode must be 'dg' or 'uda', got '" + value + "'");
    } else if (key == "epochs") t.epochs = parse_int(key, value);
    else if (key == "batch_per_domain") t.batch_per_domain = parse_int(key, value);
    else if (key == "lr_init") t.lr_init = parse_num(key, value);
    else if (key == "lr_min") t.lr_min = parse_num(key, value);
    else if (key == "momentum") t.momentum = parse_num(key, value);
    else if (key == "seed") t.seed = static_cast<std::uint64_t>(parse_num(key, value));
    else if (key == "w_align") t.weights.align = parse_num(key, value);
    else if (key == "w_dre") t.weights.dre = parse_num(key, value);
    else if (key == "w_cls") t.weights.cls = parse_num(key, value);
    else if (key == "w_consist") t.weights.consist = parse_num(key, value);
    else if (key == "variant") s.variant = variant_from_string(value);
    else if (key == "variants") {
        s.variants.clear();
        for (const auto& v : split_list(value)) s.variants.push_back(variant_from_string(v));
        if (s.variants.empty()) throw ConfigError("config: variants list is empty");
    } else if (key == "seeds") {
        s.seeds.clear();
        for (const auto& v : split_list(value))
            s.seeds.push_back(static_cast<std::uint64_t>(parse_num(key, v)));
        if (s.seeds.empty()) throw ConfigError("config: seeds list is empty");
    } else if (key == "n_train") b.n_train = parse_int(key, value);
    else if (key == "n_test") b.n_test = parse_int(key, value);
    else if (key == "n_classes") {
        b.n_classes = parse_int(key, value);
        b.model.n_classes = b.n_classes;
    } else if (key == "image_h") {
        b.image_h = parse_int(key, value);
        b.model.image_h = b.image_h;
    } else if (key == "image_w") {
        b.image_w = parse_int(key, value);
        b.model.image_w = b.image_w;
    } else if (key == "held_out") b.held_out = parse_int(key, value);
    else if (key == "widths") {
        b.model.widths.clear();
        for (const auto& v : split_list(value)) b.model.widths.push_back(parse_int(key, v));
        if (b.model.widths.empty()) throw ConfigError("config: widths list is empty");
    } else if (key == "reduction") b.model.reduction = parse_int(key, value);
    else if (key == "data_dir") s.data_dir = value;
    else if (key.rfind("domain", 0) == 0) {
        std::size_t dot = key.find('.');
        if (dot == std::string::npos || dot <= 6)
            throw ConfigError("config: unknown key '" + key + "'");
        std::string idx_str = key.substr(6, dot - 6);
        std::string field = key.substr(dot + 1);
        std::size_t used = 0;
        unsigned long n = 0;
        try {
            n = std::stoul(idx_str, &used);
        } catch (const std::exception&) {
            throw ConfigError("config: unknown key '" + key + "'");
        }
        if (used != idx_str.size()) throw ConfigError("config: unknown key '" + key + "'");
        auto& d = domain_at(s, key, n);
        if (field == "shift" || field == "scale") {
            auto parts = split_list(value);
            if (parts.size() != 2)
                throw ConfigError("config: key '" + key + "' needs two comma-separated values");
            auto& arr = (field == "shift") ? d.style_shift : d.style_scale;
            arr[0] = static_cast<float>(parse_num(key, parts[0]));
            arr[1] = static_cast<float>(parse_num(key, parts[1]));
        } else if (field == "rho") d.rho = static_cast<float>(parse_num(key, value));
        else if (field == "noise") d.noise_std = static_cast<float>(parse_num(key, value));
        else throw ConfigError("config: unknown key '" + key + "'");
    } else {
        throw ConfigError("config: unknown key '" + key + "'");
    }
}

RunSettings parse_settings(const std::string& text, const std::vector<std::string>& overrides) {
    RunSettings s = default_settings();
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(lineno) + " is not 'key = value'");
        apply_setting(s, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    for (const auto& ov : overrides) {
        auto eq = ov.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: override '" + ov + "' is not key=value");
        apply_setting(s, trim(ov.substr(0, eq)), trim(ov.substr(eq + 1)));
    }
    return s;
}

RunSettings load_settings(const std::string& path, const std::vector<std::string>& overrides) {
    std::string text;
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw ConfigError("config: cannot read file " + path);
        std::stringstream buf;
        buf << in.rdbuf();
        text = buf.str();
    }
    return parse_settings(text, overrides);
}

std::string render_settings(const RunSettings& s) {
    const auto& b = s.bench;
    const auto& t = b.train;
    std::string out;
    auto line = [&out](const std::string& k, const std::string& v) { out += k + " = " + v + "\n"; };

    line("mode", t.mode == TrainMode::UDA ? "uda" : "dg");
    line("epochs", std::to_string(t.epochs));
    line("batch_per_domain", std::to_string(t.batch_per_domain));
    line("lr_init", fmt(t.lr_init));
    line("lr_min", fmt(t.lr_min));
    line("momentum", fmt(t.momentum));
    line("seed", std::to_string(t.seed));
    line("w_align", fmt(t.weights.align));
    line("w_dre", fmt(t.weights.dre));
    line("w_cls", fmt(t.weights.cls));
    line("w_consist", fmt(t.weights.consist));
    line("variant", variant_name(s.variant));
    std::string vs;
    for (std::size_t i = 0; i < s.variants.size(); ++i)
        vs += std::string(i ? "," : "") + variant_name(s.variants[i]);
    line("variants", vs);
    std::string seeds;
    for (std::size_t i = 0; i < s.seeds.size(); ++i)
        seeds += std::string(i ? "," : "") + std::to_string(s.seeds[i]);
    line("seeds", seeds);
    line("n_train", std::to_string(b.n_train));
    line("n_test", std::to_string(b.n_test));
    line("n_classes", std::to_string(b.n_classes));
    line("image_h", std::to_string(b.image_h));
    line("image_w", std::to_string(b.image_w));
    line("held_out", std::to_string(b.held_out));
    std::string ws;
    for (std::size_t i = 0; i < b.model.widths.size(); ++i)
        ws += std::string(i ? "," : "") + std::to_string(b.model.widths[i]);
    line("widths", ws);
    line("reduction", std::to_string(b.model.reduction));
    line("data_dir", s.data_dir);
    for (std::size_t i = 0; i < b.domains.size(); ++i) {
        const auto& d = b.domains[i];
        std::string p = "domain" + std::to_string(i) + ".";
        line(p + "shift", fmt(d.style_shift[0]) + "," + fmt(d.style_shift[1]));
        line(p + "scale", fmt(d.style_scale[0]) + "," + fmt(d.style_scale[1]));
        line(p + "rho", fmt(d.rho));
        line(p + "noise", fmt(d.noise_std));
    }
    return out;
}

std::uint64_t spec_hash(const DomainSpec& spec) {
    std::string canon = std::to_string(spec.domain_id) + "|" + fmt(spec.style_shift[0]) + "," +
                        fmt(spec.style_shift[1]) + "|" + fmt(spec.style_scale[0]) + "," +
                        fmt(spec.style_scale[1]) + "|" + fmt(spec.rho) + "|" + fmt(spec.noise_std);
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : canon) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace far
