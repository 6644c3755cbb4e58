#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "far/diagnostics.hpp"

namespace far {

// Everything the CLI commands consume: the benchmark definition plus
// variant/seed selection and the dataset directory.
struct RunSettings {
    BenchmarkConfig bench;
    VariantId variant = VariantId::FAR;
    std::vector<VariantId> variants;      // ablation ladder
    std::vector<std::uint64_t> seeds;     // ablation seeds
    std::string data_dir = "data";
};

// Defaults: the standard benchmark, the Table-1 ladder, seeds 0-4.
RunSettings default_settings();

// Applies one `key = value` pair; unknown keys raise ConfigError.
void apply_setting(RunSettings& s, const std::string& key, const std::string& value);

// Flat text format: `key = value` lines, `#` comments, blank lines ignored.
// `overrides` are raw `key=value` strings applied after the file.
RunSettings load_settings(const std::string& path, const std::vector<std::string>& overrides);
RunSettings parse_settings(const std::string& text, const std::vector<std::string>& overrides);

// Resolved snapshot in a stable key order; re-parsing it reproduces the
// settings exactly.
std::string render_settings(const RunSettings& s);

// FNV-1a over a canonical rendering of one domain spec; changes when any
// field changes.
std::uint64_t spec_hash(const DomainSpec& spec);

}  // namespace far
