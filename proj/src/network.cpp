#include "far/network.hpp"

#include <array>
#include <utility>

namespace far {

std::atomic<long long> gate_eval_count{0};

namespace {
constexpr std::array<std::pair<VariantId, const char*>, 12> kVariantNames = {{
    {VariantId::Baseline, "Baseline"},
    {VariantId::BaselineAlign, "BaselineAlign"},
    {VariantId::BaselineAttAlign, "BaselineAttAlign"},
    {VariantId::FAR, "FAR"},
    {VariantId::FARConv, "FARConv"},
    {VariantId::FARGateC, "FARGateC"},
    {VariantId::FARGateS, "FARGateS"},
    {VariantId::FARNoDRE, "FARNoDRE"},
    {VariantId::FARNoDREPlus, "FARNoDREPlus"},
    {VariantId::FARNoDREMinus, "FARNoDREMinus"},
    {VariantId::FARNoRanking, "FARNoRanking"},
    {VariantId::FARNoTS, "FARNoTS"},
}};
}  // namespace

const char* variant_name(VariantId v) {
    for (const auto& [id, name] : kVariantNames)
        if (id == v) return name;
    return "?";
}

VariantId variant_from_string(const std::string& name) {
    for (const auto& [id, n] : kVariantNames)
        if (name == n) return id;
    throw ConfigError("unknown variant: " + name);
}

}  // namespace far
