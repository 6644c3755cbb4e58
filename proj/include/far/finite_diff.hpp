#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "far/tensor.hpp"

namespace far {

// Result of comparing autodiff gradients against central finite differences.
struct FdReport {
    int checked = 0;
    int failed = 0;
    double max_rel_err = 0.0;
    double worst_ad = 0.0;
    double worst_fd = 0.0;

    double pass_fraction() const { return checked == 0 ? 1.0 : 1.0 - static_cast<double>(failed) / checked; }
    bool all_pass() const { return failed == 0; }
};

// Central finite differences in 64-bit shadow arithmetic. `f` must be a
// deterministic scalar function of `params`; `grads_ad` are the autodiff
// gradients under test (any scalar type, cast to double for comparison).
// Relative error per scalar entry: |g_ad - g_fd| / (|g_fd| + 1e-8).
template <typename TGrad>
FdReport finite_diff_check(const std::function<double(const std::vector<TensorT<double>>&)>& f,
                           std::vector<TensorT<double>> params,
                           const std::vector<TensorT<TGrad>>& grads_ad,
                           double step, double tol) {
    FdReport report;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t i = 0; i < params[p].data.size(); ++i) {
            double orig = params[p].data[i];
            params[p].data[i] = orig + step;
            double fp = f(params);
            params[p].data[i] = orig - step;
            double fm = f(params);
            params[p].data[i] = orig;
            double g_fd = (fp - fm) / (2.0 * step);
            double g_ad = static_cast<double>(grads_ad[p].data[i]);
            double rel = std::abs(g_ad - g_fd) / (std::abs(g_fd) + 1e-8);
            ++report.checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_ad = g_ad;
                report.worst_fd = g_fd;
            }
            if (rel > tol) ++report.failed;
        }
    }
    return report;
}

}  // namespace far
