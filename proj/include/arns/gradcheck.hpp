#ifndef ARNS_GRADCHECK_HPP
#define ARNS_GRADCHECK_HPP

#include <functional>
#include <string>
#include <vector>

#include "arns/tensor.hpp"

namespace arns {

struct GradCheckEntry {
    std::string param;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::vector<GradCheckEntry> entries;

    bool passes(double tol) const { return max_rel_err < tol; }
};

/// Compares analytic gradients against central finite differences in 64-bit
/// precision. `build` constructs the forward pass on a fresh tape and returns
/// the scalar loss; the parameters under test are perturbed in place between
/// evaluations. Relative error is |ga - gn| / max(|ga|, |gn|, 1e-8).
///
/// `tamper` is a test hook: it is added to the first analytic gradient entry
/// so harness sensitivity can be exercised.
inline GradCheckReport gradcheck(const std::function<Var<double>(Tape<double>&)>& build,
                                 const std::vector<Parameter<double>*>& params,
                                 double eps = 1e-5,
                                 double tamper = 0.0) {
    for (Parameter<double>* p : params) p->zero_grad();

    // Analytic pass.
    std::vector<std::vector<double>> analytic;
    {
        Tape<double> tape;
        Var<double> loss = build(tape);
        tape.backward(loss);
    }
    for (Parameter<double>* p : params) analytic.push_back(p->grad.vec());
    if (tamper != 0.0 && !analytic.empty() && !analytic[0].empty()) analytic[0][0] += tamper;

    auto eval = [&]() -> double {
        Tape<double> tape;
        Var<double> loss = build(tape);
        return loss.value()[0];
    };

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter<double>* p = params[pi];
        GradCheckEntry entry;
        entry.param = p->name;
        for (std::int64_t i = 0; i < p->value.numel(); ++i) {
            const double saved = p->value[i];
            p->value[i] = saved + eps;
            const double f_plus = eval();
            p->value[i] = saved - eps;
            const double f_minus = eval();
            p->value[i] = saved;
            const double gn = (f_plus - f_minus) / (2.0 * eps);
            const double ga = analytic[pi][static_cast<std::size_t>(i)];
            const double denom = std::max({std::abs(ga), std::abs(gn), 1e-8});
            const double rel = std::abs(ga - gn) / denom;
            if (rel > entry.max_rel_err) entry.max_rel_err = rel;
        }
        if (entry.max_rel_err > report.max_rel_err) {
            report.max_rel_err = entry.max_rel_err;
            report.worst_param = entry.param;
        }
        report.entries.push_back(std::move(entry));
    }
    for (Parameter<double>* p : params) p->zero_grad();
    return report;
}

}  // namespace arns

#endif  // ARNS_GRADCHECK_HPP
