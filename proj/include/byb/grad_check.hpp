#pragma once

// Central finite differences, the independent oracle for backward().

#include <cmath>
#include <functional>

#include "byb/tensor.hpp"

namespace byb {

using ScalarFn = std::function<double(const Tensor&)>;

// (f(x + eps*e_i) - f(x - eps*e_i)) / (2 eps) per coordinate. f must be
// deterministic; non-finite outputs raise NumericError.
inline Vec finite_difference_gradient(const ScalarFn& f, const Tensor& x, double eps) {
    if (eps <= 0.0) throw ContractError("finite_difference_gradient: eps must be positive");
    Vec g(x.size());
    for (Index i = 0; i < x.size(); ++i) {
        Vec vp = x.values();
        Vec vm = x.values();
        vp[i] += eps;
        vm[i] -= eps;
        const double fp = f(Tensor::from_array(x.shape(), std::move(vp), false));
        const double fm = f(Tensor::from_array(x.shape(), std::move(vm), false));
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("finite_difference_gradient: non-finite function value");
        g[i] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

}  // namespace byb
