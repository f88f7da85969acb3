#ifndef DC_GRADCHECK_HPP
#define DC_GRADCHECK_HPP

#include <cmath>
#include <cstdint>
#include <vector>

#include "dc/ops.hpp"
#include "dc/rng.hpp"
#include "dc/tensor.hpp"

namespace dc {

// Compares reverse-mode gradients against central finite differences.
//
// f(tape) must rebuild the forward pass from the current parameter values
// and return a scalar loss; it is called once with a tape for the analytic
// gradients and twice per probed coordinate with tape == nullptr.
//
// The reported error is scale-relative: per parameter, every probed
// coordinate's |analytic - numeric| mismatch is divided by the largest
// gradient magnitude seen for that parameter (never below floor_val), and
// the worst ratio is returned. A per-coordinate denominator would instead
// amplify unavoidable float FD noise on coordinates whose true gradient
// happens to be small. The perturbation actually applied after float
// rounding is measured in double and used as the FD step. When a parameter
// has more elements than max_coords, a seeded random subset is probed.
template <typename S, typename F>
S grad_check(F f, const std::vector<Tensor<S>*>& params, S eps, S floor_val = S(0.01),
             int64_t max_coords = -1, uint64_t seed = 0) {
    for (Tensor<S>* p : params) {
        require(p->requires_grad(), ErrorCode::usage, "grad_check: parameter does not track gradients");
        p->zero_grad();
    }
    Tape<S> tape;
    Tensor<S> loss = f(&tape);
    require(loss.numel() == 1, ErrorCode::dimension, "grad_check: loss must be scalar");
    tape.backward(loss);

    std::vector<std::vector<S>> analytic;
    analytic.reserve(params.size());
    for (Tensor<S>* p : params)
        analytic.emplace_back(p->grad(), p->grad() + p->numel());

    S worst = 0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<S>& p = *params[pi];
        const int64_t n = p.numel();
        std::vector<int64_t> coords;
        if (max_coords < 0 || n <= max_coords) {
            coords.resize(size_t(n));
            for (int64_t i = 0; i < n; ++i)
                coords[size_t(i)] = i;
        } else {
            Rng rng(Rng::mix(seed, uint64_t(pi) + 1));
            coords.resize(size_t(max_coords));
            for (auto& c : coords)
                c = int64_t(rng.below(uint64_t(n)));
        }
        S scale = floor_val;
        for (const S& g : analytic[pi])
            scale = std::max(scale, std::abs(g));
        std::vector<S> mismatch(coords.size());
        for (size_t ci = 0; ci < coords.size(); ++ci) {
            const int64_t c = coords[ci];
            const S v = p.flat(c);
            p.flat(c) = v + eps;
            const double step_up = double(p.flat(c)) - double(v);
            const S lp = f(nullptr).flat(0);
            p.flat(c) = v - eps;
            const double step_dn = double(v) - double(p.flat(c));
            const S lm = f(nullptr).flat(0);
            p.flat(c) = v;
            require(std::isfinite(double(lp)) && std::isfinite(double(lm)), ErrorCode::eval,
                    "grad_check: non-finite loss during probing");
            const S gfd = S((double(lp) - double(lm)) / (step_up + step_dn));
            scale = std::max(scale, std::abs(gfd));
            mismatch[ci] = std::abs(analytic[pi][size_t(c)] - gfd);
        }
        for (const S& m : mismatch)
            worst = std::max(worst, m / scale);
    }
    return worst;
}

}  // namespace dc

#endif  // DC_GRADCHECK_HPP
