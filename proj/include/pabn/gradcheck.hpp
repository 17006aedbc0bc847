#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pabn/adam.hpp"
#include "pabn/common.hpp"
#include "pabn/ops.hpp"
#include "pabn/tensor.hpp"

// Gradient verification runs entirely in 64-bit: the same templated
// forward code, re-instantiated with double, against central finite
// differences.

namespace pabn {

using DTensor = TensorPtr<double>;
using DFn = std::function<DTensor(const std::vector<DTensor>&)>;

inline double rel_err(double a, double n) {
    const double denom = std::max({std::abs(a), std::abs(n), 1e-6});
    return std::abs(a - n) / denom;
}

// fn must map the inputs to a scalar using engine primitives. Analytic
// gradients come from one taped run; numeric gradients from central
// differences with fn evaluated off-tape.
inline double grad_check(const DFn& fn, const std::vector<DTensor>& inputs, double step = 1e-3) {
    std::vector<std::vector<double>> analytic(inputs.size());
    {
        GraphT<double> g;
        auto scope = g.activate();
        DTensor loss = fn(inputs);
        g.backward(loss);
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            if (inputs[i]->requires_grad) {
                analytic[i] = inputs[i]->grad;
            }
        }
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!inputs[i]->requires_grad) {
            continue;
        }
        auto& x = inputs[i]->data;
        for (std::size_t j = 0; j < x.size(); ++j) {
            const double keep = x[j];
            x[j] = keep + step;
            const double fp = fn(inputs)->data[0];
            x[j] = keep - step;
            const double fm = fn(inputs)->data[0];
            x[j] = keep;
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[i].empty() ? 0.0 : analytic[i][j];
            worst = std::max(worst, rel_err(a, numeric));
        }
    }
    return worst;
}

namespace gradcheck_detail {

inline DTensor rand_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                           bool requires_grad = true) {
    auto t = TensorT<double>::create(std::move(shape), requires_grad);
    for (auto& v : t->data) {
        v = uniform_real(rng, lo, hi);
    }
    return t;
}

// Values kept away from zero so relu / signed_sqrt kinks cannot sit
// inside the finite-difference stencil.
inline DTensor rand_tensor_off_zero(std::vector<int> shape, Rng& rng, double margin = 0.1) {
    auto t = rand_tensor(std::move(shape), rng);
    for (auto& v : t->data) {
        v += v >= 0.0 ? margin : -margin;
    }
    return t;
}

// Well-separated values for max_pool2d: a shuffled grid with spacing far
// above the stencil width, so the argmax cannot flip under perturbation.
inline DTensor rand_tensor_separated(std::vector<int> shape, Rng& rng) {
    auto t = TensorT<double>::create(std::move(shape), true);
    std::vector<double> grid(t->size());
    for (std::size_t i = 0; i < grid.size(); ++i) {
        grid[i] = 0.05 * static_cast<double>(i) - 0.025 * static_cast<double>(grid.size());
    }
    shuffle_inplace(grid, rng);
    t->data = grid;
    return t;
}

// Checks one primitive through a vector-Jacobian product: the tape holds
// only the op under test, so a fault injected into it cannot leak into a
// helper reduction.
inline double vjp_check(const std::function<DTensor(const std::vector<DTensor>&)>& op_fn,
                        const std::vector<DTensor>& inputs, Rng& rng, double step = 1e-3) {
    std::vector<double> cot;
    std::vector<std::vector<double>> analytic(inputs.size());
    {
        GraphT<double> g;
        auto scope = g.activate();
        DTensor out = op_fn(inputs);
        cot.resize(out->size());
        for (auto& w : cot) {
            w = uniform_real(rng, -1.0, 1.0);
        }
        g.backward_with_cotangent(out, cot);
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            if (inputs[i]->requires_grad) {
                analytic[i] = inputs[i]->grad;
            }
        }
    }
    auto weighted = [&]() {
        DTensor out = op_fn(inputs);
        double s = 0.0;
        for (std::size_t i = 0; i < out->size(); ++i) {
            s += cot[i] * out->data[i];
        }
        return s;
    };
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!inputs[i]->requires_grad) {
            continue;
        }
        auto& x = inputs[i]->data;
        for (std::size_t j = 0; j < x.size(); ++j) {
            const double keep = x[j];
            x[j] = keep + step;
            const double fp = weighted();
            x[j] = keep - step;
            const double fm = weighted();
            x[j] = keep;
            const double numeric = (fp - fm) / (2.0 * step);
            worst = std::max(worst, rel_err(analytic[i][j], numeric));
        }
    }
    return worst;
}

}  // namespace gradcheck_detail

struct PrimitiveCheck {
    std::string op;
    // Returns the max relative error for one seeded run.
    std::function<double(std::uint64_t)> run;
};

inline const std::vector<PrimitiveCheck>& primitive_gradchecks() {
    using namespace gradcheck_detail;
    using ops::batch_norm;
    static const std::vector<PrimitiveCheck> checks = {
        {"conv2d",
         [](std::uint64_t seed) {
             Rng rng(seed);
             auto x = rand_tensor({2, 3, 6, 6}, rng);
             auto w = rand_tensor({4, 3, 3, 3}, rng);
             auto b = rand_tensor({4}, rng);
             const int padding = static_cast<int>(seed % 2);
             return vjp_check(
                 [padding](const std::vector<DTensor>& in) {
                     return ops::conv2d(in[0], in[1], in[2], padding);
                 },
                 {x, w, b}, rng);
         }},
        {"batch_norm",
         [](std::uint64_t seed) {
             Rng rng(seed);
             auto x = rand_tensor({4, 2, 3, 3}, rng);
             auto ga = rand_tensor({2}, rng, 0.5, 1.5);
             auto be = rand_tensor({2}, rng);
             return vjp_check(
                 [](const std::vector<DTensor>& in) {
                     auto rm = TensorT<double>::create({in[0]->dim(1)});
                     auto rv = TensorT<double>::create({in[0]->dim(1)});
                     auto bt = TensorT<double>::scalar(0.0);
                     return batch_norm(in[0], in[1], in[2], rm, rv, bt, 1e-5, true);
                 },
                 {x, ga, be}, rng);
         }},
        {"relu",
         [](std::uint64_t seed) {
             Rng rng(seed);
             auto x = rand_tensor_off_zero({3, 4}, rng);
             return vjp_check([](const std::vector<DTensor>& in) { return ops::relu(in[0]); }, {x},
                              rng);
         }},
        {"sigmoid",
         [](std::uint64_t seed) {
             Rng rng(seed);
             auto x = rand_tensor({3, 4}, rng, -2.0, 2.0);
             return vjp_check([](const std::vector<DTensor>& in) { return ops::sigmoid(in[0]); },
                              {x}, rng);
         }},
        {"max_pool2d",
         [](std::uint64_t seed) {
             Rng rng(seed);
             auto x = rand_tensor_separated({2, 2, 4, 4}, rng);
             return vjp_check(
                 [](const std::vector<DTensor>& in) { return ops::max_pool2d(in[0], 2, 2); }, {x},
                 rng);
         }},
        {"matmul",
         [](std::uint64_t seed) {
             Rng rng(seed);
             auto a = rand_tensor({3, 4}, rng);
             auto b = rand_tensor({4, 2}, rng);
             return vjp_check(
                 [](const std::vector<DTensor>& in) { return ops::matmul(in[0], in[1]); }, {a, b},
                 rng);
         }},
        {"transpose",
         [](std::uint64_t seed) {
             Rng rng(seed);
             auto x = rand_tensor({3, 5}, rng);
             return vjp_check([](const std::vector<DTensor>& in) { return ops::transpose(in[0]); },
                              {x}, rng);
         }},
        {"reshape",
         [](std::uint64_t seed) {
             Rng rng(seed);
             auto x = rand_tensor({2, 6}, rng);
             return vjp_check(
                 [](const std::vector<DTensor>& in) { return ops::reshape(in[0], {3, 4}); }, {x},
                 rng);
         }},
        {"slice_item",
         [](std::uint64_t seed) {
             Rng rng(seed);
             auto x = rand_tensor({4, 3, 2}, rng);
             const int idx = static_cast<int>(seed % 4);
             return vjp_check(
                 [idx](const std::vector<DTensor>& in) { return ops::slice_item(in[0], idx); }, {x},
                 rng);
         }},
        {"stack_rows",
         [](std::uint64_t seed) {
             Rng rng(seed);
             auto a = rand_tensor({5}, rng);
             auto b = rand_tensor({5}, rng);
             auto c = rand_tensor({5}, rng);
             return vjp_check(
                 [](const std::vector<DTensor>& in) { return ops::stack_rows(in); }, {a, b, c},
                 rng);
         }},
        {"add_row_bias",
         [](std::uint64_t seed) {
             Rng rng(seed);
             auto x = rand_tensor({4, 3}, rng);
             auto b = rand_tensor({3}, rng);
             return vjp_check(
                 [](const std::vector<DTensor>& in) { return ops::add_row_bias(in[0], in[1]); },
                 {x, b}, rng);
         }},
        {"signed_sqrt",
         [](std::uint64_t seed) {
             Rng rng(seed);
             auto x = rand_tensor_off_zero({3, 4}, rng, 0.2);
             return vjp_check(
                 [](const std::vector<DTensor>& in) { return ops::signed_sqrt(in[0]); }, {x}, rng);
         }},
        {"l2_normalize",
         [](std::uint64_t seed) {
             Rng rng(seed);
             auto x = rand_tensor_off_zero({7}, rng);
             return vjp_check(
                 [](const std::vector<DTensor>& in) { return ops::l2_normalize(in[0]); }, {x},
                 rng);
         }},
        {"mse_mean",
         [](std::uint64_t seed) {
             Rng rng(seed);
             auto a = rand_tensor({3, 3}, rng);
             auto b = rand_tensor({3, 3}, rng);
             return vjp_check(
                 [](const std::vector<DTensor>& in) { return ops::mse_mean(in[0], in[1]); }, {a, b},
                 rng);
         }},
        {"sum_over_axis",
         [](std::uint64_t seed) {
             Rng rng(seed);
             auto x = rand_tensor({2, 3, 4}, rng);
             const int axis = static_cast<int>(seed % 3);
             return vjp_check(
                 [axis](const std::vector<DTensor>& in) { return ops::sum_over_axis(in[0], axis); },
                 {x}, rng);
         }},
        {"sum_all",
         [](std::uint64_t seed) {
             Rng rng(seed);
             auto x = rand_tensor({3, 4}, rng);
             return vjp_check([](const std::vector<DTensor>& in) { return ops::sum_all(in[0]); },
                              {x}, rng);
         }},
        {"add",
         [](std::uint64_t seed) {
             Rng rng(seed);
             auto a = rand_tensor({3, 4}, rng);
             auto b = rand_tensor({3, 4}, rng);
             return vjp_check([](const std::vector<DTensor>& in) { return ops::add(in[0], in[1]); },
                              {a, b}, rng);
         }},
        {"sub",
         [](std::uint64_t seed) {
             Rng rng(seed);
             auto a = rand_tensor({3, 4}, rng);
             auto b = rand_tensor({3, 4}, rng);
             return vjp_check([](const std::vector<DTensor>& in) { return ops::sub(in[0], in[1]); },
                              {a, b}, rng);
         }},
        {"mul",
         [](std::uint64_t seed) {
             Rng rng(seed);
             auto a = rand_tensor({3, 4}, rng);
             auto b = rand_tensor({3, 4}, rng);
             return vjp_check([](const std::vector<DTensor>& in) { return ops::mul(in[0], in[1]); },
                              {a, b}, rng);
         }},
        {"scale",
         [](std::uint64_t seed) {
             Rng rng(seed);
             auto x = rand_tensor({3, 4}, rng);
             return vjp_check(
                 [](const std::vector<DTensor>& in) { return ops::scale(in[0], 1.7); }, {x}, rng);
         }},
    };
    return checks;
}

// Worst error for one primitive across `n_seeds` seeds derived from
// `base_seed`.
inline double primitive_gradcheck_worst(const PrimitiveCheck& c, std::uint64_t base_seed,
                                        int n_seeds = 5) {
    double worst = 0.0;
    for (int s = 0; s < n_seeds; ++s) {
        worst = std::max(worst, c.run(base_seed + static_cast<std::uint64_t>(s)));
    }
    return worst;
}

}  // namespace pabn
