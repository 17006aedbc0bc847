#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pabn/common.hpp"
#include "pabn/tensor.hpp"

namespace pabn {

template <typename T>
struct AdamSlot {
    std::string name;
    std::vector<T> m;
    std::vector<T> v;
};

template <typename T>
struct AdamStateT {
    double alpha = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t t = 0;
    std::vector<AdamSlot<T>> slots;

    static AdamStateT init(const std::vector<std::pair<std::string, TensorPtr<T>>>& params,
                           double alpha = 0.001) {
        AdamStateT st;
        st.alpha = alpha;
        st.slots.reserve(params.size());
        for (const auto& [name, p] : params) {
            AdamSlot<T> s;
            s.name = name;
            s.m.assign(p->size(), T(0));
            s.v.assign(p->size(), T(0));
            st.slots.push_back(std::move(s));
        }
        return st;
    }
};

using AdamState = AdamStateT<float>;

// One bias-corrected update over the full parameter list. A parameter
// whose grad buffer was never allocated is treated as having zero
// gradient (first and second moments still decay).
template <typename T>
void adam_step(const std::vector<std::pair<std::string, TensorPtr<T>>>& params,
               AdamStateT<T>& st) {
    if (params.size() != st.slots.size()) {
        throw std::invalid_argument("adam_step: state holds " + std::to_string(st.slots.size()) +
                                    " slots for " + std::to_string(params.size()) + " parameters");
    }
    st.t += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const auto& [name, p] = params[pi];
        AdamSlot<T>& slot = st.slots[pi];
        if (slot.name != name) {
            throw std::invalid_argument("adam_step: slot " + slot.name +
                                        " does not match parameter " + name);
        }
        if (slot.m.size() != p->size()) {
            throw std::invalid_argument("adam_step: moment shape for " + name +
                                        " does not match parameter");
        }
        const bool has_grad = !p->grad.empty();
        const T* g = has_grad ? p->grad.data() : nullptr;
        if (has_grad) {
            for (std::size_t i = 0; i < p->size(); ++i) {
                if (!std::isfinite(static_cast<double>(g[i]))) {
                    throw NumericError("adam_step: non-finite gradient in parameter " + name);
                }
            }
        }
        const T b1 = static_cast<T>(st.beta1), b2 = static_cast<T>(st.beta2);
        const T a = static_cast<T>(st.alpha);
        const T ibc1 = static_cast<T>(1.0 / bc1), ibc2 = static_cast<T>(1.0 / bc2);
        const T e = static_cast<T>(st.eps);
        for (std::size_t i = 0; i < p->size(); ++i) {
            const T gi = has_grad ? g[i] : T(0);
            slot.m[i] = b1 * slot.m[i] + (T(1) - b1) * gi;
            slot.v[i] = b2 * slot.v[i] + (T(1) - b2) * gi * gi;
            const T mhat = slot.m[i] * ibc1;
            const T vhat = slot.v[i] * ibc2;
            p->data[i] -= a * mhat / (std::sqrt(vhat) + e);
        }
    }
}

}  // namespace pabn
