#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "pabn/common.hpp"
#include "pabn/gemm.hpp"
#include "pabn/tensor.hpp"

namespace pabn::ops {

// Registered primitive names; the gradient-check registry is validated
// against this list so a new op cannot silently skip checking.
inline constexpr std::array<const char*, 20> kDifferentiableOps = {
    "conv2d",     "batch_norm",  "relu",        "sigmoid",  "max_pool2d",
    "matmul",     "transpose",   "reshape",     "slice_item", "stack_rows",
    "add_row_bias", "signed_sqrt", "l2_normalize", "mse_mean", "sum_over_axis",
    "sum_all",    "add",         "sub",         "mul",      "scale"};

namespace detail {

template <typename T>
void check_same_shape(const char* op, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->shape != b->shape) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a->shape) +
                                    " vs " + shape_str(b->shape));
    }
}

template <typename T>
void check_rank(const char* op, const TensorPtr<T>& t, int rank) {
    if (t->rank() != rank) {
        throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                    " tensor, got shape " + shape_str(t->shape));
    }
}

}  // namespace detail

template <typename T>
TensorPtr<T> relu(const TensorPtr<T>& x) {
    auto out = TensorT<T>::create(x->shape);
    const std::size_t n = x->size();
    for (std::size_t i = 0; i < n; ++i) {
        out->data[i] = x->data[i] > T(0) ? x->data[i] : T(0);
    }
    autodiff_record<T>("relu", {x}, out, [x, out] {
        if (!x->requires_grad) {
            return;
        }
        const std::size_t n = x->size();
        for (std::size_t i = 0; i < n; ++i) {
            if (x->data[i] > T(0)) {
                x->grad[i] += out->grad[i];
            }
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> sigmoid(const TensorPtr<T>& x) {
    auto out = TensorT<T>::create(x->shape);
    const std::size_t n = x->size();
    for (std::size_t i = 0; i < n; ++i) {
        out->data[i] = T(1) / (T(1) + std::exp(-x->data[i]));
    }
    autodiff_record<T>("sigmoid", {x}, out, [x, out] {
        if (!x->requires_grad) {
            return;
        }
        const std::size_t n = x->size();
        for (std::size_t i = 0; i < n; ++i) {
            const T s = out->data[i];
            x->grad[i] += out->grad[i] * s * (T(1) - s);
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> signed_sqrt(const TensorPtr<T>& x) {
    auto out = TensorT<T>::create(x->shape);
    const std::size_t n = x->size();
    for (std::size_t i = 0; i < n; ++i) {
        const T v = x->data[i];
        out->data[i] = v >= T(0) ? std::sqrt(v) : -std::sqrt(-v);
    }
    autodiff_record<T>("signed_sqrt", {x}, out, [x, out] {
        if (!x->requires_grad) {
            return;
        }
        const T delta = T(1e-8);
        const std::size_t n = x->size();
        for (std::size_t i = 0; i < n; ++i) {
            x->grad[i] += out->grad[i] / (T(2) * std::sqrt(std::abs(x->data[i]) + delta));
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> l2_normalize(const TensorPtr<T>& x, T eps = T(1e-12)) {
    detail::check_rank("l2_normalize", x, 1);
    if (!(eps > T(0))) {
        throw std::invalid_argument("l2_normalize: eps must be positive");
    }
    const std::size_t n = x->size();
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sq += static_cast<double>(x->data[i]) * static_cast<double>(x->data[i]);
    }
    const T denom = std::max(static_cast<T>(std::sqrt(sq)), eps);
    auto out = TensorT<T>::create(x->shape);
    for (std::size_t i = 0; i < n; ++i) {
        out->data[i] = x->data[i] / denom;
    }
    autodiff_record<T>("l2_normalize", {x}, out, [x, out, denom, eps] {
        if (!x->requires_grad) {
            return;
        }
        const std::size_t n = x->size();
        if (denom <= eps) {
            for (std::size_t i = 0; i < n; ++i) {
                x->grad[i] += out->grad[i] / denom;
            }
            return;
        }
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            dot += static_cast<double>(out->grad[i]) * static_cast<double>(out->data[i]);
        }
        const T d = static_cast<T>(dot);
        for (std::size_t i = 0; i < n; ++i) {
            x->grad[i] += (out->grad[i] - out->data[i] * d) / denom;
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> mse_mean(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::check_same_shape("mse_mean", a, b);
    const std::size_t n = a->size();
    if (n == 0) {
        throw std::invalid_argument("mse_mean: empty tensors");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a->data[i]) - static_cast<double>(b->data[i]);
        acc += d * d;
    }
    auto out = TensorT<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
    autodiff_record<T>("mse_mean", {a, b}, out, [a, b, out] {
        const std::size_t n = a->size();
        const T g = out->grad[0] * T(2) / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const T d = a->data[i] - b->data[i];
            if (a->requires_grad) {
                a->grad[i] += g * d;
            }
            if (b->requires_grad) {
                b->grad[i] -= g * d;
            }
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> sum_over_axis(const TensorPtr<T>& x, int axis) {
    if (axis < 0 || axis >= x->rank()) {
        throw std::invalid_argument("sum_over_axis: axis " + std::to_string(axis) +
                                    " out of range for shape " + shape_str(x->shape));
    }
    std::vector<int> out_shape;
    for (int i = 0; i < x->rank(); ++i) {
        if (i != axis) {
            out_shape.push_back(x->shape[static_cast<std::size_t>(i)]);
        }
    }
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) {
        outer *= static_cast<std::size_t>(x->shape[static_cast<std::size_t>(i)]);
    }
    for (int i = axis + 1; i < x->rank(); ++i) {
        inner *= static_cast<std::size_t>(x->shape[static_cast<std::size_t>(i)]);
    }
    const std::size_t ax = static_cast<std::size_t>(x->shape[static_cast<std::size_t>(axis)]);
    auto out = TensorT<T>::create(out_shape);
    // Accumulate in double so reordering the reduced axis cannot change
    // the rounded result (the channel-sum permutation invariance).
    std::vector<double> acc(inner);
    for (std::size_t o = 0; o < outer; ++o) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t a = 0; a < ax; ++a) {
            const T* src = x->data.data() + (o * ax + a) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
                acc[i] += static_cast<double>(src[i]);
            }
        }
        T* dst = out->data.data() + o * inner;
        for (std::size_t i = 0; i < inner; ++i) {
            dst[i] = static_cast<T>(acc[i]);
        }
    }
    autodiff_record<T>("sum_over_axis", {x}, out, [x, out, outer, ax, inner] {
        if (!x->requires_grad) {
            return;
        }
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t a = 0; a < ax; ++a) {
                T* dst = x->grad.data() + (o * ax + a) * inner;
                const T* src = out->grad.data() + o * inner;
                for (std::size_t i = 0; i < inner; ++i) {
                    dst[i] += src[i];
                }
            }
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> sum_all(const TensorPtr<T>& x) {
    double acc = 0.0;
    for (const T v : x->data) {
        acc += static_cast<double>(v);
    }
    auto out = TensorT<T>::scalar(static_cast<T>(acc));
    autodiff_record<T>("sum_all", {x}, out, [x, out] {
        if (!x->requires_grad) {
            return;
        }
        const T g = out->grad[0];
        for (T& v : x->grad) {
            v += g;
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::check_same_shape("add", a, b);
    auto out = TensorT<T>::create(a->shape);
    const std::size_t n = a->size();
    for (std::size_t i = 0; i < n; ++i) {
        out->data[i] = a->data[i] + b->data[i];
    }
    autodiff_record<T>("add", {a, b}, out, [a, b, out] {
        const std::size_t n = out->size();
        for (std::size_t i = 0; i < n; ++i) {
            if (a->requires_grad) {
                a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->grad[i] += out->grad[i];
            }
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> sub(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::check_same_shape("sub", a, b);
    auto out = TensorT<T>::create(a->shape);
    const std::size_t n = a->size();
    for (std::size_t i = 0; i < n; ++i) {
        out->data[i] = a->data[i] - b->data[i];
    }
    autodiff_record<T>("sub", {a, b}, out, [a, b, out] {
        const std::size_t n = out->size();
        for (std::size_t i = 0; i < n; ++i) {
            if (a->requires_grad) {
                a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->grad[i] -= out->grad[i];
            }
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> mul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::check_same_shape("mul", a, b);
    auto out = TensorT<T>::create(a->shape);
    const std::size_t n = a->size();
    for (std::size_t i = 0; i < n; ++i) {
        out->data[i] = a->data[i] * b->data[i];
    }
    autodiff_record<T>("mul", {a, b}, out, [a, b, out] {
        const std::size_t n = out->size();
        for (std::size_t i = 0; i < n; ++i) {
            if (a->requires_grad) {
                a->grad[i] += out->grad[i] * b->data[i];
            }
            if (b->requires_grad) {
                b->grad[i] += out->grad[i] * a->data[i];
            }
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> scale(const TensorPtr<T>& x, T c) {
    auto out = TensorT<T>::create(x->shape);
    const std::size_t n = x->size();
    for (std::size_t i = 0; i < n; ++i) {
        out->data[i] = x->data[i] * c;
    }
    autodiff_record<T>("scale", {x}, out, [x, out, c] {
        if (!x->requires_grad) {
            return;
        }
        const std::size_t n = x->size();
        for (std::size_t i = 0; i < n; ++i) {
            x->grad[i] += out->grad[i] * c;
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> reshape(const TensorPtr<T>& x, std::vector<int> new_shape) {
    if (shape_size(new_shape) != x->size()) {
        throw std::invalid_argument("reshape: " + shape_str(x->shape) + " cannot become " +
                                    shape_str(new_shape));
    }
    auto out = TensorT<T>::from_data(std::move(new_shape), x->data);
    autodiff_record<T>("reshape", {x}, out, [x, out] {
        if (!x->requires_grad) {
            return;
        }
        const std::size_t n = x->size();
        for (std::size_t i = 0; i < n; ++i) {
            x->grad[i] += out->grad[i];
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> transpose(const TensorPtr<T>& x) {
    detail::check_rank("transpose", x, 2);
    const int m = x->dim(0), n = x->dim(1);
    auto out = TensorT<T>::create({n, m});
    gemm::transpose_mat(m, n, x->data.data(), n, out->data.data(), m);
    autodiff_record<T>("transpose", {x}, out, [x, out, m, n] {
        if (!x->requires_grad) {
            return;
        }
        for (int j = 0; j < n; ++j) {
            const T* g = out->grad.data() + static_cast<std::size_t>(j) * m;
            for (int i = 0; i < m; ++i) {
                x->grad[static_cast<std::size_t>(i) * n + j] += g[i];
            }
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> matmul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::check_rank("matmul", a, 2);
    detail::check_rank("matmul", b, 2);
    const int m = a->dim(0), k = a->dim(1), n = b->dim(1);
    if (b->dim(0) != k) {
        throw std::invalid_argument("matmul: inner extents disagree, a is " + shape_str(a->shape) +
                                    ", b is " + shape_str(b->shape));
    }
    auto out = TensorT<T>::create({m, n});
    gemm::gemm_nn(m, n, k, a->data.data(), k, b->data.data(), n, out->data.data(), n);
    autodiff_record<T>("matmul", {a, b}, out, [a, b, out, m, k, n] {
        if (a->requires_grad) {
            // dA += G * B^T via an explicit transpose of B.
            std::vector<T> bt(static_cast<std::size_t>(n) * k);
            gemm::transpose_mat(k, n, b->data.data(), n, bt.data(), k);
            gemm::gemm_nn(m, k, n, out->grad.data(), n, bt.data(), k, a->grad.data(), k);
        }
        if (b->requires_grad) {
            gemm::gemm_tn(k, n, m, a->data.data(), k, out->grad.data(), n, b->grad.data(), n);
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> slice_item(const TensorPtr<T>& x, int index) {
    if (x->rank() < 1) {
        throw std::invalid_argument("slice_item: input must have a leading batch axis");
    }
    const int batch = x->dim(0);
    if (index < 0 || index >= batch) {
        throw std::invalid_argument("slice_item: index " + std::to_string(index) +
                                    " out of range for batch of " + std::to_string(batch));
    }
    std::vector<int> out_shape(x->shape.begin() + 1, x->shape.end());
    const std::size_t plane = shape_size(out_shape);
    auto out = TensorT<T>::create(out_shape);
    const std::size_t base = static_cast<std::size_t>(index) * plane;
    std::copy_n(x->data.begin() + static_cast<std::ptrdiff_t>(base), plane, out->data.begin());
    autodiff_record<T>("slice_item", {x}, out, [x, out, base, plane] {
        if (!x->requires_grad) {
            return;
        }
        for (std::size_t i = 0; i < plane; ++i) {
            x->grad[base + i] += out->grad[i];
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> stack_rows(const std::vector<TensorPtr<T>>& rows) {
    if (rows.empty()) {
        throw std::invalid_argument("stack_rows: need at least one row");
    }
    detail::check_rank("stack_rows", rows[0], 1);
    const int len = rows[0]->dim(0);
    for (const auto& r : rows) {
        detail::check_rank("stack_rows", r, 1);
        if (r->dim(0) != len) {
            throw std::invalid_argument("stack_rows: row length mismatch, " + std::to_string(len) +
                                        " vs " + std::to_string(r->dim(0)));
        }
    }
    const int n = static_cast<int>(rows.size());
    auto out = TensorT<T>::create({n, len});
    for (int i = 0; i < n; ++i) {
        std::copy_n(rows[static_cast<std::size_t>(i)]->data.begin(), static_cast<std::size_t>(len),
                    out->data.begin() + static_cast<std::ptrdiff_t>(i) * len);
    }
    autodiff_record<T>("stack_rows", std::vector<TensorPtr<T>>(rows), out, [rows, out, len] {
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (!rows[i]->requires_grad) {
                continue;
            }
            const T* g = out->grad.data() + i * static_cast<std::size_t>(len);
            for (int j = 0; j < len; ++j) {
                rows[i]->grad[static_cast<std::size_t>(j)] += g[j];
            }
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> add_row_bias(const TensorPtr<T>& x, const TensorPtr<T>& bias) {
    detail::check_rank("add_row_bias", x, 2);
    detail::check_rank("add_row_bias", bias, 1);
    const int m = x->dim(0), n = x->dim(1);
    if (bias->dim(0) != n) {
        throw std::invalid_argument("add_row_bias: bias length " + std::to_string(bias->dim(0)) +
                                    " does not match row width " + std::to_string(n));
    }
    auto out = TensorT<T>::create({m, n});
    for (int i = 0; i < m; ++i) {
        const T* src = x->data.data() + static_cast<std::size_t>(i) * n;
        T* dst = out->data.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            dst[j] = src[j] + bias->data[static_cast<std::size_t>(j)];
        }
    }
    autodiff_record<T>("add_row_bias", {x, bias}, out, [x, bias, out, m, n] {
        for (int i = 0; i < m; ++i) {
            const T* g = out->grad.data() + static_cast<std::size_t>(i) * n;
            if (x->requires_grad) {
                T* dst = x->grad.data() + static_cast<std::size_t>(i) * n;
                for (int j = 0; j < n; ++j) {
                    dst[j] += g[j];
                }
            }
            if (bias->requires_grad) {
                for (int j = 0; j < n; ++j) {
                    bias->grad[static_cast<std::size_t>(j)] += g[j];
                }
            }
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> max_pool2d(const TensorPtr<T>& x, int window = 2, int stride = 2) {
    detail::check_rank("max_pool2d", x, 4);
    if (window != 2 || stride != 2) {
        throw std::invalid_argument("max_pool2d: only window 2 stride 2 is supported");
    }
    const int N = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
    if (H % 2 != 0 || W % 2 != 0) {
        throw std::invalid_argument("max_pool2d: spatial extents must be even, got H=" +
                                    std::to_string(H) + " W=" + std::to_string(W));
    }
    const int Ho = H / 2, Wo = W / 2;
    auto out = TensorT<T>::create({N, C, Ho, Wo});
    // Argmax is a flat offset within each (n,c) plane; ties keep the
    // first row-major position.
    auto argmax = std::make_shared<std::vector<int>>(out->size());
    const std::size_t planes = static_cast<std::size_t>(N) * C;
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = x->data.data() + p * H * W;
        T* dst = out->data.data() + p * Ho * Wo;
        int* am = argmax->data() + p * Ho * Wo;
        for (int y = 0; y < Ho; ++y) {
            for (int xo = 0; xo < Wo; ++xo) {
                const int base = 2 * y * W + 2 * xo;
                int best = base;
                T bv = src[base];
                const int cands[3] = {base + 1, base + W, base + W + 1};
                for (int ci = 0; ci < 3; ++ci) {
                    if (src[cands[ci]] > bv) {
                        bv = src[cands[ci]];
                        best = cands[ci];
                    }
                }
                dst[y * Wo + xo] = bv;
                am[y * Wo + xo] = best;
            }
        }
    }
    autodiff_record<T>("max_pool2d", {x}, out, [x, out, argmax, H, W, Ho, Wo, planes] {
        if (!x->requires_grad) {
            return;
        }
        for (std::size_t p = 0; p < planes; ++p) {
            T* dst = x->grad.data() + p * H * W;
            const T* g = out->grad.data() + p * Ho * Wo;
            const int* am = argmax->data() + p * Ho * Wo;
            const int count = Ho * Wo;
            for (int i = 0; i < count; ++i) {
                dst[am[i]] += g[i];
            }
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> conv2d(const TensorPtr<T>& input, const TensorPtr<T>& weight,
                    const TensorPtr<T>& bias, int padding) {
    detail::check_rank("conv2d", input, 4);
    detail::check_rank("conv2d", weight, 4);
    detail::check_rank("conv2d", bias, 1);
    if (weight->dim(2) != 3 || weight->dim(3) != 3) {
        throw std::invalid_argument("conv2d: kernel must be 3x3, weight is " +
                                    shape_str(weight->shape));
    }
    const int N = input->dim(0), Cin = input->dim(1), H = input->dim(2), W = input->dim(3);
    const int Cout = weight->dim(0);
    if (weight->dim(1) != Cin) {
        throw std::invalid_argument("conv2d: weight input-channel extent " +
                                    std::to_string(weight->dim(1)) + " does not match input Cin=" +
                                    std::to_string(Cin));
    }
    if (bias->dim(0) != Cout) {
        throw std::invalid_argument("conv2d: bias length " + std::to_string(bias->dim(0)) +
                                    " does not match Cout=" + std::to_string(Cout));
    }
    if (padding != 0 && padding != 1) {
        throw std::invalid_argument("conv2d: padding must be 0 or 1");
    }
    const int Ho = H + 2 * padding - 2;
    const int Wo = W + 2 * padding - 2;
    if (Ho < 1 || Wo < 1) {
        throw std::invalid_argument("conv2d: output extent would be " + std::to_string(Ho) + "x" +
                                    std::to_string(Wo) + ", input too small");
    }
    const int Hp = H + 2 * padding, Wp = W + 2 * padding;
    const std::size_t plane = static_cast<std::size_t>(Hp) * Wp;
    const std::size_t in_plane = static_cast<std::size_t>(H) * W;
    // Valid output positions live at y*Wp + x inside a stuffed row of
    // padded width; the garbage margin columns are cropped afterwards.
    const int LW = (Ho - 1) * Wp + Wo;
    const std::size_t stuffed = static_cast<std::size_t>(Ho) * Wp;

    // Per-offset Cout x Cin weight slices, contiguous for the kernels.
    std::vector<T> wk(9 * static_cast<std::size_t>(Cout) * Cin);
    for (int k = 0; k < 9; ++k) {
        T* dst = wk.data() + static_cast<std::size_t>(k) * Cout * Cin;
        for (int co = 0; co < Cout; ++co) {
            for (int ci = 0; ci < Cin; ++ci) {
                dst[static_cast<std::size_t>(co) * Cin + ci] =
                    weight->data[((static_cast<std::size_t>(co) * Cin + ci) * 9) + k];
            }
        }
    }

    auto out = TensorT<T>::create({N, Cout, Ho, Wo});
    {
        std::vector<T> inpad;
        if (padding == 1) {
            inpad.assign(static_cast<std::size_t>(Cin) * plane, T(0));
        }
        std::vector<T> stuff(static_cast<std::size_t>(Cout) * stuffed);
        for (int n = 0; n < N; ++n) {
            const T* in_base = input->data.data() + static_cast<std::size_t>(n) * Cin * in_plane;
            const T* pad_base = in_base;
            std::size_t pad_stride = in_plane;
            if (padding == 1) {
                for (int ci = 0; ci < Cin; ++ci) {
                    for (int y = 0; y < H; ++y) {
                        std::copy_n(in_base + static_cast<std::size_t>(ci) * in_plane + static_cast<std::size_t>(y) * W,
                                    static_cast<std::size_t>(W),
                                    inpad.data() + static_cast<std::size_t>(ci) * plane + static_cast<std::size_t>(y + 1) * Wp + 1);
                    }
                }
                pad_base = inpad.data();
                pad_stride = plane;
            }
            std::fill(stuff.begin(), stuff.end(), T(0));
            for (int k = 0; k < 9; ++k) {
                const int off = (k / 3) * Wp + (k % 3);
                gemm::gemm_nn(Cout, LW, Cin, wk.data() + static_cast<std::size_t>(k) * Cout * Cin,
                              Cin, pad_base + off, static_cast<int>(pad_stride), stuff.data(),
                              static_cast<int>(stuffed));
            }
            T* out_base = out->data.data() + static_cast<std::size_t>(n) * Cout * Ho * Wo;
            for (int co = 0; co < Cout; ++co) {
                const T b = bias->data[static_cast<std::size_t>(co)];
                const T* srow = stuff.data() + static_cast<std::size_t>(co) * stuffed;
                T* drow = out_base + static_cast<std::size_t>(co) * Ho * Wo;
                for (int y = 0; y < Ho; ++y) {
                    const T* s = srow + static_cast<std::size_t>(y) * Wp;
                    T* d = drow + static_cast<std::size_t>(y) * Wo;
                    for (int xo = 0; xo < Wo; ++xo) {
                        d[xo] = s[xo] + b;
                    }
                }
            }
        }
    }

    auto wk_shared = std::make_shared<std::vector<T>>(std::move(wk));
    autodiff_record<T>("conv2d", {input, weight, bias}, out,
                       [input, weight, bias, out, wk_shared, N, Cin, Cout, H, W, Ho, Wo, Hp, Wp,
                        padding, plane, in_plane, LW, stuffed] {
        const T* g = out->grad.data();
        const std::size_t out_plane = static_cast<std::size_t>(Ho) * Wo;
        if (bias->requires_grad) {
            for (int co = 0; co < Cout; ++co) {
                double acc = 0.0;
                for (int n = 0; n < N; ++n) {
                    const T* gp = g + (static_cast<std::size_t>(n) * Cout + co) * out_plane;
                    for (std::size_t i = 0; i < out_plane; ++i) {
                        acc += static_cast<double>(gp[i]);
                    }
                }
                bias->grad[static_cast<std::size_t>(co)] += static_cast<T>(acc);
            }
        }
        const bool need_dx = input->requires_grad;
        const bool need_dw = weight->requires_grad;
        if (!need_dx && !need_dw) {
            return;
        }
        std::vector<T> gstuff(static_cast<std::size_t>(Cout) * stuffed);
        std::vector<T> gstuff_t;
        std::vector<T> dwt;
        if (need_dw) {
            gstuff_t.resize(stuffed * static_cast<std::size_t>(Cout));
            dwt.assign(9 * static_cast<std::size_t>(Cin) * Cout, T(0));
        }
        std::vector<T> inpad;
        if (need_dw && padding == 1) {
            inpad.assign(static_cast<std::size_t>(Cin) * plane, T(0));
        }
        std::vector<T> dinpad;
        if (need_dx) {
            dinpad.resize(static_cast<std::size_t>(Cin) * plane);
        }
        for (int n = 0; n < N; ++n) {
            std::fill(gstuff.begin(), gstuff.end(), T(0));
            for (int co = 0; co < Cout; ++co) {
                const T* gp = g + (static_cast<std::size_t>(n) * Cout + co) * out_plane;
                T* srow = gstuff.data() + static_cast<std::size_t>(co) * stuffed;
                for (int y = 0; y < Ho; ++y) {
                    std::copy_n(gp + static_cast<std::size_t>(y) * Wo, static_cast<std::size_t>(Wo),
                                srow + static_cast<std::size_t>(y) * Wp);
                }
            }
            if (need_dw) {
                const T* in_base = input->data.data() + static_cast<std::size_t>(n) * Cin * in_plane;
                const T* pad_base = in_base;
                std::size_t pad_stride = in_plane;
                if (padding == 1) {
                    for (int ci = 0; ci < Cin; ++ci) {
                        for (int y = 0; y < H; ++y) {
                            std::copy_n(in_base + static_cast<std::size_t>(ci) * in_plane + static_cast<std::size_t>(y) * W,
                                        static_cast<std::size_t>(W),
                                        inpad.data() + static_cast<std::size_t>(ci) * plane + static_cast<std::size_t>(y + 1) * Wp + 1);
                        }
                    }
                    pad_base = inpad.data();
                    pad_stride = plane;
                }
                gemm::transpose_mat(Cout, static_cast<int>(stuffed), gstuff.data(),
                                    static_cast<int>(stuffed), gstuff_t.data(), Cout);
                for (int k = 0; k < 9; ++k) {
                    const int off = (k / 3) * Wp + (k % 3);
                    gemm::gemm_nn(Cin, Cout, LW, pad_base + off, static_cast<int>(pad_stride),
                                  gstuff_t.data(), Cout,
                                  dwt.data() + static_cast<std::size_t>(k) * Cin * Cout, Cout);
                }
            }
            if (need_dx) {
                std::fill(dinpad.begin(), dinpad.end(), T(0));
                for (int k = 0; k < 9; ++k) {
                    const int off = (k / 3) * Wp + (k % 3);
                    gemm::gemm_tn(Cin, LW, Cout,
                                  wk_shared->data() + static_cast<std::size_t>(k) * Cout * Cin, Cin,
                                  gstuff.data(), static_cast<int>(stuffed), dinpad.data() + off,
                                  static_cast<int>(plane));
                }
                T* dx = input->grad.data() + static_cast<std::size_t>(n) * Cin * in_plane;
                for (int ci = 0; ci < Cin; ++ci) {
                    const T* srow = dinpad.data() + static_cast<std::size_t>(ci) * plane;
                    T* drow = dx + static_cast<std::size_t>(ci) * in_plane;
                    for (int y = 0; y < H; ++y) {
                        const T* s = srow + static_cast<std::size_t>(y + padding) * Wp + padding;
                        T* d = drow + static_cast<std::size_t>(y) * W;
                        for (int xo = 0; xo < W; ++xo) {
                            d[xo] += s[xo];
                        }
                    }
                }
            }
        }
        if (need_dw) {
            for (int k = 0; k < 9; ++k) {
                const T* src = dwt.data() + static_cast<std::size_t>(k) * Cin * Cout;
                for (int co = 0; co < Cout; ++co) {
                    for (int ci = 0; ci < Cin; ++ci) {
                        weight->grad[(static_cast<std::size_t>(co) * Cin + ci) * 9 + k] +=
                            src[static_cast<std::size_t>(ci) * Cout + co];
                    }
                }
            }
        }
    });
    return out;
}

inline constexpr double kBnMomentum = 0.1;

// Mutable per-layer statistics live in the running_* tensors; the
// batches-tracked counter gates eval mode until training has run.
template <typename T>
TensorPtr<T> batch_norm(const TensorPtr<T>& x, const TensorPtr<T>& gamma, const TensorPtr<T>& beta,
                        const TensorPtr<T>& running_mean, const TensorPtr<T>& running_var,
                        const TensorPtr<T>& batches_tracked, T eps, bool train) {
    detail::check_rank("batch_norm", x, 4);
    const int N = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
    if (!(eps > T(0))) {
        throw std::invalid_argument("batch_norm: eps must be positive");
    }
    auto check_param = [C](const char* name, const TensorPtr<T>& t) {
        if (t->rank() != 1 || t->dim(0) != C) {
            throw std::invalid_argument(std::string("batch_norm: ") + name + " must be length " +
                                        std::to_string(C) + ", got " + shape_str(t->shape));
        }
    };
    check_param("gamma", gamma);
    check_param("beta", beta);
    check_param("running_mean", running_mean);
    check_param("running_var", running_var);
    const std::size_t m = static_cast<std::size_t>(N) * H * W;
    if (m < 1) {
        throw std::invalid_argument("batch_norm: empty batch");
    }
    const std::size_t sp = static_cast<std::size_t>(H) * W;

    auto mean = std::make_shared<std::vector<T>>(static_cast<std::size_t>(C));
    auto invstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(C));
    if (train) {
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int n = 0; n < N; ++n) {
                const T* p = x->data.data() + (static_cast<std::size_t>(n) * C + c) * sp;
                for (std::size_t i = 0; i < sp; ++i) {
                    s += static_cast<double>(p[i]);
                }
            }
            const double mu = s / static_cast<double>(m);
            double v = 0.0;
            for (int n = 0; n < N; ++n) {
                const T* p = x->data.data() + (static_cast<std::size_t>(n) * C + c) * sp;
                for (std::size_t i = 0; i < sp; ++i) {
                    const double d = static_cast<double>(p[i]) - mu;
                    v += d * d;
                }
            }
            const double var = v / static_cast<double>(m);
            (*mean)[static_cast<std::size_t>(c)] = static_cast<T>(mu);
            (*invstd)[static_cast<std::size_t>(c)] =
                static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            const double unbiased = m > 1 ? v / static_cast<double>(m - 1) : var;
            auto& rm = running_mean->data[static_cast<std::size_t>(c)];
            auto& rv = running_var->data[static_cast<std::size_t>(c)];
            rm = static_cast<T>((1.0 - kBnMomentum) * static_cast<double>(rm) + kBnMomentum * mu);
            rv = static_cast<T>((1.0 - kBnMomentum) * static_cast<double>(rv) + kBnMomentum * unbiased);
        }
        batches_tracked->data[0] += T(1);
    } else {
        if (batches_tracked->data[0] <= T(0)) {
            throw NumericError("batch_norm: eval mode requested before any training batch, running statistics are uninitialized");
        }
        for (int c = 0; c < C; ++c) {
            (*mean)[static_cast<std::size_t>(c)] = running_mean->data[static_cast<std::size_t>(c)];
            (*invstd)[static_cast<std::size_t>(c)] = static_cast<T>(
                1.0 / std::sqrt(static_cast<double>(running_var->data[static_cast<std::size_t>(c)]) +
                                static_cast<double>(eps)));
        }
    }

    auto out = TensorT<T>::create(x->shape);
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const T mu = (*mean)[static_cast<std::size_t>(c)];
            const T is = (*invstd)[static_cast<std::size_t>(c)];
            const T ga = gamma->data[static_cast<std::size_t>(c)];
            const T be = beta->data[static_cast<std::size_t>(c)];
            const T* src = x->data.data() + (static_cast<std::size_t>(n) * C + c) * sp;
            T* dst = out->data.data() + (static_cast<std::size_t>(n) * C + c) * sp;
            for (std::size_t i = 0; i < sp; ++i) {
                dst[i] = (src[i] - mu) * is * ga + be;
            }
        }
    }

    autodiff_record<T>("batch_norm", {x, gamma, beta}, out,
                       [x, gamma, beta, out, mean, invstd, N, C, sp, m, train] {
        for (int c = 0; c < C; ++c) {
            const T mu = (*mean)[static_cast<std::size_t>(c)];
            const T is = (*invstd)[static_cast<std::size_t>(c)];
            const T ga = gamma->data[static_cast<std::size_t>(c)];
            double sum_g = 0.0, sum_gx = 0.0;
            for (int n = 0; n < N; ++n) {
                const T* gp = out->grad.data() + (static_cast<std::size_t>(n) * C + c) * sp;
                const T* xp = x->data.data() + (static_cast<std::size_t>(n) * C + c) * sp;
                for (std::size_t i = 0; i < sp; ++i) {
                    sum_g += static_cast<double>(gp[i]);
                    sum_gx += static_cast<double>(gp[i]) * static_cast<double>((xp[i] - mu) * is);
                }
            }
            if (gamma->requires_grad) {
                gamma->grad[static_cast<std::size_t>(c)] += static_cast<T>(sum_gx);
            }
            if (beta->requires_grad) {
                beta->grad[static_cast<std::size_t>(c)] += static_cast<T>(sum_g);
            }
            if (!x->requires_grad) {
                continue;
            }
            if (train) {
                const T k1 = static_cast<T>(sum_g / static_cast<double>(m));
                const T k2 = static_cast<T>(sum_gx / static_cast<double>(m));
                for (int n = 0; n < N; ++n) {
                    const T* gp = out->grad.data() + (static_cast<std::size_t>(n) * C + c) * sp;
                    const T* xp = x->data.data() + (static_cast<std::size_t>(n) * C + c) * sp;
                    T* dx = x->grad.data() + (static_cast<std::size_t>(n) * C + c) * sp;
                    for (std::size_t i = 0; i < sp; ++i) {
                        const T xhat = (xp[i] - mu) * is;
                        dx[i] += ga * is * (gp[i] - k1 - xhat * k2);
                    }
                }
            } else {
                const T k = ga * is;
                for (int n = 0; n < N; ++n) {
                    const T* gp = out->grad.data() + (static_cast<std::size_t>(n) * C + c) * sp;
                    T* dx = x->grad.data() + (static_cast<std::size_t>(n) * C + c) * sp;
                    for (std::size_t i = 0; i < sp; ++i) {
                        dx[i] += k * gp[i];
                    }
                }
            }
        }
    });
    return out;
}

}  // namespace pabn::ops
