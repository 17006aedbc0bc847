#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pabn/adam.hpp"
#include "pabn/common.hpp"
#include "pabn/gradcheck.hpp"
#include "pabn/ops.hpp"
#include "pabn/tensor.hpp"

namespace pabn {

// Encoder and comparator extents. Four conv blocks with pooling after
// blocks 1 and 2 are fixed; these knobs exist so tests can shrink the
// model without changing its structure.
struct ArchConfig {
    int input_size = 84;
    int in_channels = 3;
    int channels = 64;
    int fc1 = 512;
    int fc2 = 64;

    int feature_size() const {
        if (input_size < 8 || input_size % 4 != 0) {
            throw std::invalid_argument("ArchConfig: input_size must be a multiple of 4 and >= 8, got " +
                                        std::to_string(input_size));
        }
        return input_size / 4;
    }
    int feature_hw() const { return feature_size() * feature_size(); }
    int bilinear_len() const { return channels * channels; }

    void validate() const {
        feature_size();
        if (in_channels < 1 || channels < 1 || fc1 < 1 || fc2 < 1) {
            throw std::invalid_argument("ArchConfig: all extents must be positive");
        }
    }

    bool operator==(const ArchConfig&) const = default;
};

inline constexpr int kEncoderBlocks = 4;

// Channel-major spatial feature; values has shape [c, h*w].
template <typename T>
struct FeatureMapT {
    int c = 0;
    int h = 0;
    int w = 0;
    TensorPtr<T> values;

    int hw() const { return h * w; }
};

using FeatureMap = FeatureMapT<float>;

template <typename T>
struct PabnParamsT {
    ArchConfig arch;
    std::vector<std::pair<std::string, TensorPtr<T>>> named;

    const TensorPtr<T>& get(const std::string& name) const {
        for (const auto& [n, t] : named) {
            if (n == name) {
                return t;
            }
        }
        throw std::invalid_argument("PabnParams: no parameter named " + name);
    }

    // Parameters the optimizer updates; running statistics and the
    // batch counter are state, not weights.
    std::vector<std::pair<std::string, TensorPtr<T>>> trainable() const {
        std::vector<std::pair<std::string, TensorPtr<T>>> out;
        for (const auto& kv : named) {
            if (kv.second->requires_grad) {
                out.push_back(kv);
            }
        }
        return out;
    }

    static PabnParamsT init(const ArchConfig& arch, Rng& rng) {
        arch.validate();
        PabnParamsT p;
        p.arch = arch;
        auto uniform_fill = [&rng](const TensorPtr<T>& t, double bound) {
            for (auto& v : t->data) {
                v = static_cast<T>(uniform_real(rng, -bound, bound));
            }
        };
        for (int b = 1; b <= kEncoderBlocks; ++b) {
            const std::string prefix = "encoder.b" + std::to_string(b) + ".";
            const int cin = b == 1 ? arch.in_channels : arch.channels;
            const double bound = 1.0 / std::sqrt(static_cast<double>(cin) * 9.0);
            auto w = TensorT<T>::create({arch.channels, cin, 3, 3}, true);
            auto bias = TensorT<T>::create({arch.channels}, true);
            uniform_fill(w, bound);
            uniform_fill(bias, bound);
            auto gamma = TensorT<T>::create({arch.channels}, true);
            std::fill(gamma->data.begin(), gamma->data.end(), T(1));
            auto beta = TensorT<T>::create({arch.channels}, true);
            auto rm = TensorT<T>::create({arch.channels});
            auto rv = TensorT<T>::create({arch.channels});
            std::fill(rv->data.begin(), rv->data.end(), T(1));
            auto bt = TensorT<T>::scalar(T(0));
            p.named.emplace_back(prefix + "conv.weight", w);
            p.named.emplace_back(prefix + "conv.bias", bias);
            p.named.emplace_back(prefix + "bn.gamma", gamma);
            p.named.emplace_back(prefix + "bn.beta", beta);
            p.named.emplace_back(prefix + "bn.running_mean", rm);
            p.named.emplace_back(prefix + "bn.running_var", rv);
            p.named.emplace_back(prefix + "bn.batches_tracked", bt);
        }
        const int dims[4] = {arch.bilinear_len(), arch.fc1, arch.fc2, 1};
        for (int l = 0; l < 3; ++l) {
            const std::string prefix = "comparator.fc" + std::to_string(l + 1) + ".";
            const double bound = 1.0 / std::sqrt(static_cast<double>(dims[l]));
            auto w = TensorT<T>::create({dims[l], dims[l + 1]}, true);
            auto bias = TensorT<T>::create({dims[l + 1]}, true);
            uniform_fill(w, bound);
            uniform_fill(bias, bound);
            p.named.emplace_back(prefix + "weight", w);
            p.named.emplace_back(prefix + "bias", bias);
        }
        return p;
    }
};

using PabnParams = PabnParamsT<float>;

template <typename T>
std::vector<FeatureMapT<T>> encode(const TensorPtr<T>& images, const PabnParamsT<T>& params,
                                   bool train) {
    const ArchConfig& a = params.arch;
    if (images->rank() != 4) {
        throw std::invalid_argument("encode: images must be [N,C,H,W], got " +
                                    shape_str(images->shape));
    }
    if (images->dim(1) != a.in_channels) {
        throw std::invalid_argument("encode: expected " + std::to_string(a.in_channels) +
                                    " input channels, got " + std::to_string(images->dim(1)));
    }
    if (images->dim(2) != a.input_size || images->dim(3) != a.input_size) {
        throw std::invalid_argument("encode: expected " + std::to_string(a.input_size) + "x" +
                                    std::to_string(a.input_size) + " inputs, got " +
                                    std::to_string(images->dim(2)) + "x" +
                                    std::to_string(images->dim(3)));
    }
    const int n = images->dim(0);
    if (n < 1) {
        throw std::invalid_argument("encode: empty batch");
    }
    TensorPtr<T> x = images;
    for (int b = 1; b <= kEncoderBlocks; ++b) {
        const std::string prefix = "encoder.b" + std::to_string(b) + ".";
        x = ops::conv2d(x, params.get(prefix + "conv.weight"), params.get(prefix + "conv.bias"), 1);
        x = ops::batch_norm(x, params.get(prefix + "bn.gamma"), params.get(prefix + "bn.beta"),
                            params.get(prefix + "bn.running_mean"),
                            params.get(prefix + "bn.running_var"),
                            params.get(prefix + "bn.batches_tracked"), T(1e-5), train);
        x = ops::relu(x);
        if (b <= 2) {
            x = ops::max_pool2d(x);
        }
    }
    const int fs = a.feature_size();
    std::vector<FeatureMapT<T>> maps;
    maps.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        FeatureMapT<T> m;
        m.c = a.channels;
        m.h = fs;
        m.w = fs;
        m.values = ops::reshape(ops::slice_item(x, i), {a.channels, fs * fs});
        maps.push_back(std::move(m));
    }
    return maps;
}

template <typename T>
FeatureMapT<T> class_feature(const std::vector<FeatureMapT<T>>& support) {
    if (support.empty()) {
        throw std::invalid_argument("class_feature: empty support list");
    }
    const FeatureMapT<T>& first = support.front();
    for (const auto& m : support) {
        if (m.c != first.c || m.h != first.h || m.w != first.w) {
            throw std::invalid_argument("class_feature: support maps disagree in shape");
        }
    }
    if (support.size() == 1) {
        return first;
    }
    FeatureMapT<T> out;
    out.c = first.c;
    out.h = first.h;
    out.w = first.w;
    TensorPtr<T> acc = first.values;
    for (std::size_t i = 1; i < support.size(); ++i) {
        acc = ops::add(acc, support[i].values);
    }
    out.values = acc;
    return out;
}

// Reference single-sample pooling; the pairwise variant below is the
// model path.
template <typename T>
TensorPtr<T> self_bilinear(const FeatureMapT<T>& fa, const FeatureMapT<T>& fb) {
    if (fa.hw() != fb.hw()) {
        throw std::invalid_argument("self_bilinear: spatial extents disagree, " +
                                    std::to_string(fa.hw()) + " vs " + std::to_string(fb.hw()));
    }
    auto prod = ops::matmul(fa.values, ops::transpose(fb.values));
    return ops::scale(prod, T(1) / static_cast<T>(fa.hw()));
}

// Class feature on the left, query on the right; no 1/hw factor, so
// pairwise(x,x) = hw * self(x,x).
template <typename T>
TensorPtr<T> pairwise_bilinear(const FeatureMapT<T>& fa, const FeatureMapT<T>& fb) {
    if (fa.c != fb.c || fa.hw() != fb.hw()) {
        throw std::invalid_argument("pairwise_bilinear: shape mismatch, c " + std::to_string(fa.c) +
                                    " vs " + std::to_string(fb.c) + ", hw " +
                                    std::to_string(fa.hw()) + " vs " + std::to_string(fb.hw()));
    }
    return ops::matmul(fa.values, ops::transpose(fb.values));
}

template <typename T>
TensorPtr<T> normalize_bilinear(const TensorPtr<T>& m) {
    if (m->rank() != 2) {
        throw std::invalid_argument("normalize_bilinear: expected a rank-2 matrix, got " +
                                    shape_str(m->shape));
    }
    auto flat = ops::reshape(m, {m->dim(0) * m->dim(1)});
    return ops::l2_normalize(ops::signed_sqrt(flat), T(1e-12));
}

namespace model_detail {

template <typename T>
void check_same_map(const char* op, const FeatureMapT<T>& a, const FeatureMapT<T>& b) {
    if (a.c != b.c || a.h != b.h || a.w != b.w) {
        throw std::invalid_argument(std::string(op) + ": feature maps disagree, [" +
                                    std::to_string(a.c) + "," + std::to_string(a.h) + "," +
                                    std::to_string(a.w) + "] vs [" + std::to_string(b.c) + "," +
                                    std::to_string(b.h) + "," + std::to_string(b.w) + "]");
    }
}

}  // namespace model_detail

// Mean squared difference of the two embeddings.
template <typename T>
TensorPtr<T> align_loss1(const FeatureMapT<T>& fa, const FeatureMapT<T>& fb) {
    model_detail::check_same_map("align_loss1", fa, fb);
    return ops::mse_mean(fa.values, fb.values);
}

// Channel sums compared position by position; the positional sum is a
// plain sum, not a mean.
template <typename T>
TensorPtr<T> align_loss2(const FeatureMapT<T>& fa, const FeatureMapT<T>& fb) {
    model_detail::check_same_map("align_loss2", fa, fb);
    auto sa = ops::sum_over_axis(fa.values, 0);
    auto sb = ops::sum_over_axis(fb.values, 0);
    auto d = ops::sub(sa, sb);
    return ops::sum_all(ops::mul(d, d));
}

struct AlignMode {
    enum class Kind { none, loss1, loss2 };
    Kind kind = Kind::none;
    double lambda = 0.0;

    static AlignMode make(Kind kind, double lambda) {
        if (lambda < 0.0) {
            throw std::invalid_argument("AlignMode: lambda must be non-negative");
        }
        AlignMode m;
        m.kind = kind;
        m.lambda = kind == Kind::none ? 0.0 : lambda;
        return m;
    }
};

inline AlignMode::Kind align_kind_from_string(const std::string& s) {
    if (s == "none") {
        return AlignMode::Kind::none;
    }
    if (s == "loss1") {
        return AlignMode::Kind::loss1;
    }
    if (s == "loss2") {
        return AlignMode::Kind::loss2;
    }
    throw std::invalid_argument("align mode must be none, loss1 or loss2, got " + s);
}

inline const char* align_kind_to_string(AlignMode::Kind k) {
    switch (k) {
        case AlignMode::Kind::none: return "none";
        case AlignMode::Kind::loss1: return "loss1";
        case AlignMode::Kind::loss2: return "loss2";
    }
    return "none";
}

// Batched comparator over rows of normalized bilinear features.
template <typename T>
TensorPtr<T> compare_rows(const TensorPtr<T>& rows, const PabnParamsT<T>& params) {
    if (rows->rank() != 2 || rows->dim(1) != params.arch.bilinear_len()) {
        throw std::invalid_argument("compare: features must be rows of length " +
                                    std::to_string(params.arch.bilinear_len()) + ", got " +
                                    shape_str(rows->shape));
    }
    auto h1 = ops::relu(ops::add_row_bias(ops::matmul(rows, params.get("comparator.fc1.weight")),
                                          params.get("comparator.fc1.bias")));
    auto h2 = ops::relu(ops::add_row_bias(ops::matmul(h1, params.get("comparator.fc2.weight")),
                                          params.get("comparator.fc2.bias")));
    auto o = ops::add_row_bias(ops::matmul(h2, params.get("comparator.fc3.weight")),
                               params.get("comparator.fc3.bias"));
    return ops::sigmoid(o);
}

template <typename T>
TensorPtr<T> compare(const TensorPtr<T>& v, const PabnParamsT<T>& params) {
    if (v->rank() != 1) {
        throw std::invalid_argument("compare: expected a flat feature, got " + shape_str(v->shape));
    }
    auto rows = ops::reshape(v, {1, v->dim(0)});
    return ops::reshape(compare_rows(rows, params), std::vector<int>{});
}

template <typename T>
struct RelationScoresT {
    TensorPtr<T> values;  // [ways*queries, ways], row q, column c
    int ways = 0;
    int queries_per_class = 0;
};

using RelationScores = RelationScoresT<float>;

// One episode's images in a single batch: support first (class-major, K
// per class), then queries (class-major, Q per class). Batch statistics
// therefore cover the whole episode.
template <typename T>
struct EpisodeBatchT {
    TensorPtr<T> images;
    int ways = 0;
    int shots = 0;
    int queries = 0;
};

using EpisodeBatch = EpisodeBatchT<float>;

template <typename T>
std::pair<RelationScoresT<T>, TensorPtr<T>> episode_forward(const EpisodeBatchT<T>& ep,
                                                            const PabnParamsT<T>& params,
                                                            const AlignMode& align, bool train) {
    if (ep.ways < 2 || ep.shots < 1 || ep.queries < 1) {
        throw std::invalid_argument("episode_forward: need ways >= 2, shots >= 1, queries >= 1");
    }
    const int total = ep.ways * (ep.shots + ep.queries);
    if (!ep.images || ep.images->rank() != 4 || ep.images->dim(0) != total) {
        throw std::invalid_argument("episode_forward: episode of " + std::to_string(ep.ways) +
                                    "x(" + std::to_string(ep.shots) + "+" +
                                    std::to_string(ep.queries) + ") needs " + std::to_string(total) +
                                    " images, got " +
                                    (ep.images ? shape_str(ep.images->shape) : std::string("null")));
    }
    auto maps = encode(ep.images, params, train);

    std::vector<FeatureMapT<T>> class_feats;
    class_feats.reserve(static_cast<std::size_t>(ep.ways));
    for (int c = 0; c < ep.ways; ++c) {
        std::vector<FeatureMapT<T>> support(maps.begin() + static_cast<std::ptrdiff_t>(c) * ep.shots,
                                            maps.begin() + static_cast<std::ptrdiff_t>(c + 1) * ep.shots);
        class_feats.push_back(class_feature(support));
    }
    const int n_query = ep.ways * ep.queries;
    const FeatureMapT<T>* queries = maps.data() + static_cast<std::ptrdiff_t>(ep.ways) * ep.shots;

    std::vector<TensorPtr<T>> rows;
    rows.reserve(static_cast<std::size_t>(n_query) * ep.ways);
    for (int q = 0; q < n_query; ++q) {
        // One transpose per query, shared across the class-side matmuls.
        auto qt = ops::transpose(queries[q].values);
        for (int c = 0; c < ep.ways; ++c) {
            auto pooled = ops::matmul(class_feats[static_cast<std::size_t>(c)].values, qt);
            rows.push_back(normalize_bilinear(pooled));
        }
    }
    auto scores = ops::reshape(compare_rows(ops::stack_rows(rows), params), {n_query, ep.ways});

    TensorPtr<T> penalty;
    if (align.kind == AlignMode::Kind::none) {
        penalty = TensorT<T>::scalar(T(0));
    } else {
        TensorPtr<T> acc;
        for (int q = 0; q < n_query; ++q) {
            for (int c = 0; c < ep.ways; ++c) {
                auto term = align.kind == AlignMode::Kind::loss1
                                ? align_loss1(class_feats[static_cast<std::size_t>(c)], queries[q])
                                : align_loss2(class_feats[static_cast<std::size_t>(c)], queries[q]);
                acc = acc ? ops::add(acc, term) : term;
            }
        }
        penalty = ops::scale(acc, T(1) / static_cast<T>(n_query * ep.ways));
    }

    RelationScoresT<T> rs;
    rs.values = scores;
    rs.ways = ep.ways;
    rs.queries_per_class = ep.queries;
    return {rs, penalty};
}

// True class per query under the episode's canonical ordering.
inline std::vector<int> episode_labels(int ways, int queries_per_class) {
    std::vector<int> labels(static_cast<std::size_t>(ways) * queries_per_class);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        labels[i] = static_cast<int>(i) / queries_per_class;
    }
    return labels;
}

template <typename T>
TensorPtr<T> episode_loss(const RelationScoresT<T>& scores, const std::vector<int>& labels,
                          const TensorPtr<T>& align_penalty, double lambda) {
    const int rows = scores.ways * scores.queries_per_class;
    if (!scores.values || scores.values->rank() != 2 || scores.values->dim(0) != rows ||
        scores.values->dim(1) != scores.ways) {
        throw std::invalid_argument("episode_loss: malformed scores");
    }
    if (static_cast<int>(labels.size()) != rows) {
        throw std::invalid_argument("episode_loss: " + std::to_string(labels.size()) +
                                    " labels for " + std::to_string(rows) + " queries");
    }
    auto target = TensorT<T>::create({rows, scores.ways});
    for (int q = 0; q < rows; ++q) {
        const int c = labels[static_cast<std::size_t>(q)];
        if (c < 0 || c >= scores.ways) {
            throw std::invalid_argument("episode_loss: label " + std::to_string(c) +
                                        " outside 0.." + std::to_string(scores.ways - 1));
        }
        target->data[static_cast<std::size_t>(q) * scores.ways + c] = T(1);
    }
    auto relation = ops::mse_mean(scores.values, target);
    if (lambda < 0.0) {
        throw std::invalid_argument("episode_loss: lambda must be non-negative");
    }
    return ops::add(relation, ops::scale(align_penalty, static_cast<T>(lambda)));
}

// Whole-model gradient check on a shrunken architecture, 64-bit, one
// 2-way-1-shot episode with 8x8 inputs. Returns the worst relative
// error across the three alignment modes.
inline double model_gradcheck(std::uint64_t seed) {
    ArchConfig arch;
    arch.input_size = 8;
    arch.in_channels = 3;
    arch.channels = 4;
    arch.fc1 = 8;
    arch.fc2 = 4;
    Rng rng(seed);
    auto params = PabnParamsT<double>::init(arch, rng);

    EpisodeBatchT<double> ep;
    ep.ways = 2;
    ep.shots = 1;
    ep.queries = 1;
    ep.images = TensorT<double>::create({4, 3, 8, 8});
    for (auto& v : ep.images->data) {
        v = uniform_real(rng, 0.0, 1.0);
    }
    const auto labels = episode_labels(ep.ways, ep.queries);

    double worst = 0.0;
    for (const auto kind :
         {AlignMode::Kind::none, AlignMode::Kind::loss1, AlignMode::Kind::loss2}) {
        const AlignMode align = AlignMode::make(kind, kind == AlignMode::Kind::none ? 0.0 : 0.5);
        auto trainable = params.trainable();
        std::vector<DTensor> inputs;
        for (auto& [name, t] : trainable) {
            inputs.push_back(t);
        }
        // Step 1e-4 keeps the central-difference stencil clear of relu
        // kinks and pool near-ties that batch_norm parks around zero.
        const double err = grad_check(
            [&](const std::vector<DTensor>&) {
                auto [scores, penalty] = episode_forward(ep, params, align, true);
                return episode_loss(scores, labels, penalty, align.lambda);
            },
            inputs, 1e-4);
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace pabn
