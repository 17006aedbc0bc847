// Acceptance harness: one line per criterion, exit 0 only if all pass.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pabn/data.hpp"
#include "pabn/gradcheck.hpp"
#include "pabn/model.hpp"
#include "pabn/train.hpp"

using namespace pabn;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr double kPrimitiveTol = 1e-4;
constexpr double kModelTol = 1e-3;
constexpr double kGradcheckBudgetSec = 120.0;
constexpr double kPairwiseElemTol = 1e-5;
constexpr double kSymmetryTol = 1e-6;
constexpr double kEigFloor = -1e-4;
constexpr double kLoss1Tol = 1e-7;
constexpr double kChanceLo = 0.16;
constexpr double kChanceHi = 0.24;
constexpr double kStatsTol = 1e-3;
constexpr double kHalvingLo = 1.7;
constexpr double kHalvingHi = 2.3;
constexpr double kLoss2Floor = 0.90;
constexpr double kAllVariantFloor = 0.60;

// Learnability run configuration. Lambdas keep the alignment gradients
// from drowning the relation loss early on; the raw loss2 penalty sits
// near 1e4 at init, loss1 near 1.
constexpr int kTrainEpisodes = 450;
constexpr int kTrainQueries = 5;
constexpr double kLambdaLoss1 = 0.01;
constexpr double kLambdaLoss2 = 1e-7;
constexpr int kEvalEpisodes = 200;
constexpr std::uint64_t kTrainSeed = 1;
constexpr std::uint64_t kEvalSeed = 99;

int g_pass = 0;
int g_fail = 0;

void report(int criterion, bool ok, const std::string& detail) {
    std::printf("criterion %d: %s  %s\n", criterion, ok ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    (ok ? g_pass : g_fail) += 1;
}

std::string fmt(const char* pattern, double a, double b = 0.0, double c = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), pattern, a, b, c);
    return buf;
}

double now_sec() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

FeatureMap random_map(int c, int h, int w, Rng& rng) {
    FeatureMap m;
    m.c = c;
    m.h = h;
    m.w = w;
    m.values = Tensor::create({c, h * w});
    for (auto& v : m.values->data) {
        v = static_cast<float>(uniform_real(rng, -1.0, 1.0));
    }
    return m;
}

// Smallest eigenvalue of a symmetric matrix by cyclic Jacobi sweeps.
double jacobi_min_eig(std::vector<double> a, int n) {
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) {
                off += std::abs(a[static_cast<std::size_t>(p) * n + q]);
            }
        }
        if (off < 1e-13) {
            break;
        }
        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = a[static_cast<std::size_t>(p) * n + q];
                if (std::abs(apq) < 1e-15) {
                    continue;
                }
                const double app = a[static_cast<std::size_t>(p) * n + p];
                const double aqq = a[static_cast<std::size_t>(q) * n + q];
                const double theta = 0.5 * std::atan2(2.0 * apq, aqq - app);
                const double co = std::cos(theta), si = std::sin(theta);
                for (int k = 0; k < n; ++k) {
                    const double akp = a[static_cast<std::size_t>(k) * n + p];
                    const double akq = a[static_cast<std::size_t>(k) * n + q];
                    a[static_cast<std::size_t>(k) * n + p] = co * akp - si * akq;
                    a[static_cast<std::size_t>(k) * n + q] = si * akp + co * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a[static_cast<std::size_t>(p) * n + k];
                    const double aqk = a[static_cast<std::size_t>(q) * n + k];
                    a[static_cast<std::size_t>(p) * n + k] = co * apk - si * aqk;
                    a[static_cast<std::size_t>(q) * n + k] = si * apk + co * aqk;
                }
            }
        }
    }
    double mn = a[0];
    for (int i = 1; i < n; ++i) {
        mn = std::min(mn, a[static_cast<std::size_t>(i) * n + i]);
    }
    return mn;
}

// 1. Gradient correctness within the runtime budget.
void criterion_gradients() {
    const double t0 = now_sec();
    double worst_primitive = 0.0;
    std::string worst_name;
    bool ok = true;
    for (const auto& check : primitive_gradchecks()) {
        const double err = primitive_gradcheck_worst(check, 1);
        if (err > worst_primitive) {
            worst_primitive = err;
            worst_name = check.op;
        }
        ok = ok && err < kPrimitiveTol;
    }
    const double model_err = model_gradcheck(7);
    ok = ok && model_err < kModelTol;
    const double elapsed = now_sec() - t0;
    ok = ok && elapsed < kGradcheckBudgetSec;
    report(1, ok,
           "primitives worst " + fmt("%.3g", worst_primitive) + " (" + worst_name + "), model " +
               fmt("%.3g, %.0fs", model_err, elapsed));
}

// 2. pairwise(x,x) == hw*self(x,x), symmetric, PSD up to tolerance.
void criterion_pooling() {
    Rng rng(42);
    double worst_elem = 0.0, worst_sym = 0.0, worst_eig = 1.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int c = 1 + static_cast<int>(uniform_below(rng, 8));
        const int h = 1 + static_cast<int>(uniform_below(rng, 5));
        const int w = 1 + static_cast<int>(uniform_below(rng, 5));
        Graph graph;
        Graph::Scope scope(graph);
        auto x = random_map(c, h, w, rng);
        auto pw = pairwise_bilinear(x, x);
        auto sb = self_bilinear(x, x);
        const double hw = h * w;
        std::vector<double> sym(static_cast<std::size_t>(c) * c);
        for (int i = 0; i < c; ++i) {
            for (int j = 0; j < c; ++j) {
                const std::size_t ij = static_cast<std::size_t>(i) * c + j;
                const std::size_t ji = static_cast<std::size_t>(j) * c + i;
                const double ref = hw * sb->data[ij];
                const double diff = std::abs(pw->data[ij] - ref) / std::max(1.0, std::abs(ref));
                worst_elem = std::max(worst_elem, diff);
                worst_sym = std::max(
                    worst_sym, static_cast<double>(std::abs(pw->data[ij] - pw->data[ji])));
                sym[ij] = 0.5 * (pw->data[ij] + pw->data[ji]);
            }
        }
        worst_eig = std::min(worst_eig, jacobi_min_eig(sym, c));
    }
    const bool ok =
        worst_elem < kPairwiseElemTol && worst_sym < kSymmetryTol && worst_eig >= kEigFloor;
    report(2, ok,
           fmt("elem %.3g, asym %.3g, min eig %.3g over 100 maps", worst_elem, worst_sym,
               worst_eig));
}

// 3. Alignment-loss identities and the worked 52 value.
void criterion_alignment() {
    Rng rng(7);
    bool ok = true;
    double worst_self = 0.0, worst_sym = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int c = 1 + static_cast<int>(uniform_below(rng, 6));
        const int h = 1 + static_cast<int>(uniform_below(rng, 4));
        const int w = 1 + static_cast<int>(uniform_below(rng, 4));
        Graph graph;
        Graph::Scope scope(graph);
        auto a = random_map(c, h, w, rng);
        auto b = random_map(c, h, w, rng);
        worst_self =
            std::max(worst_self, static_cast<double>(std::abs(align_loss1(a, a)->data[0])));
        worst_sym = std::max(worst_sym,
                             static_cast<double>(std::abs(align_loss1(a, b)->data[0] -
                                                          align_loss1(b, a)->data[0])));
    }
    ok = ok && worst_self <= kLoss1Tol && worst_sym <= kLoss1Tol;

    // Channel permutations leave loss2 bitwise unchanged.
    for (int trial = 0; trial < 50; ++trial) {
        const int c = 16, h = 3, w = 4;
        Graph graph;
        Graph::Scope scope(graph);
        auto a = random_map(c, h, w, rng);
        auto b = random_map(c, h, w, rng);
        const float base = align_loss2(a, b)->data[0];
        std::vector<int> perm(c);
        for (int i = 0; i < c; ++i) {
            perm[static_cast<std::size_t>(i)] = i;
        }
        shuffle_inplace(perm, rng);
        auto pa = random_map(c, h, w, rng);
        auto pb = random_map(c, h, w, rng);
        for (int i = 0; i < c; ++i) {
            for (int p = 0; p < h * w; ++p) {
                const std::size_t src = static_cast<std::size_t>(i) * (h * w) + p;
                const std::size_t dst =
                    static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]) * (h * w) + p;
                pa.values->data[dst] = a.values->data[src];
                pb.values->data[dst] = b.values->data[src];
            }
        }
        ok = ok && align_loss2(pa, b)->data[0] == base;
        ok = ok && align_loss2(a, pb)->data[0] == base;
    }

    FeatureMap fa;
    fa.c = 2;
    fa.h = 1;
    fa.w = 2;
    fa.values = Tensor::from_data({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
    FeatureMap fb = fa;
    fb.values = Tensor::from_data({2, 2}, {0.0f, 0.0f, 0.0f, 0.0f});
    Graph graph;
    Graph::Scope scope(graph);
    const float worked = align_loss2(fa, fb)->data[0];
    ok = ok && worked == 52.0f;
    report(3, ok,
           fmt("loss1 self %.3g, asym %.3g, ", worst_self, worst_sym) + "loss2 worked value " +
               fmt("%g", worked));
}

// 4. Episode sizes and support/query disjointness.
void criterion_episodes(const DatasetIndex& index) {
    Rng rng(5);
    bool ok = true;
    auto one_shot = sample_episode(index, EpisodeSpec{5, 1, 15}, rng);
    auto five_shot = sample_episode(index, EpisodeSpec{5, 5, 15}, rng);
    const std::size_t n1 = one_shot.support.size() + one_shot.query.size();
    const std::size_t n5 = five_shot.support.size() + five_shot.query.size();
    ok = ok && n1 == 80 && n5 == 100;

    int clashes = 0;
    for (int e = 0; e < 1000; ++e) {
        auto ep = sample_episode(index, EpisodeSpec{5, 1, 15}, rng);
        std::vector<std::string> ids;
        for (const auto& r : ep.support) {
            ids.push_back(r.id);
        }
        for (const auto& r : ep.query) {
            ids.push_back(r.id);
        }
        std::sort(ids.begin(), ids.end());
        clashes += static_cast<int>(ids.size() -
                                    static_cast<std::size_t>(std::distance(
                                        ids.begin(), std::unique(ids.begin(), ids.end()))));
    }
    ok = ok && clashes == 0;
    report(4, ok,
           fmt("sizes %.0f/%.0f, ", static_cast<double>(n1), static_cast<double>(n5)) +
               fmt("%.0f repeats in 1000 episodes", static_cast<double>(clashes)));
}

// 5. Zero comparator scores everything 0.5; accuracy sits at chance.
void criterion_chance(const DatasetIndex& index) {
    Rng init_rng(5);
    auto params = PabnParams::init(ArchConfig{}, init_rng);
    for (const char* name : {"comparator.fc1.weight", "comparator.fc1.bias",
                             "comparator.fc2.weight", "comparator.fc2.bias",
                             "comparator.fc3.weight", "comparator.fc3.bias"}) {
        auto& t = params.get(name);
        std::fill(t->data.begin(), t->data.end(), 0.0f);
    }
    const EpisodeSpec spec{5, 1, 1};
    warmup_batch_norm(params, index, spec, 77);
    auto rep = evaluate(params, index, spec, 1000, 31);
    const bool ok = rep.mean >= kChanceLo && rep.mean <= kChanceHi;
    report(5, ok, fmt("mean %.4f over 1000 episodes (bounds %.2f..%.2f)", rep.mean, kChanceLo,
                      kChanceHi));
}

// 6. All three variants learn the held-out synthetic task.
void criterion_learnability(const DatasetIndex& aux, const DatasetIndex& target) {
    struct Variant {
        const char* label;
        AlignMode::Kind kind;
        double lambda;
        double mean = 0.0;
        double half_width = 0.0;
    };
    std::vector<Variant> variants = {
        {"PABN_w/o", AlignMode::Kind::none, 0.0},
        {"PABN_loss1", AlignMode::Kind::loss1, kLambdaLoss1},
        {"PABN_loss2", AlignMode::Kind::loss2, kLambdaLoss2},
    };

    const double t0 = now_sec();
    for (auto& v : variants) {
        TrainConfig cfg;
        cfg.spec = EpisodeSpec{5, 1, kTrainQueries};
        cfg.align = AlignMode::make(v.kind, v.lambda);
        cfg.n_training_episodes = kTrainEpisodes;
        cfg.seed = kTrainSeed;
        cfg.log_interval = 1000000;
        auto result = train(cfg, aux);
        auto rep = evaluate(result.checkpoint.params, target, EpisodeSpec{5, 1, 15},
                            kEvalEpisodes, kEvalSeed);
        v.mean = rep.mean;
        v.half_width = rep.half_width_95;
    }
    const double minutes = (now_sec() - t0) / 60.0;

    std::printf("\n  5-way-1-shot, %d eval episodes, %d training episodes per variant\n",
                kEvalEpisodes, kTrainEpisodes);
    std::printf("  %-12s %s\n", "variant", "accuracy");
    for (const auto& v : variants) {
        std::printf("  %-12s %s\n", v.label,
                    format_percent_ci(v.mean, v.half_width).c_str());
    }
    std::printf("\n");

    bool ok = variants[2].mean >= kLoss2Floor;
    for (const auto& v : variants) {
        ok = ok && v.mean > kAllVariantFloor;
    }
    report(6, ok,
           fmt("loss2 %.4f (floor %.2f), ", variants[2].mean, kLoss2Floor) +
               fmt("weakest %.4f (floor %.2f), %.1f min",
                   std::min({variants[0].mean, variants[1].mean, variants[2].mean}),
                   kAllVariantFloor, minutes));
}

// 7. Interval formula on [0,1] and the 1/sqrt(n) halving law.
void criterion_statistics(const DatasetIndex& index) {
    auto s = summarize({0.0, 1.0});
    bool ok = std::abs(s.mean - 0.5) <= kStatsTol && std::abs(s.half_width_95 - 0.98) <= kStatsTol;

    Rng init_rng(3);
    auto params = PabnParams::init(ArchConfig{}, init_rng);
    const EpisodeSpec spec{2, 1, 5};
    warmup_batch_norm(params, index, spec, 123);
    auto small = evaluate(params, index, spec, 300, 11);
    auto large = evaluate(params, index, spec, 1200, 11);
    const double ratio = large.half_width_95 > 0.0
                             ? small.half_width_95 / large.half_width_95
                             : 0.0;
    ok = ok && ratio >= kHalvingLo && ratio <= kHalvingHi;
    report(7, ok,
           fmt("[0,1] -> %.3f±%.3f, ", s.mean, s.half_width_95) +
               fmt("n->4n half-width ratio %.2f", ratio));
}

// 8. Bitwise reproducibility of checkpoints and evaluations.
void criterion_reproducibility(const DatasetIndex& index, const fs::path& scratch) {
    auto run_once = [&]() {
        TrainConfig cfg;
        cfg.spec = EpisodeSpec{2, 1, 2};
        cfg.align = AlignMode::make(AlignMode::Kind::loss1, 0.01);
        cfg.n_training_episodes = 5;
        cfg.seed = 3;
        cfg.log_interval = 1000000;
        return train(cfg, index);
    };
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in),
                           std::istreambuf_iterator<char>());
    };

    auto r1 = run_once();
    auto r2 = run_once();
    const fs::path p1 = scratch / "rep_a.bin";
    const fs::path p2 = scratch / "rep_b.bin";
    save_checkpoint(r1.checkpoint, p1.string());
    save_checkpoint(r2.checkpoint, p2.string());
    bool ok = slurp(p1) == slurp(p2);

    auto e1 = evaluate(r1.checkpoint.params, index, EpisodeSpec{2, 1, 2}, 10, 17);
    auto e2 = evaluate(r2.checkpoint.params, index, EpisodeSpec{2, 1, 2}, 10, 17);
    ok = ok && e1.accuracies == e2.accuracies && e1.mean == e2.mean &&
         e1.half_width_95 == e2.half_width_95;

    auto loaded = load_checkpoint(p1.string());
    const fs::path p3 = scratch / "rep_c.bin";
    save_checkpoint(loaded, p3.string());
    ok = ok && slurp(p1) == slurp(p3);
    auto e3 = evaluate(loaded.params, index, EpisodeSpec{2, 1, 2}, 10, 17);
    ok = ok && e1.accuracies == e3.accuracies;
    report(8, ok, "checkpoint bytes, eval report and round-trip compared bitwise");
}

}  // namespace

int main() {
    const fs::path scratch = fs::temp_directory_path() / "pabn_acceptance";
    fs::remove_all(scratch);
    fs::create_directories(scratch);

    const fs::path ds = scratch / "dataset";
    SynthSpec synth;
    synth.n_classes = 40;
    synth.n_images_per_class = 40;
    synth.seed = 7;
    generate_synthetic(synth, ds.string());
    auto index = load_dataset(ds.string());
    SplitConfig split_cfg;
    split_cfg.n_auxiliary = 30;
    split_cfg.n_target = 10;
    split_cfg.seed = 7;
    auto [aux, target] = split_classes(index, split_cfg);

    criterion_gradients();
    criterion_pooling();
    criterion_alignment();
    criterion_episodes(index);
    criterion_chance(index);
    criterion_learnability(aux, target);
    criterion_statistics(index);
    criterion_reproducibility(aux, scratch);

    std::printf("%d/%d criteria passed\n", g_pass, g_pass + g_fail);
    fs::remove_all(scratch);
    return g_fail == 0 ? 0 : 1;
}
