#include "pabn/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "pabn/image.hpp"

namespace fs = std::filesystem;

namespace pabn {

DatasetIndex load_dataset(const std::string& root) {
    std::error_code ec;
    if (!fs::is_directory(root, ec)) {
        throw DataError(root + ": not a directory");
    }

    std::vector<std::string> class_names;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (entry.is_directory()) {
            class_names.push_back(entry.path().filename().string());
        }
    }
    std::sort(class_names.begin(), class_names.end());

    DatasetIndex index;
    for (const auto& name : class_names) {
        std::vector<std::string> files;
        for (const auto& entry : fs::directory_iterator(fs::path(root) / name)) {
            if (entry.is_regular_file() && entry.path().extension() == ".ppm") {
                files.push_back(entry.path().filename().string());
            }
        }
        if (files.empty()) {
            std::fprintf(stderr, "warning: class '%s' has no images, excluded\n", name.c_str());
            continue;
        }
        std::sort(files.begin(), files.end());

        ClassEntry cls;
        cls.name = name;
        for (const auto& file : files) {
            ImageRef ref;
            ref.path = (fs::path(root) / name / file).string();
            ref.id = name + "/" + file;
            std::tie(ref.w, ref.h) = read_ppm_header(ref.path);
            cls.images.push_back(std::move(ref));
        }
        index.classes.push_back(std::move(cls));
    }
    return index;
}

std::pair<DatasetIndex, DatasetIndex> split_classes(const DatasetIndex& index,
                                                    const SplitConfig& cfg) {
    std::vector<std::string> aux_names, target_names;

    if (!cfg.auxiliary_names.empty() || !cfg.target_names.empty()) {
        aux_names = cfg.auxiliary_names;
        target_names = cfg.target_names;
        for (const auto& name : aux_names) {
            if (std::find(target_names.begin(), target_names.end(), name) !=
                target_names.end()) {
                throw DataError("split: class '" + name + "' listed on both sides");
            }
        }
    } else {
        const int total = static_cast<int>(index.classes.size());
        if (cfg.n_auxiliary < 1 || cfg.n_target < 1 ||
            cfg.n_auxiliary + cfg.n_target > total) {
            throw DataError("split: counts " + std::to_string(cfg.n_auxiliary) + "+" +
                            std::to_string(cfg.n_target) + " infeasible for " +
                            std::to_string(total) + " classes");
        }
        std::vector<std::string> names;
        names.reserve(index.classes.size());
        for (const auto& c : index.classes) {
            names.push_back(c.name);
        }
        Rng rng(cfg.seed);
        shuffle_inplace(names, rng);
        aux_names.assign(names.begin(), names.begin() + cfg.n_auxiliary);
        target_names.assign(names.begin() + cfg.n_auxiliary,
                            names.begin() + cfg.n_auxiliary + cfg.n_target);
    }

    auto build = [&](std::vector<std::string> names) {
        std::sort(names.begin(), names.end());
        DatasetIndex out;
        for (const auto& name : names) {
            auto it = std::find_if(index.classes.begin(), index.classes.end(),
                                   [&](const ClassEntry& c) { return c.name == name; });
            if (it == index.classes.end()) {
                throw DataError("split: class '" + name + "' not in dataset");
            }
            out.classes.push_back(*it);
        }
        return out;
    };
    return {build(aux_names), build(target_names)};
}

Episode sample_episode(const DatasetIndex& index, const EpisodeSpec& spec, Rng& rng) {
    spec.validate();
    const int n_classes = static_cast<int>(index.classes.size());
    if (n_classes < spec.ways) {
        throw DataError("episode needs " + std::to_string(spec.ways) + " classes, dataset has " +
                        std::to_string(n_classes));
    }
    const int per_class = spec.shots + spec.queries;
    for (const auto& c : index.classes) {
        if (static_cast<int>(c.images.size()) < per_class) {
            throw DataError("episode needs " + std::to_string(per_class) + " images per class, '" +
                            c.name + "' has " + std::to_string(c.images.size()));
        }
    }

    // Partial Fisher-Yates: the first `ways` slots are a uniform draw
    // without replacement.
    std::vector<int> class_idx(static_cast<std::size_t>(n_classes));
    for (int i = 0; i < n_classes; ++i) {
        class_idx[static_cast<std::size_t>(i)] = i;
    }
    for (int i = 0; i < spec.ways; ++i) {
        const auto j = i + uniform_below(rng, static_cast<std::uint64_t>(n_classes - i));
        std::swap(class_idx[static_cast<std::size_t>(i)], class_idx[j]);
    }

    Episode ep;
    ep.spec = spec;
    for (int c = 0; c < spec.ways; ++c) {
        const ClassEntry& cls = index.classes[static_cast<std::size_t>(class_idx[c])];
        ep.class_names.push_back(cls.name);

        const int m = static_cast<int>(cls.images.size());
        std::vector<int> img_idx(static_cast<std::size_t>(m));
        for (int i = 0; i < m; ++i) {
            img_idx[static_cast<std::size_t>(i)] = i;
        }
        for (int i = 0; i < per_class; ++i) {
            const auto j = i + uniform_below(rng, static_cast<std::uint64_t>(m - i));
            std::swap(img_idx[static_cast<std::size_t>(i)], img_idx[j]);
        }
        for (int i = 0; i < spec.shots; ++i) {
            ep.support.push_back(cls.images[static_cast<std::size_t>(img_idx[i])]);
        }
        for (int i = 0; i < spec.queries; ++i) {
            ep.query.push_back(cls.images[static_cast<std::size_t>(img_idx[spec.shots + i])]);
        }
    }
    return ep;
}

TensorPtr<float> decode_and_resize(const ImageRef& ref, int out_size) {
    return decode_to_tensor(read_ppm(ref.path), out_size);
}

EpisodeBatch episode_to_batch(const Episode& ep, int out_size) {
    EpisodeBatch batch;
    batch.ways = ep.spec.ways;
    batch.shots = ep.spec.shots;
    batch.queries = ep.spec.queries;
    const int n = ep.spec.n_images();
    batch.images = Tensor::create({n, 3, out_size, out_size});
    const std::size_t stride = static_cast<std::size_t>(3) * out_size * out_size;

    std::size_t slot = 0;
    for (const auto* group : {&ep.support, &ep.query}) {
        for (const auto& ref : *group) {
            auto img = decode_and_resize(ref, out_size);
            std::copy(img->data.begin(), img->data.end(),
                      batch.images->data.begin() + static_cast<std::ptrdiff_t>(slot * stride));
            ++slot;
        }
    }
    return batch;
}

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kFreqs[] = {2.0, 3.0, 4.5, 6.5, 9.0, 13.0, 18.0};
constexpr int kOrients = 6;
constexpr int kSlots = 8;
constexpr int kTints = 5;
constexpr int kSize = 84;

struct ClassAttrs {
    double freq;
    double theta;
    int slot;
    int tint;
};

ClassAttrs decode_attrs(int combo) {
    ClassAttrs a;
    a.tint = combo % kTints;
    combo /= kTints;
    a.slot = combo % kSlots;
    combo /= kSlots;
    const int orient = combo % kOrients;
    combo /= kOrients;
    a.freq = kFreqs[combo % 7];
    a.theta = orient * (kPi / kOrients);
    return a;
}

Image render_image(const ClassAttrs& a, Rng& rng) {
    const double dx = uniform_real(rng, -3.0, 3.0);
    const double dy = uniform_real(rng, -3.0, 3.0);
    const double scl = uniform_real(rng, 0.92, 1.08);
    const double phase = uniform_real(rng, 0.0, 2.0 * kPi);
    const double mjx = uniform_real(rng, -1.0, 1.0);
    const double mjy = uniform_real(rng, -1.0, 1.0);

    const double cx = kSize / 2.0 + dx;
    const double cy = kSize / 2.0 + dy;
    const double radius = 28.0 * scl;
    const double ct = std::cos(a.theta), st = std::sin(a.theta);
    const double mx = cx + 0.6 * radius * std::cos(a.slot * (2.0 * kPi / kSlots)) + mjx;
    const double my = cy + 0.6 * radius * std::sin(a.slot * (2.0 * kPi / kSlots)) + mjy;
    const double hue = a.tint * (2.0 * kPi / kTints);
    const double gain[3] = {1.0 + 0.05 * std::cos(hue), 1.0 + 0.05 * std::cos(hue - 2.0 * kPi / 3.0),
                            1.0 + 0.05 * std::cos(hue + 2.0 * kPi / 3.0)};

    Image img;
    img.w = kSize;
    img.h = kSize;
    img.rgb.resize(static_cast<std::size_t>(3) * kSize * kSize);
    for (int y = 0; y < kSize; ++y) {
        for (int x = 0; x < kSize; ++x) {
            const double u = (x - cx) / radius;
            const double v = (y - cy) / radius;
            const double r2 = u * u + v * v;
            const double stripe =
                0.55 + 0.18 * std::sin(a.freq * (u * ct + v * st) * kPi + phase);
            const double alpha = std::min(std::max((1.0 - r2) * 8.0, 0.0), 1.0);
            double val = 0.25 + (stripe - 0.25) * alpha;
            const double md2 = (x - mx) * (x - mx) + (y - my) * (y - my);
            val += 0.3 * std::exp(-md2 / 8.0);
            const double noise = 0.03 * normal_real(rng);
            auto* px = &img.rgb[3 * (static_cast<std::size_t>(y) * kSize + x)];
            for (int c = 0; c < 3; ++c) {
                const double out = std::min(std::max(val * gain[c] + noise, 0.0), 1.0);
                px[c] = static_cast<std::uint8_t>(std::lround(out * 255.0));
            }
        }
    }
    return img;
}

}  // namespace

void generate_synthetic(const SynthSpec& spec, const std::string& out_path) {
    if (spec.n_classes < 10 || spec.n_images_per_class < 20) {
        throw std::invalid_argument("generate_synthetic: need at least 10 classes and 20 images per class");
    }
    constexpr int kCombos = 7 * kOrients * kSlots * kTints;
    if (spec.n_classes > kCombos) {
        throw std::invalid_argument("generate_synthetic: at most " + std::to_string(kCombos) +
                                    " classes");
    }
    std::error_code ec;
    fs::create_directories(out_path, ec);
    if (ec || !fs::is_directory(out_path)) {
        throw DataError(out_path + ": cannot create output directory");
    }

    // Each class draws a distinct attribute combination; the shuffle
    // decorrelates class id from any single attribute.
    std::vector<int> combos(kCombos);
    for (int i = 0; i < kCombos; ++i) {
        combos[static_cast<std::size_t>(i)] = i;
    }
    Rng attr_rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
    shuffle_inplace(combos, attr_rng);

    Rng rng(spec.seed);
    char name[32];
    for (int k = 0; k < spec.n_classes; ++k) {
        const ClassAttrs attrs = decode_attrs(combos[static_cast<std::size_t>(k)]);
        std::snprintf(name, sizeof(name), "class_%04d", k);
        const fs::path dir = fs::path(out_path) / name;
        fs::create_directories(dir, ec);
        if (ec) {
            throw DataError(dir.string() + ": cannot create class directory");
        }
        for (int i = 0; i < spec.n_images_per_class; ++i) {
            char file[32];
            std::snprintf(file, sizeof(file), "img_%04d.ppm", i);
            write_ppm((dir / file).string(), render_image(attrs, rng));
        }
    }

    nlohmann::json manifest{{"generator", "striped-disk"},
                            {"version", 1},
                            {"n_classes", spec.n_classes},
                            {"n_images_per_class", spec.n_images_per_class},
                            {"seed", spec.seed},
                            {"image_size", kSize},
                            {"stripe_freqs", kFreqs},
                            {"n_orientations", kOrients},
                            {"n_marker_slots", kSlots},
                            {"n_tints", kTints}};
    std::ofstream out(fs::path(out_path) / "manifest.json");
    out << manifest.dump(2) << "\n";
    if (!out) {
        throw DataError(out_path + ": cannot write manifest.json");
    }
}

}  // namespace pabn
