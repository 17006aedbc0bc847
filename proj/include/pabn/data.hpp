#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pabn/common.hpp"
#include "pabn/model.hpp"

namespace pabn {

struct ImageRef {
    std::string path;
    std::string id;  // "<class>/<file>", unique within a dataset
    int w = 0;
    int h = 0;
};

struct ClassEntry {
    std::string name;
    std::vector<ImageRef> images;  // sorted by file name
};

struct DatasetIndex {
    std::vector<ClassEntry> classes;  // sorted by class name

    int total_images() const {
        int n = 0;
        for (const auto& c : classes) {
            n += static_cast<int>(c.images.size());
        }
        return n;
    }
};

// Indexes <root>/<class>/<image>.ppm. Headers are probed for size and
// payload completeness; pixels stay on disk. Empty class directories
// are excluded with a warning on stderr.
DatasetIndex load_dataset(const std::string& root);

struct SplitConfig {
    int n_auxiliary = 0;
    int n_target = 0;
    std::uint64_t seed = 0;
    // When non-empty these take precedence over the counts.
    std::vector<std::string> auxiliary_names;
    std::vector<std::string> target_names;
};

// Seeded shuffle of class names; first n_auxiliary become the training
// pool, the next n_target the evaluation pool. Disjoint by construction.
std::pair<DatasetIndex, DatasetIndex> split_classes(const DatasetIndex& index,
                                                    const SplitConfig& cfg);

struct EpisodeSpec {
    int ways = 5;
    int shots = 1;
    int queries = 15;

    void validate() const {
        if (ways < 2 || shots < 1 || queries < 1) {
            throw std::invalid_argument("episode spec: need ways >= 2, shots >= 1, queries >= 1");
        }
    }
    int n_images() const { return ways * (shots + queries); }
};

// Support and query are class-major; episode label c corresponds to
// source class class_names[c]. The relabeling is fresh per episode.
struct Episode {
    EpisodeSpec spec;
    std::vector<ImageRef> support;          // ways*shots
    std::vector<ImageRef> query;            // ways*queries
    std::vector<std::string> class_names;   // ways
};

Episode sample_episode(const DatasetIndex& index, const EpisodeSpec& spec, Rng& rng);

TensorPtr<float> decode_and_resize(const ImageRef& ref, int out_size = 84);

// Decodes an episode into the batch layout episode_forward expects:
// support images first, then queries, both class-major.
EpisodeBatch episode_to_batch(const Episode& ep, int out_size = 84);

struct SynthSpec {
    int n_classes = 30;
    int n_images_per_class = 40;
    std::uint64_t seed = 7;
};

// Writes a synthetic fine-grained dataset: every class renders the same
// striped disk and differs only in stripe frequency, stripe angle,
// marker slot and hue tint. Per-image jitter moves, scales and phases
// the pattern so class means stay close while images vary.
void generate_synthetic(const SynthSpec& spec, const std::string& out_path);

}  // namespace pabn
