#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "pabn/adam.hpp"
#include "pabn/data.hpp"
#include "pabn/model.hpp"

namespace pabn {

struct TrainConfig {
    ArchConfig arch;
    EpisodeSpec spec;
    AlignMode align = AlignMode::make(AlignMode::Kind::none, 0.0);
    int n_training_episodes = 1000;
    double alpha = 0.001;
    std::uint64_t seed = 0;
    std::string checkpoint_path;  // empty: no file written
    int log_interval = 50;

    void validate() const;
};

struct TrainLogRow {
    std::uint64_t episode = 0;
    double loss = 0.0;
    double align_penalty = 0.0;
};

struct Checkpoint {
    ArchConfig arch;
    PabnParams params;
    AdamState adam;
    std::uint64_t episodes_trained = 0;
    std::string rng_state;  // textual mt19937_64 state
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<TrainLogRow> log;
};

// Fresh run when resume is null, otherwise continues from the
// checkpoint (parameters, Adam moments, episode counter and rng
// stream); cfg.alpha still decides the step size. Logged rows go to
// log_csv as `episode,loss,align_penalty` when a stream is given.
// A non-finite loss or gradient halts with the episode's provenance.
TrainResult train(const TrainConfig& cfg, const DatasetIndex& auxiliary,
                  std::ostream* log_csv = nullptr, const Checkpoint* resume = nullptr);

// Argmax over classes per query row; ties go to the lowest class index.
std::vector<int> classify_episode(const RelationScores& scores);

struct EvalSummary {
    double mean = 0.0;
    double half_width_95 = 0.0;
};

// Normal-approximation interval: 1.96 * s / sqrt(n), sample standard
// deviation with the n-1 denominator.
EvalSummary summarize(const std::vector<double>& accuracies);

struct EvalReport {
    std::vector<double> accuracies;  // per episode, fraction correct
    double mean = 0.0;
    double half_width_95 = 0.0;
    int n_episodes = 0;
    EpisodeSpec spec;
    std::uint64_t seed = 0;
};

EvalReport evaluate(const PabnParams& params, const DatasetIndex& index, const EpisodeSpec& spec,
                    int n_episodes, std::uint64_t seed);

// Table-style accuracy cell: mean 0.6671, hw 0.0043 -> "66.71±0.43".
std::string format_percent_ci(double mean, double half_width);

// One train-mode forward pass to seed batch-norm running statistics.
// Required before evaluating parameters that never took a training
// step; eval mode rejects untracked statistics.
void warmup_batch_norm(PabnParams& params, const DatasetIndex& index, const EpisodeSpec& spec,
                       std::uint64_t seed);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace pabn
