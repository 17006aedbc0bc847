#include "pabn/train.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <ostream>
#include <sstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written as raw little-endian words");

namespace pabn {

void TrainConfig::validate() const {
    arch.validate();
    spec.validate();
    if (alpha <= 0.0) {
        throw std::invalid_argument("train config: alpha must be positive");
    }
    if (n_training_episodes < 1) {
        throw std::invalid_argument("train config: need at least one training episode");
    }
    if (log_interval < 1) {
        throw std::invalid_argument("train config: log interval must be at least 1");
    }
}

namespace {

std::string episode_provenance(std::uint64_t episode_no, const Episode& ep) {
    std::string s = "episode " + std::to_string(episode_no) + " (classes";
    for (const auto& n : ep.class_names) {
        s += " " + n;
    }
    s += "; support";
    for (const auto& r : ep.support) {
        s += " " + r.id;
    }
    s += "; query";
    for (const auto& r : ep.query) {
        s += " " + r.id;
    }
    s += ")";
    return s;
}

std::string serialize_rng(const Rng& rng) {
    std::ostringstream ss;
    ss << rng;
    return ss.str();
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const DatasetIndex& auxiliary, std::ostream* log_csv,
                  const Checkpoint* resume) {
    cfg.validate();

    PabnParams params;
    AdamState adam;
    Rng rng(cfg.seed);
    std::uint64_t start_episode = 0;

    if (resume != nullptr) {
        if (!(resume->arch == cfg.arch)) {
            throw DataError("checkpoint architecture mismatch: cannot resume with a different "
                            "architecture config");
        }
        params = resume->params;
        adam = resume->adam;
        adam.alpha = cfg.alpha;
        start_episode = resume->episodes_trained;
        if (!resume->rng_state.empty()) {
            std::istringstream ss(resume->rng_state);
            ss >> rng;
            if (ss.fail()) {
                throw DataError("checkpoint rng state is unreadable");
            }
        }
    } else {
        params = PabnParams::init(cfg.arch, rng);
        adam = AdamState::init(params.trainable(), cfg.alpha);
    }

    auto trainable = params.trainable();
    const auto labels = episode_labels(cfg.spec.ways, cfg.spec.queries);

    if (log_csv != nullptr) {
        *log_csv << "episode,loss,align_penalty\n";
    }

    TrainResult result;
    for (int i = 1; i <= cfg.n_training_episodes; ++i) {
        const std::uint64_t episode_no = start_episode + static_cast<std::uint64_t>(i);
        Episode ep = sample_episode(auxiliary, cfg.spec, rng);
        auto batch = episode_to_batch(ep, cfg.arch.input_size);

        double loss_value = 0.0, penalty_value = 0.0;
        {
            Graph graph;
            auto scope = graph.activate();
            auto [scores, penalty] = episode_forward(batch, params, cfg.align, true);
            auto loss = episode_loss(scores, labels, penalty, cfg.align.lambda);
            loss_value = loss->data[0];
            penalty_value = penalty->data[0];
            if (!std::isfinite(loss_value) || !std::isfinite(penalty_value)) {
                throw NumericError("non-finite loss at " + episode_provenance(episode_no, ep));
            }
            graph.backward(loss);
        }
        try {
            adam_step(trainable, adam);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " at " +
                               episode_provenance(episode_no, ep));
        }

        if (i == 1 || i == cfg.n_training_episodes || i % cfg.log_interval == 0) {
            TrainLogRow row{episode_no, loss_value, penalty_value};
            result.log.push_back(row);
            if (log_csv != nullptr) {
                char buf[96];
                std::snprintf(buf, sizeof(buf), "%llu,%.9g,%.9g\n",
                              static_cast<unsigned long long>(row.episode), row.loss,
                              row.align_penalty);
                *log_csv << buf;
            }
        }
    }

    result.checkpoint.arch = cfg.arch;
    result.checkpoint.params = params;
    result.checkpoint.adam = adam;
    result.checkpoint.episodes_trained =
        start_episode + static_cast<std::uint64_t>(cfg.n_training_episodes);
    result.checkpoint.rng_state = serialize_rng(rng);
    if (!cfg.checkpoint_path.empty()) {
        save_checkpoint(result.checkpoint, cfg.checkpoint_path);
    }
    return result;
}

std::vector<int> classify_episode(const RelationScores& scores) {
    if (!scores.values || scores.ways < 2 || scores.queries_per_class < 1 ||
        scores.values->shape !=
            std::vector<int>{scores.ways * scores.queries_per_class, scores.ways}) {
        throw std::invalid_argument("classify_episode: malformed scores");
    }
    const int n = scores.ways * scores.queries_per_class;
    std::vector<int> pred(static_cast<std::size_t>(n), 0);
    for (int q = 0; q < n; ++q) {
        const float* row = scores.values->data.data() + static_cast<std::size_t>(q) * scores.ways;
        int best = 0;
        for (int c = 1; c < scores.ways; ++c) {
            if (row[c] > row[best]) {
                best = c;
            }
        }
        pred[static_cast<std::size_t>(q)] = best;
    }
    return pred;
}

EvalSummary summarize(const std::vector<double>& accuracies) {
    const std::size_t n = accuracies.size();
    if (n < 2) {
        throw std::invalid_argument("summarize: need at least 2 accuracies");
    }
    double mean = 0.0;
    for (double a : accuracies) {
        mean += a;
    }
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double a : accuracies) {
        var += (a - mean) * (a - mean);
    }
    var /= static_cast<double>(n - 1);
    EvalSummary s;
    s.mean = mean;
    s.half_width_95 = 1.96 * std::sqrt(var / static_cast<double>(n));
    return s;
}

EvalReport evaluate(const PabnParams& params, const DatasetIndex& index, const EpisodeSpec& spec,
                    int n_episodes, std::uint64_t seed) {
    spec.validate();
    if (n_episodes < 2) {
        throw std::invalid_argument("evaluate: need at least 2 episodes");
    }
    Rng rng(seed);
    const auto labels = episode_labels(spec.ways, spec.queries);
    const AlignMode align = AlignMode::make(AlignMode::Kind::none, 0.0);

    EvalReport report;
    report.spec = spec;
    report.seed = seed;
    report.n_episodes = n_episodes;
    for (int e = 0; e < n_episodes; ++e) {
        auto ep = sample_episode(index, spec, rng);
        auto batch = episode_to_batch(ep, params.arch.input_size);
        auto [scores, penalty] = episode_forward(batch, params, align, false);
        auto pred = classify_episode(scores);
        int correct = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            correct += pred[i] == labels[i] ? 1 : 0;
        }
        report.accuracies.push_back(static_cast<double>(correct) /
                                    static_cast<double>(pred.size()));
    }
    const EvalSummary s = summarize(report.accuracies);
    report.mean = s.mean;
    report.half_width_95 = s.half_width_95;
    return report;
}

std::string format_percent_ci(double mean, double half_width) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f±%.2f", mean * 100.0, half_width * 100.0);
    return buf;
}

void warmup_batch_norm(PabnParams& params, const DatasetIndex& index, const EpisodeSpec& spec,
                       std::uint64_t seed) {
    Rng rng(seed);
    auto ep = sample_episode(index, spec, rng);
    auto batch = episode_to_batch(ep, params.arch.input_size);
    episode_forward(batch, params, AlignMode::make(AlignMode::Kind::none, 0.0), true);
}

namespace {

constexpr char kMagic[4] = {'P', 'A', 'B', 'N'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

void put_string(std::string& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out += s;
}

void put_tensor_raw(std::string& out, const std::string& name, const std::vector<int>& shape,
                    const float* data, std::size_t count) {
    put_string(out, name);
    out.push_back(0);  // dtype f32
    out.push_back(static_cast<char>(shape.size()));
    for (int d : shape) {
        put_u32(out, static_cast<std::uint32_t>(d));
    }
    const std::size_t bytes = count * sizeof(float);
    const std::size_t at = out.size();
    out.resize(at + bytes);
    std::memcpy(out.data() + at, data, bytes);
}

void put_tensor(std::string& out, const std::string& name, const TensorPtr<float>& t) {
    put_tensor_raw(out, name, t->shape, t->data.data(), t->size());
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) {
            throw DataError("truncated checkpoint");
        }
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        }
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        }
        pos += 8;
        return v;
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(buf[pos++]);
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    TensorPtr<float> tensor(std::string& name) {
        name = str();
        const std::uint8_t dtype = u8();
        if (dtype != 0) {
            throw DataError("checkpoint tensor '" + name + "' has unsupported dtype " +
                            std::to_string(dtype));
        }
        const int rank = u8();
        std::vector<int> shape;
        for (int i = 0; i < rank; ++i) {
            shape.push_back(static_cast<int>(u32()));
        }
        auto t = TensorT<float>::create(shape);
        const std::size_t bytes = t->size() * sizeof(float);
        need(bytes);
        std::memcpy(t->data.data(), buf.data() + pos, bytes);
        pos += bytes;
        return t;
    }
};

nlohmann::json arch_to_json(const ArchConfig& a) {
    return {{"input_size", a.input_size},
            {"in_channels", a.in_channels},
            {"channels", a.channels},
            {"fc1", a.fc1},
            {"fc2", a.fc2}};
}

ArchConfig arch_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception&) {
        throw DataError("checkpoint architecture config is not valid JSON");
    }
    ArchConfig a;
    try {
        a.input_size = j.at("input_size").get<int>();
        a.in_channels = j.at("in_channels").get<int>();
        a.channels = j.at("channels").get<int>();
        a.fc1 = j.at("fc1").get<int>();
        a.fc2 = j.at("fc2").get<int>();
    } catch (const nlohmann::json::exception&) {
        throw DataError("checkpoint architecture config is missing fields");
    }
    a.validate();
    return a;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_string(out, arch_to_json(ckpt.arch).dump());

    put_u32(out, static_cast<std::uint32_t>(ckpt.params.named.size()));
    for (const auto& [name, t] : ckpt.params.named) {
        put_tensor(out, name, t);
    }

    put_u32(out, static_cast<std::uint32_t>(2 * ckpt.adam.slots.size() + 1));
    for (const auto& slot : ckpt.adam.slots) {
        const auto* p = ckpt.params.get(slot.name).get();
        put_tensor_raw(out, "adam.m." + slot.name, p->shape, slot.m.data(), slot.m.size());
        put_tensor_raw(out, "adam.v." + slot.name, p->shape, slot.v.data(), slot.v.size());
    }
    const float t_value = static_cast<float>(ckpt.adam.t);
    put_tensor_raw(out, "adam.t", {}, &t_value, 1);

    put_u64(out, ckpt.episodes_trained);
    put_string(out, ckpt.rng_state);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw DataError(path + ": cannot open checkpoint for writing");
    }
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) {
        throw DataError(path + ": checkpoint write failed");
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw DataError(path + ": cannot open checkpoint");
    }
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r{buf};

    r.need(4);
    if (std::memcmp(buf.data(), kMagic, 4) != 0) {
        throw DataError(path + ": bad magic, not a checkpoint file");
    }
    r.pos = 4;
    const std::uint32_t version = r.u32();
    if (version != kVersion) {
        throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
    }

    Checkpoint ckpt;
    ckpt.arch = arch_from_json(r.str());

    // Reference layout for validating names, shapes and grad flags.
    Rng ref_rng(0);
    auto reference = PabnParams::init(ckpt.arch, ref_rng);

    const std::uint32_t n_tensors = r.u32();
    if (n_tensors != reference.named.size()) {
        throw DataError(path + ": checkpoint tensor count mismatch, expected " +
                        std::to_string(reference.named.size()) + ", got " +
                        std::to_string(n_tensors));
    }
    ckpt.params.arch = ckpt.arch;
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        std::string name;
        auto t = r.tensor(name);
        const auto& [ref_name, ref_t] = reference.named[i];
        if (name != ref_name || t->shape != ref_t->shape) {
            throw DataError(path + ": checkpoint tensor '" + name + "' does not match expected '" +
                            ref_name + "'");
        }
        t->requires_grad = ref_t->requires_grad;
        ckpt.params.named.emplace_back(name, t);
    }

    auto trainable = ckpt.params.trainable();
    const std::uint32_t n_adam = r.u32();
    if (n_adam != 2 * trainable.size() + 1) {
        throw DataError(path + ": checkpoint tensor count mismatch in Adam state, expected " +
                        std::to_string(2 * trainable.size() + 1) + ", got " +
                        std::to_string(n_adam));
    }
    ckpt.adam.alpha = 0.001;
    for (const auto& [pname, pt] : trainable) {
        std::string mname, vname;
        auto m = r.tensor(mname);
        auto v = r.tensor(vname);
        if (mname != "adam.m." + pname || vname != "adam.v." + pname ||
            m->shape != pt->shape || v->shape != pt->shape) {
            throw DataError(path + ": checkpoint Adam state does not match parameter '" + pname +
                            "'");
        }
        AdamSlot<float> slot;
        slot.name = pname;
        slot.m = std::move(m->data);
        slot.v = std::move(v->data);
        ckpt.adam.slots.push_back(std::move(slot));
    }
    std::string tname;
    auto t_scalar = r.tensor(tname);
    if (tname != "adam.t" || t_scalar->size() != 1) {
        throw DataError(path + ": checkpoint Adam step counter missing");
    }
    ckpt.adam.t = static_cast<std::int64_t>(t_scalar->data[0]);

    ckpt.episodes_trained = r.u64();
    ckpt.rng_state = r.str();
    if (r.pos != buf.size()) {
        throw DataError(path + ": checkpoint has trailing bytes");
    }
    return ckpt;
}

}  // namespace pabn
