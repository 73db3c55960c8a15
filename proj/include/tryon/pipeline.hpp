#pragma once

// Glue shared by the command-line tool and the acceptance run: loading
// splits, generating with teacher or student, and scoring.

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "tryon/config.hpp"
#include "tryon/data.hpp"
#include "tryon/dmd.hpp"
#include "tryon/metrics.hpp"
#include "tryon/train.hpp"

namespace tryon {

// Raw samples plus their encoded form, index-aligned.
struct SampleSet {
    std::vector<TryOnSample> raw;
    std::vector<PreparedSample> prepared;

    std::size_t size() const { return raw.size(); }
};

inline void add_sample(SampleSet& set, TryOnSample s, const ToyVaeParams& vae, std::size_t channels) {
    set.prepared.push_back(prepare_sample(s, vae, channels));
    set.raw.push_back(std::move(s));
}

// Stored samples of one split; `limit` 0 keeps all.
inline SampleSet load_split(const std::filesystem::path& dir, const Dataset& d, const std::string& split,
                            const ToyVaeParams& vae, std::size_t channels, std::size_t limit = 0) {
    SampleSet set;
    for (const DatasetEntry* e : d.split(split)) {
        if (limit && set.size() >= limit) break;
        add_sample(set, load_sample(dir, d, *e), vae, channels);
    }
    return set;
}

// Unpaired test set: each test scene re-rendered wearing its assigned other
// garment. The generator is deterministic, so the ground truth exists.
inline SampleSet unpaired_split(const Dataset& d, const ToyVaeParams& vae, std::size_t channels,
                                std::size_t limit = 0) {
    SampleSet set;
    for (const DatasetEntry* e : d.split("test")) {
        if (limit && set.size() >= limit) break;
        add_sample(set, synth_sample(e->seed, e->unpaired_garment_seed, d.config), vae, channels);
    }
    return set;
}

// latent generator for sample i of a set
using LatentGenerator = std::function<Tensor<float>(const PreparedSample&, std::size_t)>;

inline LatentGenerator teacher_generator(const Denoiser<float>& teacher, std::size_t steps, std::uint64_t seed,
                                         const NoiseSchedule& s, const DdimOptions& opt) {
    return [&teacher, steps, seed, &s, opt](const PreparedSample& p, std::size_t i) {
        return teacher_sample(teacher, p, steps, sample_noise_seed(seed, i), s, opt);
    };
}

inline LatentGenerator student_generator(const Denoiser<float>& student, const StudentSchedule& S,
                                         std::uint64_t seed, const NoiseSchedule& s, double clip) {
    return [&student, S, seed, &s, clip](const PreparedSample& p, std::size_t i) {
        return few_step_sample(student, p, S, sample_noise_seed(seed, i), s, clip);
    };
}

inline std::vector<Tensor<float>> generate_videos(const LatentGenerator& gen, const SampleSet& set,
                                                  const ToyVaeParams& vae, std::size_t threads = 1) {
    std::vector<Tensor<float>> out(set.size());
    parallel_for(set.size(), threads,
                 [&](std::size_t i) { out[i] = toy_vae_decode(gen(set.prepared[i], i), vae); });
    return out;
}

inline MetricReport evaluate_videos(const std::vector<Tensor<float>>& videos, const SampleSet& set) {
    require(videos.size() == set.size() && !videos.empty(), "evaluate: one video per sample required");
    std::vector<MetricReport> rs;
    for (std::size_t i = 0; i < set.size(); ++i) {
        rs.push_back(evaluate_sample(videos[i], set.raw[i]));
    }
    return mean_report(rs);
}

inline double mean_garment_fidelity(const std::vector<Tensor<float>>& videos, const SampleSet& set) {
    require(videos.size() == set.size() && !videos.empty(), "fidelity: one video per sample required");
    double f = 0.0;
    for (std::size_t i = 0; i < set.size(); ++i) {
        f += garment_fidelity(videos[i], set.raw[i]);
    }
    return f / static_cast<double>(set.size());
}

}  // namespace tryon
