#pragma once

// Few-step distillation: teacher ODE trajectories are cached at the student
// timesteps, the student regresses the trajectory endpoints, then it is
// tuned by distribution matching against a frozen real critic and an online
// fake critic.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tryon/diffusion.hpp"
#include "tryon/model.hpp"
#include "tryon/optim.hpp"
#include "tryon/parallel.hpp"
#include "tryon/train.hpp"

namespace tryon {

struct StudentSchedule {
    std::vector<std::size_t> indices{0, 36, 44, 49};  // into the teacher's sub-schedule, 0 = clean end
    std::size_t teacher_steps = 50;

    void validate() const {
        require(!indices.empty(), "student schedule is empty");
        for (std::size_t i = 1; i < indices.size(); ++i) {
            require(indices[i] > indices[i - 1], "student schedule indices must be strictly increasing");
        }
        require(indices.back() == teacher_steps - 1, "last student index must be teacher_steps - 1");
    }

    // Diffusion timesteps of the student, ascending.
    std::vector<std::size_t> timesteps(std::size_t train_steps) const {
        validate();
        const auto ts = sub_schedule(train_steps, teacher_steps);
        std::vector<std::size_t> out;
        for (std::size_t i : indices) {
            out.push_back(ts[i]);
        }
        return out;
    }

    std::optional<std::size_t> position(std::size_t teacher_index) const {
        const auto it = std::find(indices.begin(), indices.end(), teacher_index);
        if (it == indices.end()) {
            return std::nullopt;
        }
        return static_cast<std::size_t>(it - indices.begin());
    }
};

// eps -> grad log p_t under the VP forward process.
template <class T>
Tensor<T> eps_to_score(const Tensor<T>& eps, std::size_t t, const NoiseSchedule& s) {
    const double sigma = s.noise(t);
    if (!(sigma > 0.0)) {
        throw InvalidArgument("eps_to_score: sigma_t must be > 0");
    }
    Tensor<T> out = eps;
    out *= static_cast<T>(-1.0 / sigma);
    return out;
}

// ---------------------------------------------------------------------------
// Trajectory cache.

struct CacheEntry {
    std::size_t sample = 0;  // index into the conditioning set
    std::uint64_t seed = 0;  // noise seed of x_T
    std::vector<Tensor<float>> states;  // one per student index, same order
    Tensor<float> x0;
};

struct TrajectoryCache {
    StudentSchedule schedule;
    std::vector<CacheEntry> entries;
};

struct RecordedTrajectory {
    std::vector<Tensor<float>> states;
    Tensor<float> x0;
};

// DDIM from x_T over teacher_steps, keeping the states seen at the student
// indices.
template <class EpsModel>
RecordedTrajectory record_trajectory(EpsModel&& eps_model, const Tensor<float>& x_T, const StudentSchedule& S,
                                     const NoiseSchedule& s, const DdimOptions& opt = {}) {
    S.validate();
    RecordedTrajectory r;
    r.states.resize(S.indices.size());
    auto observe = [&](std::size_t n, std::size_t, const Tensor<float>& x) {
        if (const auto pos = S.position(n)) {
            r.states[*pos] = x;
        }
    };
    r.x0 = ddim_sample_from<float>(eps_model, x_T, S.teacher_steps, s, opt, observe);
    return r;
}

inline std::uint64_t cache_seed(std::uint64_t base_seed, std::size_t i) { return mix_seed(base_seed ^ 0xc0de, i); }

inline TrajectoryCache generate_ode_cache(const Denoiser<float>& teacher, const std::vector<PreparedSample>& data,
                                          std::size_t n, std::uint64_t base_seed, const StudentSchedule& S,
                                          const NoiseSchedule& s, const DdimOptions& opt = {},
                                          std::size_t threads = 1) {
    require(n >= 1, "ode cache: n must be >= 1");
    require(!data.empty(), "ode cache: no conditioning samples");
    require(teacher.cfg.head == PredictionHead::epsilon, "ode cache: teacher must be an epsilon model");
    S.validate();
    TrajectoryCache cache{S, std::vector<CacheEntry>(n)};
    parallel_for(n, threads, [&](std::size_t i) {
        CacheEntry& e = cache.entries[i];
        e.sample = i % data.size();
        e.seed = cache_seed(base_seed, i);
        const PreparedSample& p = data[e.sample];
        Rng rng(e.seed);
        auto eps_model = [&](const Tensor<float>& x, std::size_t t) {
            return denoiser_forward(teacher, denoiser_inputs(p, x), t, s);
        };
        try {
            auto r = record_trajectory(eps_model, rng.normal_tensor(p.z0.shape()), S, s, opt);
            e.states = std::move(r.states);
            e.x0 = std::move(r.x0);
        } catch (const NumericFailure& err) {
            throw NumericFailure("ode cache trajectory " + std::to_string(i) + ": " + err.what(),
                                 static_cast<long>(i));
        }
    });
    return cache;
}

inline void save_cache(const std::filesystem::path& dir, const TrajectoryCache& c) {
    TensorMap t;
    nlohmann::json entries = nlohmann::json::array();
    char name[64];
    for (std::size_t i = 0; i < c.entries.size(); ++i) {
        const auto& e = c.entries[i];
        std::snprintf(name, sizeof name, "e%05zu.x0", i);
        t.emplace(name, e.x0);
        for (std::size_t k = 0; k < e.states.size(); ++k) {
            std::snprintf(name, sizeof name, "e%05zu.s%02zu", i, c.schedule.indices[k]);
            t.emplace(name, e.states[k]);
        }
        entries.push_back({{"sample", e.sample}, {"seed", e.seed}});
    }
    write_tensor_container(dir / "cache.tensors", t);
    const nlohmann::json manifest{{"teacher_steps", c.schedule.teacher_steps},
                                  {"indices", c.schedule.indices},
                                  {"entries", entries}};
    write_file_bytes(dir / "cache.json", manifest.dump(2) + "\n");
}

inline TrajectoryCache load_cache(const std::filesystem::path& dir) {
    TrajectoryCache c;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file_bytes(dir / "cache.json"));
        c.schedule.teacher_steps = j.at("teacher_steps").get<std::size_t>();
        c.schedule.indices = j.at("indices").get<std::vector<std::size_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("cache manifest: ") + e.what());
    }
    c.schedule.validate();
    auto t = read_tensor_container(dir / "cache.tensors");
    char name[64];
    for (std::size_t i = 0; i < j.at("entries").size(); ++i) {
        const auto& je = j["entries"][i];
        CacheEntry e;
        e.sample = je.at("sample").get<std::size_t>();
        e.seed = je.at("seed").get<std::uint64_t>();
        auto take = [&](const char* key) {
            const auto it = t.find(key);
            if (it == t.end()) {
                throw FormatError(std::string("cache: missing tensor ") + key);
            }
            return std::move(it->second);
        };
        std::snprintf(name, sizeof name, "e%05zu.x0", i);
        e.x0 = take(name);
        for (std::size_t idx : c.schedule.indices) {
            std::snprintf(name, sizeof name, "e%05zu.s%02zu", i, idx);
            e.states.push_back(take(name));
        }
        c.entries.push_back(std::move(e));
    }
    return c;
}

// ---------------------------------------------------------------------------
// Regression initialisation.

// One (entry, student position) pair of the regression set.
struct InitDraw {
    std::size_t entry = 0;
    std::size_t position = 0;
};

// Mean squared error between G(state_k, t_k) and x0 over the given triples;
// every element of every triple has equal weight.
template <class StudentFn>
double student_init_loss(StudentFn&& student, const TrajectoryCache& cache, const std::vector<InitDraw>& draws,
                         const std::vector<std::size_t>& student_ts) {
    require(!draws.empty(), "student_init_loss: empty batch");
    double sq = 0.0;
    std::size_t n = 0;
    for (const auto& d : draws) {
        const CacheEntry& e = cache.entries.at(d.entry);
        const Tensor<float> pred = student(e, e.states.at(d.position), student_ts.at(d.position));
        if (pred.shape() != e.x0.shape()) {
            throw InvalidArgument("student_init_loss: prediction " + shape_str(pred.shape()) + " vs target " +
                                  shape_str(e.x0.shape()));
        }
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const double diff = static_cast<double>(pred[i]) - e.x0[i];
            sq += diff * diff;
        }
        n += pred.size();
    }
    return sq / static_cast<double>(n);
}

inline Tensor<float> student_predict(const Denoiser<float>& student, const PreparedSample& p, const Tensor<float>& x,
                                     std::size_t t, const NoiseSchedule& s, DenoiserCache<float>* cache = nullptr) {
    return denoiser_forward(student, denoiser_inputs(p, x), t, s, cache);
}

// Returns the batch loss and accumulates its gradient.
inline double student_init_gradient(const Denoiser<float>& student, const std::vector<PreparedSample>& data,
                                    const TrajectoryCache& cache, const std::vector<InitDraw>& draws,
                                    const NoiseSchedule& s, Denoiser<float>& grads, std::size_t threads = 1) {
    require(student.cfg.head == PredictionHead::clean, "student must use the clean-latent head");
    const auto ts = cache.schedule.timesteps(s.steps);
    const std::size_t b = draws.size();
    std::vector<Denoiser<float>> per(b);
    std::vector<double> sq(b);
    std::vector<std::size_t> count(b);
    parallel_for(b, threads, [&](std::size_t i) {
        const CacheEntry& e = cache.entries.at(draws[i].entry);
        const std::size_t k = draws[i].position;
        const PreparedSample& p = data.at(e.sample);
        const auto in = denoiser_inputs(p, e.states.at(k));
        DenoiserCache<float> c;
        const auto pred = denoiser_forward(student, in, ts.at(k), s, &c);
        Tensor<float> g(pred.shape());
        for (std::size_t j = 0; j < pred.size(); ++j) {
            const double diff = static_cast<double>(pred[j]) - e.x0[j];
            sq[i] += diff * diff;
            g[j] = static_cast<float>(diff);
        }
        count[i] = pred.size();
        per[i] = student.zeros_like();
        denoiser_backward(student, in, g, c, per[i]);
    });
    double total_sq = 0.0;
    std::size_t total_n = 0;
    for (std::size_t i = 0; i < b; ++i) {
        total_sq += sq[i];
        total_n += count[i];
    }
    // d/dpred of sum(diff^2)/N is 2 diff / N
    const double scale = 2.0 / static_cast<double>(total_n);
    for (std::size_t i = 0; i < b; ++i) {
        scale_grads(per[i], scale);
        accumulate(grads, per[i]);
    }
    return total_sq / static_cast<double>(total_n);
}

// ---------------------------------------------------------------------------
// Few-step sampling.

// Deterministic move of x from t_from to t_to along the noise direction
// implied by the clean prediction.
template <class T>
Tensor<T> renoise(const Tensor<T>& x, const Tensor<T>& x0, std::size_t t_from, std::size_t t_to,
                  const NoiseSchedule& s) {
    const double a = s.signal(t_from), b = s.noise(t_from), a2 = s.signal(t_to), b2 = s.noise(t_to);
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double eps = (static_cast<double>(x[i]) - a * x0[i]) / b;
        out[i] = static_cast<T>(a2 * x0[i] + b2 * eps);
    }
    return out;
}

template <class T>
void clip_in_place(Tensor<T>& x, double bound) {
    if (bound > 0.0) {
        for (auto& v : x.data()) {
            v = static_cast<T>(std::clamp(static_cast<double>(v), -bound, bound));
        }
    }
}

// Runs the student chain from x (at ts.back()) down to position `stop` and
// returns the state there, before the student is evaluated at it.
template <class T, class CleanFn>
Tensor<T> few_step_state(CleanFn&& clean, Tensor<T> x, const std::vector<std::size_t>& ts, std::size_t stop,
                         const NoiseSchedule& s, double clip = 0.0) {
    require(stop < ts.size(), "few_step_state: stop position out of range");
    for (std::size_t k = ts.size() - 1; k > stop; --k) {
        Tensor<T> x0 = clean(static_cast<const Tensor<T>&>(x), ts[k]);
        if (!x0.all_finite()) {
            throw NumericFailure("few-step student: non-finite prediction", static_cast<long>(ts.size() - 1 - k));
        }
        clip_in_place(x0, clip);
        x = renoise(x, x0, ts[k], ts[k - 1], s);
    }
    return x;
}

template <class T, class CleanFn>
Tensor<T> few_step_sample_from(CleanFn&& clean, Tensor<T> x, const std::vector<std::size_t>& ts,
                               const NoiseSchedule& s, double clip = 0.0) {
    x = few_step_state<T>(clean, std::move(x), ts, 0, s, clip);
    Tensor<T> x0 = clean(static_cast<const Tensor<T>&>(x), ts[0]);
    if (!x0.all_finite()) {
        throw NumericFailure("few-step student: non-finite prediction", static_cast<long>(ts.size() - 1));
    }
    clip_in_place(x0, clip);
    return x0;
}

// Student sample from the same seeded noise the teacher sampler would use.
inline Tensor<float> few_step_sample(const Denoiser<float>& student, const PreparedSample& p,
                                     const StudentSchedule& S, std::uint64_t seed, const NoiseSchedule& s,
                                     double clip = 0.0, std::size_t* nfe = nullptr) {
    require(S.indices.size() == 4, "few_step_sample: the student schedule must have 4 entries");
    require(student.cfg.head == PredictionHead::clean, "student must use the clean-latent head");
    Rng rng(seed);
    auto clean = [&](const Tensor<float>& x, std::size_t t) {
        if (nfe) {
            ++*nfe;
        }
        return student_predict(student, p, x, t, s);
    };
    return few_step_sample_from<float>(clean, rng.normal_tensor(p.z0.shape()), S.timesteps(s.steps), s, clip);
}

// ---------------------------------------------------------------------------
// Distribution matching.

template <class T>
struct DmdGradient {
    Tensor<T> g;  // d(loss)/d(x), already divided by the element count
    Tensor<T> x_t;
    Tensor<T> eps_real, eps_fake;
};

// g = -(s_real - s_fake)(x_t, t) / N with s = -eps / sigma. The critics are
// evaluated only; nothing is differentiated through them.
template <class T, class RealEps, class FakeEps>
DmdGradient<T> dmd_output_gradient(const Tensor<T>& x, std::size_t t, const Tensor<T>& noise, RealEps&& real,
                                   FakeEps&& fake, const NoiseSchedule& s) {
    DmdGradient<T> r;
    r.x_t = add_noise(x, t, noise, s);
    r.eps_real = real(static_cast<const Tensor<T>&>(r.x_t), t);
    r.eps_fake = fake(static_cast<const Tensor<T>&>(r.x_t), t);
    if (!r.eps_real.all_finite() || !r.eps_fake.all_finite()) {
        throw NumericFailure("dmd: critic produced a non-finite prediction at t=" + std::to_string(t));
    }
    const Tensor<T> s_real = eps_to_score(r.eps_real, t, s), s_fake = eps_to_score(r.eps_fake, t, s);
    r.g = Tensor<T>(x.shape());
    const double inv_n = 1.0 / static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        r.g[i] = static_cast<T>(-(static_cast<double>(s_real[i]) - s_fake[i]) * inv_n);
    }
    return r;
}

struct DmdDraw {
    std::size_t sample = 0;
    std::uint64_t noise_seed = 0;  // x_T of the student chain
    std::size_t position = 0;      // student position whose output gets the gradient
    std::size_t t = 0;             // critic timestep
    Tensor<float> noise;           // critic noise
};

struct DmdStepResult {
    std::vector<Tensor<float>> samples;  // detached student outputs, one per draw
    double score_gap = 0.0;              // mean (eps_real - eps_fake)^2
};

// Accumulates the distribution-matching gradient for the student (mean over
// the batch). Critics are only evaluated.
inline DmdStepResult dmd_student_step(const Denoiser<float>& student, const Denoiser<float>& real,
                                      const Denoiser<float>& fake, const std::vector<PreparedSample>& data,
                                      const std::vector<DmdDraw>& draws, const StudentSchedule& S,
                                      const NoiseSchedule& s, Denoiser<float>& grads, double clip = 0.0,
                                      std::size_t threads = 1) {
    const auto ts = S.timesteps(s.steps);
    const std::size_t b = draws.size();
    std::vector<Denoiser<float>> per(b);
    DmdStepResult out;
    out.samples.resize(b);
    std::vector<double> gap(b);
    parallel_for(b, threads, [&](std::size_t i) {
        const DmdDraw& d = draws[i];
        const PreparedSample& p = data.at(d.sample);
        auto clean = [&](const Tensor<float>& x, std::size_t t) { return student_predict(student, p, x, t, s); };
        Rng rng(d.noise_seed);
        const Tensor<float> x_k = few_step_state<float>(clean, rng.normal_tensor(p.z0.shape()), ts, d.position, s, clip);
        const auto in = denoiser_inputs(p, x_k);
        DenoiserCache<float> cache;
        Tensor<float> x = denoiser_forward(student, in, ts[d.position], s, &cache);
        auto real_eps = [&](const Tensor<float>& xt, std::size_t t) {
            return denoiser_forward(real, denoiser_inputs(p, xt), t, s);
        };
        auto fake_eps = [&](const Tensor<float>& xt, std::size_t t) {
            return denoiser_forward(fake, denoiser_inputs(p, xt), t, s);
        };
        auto dg = dmd_output_gradient(x, d.t, d.noise, real_eps, fake_eps, s);
        for (std::size_t j = 0; j < x.size(); ++j) {
            const double e = static_cast<double>(dg.eps_real[j]) - dg.eps_fake[j];
            gap[i] += e * e / static_cast<double>(x.size());
        }
        dg.g *= 1.0f / static_cast<float>(b);
        per[i] = student.zeros_like();
        denoiser_backward(student, in, dg.g, cache, per[i]);
        clip_in_place(x, clip);
        out.samples[i] = std::move(x);
    });
    for (std::size_t i = 0; i < b; ++i) {
        accumulate(grads, per[i]);
        out.score_gap += gap[i] / static_cast<double>(b);
    }
    return out;
}

struct CriticDraw {
    std::size_t sample = 0;
    std::size_t t = 0;
    Tensor<float> eps;
};

// Denoising loss of any epsilon predictor on one noised sample.
template <class T, class EpsFn>
double critic_denoising_loss(EpsFn&& eps_fn, const Tensor<T>& x, std::size_t t, const Tensor<T>& eps,
                             const NoiseSchedule& s) {
    const Tensor<T> pred = eps_fn(add_noise(x, t, eps, s), t);
    if (pred.shape() != eps.shape()) {
        throw InvalidArgument("critic loss: prediction shape mismatch");
    }
    double l = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = static_cast<double>(pred[i]) - eps[i];
        l += d * d;
    }
    return l / static_cast<double>(pred.size());
}

// Plain epsilon-MSE of the fake critic on noised (detached) student samples;
// returns the batch mean and accumulates its gradient.
inline double fake_critic_step(const Denoiser<float>& fake, const std::vector<PreparedSample>& data,
                               const std::vector<Tensor<float>>& samples, const std::vector<CriticDraw>& draws,
                               const NoiseSchedule& s, Denoiser<float>& grads, std::size_t threads = 1) {
    require(samples.size() == draws.size() && !draws.empty(), "fake_critic_step: one draw per sample");
    const std::size_t b = draws.size();
    std::vector<Denoiser<float>> per(b);
    std::vector<double> losses(b);
    parallel_for(b, threads, [&](std::size_t i) {
        const auto& d = draws[i];
        const auto in = denoiser_inputs(data.at(d.sample), add_noise(samples[i], d.t, d.eps, s));
        DenoiserCache<float> cache;
        const auto pred = denoiser_forward(fake, in, d.t, s, &cache);
        Tensor<float> g(pred.shape());
        const double scale = 2.0 / static_cast<double>(pred.size() * b);
        for (std::size_t j = 0; j < pred.size(); ++j) {
            const double diff = static_cast<double>(pred[j]) - d.eps[j];
            losses[i] += diff * diff / static_cast<double>(pred.size());
            g[j] = static_cast<float>(scale * diff);
        }
        per[i] = fake.zeros_like();
        denoiser_backward(fake, in, g, cache, per[i]);
    });
    double mean = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        accumulate(grads, per[i]);
        mean += losses[i] / static_cast<double>(b);
    }
    return mean;
}

// ---------------------------------------------------------------------------
// Full distillation.

struct DistillConfig {
    StudentSchedule schedule;
    std::size_t cache_size = 256;
    std::size_t init_iterations = 1000;
    std::size_t dmd_iterations = 2000;
    std::size_t batch = 4;
    double init_lr = 1e-3;
    double dmd_lr = 5e-5;
    double critic_lr = 5e-5;
    double t_min_frac = 0.02;  // critic timesteps are drawn from [t_min, t_max]
    double t_max_frac = 0.98;
    double clip_x0 = 0.0;
    double divergence_factor = 10.0;
    std::size_t divergence_patience = 100;
    std::uint64_t seed = 1;
    std::size_t threads = 1;
};

struct DmdLogRow {
    std::size_t iteration = 0;
    double critic_loss = 0.0;
    double score_gap = 0.0;
};

struct DistillResult {
    Denoiser<float> student;
    Denoiser<float> fake_critic;
    std::vector<double> init_loss;
    std::vector<DmdLogRow> dmd_log;
    std::uint64_t real_checksum_before = 0;
    std::uint64_t real_checksum_after = 0;
    std::size_t student_updates = 0;
    std::size_t critic_updates = 0;
    std::size_t max_update_gap = 0;
};

// Raised after `patience` consecutive losses above factor x the first one.
struct DivergenceError : NumericFailure {
    using NumericFailure::NumericFailure;
};

class DivergenceMonitor {
public:
    DivergenceMonitor(double factor, std::size_t patience) : factor_(factor), patience_(patience) {}

    // True once the run has diverged.
    bool update(double loss) {
        if (!seen_) {
            initial_ = loss;
            seen_ = true;
        }
        run_ = (!std::isfinite(loss) || loss > factor_ * initial_) ? run_ + 1 : 0;
        return run_ >= patience_;
    }

private:
    double factor_;
    std::size_t patience_;
    double initial_ = 0.0;
    bool seen_ = false;
    std::size_t run_ = 0;
};

// Student from a teacher clone with the clean-latent head.
inline Denoiser<float> student_from_teacher(const Denoiser<float>& teacher) {
    Denoiser<float> st = teacher;
    st.cfg.head = PredictionHead::clean;
    return st;
}

using DistillCheckpoint = std::function<void(const Denoiser<float>& student, const std::string& phase)>;

inline DistillResult distill(const Denoiser<float>& teacher, const std::vector<PreparedSample>& data,
                             const TrajectoryCache& cache, const DistillConfig& cfg, const NoiseSchedule& s,
                             const DistillCheckpoint& on_abort = {},
                             const std::function<void(const std::string&)>& log = {}) {
    require(teacher.cfg.head == PredictionHead::epsilon, "distill: teacher must be an epsilon model");
    require(!cache.entries.empty(), "distill: empty trajectory cache");
    require(cfg.batch >= 1, "distill: batch must be >= 1");
    require(cfg.t_min_frac >= 0.0 && cfg.t_min_frac < cfg.t_max_frac && cfg.t_max_frac <= 1.0,
            "distill: bad critic timestep range");
    cfg.schedule.validate();

    const Denoiser<float> real = teacher;  // frozen
    DistillResult res{student_from_teacher(teacher), teacher, {}, {}, parameter_checksum(real), 0, 0, 0, 0};
    Rng rng(mix_seed(cfg.seed, 0xd15));

    // phase 1: regression on cached trajectories
    AdamW<float> opt_init({.lr = cfg.init_lr});
    DivergenceMonitor mon1(cfg.divergence_factor, cfg.divergence_patience);
    for (std::size_t it = 0; it < cfg.init_iterations; ++it) {
        std::vector<InitDraw> draws(cfg.batch);
        for (auto& d : draws) {
            d.entry = rng.below(cache.entries.size());
            d.position = rng.below(cfg.schedule.indices.size());
        }
        auto grads = res.student.zeros_like();
        const double loss = student_init_gradient(res.student, data, cache, draws, s, grads, cfg.threads);
        res.init_loss.push_back(loss);
        if (mon1.update(loss)) {
            if (on_abort) on_abort(res.student, "init");
            throw DivergenceError("distill: regression loss diverged", static_cast<long>(it));
        }
        opt_init.step(res.student.named_params(), grads.named_params());
        if (log && (it % 100 == 0 || it + 1 == cfg.init_iterations)) {
            log("init " + std::to_string(it) + " loss " + std::to_string(loss));
        }
    }

    // phase 2: alternate student and fake-critic updates 1:1
    AdamW<float> opt_student({.lr = cfg.dmd_lr});
    AdamW<float> opt_fake({.lr = cfg.critic_lr});
    DivergenceMonitor mon2(cfg.divergence_factor, cfg.divergence_patience);
    const auto t_lo = static_cast<std::size_t>(cfg.t_min_frac * static_cast<double>(s.steps - 1));
    const auto t_hi = static_cast<std::size_t>(cfg.t_max_frac * static_cast<double>(s.steps - 1));
    for (std::size_t it = 0; it < cfg.dmd_iterations; ++it) {
        std::vector<DmdDraw> draws(cfg.batch);
        for (auto& d : draws) {
            d.sample = rng.below(data.size());
            d.noise_seed = rng.next_u64();
            d.position = rng.below(cfg.schedule.indices.size());
            d.t = t_lo + rng.below(t_hi - t_lo + 1);
            d.noise = rng.normal_tensor(data[d.sample].z0.shape());
        }
        auto g_student = res.student.zeros_like();
        auto step = dmd_student_step(res.student, real, res.fake_critic, data, draws, cfg.schedule, s, g_student,
                                     cfg.clip_x0, cfg.threads);
        opt_student.step(res.student.named_params(), g_student.named_params());
        ++res.student_updates;
        res.max_update_gap = std::max(res.max_update_gap, res.student_updates - res.critic_updates);

        std::vector<CriticDraw> cdraws(cfg.batch);
        for (std::size_t i = 0; i < cfg.batch; ++i) {
            cdraws[i].sample = draws[i].sample;
            cdraws[i].t = t_lo + rng.below(t_hi - t_lo + 1);
            cdraws[i].eps = rng.normal_tensor(data[draws[i].sample].z0.shape());
        }
        auto g_fake = res.fake_critic.zeros_like();
        const double closs = fake_critic_step(res.fake_critic, data, step.samples, cdraws, s, g_fake, cfg.threads);
        opt_fake.step(res.fake_critic.named_params(), g_fake.named_params());
        ++res.critic_updates;
        res.dmd_log.push_back({it, closs, step.score_gap});
        if (mon2.update(closs)) {
            if (on_abort) on_abort(res.student, "dmd");
            throw DivergenceError("distill: fake-critic loss diverged", static_cast<long>(it));
        }
        if (log && (it % 100 == 0 || it + 1 == cfg.dmd_iterations)) {
            log("dmd " + std::to_string(it) + " critic " + std::to_string(closs) + " gap " +
                std::to_string(step.score_gap));
        }
    }
    res.real_checksum_after = parameter_checksum(real);
    return res;
}

}  // namespace tryon
