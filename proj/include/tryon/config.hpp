#pragma once

// Run configuration: JSON with // and /* */ comments. Every key is optional
// and falls back to the built-in default; unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "tryon/container.hpp"
#include "tryon/data.hpp"
#include "tryon/dmd.hpp"
#include "tryon/model.hpp"
#include "tryon/train.hpp"

#ifndef TRYON_VERSION
#define TRYON_VERSION "0.1.0"
#endif

namespace tryon {

inline constexpr const char* kVersion = TRYON_VERSION;

struct RunConfig {
    DenoiserConfig model;  // latent/pose channels follow the autoencoder
    std::uint64_t model_seed = 3;

    std::size_t vae_latent_channels = 8;
    std::uint64_t vae_seed = 17;

    std::size_t train_steps = 1000;
    std::size_t teacher_steps = 20;
    bool clip_x0 = true;  // clamp predicted clean latents to the autoencoder's range

    GeneratorConfig data;
    std::uint64_t data_seed = 7;

    TrainConfig train;
    DistillConfig distill;
    std::uint64_t cache_seed = 11;
    std::uint64_t sample_seed = 9;

    std::string out_dir = "runs/default";
    std::size_t threads = 1;

    void validate() const {
        try {
            model.validate();
            data.validate();
            distill.schedule.validate();
        } catch (const InvalidArgument& e) {
            throw ConfigError(e.what());
        }
        auto need = [](bool ok, const std::string& msg) {
            if (!ok) throw ConfigError(msg);
        };
        need(model.latent_channels == vae_latent_channels && model.pose_channels == vae_latent_channels,
             "model latent channels must match vae.latent_channels");
        need(vae_latent_channels >= 3, "vae.latent_channels must be >= 3");
        need(train_steps >= 2, "diffusion.train_steps must be >= 2");
        need(teacher_steps >= 1 && teacher_steps <= train_steps, "diffusion.teacher_steps must be in [1, train_steps]");
        need(distill.schedule.teacher_steps <= train_steps, "distill.cache_teacher_steps must be <= train_steps");
        need(distill.schedule.indices.size() == 4, "distill.student_indices must have 4 entries");
        need(train.iterations >= 1 && train.batch >= 1, "train.iterations and train.batch must be >= 1");
        need(train.optimizer.lr > 0.0, "train.lr must be > 0");
        need(distill.cache_size >= 1 && distill.batch >= 1, "distill.cache_size and distill.batch must be >= 1");
        need(distill.init_lr > 0.0 && distill.dmd_lr > 0.0 && distill.critic_lr > 0.0,
             "distill learning rates must be > 0");
        need(distill.t_min_frac >= 0.0 && distill.t_min_frac < distill.t_max_frac && distill.t_max_frac <= 1.0,
             "distill critic timestep range must satisfy 0 <= t_min_frac < t_max_frac <= 1");
        need(distill.divergence_patience >= 1, "distill.divergence_patience must be >= 1");
        need(threads >= 1, "threads must be >= 1");
        need(!out_dir.empty(), "out_dir must not be empty");
    }

    ToyVaeParams vae() const { return ToyVaeParams::make(data.vae_factor, vae_latent_channels, vae_seed); }
    NoiseSchedule schedule() const { return make_schedule(train_steps); }
    DdimOptions ddim() const { return {clip_x0 ? latent_bound(vae()) : 0.0}; }
};

namespace detail {

// Reads keys out of one JSON object and complains about leftovers.
class Section {
public:
    Section(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) {
            throw ConfigError(where() + " must be an object");
        }
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) {
            return;
        }
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(where() + "." + key + " has the wrong type");
        }
    }

    std::optional<Section> sub(const char* key) {
        seen_.insert(key);
        if (!j_.contains(key)) {
            return std::nullopt;
        }
        return Section(j_.at(key), where() + "." + key);
    }

    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.count(k)) {
                throw ConfigError("unknown config key " + where() + "." + k);
            }
        }
    }

private:
    std::string where() const { return name_.empty() ? "<root>" : name_; }

    const nlohmann::json& j_;
    std::string name_;
    std::set<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json run_config_json(const RunConfig& c) {
    const auto& m = c.model;
    const auto& d = c.distill;
    nlohmann::json data = c.data;
    data["seed"] = c.data_seed;
    return {
        {"out_dir", c.out_dir},
        {"threads", c.threads},
        {"model",
         {{"channels", m.channels},
          {"heads", m.heads},
          {"head_dim", m.head_dim},
          {"blocks", m.blocks},
          {"adapter_rank", m.adapter_rank},
          {"residual_gain", m.residual_gain},
          {"rope_base", m.rope_base},
          {"seed", c.model_seed}}},
        {"vae", {{"latent_channels", c.vae_latent_channels}, {"seed", c.vae_seed}}},
        {"diffusion", {{"train_steps", c.train_steps}, {"teacher_steps", c.teacher_steps}, {"clip_x0", c.clip_x0}}},
        {"data", data},
        {"train",
         {{"iterations", c.train.iterations},
          {"batch", c.train.batch},
          {"lr", c.train.optimizer.lr},
          {"beta1", c.train.optimizer.beta1},
          {"beta2", c.train.optimizer.beta2},
          {"weight_decay", c.train.optimizer.weight_decay},
          {"grad_clip", c.train.optimizer.grad_clip},
          {"seed", c.train.seed}}},
        {"distill",
         {{"student_indices", d.schedule.indices},
          {"cache_teacher_steps", d.schedule.teacher_steps},
          {"cache_size", d.cache_size},
          {"cache_seed", c.cache_seed},
          {"init_iterations", d.init_iterations},
          {"dmd_iterations", d.dmd_iterations},
          {"batch", d.batch},
          {"init_lr", d.init_lr},
          {"dmd_lr", d.dmd_lr},
          {"critic_lr", d.critic_lr},
          {"t_min_frac", d.t_min_frac},
          {"t_max_frac", d.t_max_frac},
          {"divergence_factor", d.divergence_factor},
          {"divergence_patience", d.divergence_patience},
          {"seed", d.seed}}},
        {"sample", {{"seed", c.sample_seed}}},
    };
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
    RunConfig c;
    detail::Section root(j, "");
    root.get("out_dir", c.out_dir);
    root.get("threads", c.threads);
    if (auto s = root.sub("model")) {
        s->get("channels", c.model.channels);
        s->get("heads", c.model.heads);
        s->get("head_dim", c.model.head_dim);
        s->get("blocks", c.model.blocks);
        s->get("adapter_rank", c.model.adapter_rank);
        s->get("residual_gain", c.model.residual_gain);
        s->get("rope_base", c.model.rope_base);
        s->get("seed", c.model_seed);
        s->finish();
    }
    if (auto s = root.sub("vae")) {
        s->get("latent_channels", c.vae_latent_channels);
        s->get("seed", c.vae_seed);
        s->finish();
    }
    c.model.latent_channels = c.model.pose_channels = c.vae_latent_channels;
    if (auto s = root.sub("diffusion")) {
        s->get("train_steps", c.train_steps);
        s->get("teacher_steps", c.teacher_steps);
        s->get("clip_x0", c.clip_x0);
        s->finish();
    }
    if (auto s = root.sub("data")) {
        s->get("frames", c.data.frames);
        s->get("height", c.data.height);
        s->get("width", c.data.width);
        s->get("vae_factor", c.data.vae_factor);
        s->get("n_train", c.data.n_train);
        s->get("n_test", c.data.n_test);
        s->get("occluder", c.data.occluder);
        s->get("seed", c.data_seed);
        s->finish();
    }
    if (auto s = root.sub("train")) {
        s->get("iterations", c.train.iterations);
        s->get("batch", c.train.batch);
        s->get("lr", c.train.optimizer.lr);
        s->get("beta1", c.train.optimizer.beta1);
        s->get("beta2", c.train.optimizer.beta2);
        s->get("weight_decay", c.train.optimizer.weight_decay);
        s->get("grad_clip", c.train.optimizer.grad_clip);
        s->get("seed", c.train.seed);
        s->finish();
    }
    if (auto s = root.sub("distill")) {
        s->get("student_indices", c.distill.schedule.indices);
        s->get("cache_teacher_steps", c.distill.schedule.teacher_steps);
        s->get("cache_size", c.distill.cache_size);
        s->get("cache_seed", c.cache_seed);
        s->get("init_iterations", c.distill.init_iterations);
        s->get("dmd_iterations", c.distill.dmd_iterations);
        s->get("batch", c.distill.batch);
        s->get("init_lr", c.distill.init_lr);
        s->get("dmd_lr", c.distill.dmd_lr);
        s->get("critic_lr", c.distill.critic_lr);
        s->get("t_min_frac", c.distill.t_min_frac);
        s->get("t_max_frac", c.distill.t_max_frac);
        s->get("divergence_factor", c.distill.divergence_factor);
        s->get("divergence_patience", c.distill.divergence_patience);
        s->get("seed", c.distill.seed);
        s->finish();
    }
    if (auto s = root.sub("sample")) {
        s->get("seed", c.sample_seed);
        s->finish();
    }
    root.finish();
    c.train.threads = c.distill.threads = c.threads;
    c.distill.clip_x0 = c.ddim().clip_x0;
    c.validate();
    return c;
}

// Accepts a plain config or a run manifest (whose "config" member is used).
inline RunConfig parse_run_config_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text, nullptr, true, true);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (j.is_object() && j.contains("tryon_version") && j.contains("config")) {
        return parse_run_config(j.at("config"));
    }
    return parse_run_config(j);
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file_bytes(path);
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
    return parse_run_config_text(text);
}

// Everything needed to rerun a command: version, resolved config and the
// command's own arguments.
inline nlohmann::json run_manifest(const RunConfig& c, const std::string& command, const nlohmann::json& args) {
    return {{"tryon_version", kVersion}, {"command", command}, {"args", args}, {"config", run_config_json(c)}};
}

}  // namespace tryon
