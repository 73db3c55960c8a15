// tryon_cli: data generation, teacher training, sampling, distillation,
// evaluation and container inspection.
//
// Exit codes: 0 ok, 1 I/O or file-format failure, 2 usage or config error,
// 3 numeric failure.

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>

#include <json.hpp>

#include "CLI11.hpp"
#include "tryon/config.hpp"
#include "tryon/pipeline.hpp"

namespace fs = std::filesystem;
using namespace tryon;

namespace {

void write_png(const fs::path& path, const Tensor<float>& frame) {
    if (frame.rank() != 3 || frame.dim(2) != 3) {
        throw InvalidArgument("write_png expects [H, W, 3]");
    }
    const auto h = static_cast<png_uint_32>(frame.dim(0)), w = static_cast<png_uint_32>(frame.dim(1));
    std::vector<png_byte> rows(static_cast<std::size_t>(h) * w * 3);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        rows[i] = static_cast<png_byte>(std::lround(std::clamp(frame[i], 0.0f, 1.0f) * 255.0f));
    }
    fs::create_directories(path.parent_path());
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("libpng failed writing " + path.string());
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (png_uint_32 y = 0; y < h; ++y) {
        png_write_row(png, rows.data() + static_cast<std::size_t>(y) * w * 3);
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    if (std::fclose(fp) != 0) {
        throw IoError("error closing " + path.string());
    }
}

void write_frames(const fs::path& dir, const Tensor<float>& video) {
    for (std::size_t f = 0; f < video.dim(0); ++f) {
        char name[32];
        std::snprintf(name, sizeof name, "frame_%03zu.png", f);
        write_png(dir / name, video_frame(video, f));
    }
}

struct Ctx {
    std::string config_path;
    std::string out;
    std::size_t threads = 0;  // 0 keeps the config value
    RunConfig cfg;

    void load() {
        cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
        if (!out.empty()) cfg.out_dir = out;
        if (threads) cfg.threads = cfg.train.threads = cfg.distill.threads = threads;
        cfg.validate();
    }

    fs::path out_dir() const { return cfg.out_dir; }

    void manifest(const std::string& command, const nlohmann::json& args) const {
        write_file_bytes(out_dir() / (command + ".manifest.json"), run_manifest(cfg, command, args).dump(2) + "\n");
    }
};

void log_line(const std::string& s) { std::cerr << s << std::endl; }

fs::path or_default(const std::string& v, const fs::path& d) { return v.empty() ? d : fs::path(v); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Toy video virtual try-on: diffusion teacher, few-step student, metrics"};
    app.require_subcommand(1);
    Ctx ctx;
    app.add_option("--config", ctx.config_path, "run configuration (JSON with comments, or a run manifest)");
    app.add_option("--out", ctx.out, "output directory (overrides out_dir)");
    app.add_option("--threads", ctx.threads, "worker threads (default from config, 1 = bit-reproducible)")
        ->check(CLI::PositiveNumber);
    app.set_version_flag("--version", std::string(kVersion));

    std::function<void()> run;

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "write the synthetic dataset and its manifest");
    std::optional<std::uint64_t> gen_seed;
    std::optional<std::size_t> gen_n;
    std::string gen_dir;
    gen->add_option("--seed", gen_seed, "dataset base seed");
    gen->add_option("--n", gen_n, "total sample count (split in the configured train/test ratio)")
        ->check(CLI::PositiveNumber);
    gen->add_option("--dir", gen_dir, "dataset directory (default <out>/data)");
    gen->callback([&] {
        run = [&] {
            ctx.load();
            auto& g = ctx.cfg.data;
            if (gen_seed) ctx.cfg.data_seed = *gen_seed;
            if (gen_n) {
                const std::size_t total = g.n_train + g.n_test;
                std::size_t test = (*gen_n * g.n_test + total / 2) / total;
                if (g.n_test > 0 && test == 0 && *gen_n >= 2) test = 1;
                if (test >= *gen_n && *gen_n >= 2) test = *gen_n - 1;
                g.n_test = std::min(test, *gen_n);
                g.n_train = *gen_n - g.n_test;
            }
            const fs::path dir = or_default(gen_dir, ctx.out_dir() / "data");
            const Dataset d = plan_dataset(g, ctx.cfg.data_seed);
            write_dataset(d, dir);
            ctx.manifest("gen-data", {{"seed", ctx.cfg.data_seed}, {"n", d.entries.size()}, {"dir", dir.string()}});
            std::cout << "wrote " << d.entries.size() << " samples (" << g.n_train << " train, " << g.n_test
                      << " test) to " << dir.string() << "\n";
        };
    });

    // train
    auto* train = app.add_subcommand("train", "fit the teacher with the mask-aware loss");
    std::string train_data;
    std::optional<std::size_t> train_iters;
    train->add_option("--data", train_data, "dataset directory (default <out>/data)");
    train->add_option("--iterations", train_iters, "override train.iterations")->check(CLI::PositiveNumber);
    train->callback([&] {
        run = [&] {
            ctx.load();
            if (train_iters) ctx.cfg.train.iterations = *train_iters;
            const auto& c = ctx.cfg;
            const fs::path data_dir = or_default(train_data, ctx.out_dir() / "data");
            const Dataset d = read_dataset(data_dir);
            const auto vae = c.vae();
            const auto set = load_split(data_dir, d, "train", vae, c.model.channels);
            require(set.size() > 0, "train: the dataset has no training samples");
            auto m = Denoiser<float>::init(c.model, c.model_seed);
            const auto s = c.schedule();
            const auto rows = train_teacher(m, set.prepared, c.train, s, [&](const LossRow& r) {
                if (r.iteration % 100 == 0 || r.iteration + 1 == c.train.iterations) {
                    log_line("train " + std::to_string(r.iteration) + " loss " + std::to_string(r.loss.total));
                }
            });
            save_checkpoint(ctx.out_dir() / "teacher", m);
            write_file_bytes(ctx.out_dir() / "teacher_loss.csv", loss_csv(rows));
            ctx.manifest("train", {{"data", data_dir.string()}, {"iterations", c.train.iterations}});
            std::cout << "teacher checkpoint " << (ctx.out_dir() / "teacher").string() << " final loss "
                      << rows.back().loss.total << "\n";
        };
    });

    // sample
    auto* smp = app.add_subcommand("sample", "render one try-on video with the teacher or the student");
    std::size_t smp_steps = 0;
    bool smp_student = false, smp_unpaired = false;
    std::size_t smp_index = 0;
    std::string smp_data, smp_ckpt;
    smp->add_option("--steps", smp_steps, "sampling steps (teacher default diffusion.teacher_steps, student 4)");
    smp->add_flag("--student", smp_student, "use the distilled student");
    smp->add_option("--index", smp_index, "test sample index");
    smp->add_flag("--unpaired", smp_unpaired, "wear the sample's assigned other garment");
    smp->add_option("--data", smp_data, "dataset directory (default <out>/data)");
    smp->add_option("--checkpoint", smp_ckpt, "checkpoint stem (default <out>/teacher or <out>/student)");
    smp->callback([&] {
        run = [&] {
            ctx.load();
            const auto& c = ctx.cfg;
            const std::size_t nstudent = c.distill.schedule.indices.size();
            const std::size_t steps = smp_steps ? smp_steps : (smp_student ? nstudent : c.teacher_steps);
            if (smp_student && steps != nstudent) {
                throw ConfigError("the student samples with exactly " + std::to_string(nstudent) + " steps");
            }
            const fs::path data_dir = or_default(smp_data, ctx.out_dir() / "data");
            const Dataset d = read_dataset(data_dir);
            const auto vae = c.vae();
            const auto set = smp_unpaired ? unpaired_split(d, vae, c.model.channels, smp_index + 1)
                                          : load_split(data_dir, d, "test", vae, c.model.channels, smp_index + 1);
            if (smp_index >= set.size()) {
                throw ConfigError("--index " + std::to_string(smp_index) + " is out of range for the test split");
            }
            const auto m = load_checkpoint(or_default(smp_ckpt, ctx.out_dir() / (smp_student ? "student" : "teacher")));
            const auto s = c.schedule();
            const auto& p = set.prepared[smp_index];
            const std::uint64_t seed = sample_noise_seed(c.sample_seed, smp_index);
            std::size_t nfe = 0;
            const Tensor<float> z = smp_student
                                        ? few_step_sample(m, p, c.distill.schedule, seed, s, c.ddim().clip_x0, &nfe)
                                        : teacher_sample(m, p, steps, seed, s, c.ddim(), {}, &nfe);
            const Tensor<float> video = toy_vae_decode(z, vae);
            const std::string tag = std::string(smp_student ? "student" : "teacher") + "_steps" +
                                    std::to_string(steps) + (smp_unpaired ? "_unpaired" : "") + "_" +
                                    std::to_string(smp_index);
            const fs::path dir = ctx.out_dir() / "samples" / tag;
            write_frames(dir, video);
            write_tensor_container(dir / "result.tensors", {{"latent", z}, {"video", video}});
            ctx.manifest("sample", {{"steps", steps}, {"student", smp_student}, {"index", smp_index},
                                    {"unpaired", smp_unpaired}, {"data", data_dir.string()}});
            std::cout << "wrote " << video.dim(0) << " frames to " << dir.string() << " (" << nfe
                      << " network evaluations) garment_fidelity " << garment_fidelity(video, set.raw[smp_index])
                      << "\n";
        };
    });

    // distill
    auto* dst = app.add_subcommand("distill", "distill the teacher into the few-step student");
    std::string dst_data, dst_teacher, dst_cache;
    dst->add_option("--data", dst_data, "dataset directory (default <out>/data)");
    dst->add_option("--teacher", dst_teacher, "teacher checkpoint stem (default <out>/teacher)");
    dst->add_option("--cache", dst_cache, "reuse a trajectory cache directory instead of generating one");
    dst->callback([&] {
        run = [&] {
            ctx.load();
            const auto& c = ctx.cfg;
            const fs::path data_dir = or_default(dst_data, ctx.out_dir() / "data");
            const Dataset d = read_dataset(data_dir);
            const auto vae = c.vae();
            const auto set = load_split(data_dir, d, "train", vae, c.model.channels);
            require(set.size() > 0, "distill: the dataset has no training samples");
            const auto teacher = load_checkpoint(or_default(dst_teacher, ctx.out_dir() / "teacher"));
            const auto s = c.schedule();
            TrajectoryCache cache;
            if (!dst_cache.empty()) {
                cache = load_cache(dst_cache);
            } else {
                log_line("generating " + std::to_string(c.distill.cache_size) + " teacher trajectories");
                cache = generate_ode_cache(teacher, set.prepared, c.distill.cache_size, c.cache_seed,
                                           c.distill.schedule, s, c.ddim(), c.threads);
                save_cache(ctx.out_dir() / "cache", cache);
            }
            const auto on_abort = [&](const Denoiser<float>& st, const std::string& phase) {
                save_checkpoint(ctx.out_dir() / ("student_aborted_" + phase), st);
            };
            const auto r = distill(teacher, set.prepared, cache, c.distill, s, on_abort, log_line);
            save_checkpoint(ctx.out_dir() / "student", r.student);
            std::string init_csv = "iteration,loss\n", dmd_csv = "iteration,critic_loss,score_gap\n";
            char buf[96];
            for (std::size_t i = 0; i < r.init_loss.size(); ++i) {
                std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i, r.init_loss[i]);
                init_csv += buf;
            }
            for (const auto& row : r.dmd_log) {
                std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", row.iteration, row.critic_loss, row.score_gap);
                dmd_csv += buf;
            }
            write_file_bytes(ctx.out_dir() / "student_init_loss.csv", init_csv);
            write_file_bytes(ctx.out_dir() / "student_dmd_log.csv", dmd_csv);
            ctx.manifest("distill", {{"data", data_dir.string()}, {"cache", dst_cache}});
            std::cout << "student checkpoint " << (ctx.out_dir() / "student").string() << " ("
                      << r.student_updates << " student / " << r.critic_updates << " critic updates)\n";
        };
    });

    // eval
    auto* ev = app.add_subcommand("eval", "metric report on the paired and unpaired test splits");
    std::string ev_model = "teacher", ev_data, ev_ckpt;
    std::size_t ev_limit = 0, ev_steps = 0;
    ev->add_option("--model", ev_model, "what produces the videos")
        ->check(CLI::IsMember({"teacher", "student", "ground-truth"}));
    ev->add_option("--limit", ev_limit, "evaluate only the first N test samples (0 = all)");
    ev->add_option("--steps", ev_steps, "teacher sampling steps (default diffusion.teacher_steps)");
    ev->add_option("--data", ev_data, "dataset directory (default <out>/data)");
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint stem (default <out>/<model>)");
    ev->callback([&] {
        run = [&] {
            ctx.load();
            const auto& c = ctx.cfg;
            const fs::path data_dir = or_default(ev_data, ctx.out_dir() / "data");
            const Dataset d = read_dataset(data_dir);
            const auto vae = c.vae();
            const auto paired = load_split(data_dir, d, "test", vae, c.model.channels, ev_limit);
            const auto unpaired = unpaired_split(d, vae, c.model.channels, ev_limit);
            require(paired.size() > 0, "eval: the dataset has no test samples");
            const auto s = c.schedule();
            std::optional<Denoiser<float>> m;
            if (ev_model != "ground-truth") {
                m = load_checkpoint(or_default(ev_ckpt, ctx.out_dir() / ev_model));
            }
            auto videos = [&](const SampleSet& set) {
                if (!m) {
                    std::vector<Tensor<float>> v;
                    for (const auto& r : set.raw) v.push_back(r.person_video);
                    return v;
                }
                const auto gen = ev_model == "student"
                                     ? student_generator(*m, c.distill.schedule, c.sample_seed, s, c.ddim().clip_x0)
                                     : teacher_generator(*m, ev_steps ? ev_steps : c.teacher_steps, c.sample_seed, s,
                                                         c.ddim());
                return generate_videos(gen, set, vae, c.threads);
            };
            const nlohmann::json report{{"model", ev_model},
                                        {"paired", evaluate_videos(videos(paired), paired)},
                                        {"unpaired", evaluate_videos(videos(unpaired), unpaired)}};
            write_file_bytes(ctx.out_dir() / ("eval_" + ev_model + ".json"), report.dump(2) + "\n");
            ctx.manifest("eval", {{"model", ev_model}, {"limit", ev_limit}, {"steps", ev_steps},
                                  {"data", data_dir.string()}});
            std::cout << report.dump(2) << "\n";
        };
    });

    // inspect
    auto* ins = app.add_subcommand("inspect", "print tensor container headers");
    std::vector<std::string> ins_files;
    ins->add_option("files", ins_files, "container files")->required();
    ins->callback([&] {
        run = [&] {
            for (const auto& f : ins_files) {
                const std::string bytes = read_file_bytes(f);
                decode_tensor_container(bytes);  // full validation, payload included
                const auto h = parse_container_header(bytes);
                std::cout << f << ": " << h.names.size() << " tensors, header " << h.header_bytes << " B, payload "
                          << h.payload_bytes() << " B\n";
                for (std::size_t i = 0; i < h.names.size(); ++i) {
                    std::cout << "  " << h.names[i] << " f32 " << shape_str(h.shapes[i]) << "\n";
                }
            }
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }
    try {
        run();
        return 0;
    } catch (const NumericFailure& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const InvalidArgument& e) {
        std::cerr << "invalid argument: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
