// priordet CLI: reproducible offline experiments over the detector stack.
// Subcommands: gen-data, fit-gmm, train, eval, ablate, inspect-spectrum,
// check-grads. Exit codes: 0 success, 1 validation failure, 2 numeric
// failure.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <thread>

#include "priordet/gradcheck.hpp"
#include "priordet/model.hpp"

namespace fs = std::filesystem;
using namespace priordet;

namespace {

using Scalar = double;

SynthConfig synth_config_from(const Json& cfg, std::uint64_t seed) {
    const auto& d = cfg.at("data");
    SynthConfig sc;
    sc.height = d.at("height").get<int>();
    sc.width = d.at("width").get<int>();
    sc.min_nodules = d.at("min_nodules").get<int>();
    sc.max_nodules = d.at("max_nodules").get<int>();
    sc.speckle_scale = d.at("speckle_scale").get<double>();
    sc.boundary_blur = d.at("boundary_blur").get<double>();
    sc.texture = d.at("texture").get<double>();
    sc.shadow_prob = d.at("shadow_prob").get<double>();
    sc.shadow_strength = d.at("shadow_strength").get<double>();
    sc.malignant_waviness = d.at("malignant_waviness").get<double>();
    sc.seed = seed;
    sc.geometry = default_geometry(sc.width);
    return sc;
}

Json resolved_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    Json cfg = config_path.empty() ? default_config() : load_config_file(config_path);
    for (const auto& s : overrides) apply_override(cfg, s);
    return cfg;
}

std::vector<Eigen::Vector2d> geometry_points(const std::vector<Sample>& samples,
                                             std::vector<double>* widths_px = nullptr) {
    std::vector<Eigen::Vector2d> pts;
    for (const auto& s : samples) {
        const double W = static_cast<double>(s.image.dim(1));
        const double H = static_cast<double>(s.image.dim(0));
        for (const auto& b : s.boxes) {
            const double w_px = b.w * W, h_px = b.h * H;
            pts.emplace_back(h_px / w_px, std::log(w_px));
            if (widths_px) widths_px->push_back(w_px);
        }
    }
    return pts;
}

GmmPrior2D fit_prior_from_samples(const std::vector<Sample>& samples, int M, int max_iter,
                                  double tol, std::uint64_t seed) {
    std::vector<double> widths;
    auto pts = geometry_points(samples, &widths);
    auto fit = fit_em(pts, M, max_iter, tol, seed);
    std::sort(widths.begin(), widths.end());
    fit.prior.w_ref = widths.empty() ? 1.0 : widths[widths.size() / 2];
    return fit.prior;
}

std::shared_ptr<const GmmPrior2D> resolve_prior(const Json& cfg,
                                                const std::vector<Sample>& train_set) {
    const auto path = cfg.at("sdfpr").at("prior_file").get<std::string>();
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is) throw std::invalid_argument("prior file not readable: " + path);
        Json j;
        is >> j;
        return std::make_shared<GmmPrior2D>(prior_from_json(j));
    }
    std::cout << "no prior file configured; fitting M=3 prior from training annotations\n";
    return std::make_shared<GmmPrior2D>(
        fit_prior_from_samples(train_set, 3, 200, 1e-8, cfg.at("seed").get<std::uint64_t>()));
}

struct RunSummary {
    double ap50 = 0, ap = 0;
};

RunSummary run_training(Json cfg, const std::vector<Sample>& train_set,
                        const std::vector<Sample>& val_set, const std::string& out_dir,
                        bool quiet = false) {
    std::mt19937_64 init_rng(cfg.at("seed").get<std::uint64_t>());
    Detector<Scalar> model(cfg, init_rng);
    if (cfg.at("sdfpr").at("enabled").get<bool>()) model.set_prior(resolve_prior(cfg, train_set));

    std::unique_ptr<std::ofstream> log;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        log = std::make_unique<std::ofstream>(fs::path(out_dir) / "metrics.jsonl");
        (*log) << Json{{"config", cfg}}.dump() << "\n";
    }
    auto history = train_detector(model, train_set, val_set, cfg, log.get());
    if (!quiet)
        for (const auto& st : history)
            std::cout << "epoch " << st.epoch << "  loss " << st.loss << "  cls " << st.cls
                      << "  l1 " << st.l1 << "  giou " << st.giou
                      << (st.ap50 ? "  ap50 " + std::to_string(*st.ap50) : "") << "\n";

    RunSummary s;
    const auto rep = evaluate_model(model, val_set.empty() ? train_set : val_set,
                                    cfg.at("classes").get<int>());
    s.ap50 = rep.ap50.value_or(0.0);
    s.ap = rep.ap.value_or(0.0);
    if (!out_dir.empty()) {
        save_checkpoint((fs::path(out_dir) / "checkpoint.pdck").string(), model, cfg);
        std::ofstream rj(fs::path(out_dir) / "report.json");
        rj << Json{{"config", cfg}, {"report", rep.to_json()}}.dump(2) << "\n";
        if (!quiet) std::cout << rep.to_table();
    }
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"prior-guided ultrasound nodule detection toolkit"};
    app.require_subcommand(1);

    std::string config_path, data_dir, val_dir, out_path, checkpoint, annotations;
    std::vector<std::string> overrides;
    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON config file");
        cmd->add_option("--set", overrides, "dotted config override key=value")->take_all();
    };

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    int gen_count = 16;
    std::uint64_t gen_seed = 0;
    add_common(gen);
    gen->add_option("--count", gen_count, "number of images");
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--out", out_path, "output directory")->required();

    // fit-gmm
    auto* fitg = app.add_subcommand("fit-gmm", "fit the geometry prior from annotations");
    int fit_m = 3, fit_iter = 200;
    double fit_tol = 1e-8;
    std::uint64_t fit_seed = 0;
    fitg->add_option("--annotations", annotations, "annotations.jsonl or dataset dir")->required();
    fitg->add_option("--M", fit_m, "mixture components (default 3)");
    fitg->add_option("--max-iter", fit_iter, "EM iteration cap");
    fitg->add_option("--tol", fit_tol, "EM log-likelihood tolerance");
    fitg->add_option("--seed", fit_seed, "EM init seed");
    fitg->add_option("--out", out_path, "prior JSON path")->required();

    // train
    auto* tr = app.add_subcommand("train", "train the detector");
    add_common(tr);
    tr->add_option("--data", data_dir, "training dataset dir")->required();
    tr->add_option("--val", val_dir, "validation dataset dir");
    tr->add_option("--out-dir", out_path, "output directory")->required();

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    ev->add_option("--data", data_dir, "dataset dir")->required();
    ev->add_option("--out", out_path, "report JSON path");

    // ablate
    auto* ab = app.add_subcommand("ablate", "train/evaluate across strategies and seeds");
    std::string strategies_csv = "original,sequential,reversed,dfi";
    std::string seeds_csv = "1,2,3";
    int ab_jobs = 1;
    add_common(ab);
    ab->add_option("--data", data_dir, "training dataset dir")->required();
    ab->add_option("--val", val_dir, "validation dataset dir")->required();
    ab->add_option("--strategies", strategies_csv, "comma list of interaction strategies");
    ab->add_option("--seeds", seeds_csv, "comma list of seeds");
    ab->add_option("--jobs", ab_jobs, "parallel runs");
    ab->add_option("--out", out_path, "table JSON path");

    // inspect-spectrum
    auto* insp = app.add_subcommand("inspect-spectrum", "dump pre/post-filter amplitude maps");
    int insp_index = 0, insp_level = 0;
    std::string insp_out = "spectrum";
    add_common(insp);
    insp->add_option("--data", data_dir, "dataset dir")->required();
    insp->add_option("--index", insp_index, "sample index");
    insp->add_option("--level", insp_level, "pyramid level 0..2");
    insp->add_option("--checkpoint", checkpoint, "optional trained checkpoint");
    insp->add_option("--out-dir", insp_out, "output directory");

    // check-grads
    auto* cg = app.add_subcommand("check-grads", "run the finite-difference suite");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            auto cfg = resolved_config(config_path, overrides);
            auto sc = synth_config_from(cfg, gen_seed);
            auto samples = generate(sc, gen_count);
            write_dataset(samples, out_path);
            std::size_t boxes = 0;
            for (const auto& s : samples) boxes += s.boxes.size();
            std::ofstream meta(fs::path(out_path) / "gen_config.json");
            meta << Json{{"config", cfg}, {"seed", gen_seed}, {"count", gen_count}}.dump(2) << "\n";
            std::cout << "wrote " << samples.size() << " images, " << boxes << " boxes to "
                      << out_path << "\n";
        } else if (*fitg) {
            auto samples = read_dataset(annotations, /*load_images=*/false);
            std::vector<double> widths;
            auto pts = geometry_points(samples, &widths);
            if (static_cast<int>(pts.size()) < 10 * fit_m)
                throw std::invalid_argument("fit-gmm: need at least " + std::to_string(10 * fit_m) +
                                            " boxes, got " + std::to_string(pts.size()));
            auto fit = fit_em(pts, fit_m, fit_iter, fit_tol, fit_seed);
            std::sort(widths.begin(), widths.end());
            fit.prior.w_ref = widths[widths.size() / 2];
            auto j = prior_to_json(fit.prior);
            j["meta"] = Json{{"seed", fit_seed},
                             {"iterations", fit.iterations},
                             {"converged", fit.converged},
                             {"annotations", annotations}};
            std::ofstream os(out_path);
            os << j.dump(2) << "\n";
            std::cout << "fitted M=" << fit.prior.M << " prior over " << pts.size() << " boxes ("
                      << fit.iterations << " EM iterations)\n";
            for (int m = 0; m < fit.prior.M; ++m)
                std::cout << "  component " << m << ": pi=" << fit.prior.weights[m]
                          << " mean_r=" << fit.prior.means[m][0]
                          << " mean_logw=" << fit.prior.means[m][1] << "\n";
            std::cout << "w_ref=" << fit.prior.w_ref << " -> " << out_path << "\n";
        } else if (*tr) {
            auto cfg = resolved_config(config_path, overrides);
            auto train_set = read_dataset(data_dir);
            std::vector<Sample> val_set;
            if (!val_dir.empty()) val_set = read_dataset(val_dir);
            run_training(cfg, train_set, val_set, out_path);
        } else if (*ev) {
            auto cfg = checkpoint_config(checkpoint);
            std::mt19937_64 rng(cfg.at("seed").get<std::uint64_t>());
            Detector<Scalar> model(cfg, rng);
            load_checkpoint(checkpoint, model);
            auto samples = read_dataset(data_dir);
            auto rep = evaluate_model(model, samples, cfg.at("classes").get<int>());
            std::cout << rep.to_table();
            if (!out_path.empty()) {
                std::ofstream os(out_path);
                os << Json{{"config", cfg}, {"report", rep.to_json()}}.dump(2) << "\n";
            }
        } else if (*ab) {
            auto base_cfg = resolved_config(config_path, overrides);
            auto train_set = read_dataset(data_dir);
            auto val_set = read_dataset(val_dir);
            std::vector<std::string> strategies;
            for (auto part : CLI::detail::split(strategies_csv, ',')) strategies.push_back(part);
            std::vector<std::uint64_t> seeds;
            for (auto part : CLI::detail::split(seeds_csv, ','))
                seeds.push_back(std::stoull(part));

            struct Cell {
                std::string strategy;
                std::uint64_t seed;
                RunSummary out;
            };
            std::vector<Cell> cells;
            for (const auto& s : strategies)
                for (auto seed : seeds) cells.push_back({s, seed, {}});

            std::atomic<std::size_t> next{0};
            auto worker = [&]() {
                while (true) {
                    const auto k = next.fetch_add(1);
                    if (k >= cells.size()) break;
                    Json cfg = base_cfg;
                    cfg["transformer"]["interaction"] = cells[k].strategy;
                    cfg["seed"] = cells[k].seed;
                    cells[k].out = run_training(cfg, train_set, val_set, "", /*quiet=*/true);
                }
            };
            std::vector<std::thread> pool;
            const int jobs = std::max(1, ab_jobs);
            for (int t = 0; t < jobs - 1; ++t) pool.emplace_back(worker);
            worker();
            for (auto& t : pool) t.join();

            Json table = Json::array();
            std::cout << "strategy      mean_ap50     sd_ap50   per-seed\n";
            for (const auto& s : strategies) {
                std::vector<double> vals;
                Json per_seed = Json::array();
                for (const auto& c : cells)
                    if (c.strategy == s) {
                        vals.push_back(c.out.ap50);
                        per_seed.push_back({{"seed", c.seed}, {"ap50", c.out.ap50}, {"ap", c.out.ap}});
                    }
                double m = 0;
                for (double v : vals) m += v;
                m /= vals.empty() ? 1 : vals.size();
                double sd = 0;
                for (double v : vals) sd += (v - m) * (v - m);
                sd = vals.size() > 1 ? std::sqrt(sd / (vals.size() - 1)) : 0.0;
                char line[128];
                std::snprintf(line, sizeof(line), "%-12s %10.3f %10.3f   ", s.c_str(), m, sd);
                std::cout << line;
                for (double v : vals) std::cout << v << " ";
                std::cout << "\n";
                table.push_back({{"strategy", s}, {"mean_ap50", m}, {"sd_ap50", sd}, {"runs", per_seed}});
            }
            if (!out_path.empty()) {
                std::ofstream os(out_path);
                os << Json{{"config", base_cfg}, {"table", table}}.dump(2) << "\n";
            }
        } else if (*insp) {
            auto cfg = checkpoint.empty() ? resolved_config(config_path, overrides)
                                          : checkpoint_config(checkpoint);
            std::mt19937_64 rng(cfg.at("seed").get<std::uint64_t>());
            Detector<Scalar> model(cfg, rng);
            if (!checkpoint.empty()) load_checkpoint(checkpoint, model);
            if (!model.msffm_enabled)
                throw std::invalid_argument("inspect-spectrum: msffm disabled in this config");
            auto samples = read_dataset(data_dir);
            if (insp_index < 0 || insp_index >= static_cast<int>(samples.size()))
                throw std::invalid_argument("inspect-spectrum: sample index out of range");
            NoGradGuard ng;
            TrainContext ctx;
            auto pyr = model.pyramid_features(stack_images<Scalar>(samples, {insp_index}), ctx);
            auto& branch = model.msffm.modules[insp_level].frequency;
            auto amp_pre = amplitude(fft2(pyr.levels[insp_level]));
            auto filtered = branch.bn.forward(branch.pw.forward(amp_pre), false);
            filtered = add_scalar(relu(add_scalar(filtered, Scalar(branch.relu_shift))),
                                  Scalar(-branch.relu_shift));
            fs::create_directories(insp_out);
            save_tensor((fs::path(insp_out) / "amplitude_pre.tnsr").string(), amp_pre);
            save_tensor((fs::path(insp_out) / "amplitude_post.tnsr").string(), filtered);
            std::ofstream meta(fs::path(insp_out) / "inspect_config.json");
            meta << Json{{"config", cfg}, {"index", insp_index}, {"level", insp_level}}.dump(2)
                 << "\n";
            std::cout << "wrote amplitude maps " << dims_str(amp_pre.shape()) << " to " << insp_out
                      << "\n";
        } else if (*cg) {
            const auto t0 = std::chrono::steady_clock::now();
            auto results = run_gradcheck_suite();
            const auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0);
            bool ok = true;
            std::printf("%-24s %14s %10s  %s\n", "op", "max_rel_err", "tol", "status");
            for (const auto& r : results) {
                ok = ok && r.passed();
                std::printf("%-24s %14.3e %10.0e  %s\n", r.name.c_str(), r.max_rel_err, r.tolerance,
                            r.passed() ? "ok" : "FAIL");
            }
            std::printf("%zu checks in %.1f s\n", results.size(), dt.count());
            if (!ok) {
                std::cerr << "check-grads: tolerance exceeded\n";
                return 2;
            }
        }
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
