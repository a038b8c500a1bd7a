#include "flare/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <thread>

#include <nlohmann/json.hpp>

#include "flare/laplace.hpp"
#include "flare/training.hpp"
#include "flare/uncertainty.hpp"

namespace flare {

using nlohmann::json;

std::uint64_t file_hash(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw SchemaError("file_hash: cannot open " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[4096];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ull;
        }
        if (!in) break;
    }
    return h;
}

void parallel_for(std::size_t n, std::size_t threads,
                  const std::function<void(std::size_t)>& body) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    const std::size_t workers = std::min(threads, n);
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) body(i);
        });
    for (std::thread& t : pool) t.join();
}

namespace {

const char* sampler_name(SamplerKind kind) {
    switch (kind) {
        case SamplerKind::Ddpm: return "ddpm";
        case SamplerKind::Ddim: return "ddim";
        case SamplerKind::MeanPath: return "mean";
    }
    return "?";
}

std::vector<std::string> dim_header(std::size_t d) {
    std::vector<std::string> h;
    for (std::size_t j = 0; j < d; ++j) h.push_back("x" + std::to_string(j));
    return h;
}

std::filesystem::path data_path(const RunConfig& cfg, const CliPaths& paths) {
    return paths.data.empty() ? paths.out_dir / (cfg.dataset + ".csv") : paths.data;
}

std::filesystem::path checkpoint_path(const RunConfig& cfg, const CliPaths& paths) {
    return paths.checkpoint.empty() ? paths.out_dir / (cfg.dataset + ".ckpt") : paths.checkpoint;
}

Dataset load_dataset_csv(const RunConfig& cfg, const std::filesystem::path& path) {
    const CsvTable table = read_csv(path);
    Dataset ds;
    ds.name = cfg.dataset;
    ds.dim = table.data.cols;
    ds.samples = table.data;
    if (ds.dim != cfg.model.data_dim)
        throw SchemaError("dataset " + path.string() + " has dim " + std::to_string(ds.dim) +
                          " but the model expects " + std::to_string(cfg.model.data_dim));
    return ds;
}

// Balanced accuracy of the fixed discriminator on a (real, generated) pair.
double pair_accuracy(const Discriminator& clf, const Matrix& real, const Matrix& generated) {
    const Vector r = clf.score_batch(real);
    const Vector g = clf.score_batch(generated);
    double tpr = 0.0, tnr = 0.0;
    for (double s : r) tpr += s >= 0.5 ? 1.0 : 0.0;
    for (double s : g) tnr += s < 0.5 ? 1.0 : 0.0;
    return 0.5 * (tpr / static_cast<double>(r.size()) + tnr / static_cast<double>(g.size()));
}

Matrix gather_rows(const Matrix& src, const std::vector<std::size_t>& ids) {
    Matrix out(ids.size(), src.cols);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto row = src.row(ids[i]);
        std::copy(row.begin(), row.end(), out.row_ptr(i));
    }
    return out;
}

}  // namespace

int cmd_gen_data(const RunConfig& cfg, const CliPaths& paths) {
    const std::size_t n = cfg.n_samples ? cfg.n_samples : preset_dataset_size(cfg.dataset);
    const Dataset ds = generate_dataset(cfg.dataset, n, cfg.seed);
    std::filesystem::create_directories(paths.out_dir);
    const auto csv = data_path(cfg, paths);
    write_csv(csv, ds.samples, dim_header(ds.dim));

    json meta{{"dataset", ds.name},
              {"dim", ds.dim},
              {"n_rows", ds.samples.rows},
              {"n_requested", n},
              {"seed", cfg.seed},
              {"generator_config", ds.config}};
    write_json(csv.parent_path() / (csv.stem().string() + ".meta.json"), meta);
    std::printf("gen-data: wrote %zu x %zu samples to %s\n", ds.samples.rows, ds.dim,
                csv.string().c_str());
    return kExitOk;
}

int cmd_train(const RunConfig& cfg, const CliPaths& paths) {
    const Dataset ds = load_dataset_csv(cfg, data_path(cfg, paths));
    const DiffusionSchedule schedule = cosine_schedule(cfg.total_steps);
    DenoiserModel model(cfg.model);
    model.init_params(cfg.seed);
    const TrainResult result = train(std::move(model), ds, schedule, cfg.train);

    std::filesystem::create_directories(paths.out_dir);
    const auto ckpt = checkpoint_path(cfg, paths);
    save_checkpoint(ckpt, result.model, result.ema_model.params.values, cfg.seed,
                    schedule.hash());

    Matrix loss(result.loss_history.size(), 2);
    for (std::size_t i = 0; i < result.loss_history.size(); ++i) {
        loss(i, 0) = static_cast<double>(i);
        loss(i, 1) = result.loss_history[i];
    }
    write_csv(paths.out_dir / "train_loss.csv", loss, {"step", "loss"});

    json manifest{{"dataset", cfg.dataset},
                  {"seed", cfg.seed},
                  {"steps", cfg.train.steps},
                  {"lr", cfg.train.lr},
                  {"batch", cfg.train.batch},
                  {"schedule_T", cfg.total_steps},
                  {"schedule_hash", schedule.hash()},
                  {"param_count", result.model.param_count()},
                  {"last_layer_count", result.model.last_layer_count()},
                  {"final_loss", result.loss_history.empty() ? 0.0 : result.loss_history.back()},
                  {"skipped_steps", result.skipped_steps}};
    write_json(paths.out_dir / "train_manifest.json", manifest);
    std::printf("train: %zu steps, final loss %.6f, checkpoint %s\n", cfg.train.steps,
                result.loss_history.empty() ? 0.0 : result.loss_history.back(),
                ckpt.string().c_str());
    return kExitOk;
}

int cmd_score(const RunConfig& cfg, const CliPaths& paths) {
    const DiffusionSchedule schedule = cosine_schedule(cfg.total_steps);
    const auto ckpt_path = checkpoint_path(cfg, paths);
    const Checkpoint ckpt = load_checkpoint(ckpt_path, schedule.hash());
    const DenoiserModel model = model_from_checkpoint(ckpt, true);
    const Dataset ds = load_dataset_csv(cfg, data_path(cfg, paths));
    const std::size_t p = model.param_count();
    const std::size_t d = model.config.data_dim;

    // Posterior per estimator; the GGN index-selection and assembly streams
    // are derived from the run seed so reruns are bit-identical.
    IndexSet set;
    PosteriorKind kind = PosteriorKind::Subnet;
    std::size_t m = 0;
    switch (cfg.estimator) {
        case EstimatorKind::Flare: {
            m = cfg.subnet_m ? cfg.subnet_m : preset_subnet_m(cfg.dataset, p);
            if (m > p) throw InvalidArgument("subnet_m exceeds the parameter count");
            if (m == p) {
                set.indices.resize(p);
                std::iota(set.indices.begin(), set.indices.end(), 0);
                kind = PosteriorKind::FullDense;
            } else {
                Rng idx_rng = derived_rng(cfg.seed, 9001);
                set = sample_uniform_indices(p, m, idx_rng);
            }
            break;
        }
        case EstimatorKind::FullFisher: {
            m = p;
            set.indices.resize(p);
            std::iota(set.indices.begin(), set.indices.end(), 0);
            kind = PosteriorKind::FullDense;
            break;
        }
        case EstimatorKind::LastLayer:
        case EstimatorKind::PredictiveVariance: {
            set = model.last_layer_indices();
            m = set.size();
            kind = PosteriorKind::LastLayer;
            break;
        }
    }
    GgnMatrix ggn = assemble_ggn(model, schedule, ds, set, cfg.ggn_pairs,
                                 derived_rng(cfg.seed, 9002)());
    const PosteriorOperator posterior(kind, std::move(ggn), cfg.lambda);

    const std::size_t n = paths.n_score_samples;
    Matrix samples(n, d);
    Matrix scores(n, 3);
    // The posterior caches its factorization and inverse lazily; materialize
    // them before fanning out so worker threads only read.
    if (posterior.index_set().size() <= PosteriorOperator::kDenseLimit) {
        posterior.factor();
        posterior.dense();
    }
    parallel_for(n, paths.threads, [&](std::size_t i) {
        const NoiseRealization noise =
            make_noise_realization(schedule, d, derived_rng(cfg.seed, i)());
        Vector x0;
        double raw = 0.0;
        if (cfg.estimator == EstimatorKind::PredictiveVariance) {
            Rng draw_rng = derived_rng(cfg.seed, 500000 + i);
            const PredictiveVarianceResult r = predictive_variance_rollout(
                model, schedule, posterior, cfg.mc_draws, noise, draw_rng);
            x0 = r.x0;
            raw = r.score * static_cast<double>(d);
        } else {
            const SampleScore s = flare_sample(model, schedule, posterior, cfg.sampler, noise);
            x0 = s.x0;
            raw = s.traj.trace_ep0;
        }
        std::copy(x0.begin(), x0.end(), samples.row_ptr(i));
        scores(i, 0) = static_cast<double>(i);
        scores(i, 1) = raw / static_cast<double>(d);
        scores(i, 2) = raw;
    });

    std::filesystem::create_directories(paths.out_dir);
    write_csv(paths.out_dir / "samples.csv", samples, dim_header(d));
    write_csv(paths.out_dir / "scores.csv", scores, {"sample_id", "score", "raw_trace"});
    json manifest{{"dataset", cfg.dataset},
                  {"estimator", estimator_name(cfg.estimator)},
                  {"m", m},
                  {"lambda", cfg.lambda},
                  {"sampler", sampler_name(cfg.sampler)},
                  {"seed", cfg.seed},
                  {"n_samples", n},
                  {"mc_draws", cfg.mc_draws},
                  {"ggn_pairs", cfg.ggn_pairs},
                  {"filter_percentile", cfg.filter_percentile},
                  {"schedule_hash", schedule.hash()},
                  {"checkpoint_hash", file_hash(ckpt_path)}};
    write_json(paths.out_dir / "score_manifest.json", manifest);
    std::printf("score: %zu samples with %s (m=%zu) to %s\n", n,
                estimator_name(cfg.estimator), m, paths.out_dir.string().c_str());
    return kExitOk;
}

int cmd_eval(const RunConfig& cfg, const CliPaths& paths) {
    if (paths.real.empty() || paths.samples.empty() || paths.scores.empty())
        throw InvalidArgument("eval needs --real, --samples, and at least one --scores");
    const Matrix real = read_csv(paths.real).data;
    const Matrix generated = read_csv(paths.samples).data;
    if (real.cols != generated.cols) throw ShapeError("eval: real/generated dim mismatch");

    const double percentile = cfg.filter_percentile > 0.0
                                  ? cfg.filter_percentile
                                  : preset_filter_percentile(cfg.dataset);

    // One shared discriminator for every method under comparison.
    Rng disc_rng = derived_rng(cfg.seed, 77);
    const DiscriminatorResult disc = train_discriminator(real, generated, disc_rng);
    const double acc_uf = pair_accuracy(disc.clf, real, generated);

    std::filesystem::create_directories(paths.out_dir);
    for (std::size_t mi = 0; mi < paths.scores.size(); ++mi) {
        const CsvTable table = read_csv(paths.scores[mi]);
        if (table.data.rows != generated.rows)
            throw ShapeError("eval: score rows do not match the generated set");
        Vector scores(table.data.rows);
        for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = table.data(i, 1);

        const std::vector<std::size_t> keep = filter_by_score(scores, percentile);
        const Matrix filtered = gather_rows(generated, keep);
        const double acc_f = pair_accuracy(disc.clf, real, filtered);

        MetricsReport report;
        report.dataset = cfg.dataset;
        // Method label: manifest name when adjacent, else the file stem.
        report.method = paths.scores[mi].stem().string();
        const auto manifest_path = paths.scores[mi].parent_path() / "score_manifest.json";
        if (std::filesystem::exists(manifest_path)) {
            const json manifest = read_json(manifest_path);
            if (manifest.contains("estimator")) report.method = manifest.at("estimator");
        }
        report.acc_unfiltered = acc_uf;
        report.acc_filtered = acc_f;
        try {
            report.gap_closure_pct = gap_closure(acc_f, acc_uf);
            report.gap_defined = true;
        } catch (const UndefinedBaseline&) {
            report.gap_defined = false;
        }
        report.roc_auc_filtered =
            roc_auc(disc.clf.score_batch(real), disc.clf.score_batch(filtered));
        Rng boot_rng = derived_rng(cfg.seed, 200 + mi);
        report.bootstrap_p_value =
            bootstrap_p(disc.clf, real, filtered, generated, cfg.bootstrap_b, boot_rng);
        report.n_generated = generated.rows;
        report.n_retained = keep.size();
        report.seed = cfg.seed;

        const auto out = paths.out_dir / ("metrics_" + report.method + ".json");
        write_json(out, metrics_report_json(report));
        if (report.gap_defined)
            std::printf("eval[%s]: acc %.4f -> %.4f, gap-closure %+.1f%%, auc_f %.4f, p %.4f\n",
                        report.method.c_str(), acc_uf, acc_f, report.gap_closure_pct,
                        report.roc_auc_filtered, report.bootstrap_p_value);
        else
            std::printf("eval[%s]: acc %.4f -> %.4f, gap-closure n/a, auc_f %.4f\n",
                        report.method.c_str(), acc_uf, acc_f, report.roc_auc_filtered);

        if (cfg.emit_svg && generated.cols >= 2) {
            Vector x(generated.rows), y(generated.rows);
            for (std::size_t i = 0; i < generated.rows; ++i) {
                x[i] = generated(i, 0);
                y[i] = generated(i, 1);
            }
            write_text(paths.out_dir / ("scatter_" + report.method + ".svg"),
                       svg_scatter(x, y, scores, cfg.dataset + " / " + report.method));
        }
    }
    return kExitOk;
}

namespace {

int validate_unroll(const RunConfig& cfg, const CliPaths& paths) {
    Rng rng = derived_rng(cfg.seed, 1);
    const double dev = unroll_check(100, rng);
    const bool pass = dev < 1e-10;
    write_json(paths.out_dir / "validate_unroll.json",
               json{{"study", "unroll"}, {"max_rel_deviation", dev}, {"pass", pass}});
    std::printf("validate unroll: max relative trace deviation %.3e (%s)\n", dev,
                pass ? "PASS" : "FAIL");
    return pass ? kExitOk : kExitValidationFail;
}

int validate_lemma1(const RunConfig& cfg, const CliPaths& paths) {
    Rng rng = derived_rng(cfg.seed, 2);
    const double dev = lemma1_check(100, rng);
    const bool pass = dev < 1e-8;
    write_json(paths.out_dir / "validate_lemma1.json",
               json{{"study", "lemma1"}, {"max_rel_deviation", dev}, {"pass", pass}});
    std::printf("validate lemma1: max relative deviation %.3e (%s)\n", dev,
                pass ? "PASS" : "FAIL");
    return pass ? kExitOk : kExitValidationFail;
}

int validate_sketch(const RunConfig& cfg, const CliPaths& paths) {
    const SketchInstance inst = sketch_instance(7);
    Rng rng = derived_rng(11, 0);
    const std::vector<std::size_t> m_grid{32, 64, 128, 256};
    const SketchStudyReport rep =
        sketch_convergence_study(inst.j_pop, inst.j_t, m_grid, 50, rng, inst.rel_tol);
    Rng full_rng = derived_rng(11, 1);
    const SketchStudyReport full = sketch_convergence_study(inst.j_pop, inst.j_t,
                                                            {inst.j_pop.cols}, 2, full_rng,
                                                            inst.rel_tol);
    bool monotone = true;
    for (std::size_t i = 1; i < rep.mean_rel_error.size(); ++i)
        monotone = monotone && rep.mean_rel_error[i] < rep.mean_rel_error[i - 1];
    const bool slope_ok = rep.slope > -0.7 && rep.slope < -0.3;
    const bool full_ok = full.mean_rel_error[0] < 1e-10;
    const bool pass = monotone && slope_ok && full_ok;

    json report = sketch_report_json(rep);
    report["full_recovery_error"] = full.mean_rel_error[0];
    report["monotone"] = monotone;
    report["pass"] = pass;
    write_json(paths.out_dir / "validate_sketch.json", report);

    Matrix trials(rep.m_grid.size(), 2);
    for (std::size_t i = 0; i < rep.m_grid.size(); ++i) {
        trials(i, 0) = static_cast<double>(rep.m_grid[i]);
        trials(i, 1) = rep.mean_rel_error[i];
    }
    write_csv(paths.out_dir / "validate_sketch.csv", trials, {"m", "mean_rel_error"});
    if (cfg.emit_svg) {
        Vector xs(rep.m_grid.begin(), rep.m_grid.end());
        write_text(paths.out_dir / "validate_sketch.svg",
                   svg_line_plot_loglog({xs}, {rep.mean_rel_error}, {"mean rel error"},
                                        "subsampled trace error vs m"));
    }
    std::printf("validate sketch: slope %.3f, monotone %s, m=p error %.2e (%s)\n", rep.slope,
                monotone ? "yes" : "no", full.mean_rel_error[0], pass ? "PASS" : "FAIL");
    return pass ? kExitOk : kExitValidationFail;
}

// Fixed protocol for the cross-term study: a small sine denoiser trained to
// convergence, then a dense Laplace posterior whose precision is the dataset-
// scaled curvature (one observation per sample-timestep pair) plus a damping
// term large enough to clamp near-null curvature directions. The reported
// Delta-u ratio is invariant to the overall posterior scale, so the damping
// choice affects stability, not the measured effect size.
DenoiserModel trained_tiny_sine_model(const RunConfig& cfg, const DiffusionSchedule& schedule,
                                      const Dataset& ds) {
    ModelConfig mc;
    mc.data_dim = 10;
    mc.hidden = 12;
    mc.n_blocks = 2;
    mc.time_embed_dim = 16;
    mc.total_steps = schedule.total_steps;
    DenoiserModel model(mc);
    model.init_params(cfg.seed);
    TrainConfig tc;
    tc.lr = 5e-4;
    tc.batch = 128;
    tc.steps = 60000;
    tc.seed = cfg.seed;
    return train(std::move(model), ds, schedule, tc).ema_model;
}

int validate_cross_term(const RunConfig& cfg, const CliPaths& paths) {
    const DiffusionSchedule schedule = cosine_schedule(600);
    const Dataset ds = gen_bimodal_sine(2000, cfg.seed + 1);
    const DenoiserModel model = trained_tiny_sine_model(cfg, schedule, ds);

    IndexSet set;
    set.indices.resize(model.param_count());
    std::iota(set.indices.begin(), set.indices.end(), 0);
    GgnMatrix ggn = assemble_ggn(model, schedule, ds, set, 512, derived_rng(cfg.seed, 3)());
    const double obs = static_cast<double>(ds.samples.rows * schedule.total_steps);
    for (double& v : ggn.h.data) v *= obs;
    const PosteriorOperator posterior(PosteriorKind::FullDense, std::move(ggn), 1e3);

    Rng rng = derived_rng(cfg.seed, 4);
    const CrossTermReport rep =
        cross_term_study(model, posterior, schedule, 20, 128, cfg.thresholds, rng);
    const bool mean_ok = std::abs(rep.mean) < 0.01;
    bool test_ok = false;
    for (const ThresholdTest& t : rep.tests)
        if (t.tau == 0.01 && t.p_value < 1e-4) test_ok = true;
    const bool pass = mean_ok && test_ok;

    json report = cross_term_report_json(rep);
    report["pass"] = pass;
    write_json(paths.out_dir / "validate_cross_term.json", report);
    std::printf("validate cross-term: mean |du/u| %.6f%% (max %.6f%%), t-test vs 0.01%%: %s\n",
                rep.mean, rep.max_abs, pass ? "PASS" : "FAIL");
    return pass ? kExitOk : kExitValidationFail;
}

int validate_prop1(const RunConfig& cfg, const CliPaths& paths) {
    const DiffusionSchedule schedule = cosine_schedule(16);
    const Dataset ds = gen_grid(4, cfg.seed + 1);
    ModelConfig mc;
    mc.data_dim = 2;
    mc.hidden = 4;
    mc.n_blocks = 1;
    mc.time_embed_dim = 4;
    mc.total_steps = 16;
    DenoiserModel model(mc);
    model.init_params(cfg.seed);

    const GgnMatrix ll = assemble_ggn(model, schedule, ds, model.last_layer_indices(), 32,
                                      derived_rng(cfg.seed, 5)());
    const PosteriorOperator linear_post(PosteriorKind::LastLayer, ll, 1e-2);
    Rng rng1 = derived_rng(cfg.seed, 6);
    const Vector x{0.3, -0.7};
    const double linear_err = prop1_mc_check(model, linear_post, schedule, x, 5, 4096, 1.0, rng1);

    IndexSet full;
    full.indices.resize(model.param_count());
    std::iota(full.indices.begin(), full.indices.end(), 0);
    const GgnMatrix fg = assemble_ggn(model, schedule, ds, full, 32, derived_rng(cfg.seed, 7)());
    const PosteriorOperator full_post(PosteriorKind::FullDense, fg, 1.0);
    Rng rng2 = derived_rng(cfg.seed, 8);
    const double nonlinear_err =
        prop1_mc_check(model, full_post, schedule, x, 5, 4096, 1e-4, rng2);

    const bool pass = linear_err < 0.05 && nonlinear_err < 0.10;
    write_json(paths.out_dir / "validate_prop1.json",
               json{{"study", "prop1"},
                    {"linear_head_rel_error", linear_err},
                    {"nonlinear_rel_error", nonlinear_err},
                    {"pass", pass}});
    std::printf("validate prop1: linear-head error %.4f, nonlinear error %.4f (%s)\n", linear_err,
                nonlinear_err, pass ? "PASS" : "FAIL");
    return pass ? kExitOk : kExitValidationFail;
}

int validate_schedule(const RunConfig& cfg, const CliPaths& paths) {
    const DiffusionSchedule s = cosine_schedule(cfg.total_steps);
    Matrix rows(s.total_steps, 7);
    for (std::size_t t = 1; t <= s.total_steps; ++t) {
        rows(t - 1, 0) = static_cast<double>(t);
        rows(t - 1, 1) = s.beta[t];
        rows(t - 1, 2) = s.alpha[t];
        rows(t - 1, 3) = s.bar_alpha[t];
        rows(t - 1, 4) = s.a[t];
        rows(t - 1, 5) = s.b[t];
        rows(t - 1, 6) = s.tilde_beta[t];
    }
    write_csv(paths.out_dir / "schedule.csv", rows,
              {"t", "beta", "alpha", "bar_alpha", "a", "b", "tilde_beta"});
    std::printf("validate schedule: dumped %zu steps (hash %llu)\n", s.total_steps,
                static_cast<unsigned long long>(s.hash()));
    return kExitOk;
}

}  // namespace

int cmd_validate(const RunConfig& cfg, const CliPaths& paths, const std::string& study) {
    std::filesystem::create_directories(paths.out_dir);
    if (study == "unroll") return validate_unroll(cfg, paths);
    if (study == "lemma1") return validate_lemma1(cfg, paths);
    if (study == "sketch") return validate_sketch(cfg, paths);
    if (study == "prop1") return validate_prop1(cfg, paths);
    if (study == "cross-term") return validate_cross_term(cfg, paths);
    if (study == "schedule") return validate_schedule(cfg, paths);
    throw InvalidArgument("unknown validate study '" + study + "'");
}

int cmd_ablate_keep(const RunConfig& cfg, const CliPaths& paths) {
    const DiffusionSchedule schedule = cosine_schedule(cfg.total_steps);
    const Checkpoint ckpt = load_checkpoint(checkpoint_path(cfg, paths), schedule.hash());
    const DenoiserModel model = model_from_checkpoint(ckpt, true);
    const Dataset ds = load_dataset_csv(cfg, data_path(cfg, paths));

    const std::vector<double> fractions{0.01, 0.05, 0.10, 0.30, 0.50};
    const std::vector<KeepFractionRow> rows =
        keep_fraction_sweep(model, schedule, ds, fractions, paths.n_score_samples, cfg.ggn_pairs,
                            cfg.lambda, cfg.seed);

    std::filesystem::create_directories(paths.out_dir);
    Matrix out(rows.size(), 3);
    Vector xs, ys;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out(i, 0) = rows[i].fraction;
        out(i, 1) = static_cast<double>(rows[i].m);
        out(i, 2) = rows[i].mean_trace;
        xs.push_back(rows[i].fraction);
        ys.push_back(rows[i].mean_trace);
    }
    write_csv(paths.out_dir / "ablate_keep.csv", out, {"fraction", "m", "mean_trace"});
    if (cfg.emit_svg)
        write_text(paths.out_dir / "ablate_keep.svg",
                   svg_line_plot_loglog({xs}, {ys}, {"mean trace"},
                                        "epistemic trace vs keep fraction"));
    // Shared-noise contract: every fraction reuses noise seeds derived from
    // the run seed, one stream per sample index.
    json manifest{{"dataset", cfg.dataset},
                  {"seed", cfg.seed},
                  {"noise_seed_base", cfg.seed},
                  {"n_samples", paths.n_score_samples},
                  {"fractions", fractions},
                  {"lambda", cfg.lambda},
                  {"ggn_pairs", cfg.ggn_pairs},
                  {"schedule_hash", schedule.hash()}};
    write_json(paths.out_dir / "ablate_manifest.json", manifest);
    std::printf("ablate-keep: %zu fractions, %zu samples each\n", fractions.size(),
                paths.n_score_samples);
    return kExitOk;
}

}  // namespace flare
