// saml_lab: data generation, training, evaluation, experiment protocols, gradient checks and reports.
#include <cstdio>
#include <deque>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "saml/config.hpp"
#include "saml/gradcheck.hpp"
#include "saml/report.hpp"

namespace fs = std::filesystem;
using namespace saml;

namespace {

enum Exit : int { kOk = 0, kFailure = 1, kConfig = 2, kIo = 3, kNumeric = 4, kVerification = 5 };

struct VerificationFailure : Error {
    using Error::Error;
};

struct Globals {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> dtype;
    std::optional<std::string> dataset;
    bool resume = false;
};

ExperimentConfig resolve(const Globals& g) {
    ExperimentConfig c = g.config_path.empty() ? ExperimentConfig{} : load_config(g.config_path);
    for (const auto& kv : g.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
        c = parse_config(kv.substr(0, eq) + " = " + kv.substr(eq + 1), "--set " + kv.substr(0, eq), c);
    }
    if (g.seed) c.seed = *g.seed;
    if (g.out) c.out = *g.out;
    if (g.dtype) c.dtype = parse_dtype(*g.dtype);
    if (g.dataset) c.dataset = *g.dataset;
    c.validate();
    return c;
}

Dataset open_dataset(const ExperimentConfig& c) {
    if (!fs::exists(c.dataset / "manifest.json"))
        throw IoError("no dataset at " + c.dataset.string() + " (run `saml_lab gen-data` first)");
    return load_dataset(c.dataset);
}

void print_record(const EvalRecord& r) {
    std::printf("held-out %d  %-16s seed %-3llu  dice %6.2f ± %5.2f  asd %7.3f  (undefined %zu)  ipq %.3f\n",
                r.held_out_domain, r.arm.c_str(), static_cast<unsigned long long>(r.seed), r.dice_mean(), r.dice_std(),
                r.asd_mean(), r.n_undefined_asd(), r.ipq_mean());
    std::fflush(stdout);
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const ExperimentConfig& c) {
    const Dataset ds =
        generate_dataset(config_domain_specs(c), c.samples_per_domain, c.image_size, c.image_size, c.seed);
    fs::create_directories(c.dataset);
    save_dataset(ds, c.dataset);
    write_resolved_config(c.dataset, c);
    const std::string manifest = read_file(c.dataset / "manifest.json");
    std::printf("wrote %zu domains x %zu samples (%zux%zu) to %s, manifest crc32 %08x\n", ds.domains.size(),
                c.samples_per_domain, c.image_size, c.image_size, c.dataset.string().c_str(), crc32_of(manifest));
    return kOk;
}

struct TrainArgs {
    std::string arm;
    int held_out = -1;
    std::vector<int> sources;
    std::optional<std::size_t> iterations;
};

RunSpec train_spec(const ExperimentConfig& c, const Dataset& ds, const TrainArgs& a) {
    const auto ids = domain_ids(ds);
    RunSpec spec{a.held_out < 0 ? ids.back() : a.held_out, a.sources, a.arm.empty() ? c.episode.arm : parse_arm(a.arm),
                 c.seed};
    if (std::find(ids.begin(), ids.end(), spec.held_out) == ids.end())
        throw ConfigError("held-out domain " + std::to_string(spec.held_out) + " is not in the dataset");
    if (spec.sources.empty())
        for (int d : ids)
            if (d != spec.held_out) spec.sources.push_back(d);
    std::sort(spec.sources.begin(), spec.sources.end());
    for (int d : spec.sources) {
        if (std::find(ids.begin(), ids.end(), d) == ids.end())
            throw ConfigError("source domain " + std::to_string(d) + " is not in the dataset");
        if (d == spec.held_out) throw ConfigError("the held-out domain cannot also be a source");
    }
    return spec;
}

template <typename T>
int train_typed(const ExperimentConfig& c, const Dataset& ds, const RunSpec& spec, bool resume) {
    EpisodeConfig cfg = c.episode;
    cfg.arm = spec.arm;
    const fs::path ckpt = c.out / "checkpoint.ckpt";
    TrainState<T> state;
    if (resume && fs::exists(ckpt)) {
        state = load_train_state<T>(ckpt);
        if (!(state.theta.config == c.net)) throw ConfigError("checkpoint network does not match the configuration");
        std::printf("resuming at iteration %zu\n", state.iteration);
    } else {
        state = init_train_state<T>(c.net, cfg, run_seed(spec));
    }
    std::deque<LossRecord> recent;
    LoopOptions opt;
    opt.checkpoint_every = c.checkpoint_every;
    opt.checkpoint_path = ckpt;
    opt.csv_path = c.out / "loss.csv";
    const std::size_t every = std::max<std::size_t>(1, cfg.iterations / 10);
    opt.on_step = [&](const LossRecord& r) {
        recent.push_back(r);
        if (recent.size() > 20) recent.pop_front();
        if (r.iteration % every == 0)
            std::printf("iter %6zu  total %.5f  seg_tr %.4f  seg_te %.4f  compact %.4f  smooth %.4f\n", r.iteration,
                        r.total, r.l_seg_tr, r.l_seg_te, r.l_compact, r.l_smooth);
    };
    try {
        state = train_loop(std::move(state), prepare_domains(ds, spec.sources), cfg, opt);
    } catch (const NumericError& e) {
        std::string dump = std::string("error: ") + e.what() + "\n\nlast loss records:\n" +
                           loss_csv(LossHistory{20, {recent.begin(), recent.end()}}) + "\nconfiguration:\n" + to_toml(c);
        write_file_atomic(c.out / "diagnostic.txt", dump);
        throw;
    }
    save_params(c.out / "model.ckpt", state.theta);
    const EvalRecord rec = [&] {
        EvalRecord e = evaluate(state.theta, prepare_domain(ds.domain(spec.held_out)));
        e.arm = to_string(spec.arm);
        e.seed = spec.seed;
        e.source_domains = spec.sources;
        return e;
    }();
    save_record(c.out / "eval.json", rec);
    print_record(rec);
    return kOk;
}

int cmd_train(ExperimentConfig c, const TrainArgs& a, bool resume) {
    if (a.iterations) c.episode.iterations = *a.iterations;
    if (!a.arm.empty()) c.episode.arm = parse_arm(a.arm);
    c.validate();
    const Dataset ds = open_dataset(c);
    const RunSpec spec = train_spec(c, ds, a);
    write_resolved_config(c.out, c);
    std::printf("training %s on domains [%s], held out %d, %zu iterations\n", to_string(spec.arm).c_str(),
                [&] {
                    std::string s;
                    for (int d : spec.sources) s += (s.empty() ? "" : " ") + std::to_string(d);
                    return s;
                }()
                    .c_str(),
                spec.held_out, c.episode.iterations);
    return c.dtype == Dtype::f32 ? train_typed<float>(c, ds, spec, resume) : train_typed<double>(c, ds, spec, resume);
}

template <typename T>
EvalRecord eval_typed(const fs::path& checkpoint, const PreparedDomain& domain, std::optional<NormMode> mode) {
    const TensorContainer probe = TensorContainer::load(checkpoint);
    const SegNetParams<T> params = probe.meta.value("kind", "") == "train-state"
                                       ? load_train_state<T>(checkpoint).theta
                                       : load_params<T>(checkpoint);
    return evaluate(params, domain, mode);
}

int cmd_eval(const ExperimentConfig& c, const std::string& checkpoint, int domain, const std::string& norm) {
    const Dataset ds = open_dataset(c);
    const auto ids = domain_ids(ds);
    const int d = domain < 0 ? ids.back() : domain;
    std::optional<NormMode> mode;
    if (!norm.empty()) mode = parse_norm_mode(norm);
    const fs::path ckpt = checkpoint.empty() ? c.out / "model.ckpt" : fs::path(checkpoint);
    if (!fs::exists(ckpt)) throw IoError("no checkpoint at " + ckpt.string());
    const auto prepared = prepare_domain(ds.domain(d));
    EvalRecord r = c.dtype == Dtype::f32 ? eval_typed<float>(ckpt, prepared, mode) : eval_typed<double>(ckpt, prepared, mode);
    r.arm = "checkpoint";
    r.seed = c.seed;
    write_resolved_config(c.out, c);
    save_record(c.out / ("eval_domain" + std::to_string(d) + ".json"), r);
    print_record(r);
    return kOk;
}

ExperimentSettings settings_of(const ExperimentConfig& c, bool resume) {
    ExperimentSettings s = c.settings();
    s.threads = worker_count();
    s.resume = resume;
    return s;
}

int finish_protocol(const ExperimentConfig& c) {
    const auto files = write_report(c.out, c.out / "report");
    for (const auto& f : files.written) std::printf("wrote %s\n", f.string().c_str());
    return kOk;
}

int cmd_loo(const ExperimentConfig& c, bool resume) {
    const Dataset ds = open_dataset(c);
    const auto specs = leave_one_out_specs(domain_ids(ds), c.arms, c.seeds());
    write_resolved_config(c.out, c);
    std::printf("%zu leave-one-domain-out runs, %zu worker(s)\n", specs.size(), worker_count());
    run_all(ds, specs, settings_of(c, resume), c.out, [](const RunSpec&, const EvalRecord& r) { print_record(r); });
    return finish_protocol(c);
}

int cmd_sweep(const ExperimentConfig& c, bool resume) {
    const Dataset ds = open_dataset(c);
    const auto ids = domain_ids(ds);
    const int target = c.sweep_target < 0 ? ids.back() : c.sweep_target;
    const auto specs = sweep_specs(ids, target, c.arms, c.seeds());
    write_resolved_config(c.out, c);
    std::printf("%zu source-count sweep runs on target %d, %zu worker(s)\n", specs.size(), target, worker_count());
    run_all(ds, specs, settings_of(c, resume), c.out, [](const RunSpec& s, const EvalRecord& r) {
        std::printf("k=%zu  ", s.sources.size());
        print_record(r);
    });
    return finish_protocol(c);
}

int cmd_gradcheck(const std::string& perturb) {
    if (!perturb.empty()) testing::perturb_backward(perturb);
    std::size_t failed = 0, n = 0;
    run_gradchecks([&](const GradCheckResult& r) {
        ++n;
        failed += !r.passed();
        std::printf("%-4s %-44s max rel error %.3e  (threshold %.0e, %.1fs)\n", r.passed() ? "ok" : "FAIL",
                    r.name.c_str(), r.max_rel_error, r.threshold, r.seconds);
        std::fflush(stdout);
    });
    std::printf("%zu/%zu checks passed\n", n - failed, n);
    if (failed) throw VerificationFailure(std::to_string(failed) + " gradient check(s) failed");
    return kOk;
}

int cmd_report(const std::string& dir, const std::string& out) {
    const fs::path results = dir;
    const fs::path dest = out.empty() ? results / "report" : fs::path(out);
    const auto files = write_report(results, dest);
    for (const auto& f : files.written) std::printf("wrote %s\n", f.string().c_str());
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"saml_lab: shape-aware meta-learning experiments on synthetic multi-domain segmentation"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--config", g.config_path, "TOML experiment configuration")->check(CLI::ExistingFile);
    app.add_option("--set", g.overrides, "override one configuration key, KEY=VALUE (repeatable)");
    app.add_option("--seed", g.seed, "master seed");
    app.add_option("--out", g.out, "output directory");
    app.add_option("--dtype", g.dtype, "floating point precision")->check(CLI::IsMember({"f32", "f64"}));
    app.add_option("--dataset", g.dataset, "dataset directory");
    app.add_flag("--resume", g.resume, "continue from existing checkpoints / records");

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic multi-domain dataset");

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "train one arm on source domains, evaluate on the held-out one");
    train->add_option("--arm", ta.arm, "deepall | meta-plain | meta-compact | meta-smooth | saml");
    train->add_option("--held-out", ta.held_out, "held-out domain (default: highest id)");
    train->add_option("--sources", ta.sources, "source domains (default: all others)")->delimiter(',');
    train->add_option("--iterations", ta.iterations, "training iterations");

    std::string ckpt, norm;
    int eval_domain = -1;
    auto* eval = app.add_subcommand("eval", "score a checkpoint on one domain");
    eval->add_option("--checkpoint", ckpt, "model or training checkpoint (default: <out>/model.ckpt)");
    eval->add_option("--domain", eval_domain, "domain to score (default: highest id)");
    eval->add_option("--norm-mode", norm, "normalisation mode override");

    auto* loo = app.add_subcommand("loo", "leave-one-domain-out comparison of the configured arms");
    auto* sweep = app.add_subcommand("sweep-domains", "held-out Dice against number of source domains");

    std::string perturb;
    auto* grad = app.add_subcommand("gradcheck", "analytic vs finite-difference gradients (64-bit)");
    grad->add_option("--perturb-backward", perturb)->group("");  // mutation hook for testing the checker

    std::string report_dir, report_out;
    auto* report = app.add_subcommand("report", "tables and figures from a results directory");
    report->add_option("dir", report_dir, "results directory (default: --out)");
    report->add_option("--to", report_out, "destination (default: <dir>/report)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfig;
    }

    try {
        if (*grad) return cmd_gradcheck(perturb);
        const ExperimentConfig c = resolve(g);
        if (*gen) return cmd_gen_data(c);
        if (*train) return cmd_train(c, ta, g.resume);
        if (*eval) return cmd_eval(c, ckpt, eval_domain, norm);
        if (*loo) return cmd_loo(c, g.resume);
        if (*sweep) return cmd_sweep(c, g.resume);
        if (*report) return cmd_report(report_dir.empty() ? c.out.string() : report_dir, report_out);
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kConfig;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kIo;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kIo;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kNumeric;
    } catch (const VerificationFailure& e) {
        std::cerr << "verification failed: " << e.what() << "\n";
        return kVerification;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFailure;
    }
    return kOk;
}
