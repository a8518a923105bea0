// Training runs, leave-one-domain-out and domain-count sweeps, and their on-disk records.
#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "saml/checkpoint.hpp"
#include "saml/meta_trainer.hpp"
#include "saml/metrics.hpp"
#include "saml/synthdata.hpp"

namespace saml {

enum class Dtype { f32, f64 };

inline std::string to_string(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }
inline Dtype parse_dtype(const std::string& s) {
    if (s == "f32") return Dtype::f32;
    if (s == "f64") return Dtype::f64;
    throw ConfigError("unknown dtype '" + s + "' (expected f32 or f64)");
}

/// One training run: which domains it learns from, which one it is scored on.
struct RunSpec {
    int held_out = 0;
    std::vector<int> sources;  // sorted
    Arm arm = Arm::saml;
    std::uint64_t seed = 0;

    std::string key() const {
        std::string s = "h" + std::to_string(held_out) + "_src";
        for (int d : sources) s += std::to_string(d);
        return s + "_" + to_string(arm) + "_s" + std::to_string(seed);
    }
    bool operator==(const RunSpec&) const = default;
};

struct ExperimentSettings {
    SegNetConfig net;
    EpisodeConfig episode;
    Dtype dtype = Dtype::f32;
    std::size_t threads = 1;
    bool resume = false;      // reuse records already on disk
    bool keep_checkpoints = false;
};

/// Worker count: SAML_LAB_THREADS when set, otherwise the hardware concurrency.
inline std::size_t worker_count() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("SAML_LAB_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || v < 1) throw ConfigError("SAML_LAB_THREADS must be a positive integer");
        n = std::min(n, static_cast<std::size_t>(v));
    }
    return n;
}

/// Initialisation and episode streams depend on the seed only, so every arm starts from the same network.
inline std::uint64_t run_seed(const RunSpec& r) {
    std::uint64_t h = detail::splitmix64(r.seed ^ 0x72756e73ull);
    h = detail::splitmix64(h ^ static_cast<std::uint64_t>(r.held_out + 1));
    for (int d : r.sources) h = detail::splitmix64(h ^ (static_cast<std::uint64_t>(d + 1) << 8));
    return h;
}

// ---------------------------------------------------------------------------
// Records

inline nlohmann::json to_json(const EvalRecord& r) {
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& s : r.samples) {
        nlohmann::json j{{"dice", s.dice}};
        j["asd"] = s.asd ? nlohmann::json(*s.asd) : nlohmann::json(nullptr);
        j["ipq"] = s.ipq ? nlohmann::json(*s.ipq) : nlohmann::json(nullptr);
        samples.push_back(j);
    }
    return {{"format", "saml-eval-record"}, {"held_out_domain", r.held_out_domain}, {"arm", r.arm},
            {"seed", r.seed}, {"source_domains", r.source_domains}, {"samples", samples}};
}

inline EvalRecord eval_record_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "saml-eval-record") throw IoError("not an evaluation record");
    EvalRecord r;
    r.held_out_domain = j.at("held_out_domain").get<int>();
    r.arm = j.at("arm").get<std::string>();
    parse_arm(r.arm);
    r.seed = j.at("seed").get<std::uint64_t>();
    r.source_domains = j.at("source_domains").get<std::vector<int>>();
    for (const auto& s : j.at("samples")) {
        SampleScore sc;
        sc.dice = s.at("dice").get<double>();
        if (!s.at("asd").is_null()) sc.asd = s.at("asd").get<double>();
        if (!s.at("ipq").is_null()) sc.ipq = s.at("ipq").get<double>();
        r.samples.push_back(sc);
    }
    return r;
}

inline std::filesystem::path record_path(const std::filesystem::path& out, const RunSpec& r) {
    return out / "records" / (r.key() + ".json");
}

inline void save_record(const std::filesystem::path& path, const EvalRecord& r) {
    std::filesystem::create_directories(path.parent_path());
    write_file_atomic(path, to_json(r).dump(1) + "\n");
}

inline EvalRecord load_record(const std::filesystem::path& path) {
    try {
        return eval_record_from_json(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed record " + path.string() + ": " + e.what());
    } catch (const ConfigError& e) {
        throw IoError("malformed record " + path.string() + ": " + e.what());
    }
}

/// Every record under <dir>/records, in file-name order.
inline std::vector<EvalRecord> load_records(const std::filesystem::path& dir) {
    const auto rec_dir = dir / "records";
    std::vector<std::filesystem::path> files;
    if (std::filesystem::is_directory(rec_dir))
        for (const auto& e : std::filesystem::directory_iterator(rec_dir))
            if (e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::vector<EvalRecord> out;
    for (const auto& f : files) out.push_back(load_record(f));
    return out;
}

// ---------------------------------------------------------------------------
// Single run

struct RunResult {
    EvalRecord record;
    LossHistory history;
};

template <typename T>
RunResult run_training(const Dataset& data, const RunSpec& spec, const ExperimentSettings& s,
                       const std::filesystem::path& out = {}) {
    EpisodeConfig cfg = s.episode;
    cfg.arm = spec.arm;
    const auto sources = prepare_domains(data, spec.sources);
    LoopOptions opt;
    if (!out.empty()) {
        std::filesystem::create_directories(out / "runs");
        opt.csv_path = out / "runs" / (spec.key() + ".loss.csv");
        if (s.keep_checkpoints) opt.checkpoint_path = out / "runs" / (spec.key() + ".ckpt");
    }
    TrainState<T> state = train_loop(init_train_state<T>(s.net, cfg, run_seed(spec)), sources, cfg, opt);
    RunResult r;
    r.record = evaluate(state.theta, prepare_domain(data.domain(spec.held_out)));
    r.record.arm = to_string(spec.arm);
    r.record.seed = spec.seed;
    r.record.source_domains = spec.sources;
    r.history = std::move(state.history);
    return r;
}

inline RunResult run_training(const Dataset& data, const RunSpec& spec, const ExperimentSettings& s,
                              const std::filesystem::path& out = {}) {
    return s.dtype == Dtype::f32 ? run_training<float>(data, spec, s, out) : run_training<double>(data, spec, s, out);
}

/// Runs every spec (deduplicated), writing each record as soon as it exists so a failure keeps
/// the finished ones. Results come back in the order of `specs`.
inline std::vector<EvalRecord> run_all(const Dataset& data, const std::vector<RunSpec>& specs,
                                       const ExperimentSettings& s, const std::filesystem::path& out,
                                       const std::function<void(const RunSpec&, const EvalRecord&)>& on_done = {}) {
    std::vector<RunSpec> unique;
    for (const auto& r : specs)
        if (std::find(unique.begin(), unique.end(), r) == unique.end()) unique.push_back(r);
    std::vector<std::optional<EvalRecord>> done(unique.size());
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::exception_ptr failure;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next++;
            if (i >= unique.size()) return;
            {
                std::lock_guard lock(mu);
                if (failure) return;
            }
            try {
                const auto path = record_path(out, unique[i]);
                EvalRecord rec;
                if (s.resume && std::filesystem::exists(path)) {
                    rec = load_record(path);
                } else {
                    rec = run_training(data, unique[i], s, out).record;
                    save_record(path, rec);
                }
                std::lock_guard lock(mu);
                done[i] = rec;
                if (on_done) on_done(unique[i], rec);
            } catch (...) {
                std::lock_guard lock(mu);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    const std::size_t n = std::max<std::size_t>(1, std::min(s.threads, unique.size()));
    if (n == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    }
    if (failure) std::rethrow_exception(failure);
    std::vector<EvalRecord> out_records;
    for (const auto& r : specs) {
        const auto it = std::find(unique.begin(), unique.end(), r);
        out_records.push_back(*done[static_cast<std::size_t>(it - unique.begin())]);
    }
    return out_records;
}

// ---------------------------------------------------------------------------
// Protocols

inline std::vector<int> domain_ids(const Dataset& data) {
    std::vector<int> ids;
    for (const auto& d : data.domains) ids.push_back(d.spec.id);
    std::sort(ids.begin(), ids.end());
    return ids;
}

/// Train on all domains but one, score on the one left out: held-out × arm × seed.
inline std::vector<RunSpec> leave_one_out_specs(const std::vector<int>& ids, const std::vector<Arm>& arms,
                                                const std::vector<std::uint64_t>& seeds) {
    if (ids.size() < 3) throw ConfigError("leave-one-domain-out needs at least 3 domains");
    std::vector<RunSpec> out;
    for (int h : ids)
        for (Arm a : arms)
            for (auto seed : seeds) {
                RunSpec r{h, {}, a, seed};
                for (int d : ids)
                    if (d != h) r.sources.push_back(d);
                out.push_back(r);
            }
    return out;
}

/// Source sets of growing size for a fixed target. For each seed the sets are nested: the first
/// k domains of a seeded permutation of the remaining ones.
inline std::vector<int> sweep_sources(const std::vector<int>& ids, int target, std::size_t k, std::uint64_t seed) {
    std::vector<int> rest;
    for (int d : ids)
        if (d != target) rest.push_back(d);
    if (rest.size() == ids.size()) throw ConfigError("sweep target " + std::to_string(target) + " is not a domain");
    if (k < 1 || k > rest.size()) throw ConfigError("sweep source count out of range");
    std::mt19937_64 rng(detail::splitmix64(seed ^ 0x7377656570ull ^ static_cast<std::uint64_t>(target)));
    std::shuffle(rest.begin(), rest.end(), rng);
    rest.resize(k);
    std::sort(rest.begin(), rest.end());
    return rest;
}

inline std::vector<RunSpec> sweep_specs(const std::vector<int>& ids, int target, const std::vector<Arm>& arms,
                                        const std::vector<std::uint64_t>& seeds) {
    std::vector<RunSpec> out;
    for (std::size_t k = 1; k < ids.size(); ++k)
        for (Arm a : arms)
            for (auto seed : seeds) out.push_back({target, sweep_sources(ids, target, k, seed), a, seed});
    return out;
}

/// Seeded split of a domain's samples into a training part (first `train_fraction`) and the rest.
inline std::pair<PreparedDomain, PreparedDomain> split_domain(const PreparedDomain& d, double train_fraction,
                                                              std::uint64_t seed) {
    std::vector<std::size_t> order(d.images.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(detail::splitmix64(seed ^ 0x73706c6974ull ^ static_cast<std::uint64_t>(d.id)));
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(order.size())));
    PreparedDomain train{d.id, {}, {}}, test{d.id, {}, {}};
    for (std::size_t i = 0; i < order.size(); ++i) {
        auto& part = i < n_train ? train : test;
        part.images.push_back(d.images[order[i]]);
        part.masks.push_back(d.masks[order[i]]);
    }
    return {std::move(train), std::move(test)};
}

struct IntraDomainResult {
    EvalRecord in_domain;  // held-out 20% of every source domain, pooled
    EvalRecord held_out;   // the unseen domain
};

/// Intra-domain reference: deepall trained on an 80/20 split of the sources, scored on their unseen
/// 20% and on the held-out domain. Measures how much of the held-out gap is domain shift.
template <typename T>
IntraDomainResult intra_domain_reference(const Dataset& data, const RunSpec& spec, const ExperimentSettings& s) {
    EpisodeConfig cfg = s.episode;
    cfg.arm = Arm::deepall;
    std::vector<PreparedDomain> train;
    PreparedDomain pooled{-1, {}, {}};
    for (int id : spec.sources) {
        auto [tr, te] = split_domain(prepare_domain(data.domain(id)), 0.8, spec.seed);
        if (tr.images.size() < cfg.batch_per_domain || te.images.empty())
            throw ConfigError("domain " + std::to_string(id) + " is too small for an 80/20 split");
        train.push_back(std::move(tr));
        pooled.images.insert(pooled.images.end(), te.images.begin(), te.images.end());
        pooled.masks.insert(pooled.masks.end(), te.masks.begin(), te.masks.end());
    }
    RunSpec rs = spec;
    rs.arm = Arm::deepall;
    const TrainState<T> state = train_loop(init_train_state<T>(s.net, cfg, run_seed(rs)), train, cfg);
    IntraDomainResult r{evaluate(state.theta, pooled), evaluate(state.theta, prepare_domain(data.domain(spec.held_out)))};
    for (auto* rec : {&r.in_domain, &r.held_out}) {
        rec->arm = "intra-domain";
        rec->seed = spec.seed;
        rec->source_domains = spec.sources;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Aggregation

inline double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// A record belongs to the leave-one-out table when it trained on every other domain.
inline bool is_leave_one_out(const EvalRecord& r, const std::vector<int>& ids) {
    return r.source_domains.size() + 1 == ids.size() &&
           std::find(r.source_domains.begin(), r.source_domains.end(), r.held_out_domain) == r.source_domains.end();
}

inline std::vector<int> domains_of(const std::vector<EvalRecord>& records) {
    std::vector<int> ids;
    for (const auto& r : records) {
        ids.push_back(r.held_out_domain);
        ids.insert(ids.end(), r.source_domains.begin(), r.source_domains.end());
    }
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
}

/// Per seed: the metric averaged over held-out domains (leave-one-out records of one arm).
inline std::map<std::uint64_t, double> per_seed_average(const std::vector<EvalRecord>& records, const std::string& arm,
                                                        const std::function<double(const EvalRecord&)>& metric) {
    const auto ids = domains_of(records);
    std::map<std::uint64_t, std::vector<double>> by_seed;
    for (const auto& r : records)
        if (r.arm == arm && is_leave_one_out(r, ids)) by_seed[r.seed].push_back(metric(r));
    std::map<std::uint64_t, double> out;
    for (auto& [seed, v] : by_seed) out[seed] = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    return out;
}

inline double median_of(const std::map<std::uint64_t, double>& m) {
    std::vector<double> v;
    for (const auto& [k, x] : m) v.push_back(x);
    return median(v);
}

/// Mean IPQ over every non-empty held-out prediction of a record.
inline double prediction_ipq(const EvalRecord& r) { return r.ipq_mean(); }

}  // namespace saml
