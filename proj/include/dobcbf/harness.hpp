#pragma once

#include "dobcbf/bridge.hpp"
#include "dobcbf/episode.hpp"

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace dobcbf {

struct IoError : Error {
    explicit IoError(const std::string& what) : Error("io", what) {}
};

/// Flat, human-editable experiment description. Every field has a CLI flag of
/// the same name (underscores become dashes).
struct ExperimentConfig {
    std::string plant = "unicycle";          ///< unicycle | quadrotor
    long episodes = 200;
    long steps = 1000;                       ///< control steps per episode
    double dt = 1e-3;
    double T = 1e-2;
    double a = 1.0;
    std::vector<double> beta;                ///< class-K gains; empty = plant default
    std::string policy = "noisy_explorer";   ///< nominal_tracker | noisy_explorer | constant | external
    std::vector<double> noise;               ///< per-input amplitude; empty = plant default
    std::string noise_schedule = "constant"; ///< constant | linear
    long noise_decay_episodes = 0;
    std::vector<double> constant_u;
    std::string bridge_command;              ///< whitespace-separated argv
    long bridge_timeout_ms = 100;
    std::string disturbance = "profile";     ///< profile | zero
    double disturbance_scale = 1.0;
    std::uint64_t seed = 1;
    std::string filter = "dob_cbf";          ///< dob_cbf | nominal_cbf | off
    long threads = 0;                        ///< 0 = hardware concurrency
    long block_size = 0;                     ///< 0 = 50 (unicycle) or 500 (quadrotor)
    std::vector<long> checkpoints;           ///< control steps for estimation-error statistics
    long trials = 5;                         ///< episodes per estimation sweep / trials per certified disturbance
    long random_disturbances = 50;           ///< certify-bound: random admissible disturbances
    double horizon = 1.0;                    ///< certify-bound trial length, seconds
    long timing_bin = 1000;                  ///< profile: control steps per timing bin
    std::string timing_clock = "thread_cpu"; ///< thread_cpu | wall
    bool write_transitions = false;
    std::string output_dir = "out";

    nlohmann::json to_json() const {
        return {{"plant", plant},
                {"episodes", episodes},
                {"steps", steps},
                {"dt", dt},
                {"T", T},
                {"a", a},
                {"beta", beta},
                {"policy", policy},
                {"noise", noise},
                {"noise_schedule", noise_schedule},
                {"noise_decay_episodes", noise_decay_episodes},
                {"constant_u", constant_u},
                {"bridge_command", bridge_command},
                {"bridge_timeout_ms", bridge_timeout_ms},
                {"disturbance", disturbance},
                {"disturbance_scale", disturbance_scale},
                {"seed", seed},
                {"filter", filter},
                {"threads", threads},
                {"block_size", block_size},
                {"checkpoints", checkpoints},
                {"trials", trials},
                {"random_disturbances", random_disturbances},
                {"horizon", horizon},
                {"timing_bin", timing_bin},
                {"timing_clock", timing_clock},
                {"write_transitions", write_transitions},
                {"output_dir", output_dir}};
    }

    /// Missing keys keep their defaults; unknown keys and type mismatches are
    /// errors naming the field.
    static ExperimentConfig from_json(const nlohmann::json& j) {
        if (!j.is_object()) throw ConfigError("config: expected a JSON object");
        ExperimentConfig c;
        const nlohmann::json known = c.to_json();
        for (const auto& [key, value] : j.items()) {
            if (!known.contains(key)) throw ConfigError("config: unknown field \"" + key + "\"");
        }
        auto get = [&](const char* key, auto& field) {
            if (!j.contains(key)) return;
            try {
                j.at(key).get_to(field);
            } catch (const nlohmann::json::exception&) {
                throw ConfigError(std::string("config: field \"") + key + "\" has the wrong type (" +
                                  j.at(key).type_name() + ")");
            }
        };
        auto get_count = [&](const char* key, auto& field) {
            if (j.contains(key) && j.at(key).is_number_float()) {
                throw ConfigError(std::string("config: field \"") + key + "\" must be an integer");
            }
            get(key, field);
        };
        get("plant", c.plant);
        get_count("episodes", c.episodes);
        get_count("steps", c.steps);
        get("dt", c.dt);
        get("T", c.T);
        get("a", c.a);
        if (j.contains("beta") && j.at("beta").is_number()) c.beta = {j.at("beta").get<double>()};
        else get("beta", c.beta);
        get("policy", c.policy);
        if (j.contains("noise") && j.at("noise").is_number()) c.noise = {j.at("noise").get<double>()};
        else get("noise", c.noise);
        get("noise_schedule", c.noise_schedule);
        get_count("noise_decay_episodes", c.noise_decay_episodes);
        get("constant_u", c.constant_u);
        get("bridge_command", c.bridge_command);
        get_count("bridge_timeout_ms", c.bridge_timeout_ms);
        get("disturbance", c.disturbance);
        get("disturbance_scale", c.disturbance_scale);
        if (j.contains("seed") && j.at("seed").is_number_integer() && j.at("seed").get<long long>() < 0) {
            throw ConfigError("config: field \"seed\" must be nonnegative");
        }
        get_count("seed", c.seed);
        get("filter", c.filter);
        get_count("threads", c.threads);
        get_count("block_size", c.block_size);
        get("checkpoints", c.checkpoints);
        get_count("trials", c.trials);
        get_count("random_disturbances", c.random_disturbances);
        get("horizon", c.horizon);
        get_count("timing_bin", c.timing_bin);
        get("timing_clock", c.timing_clock);
        get("write_transitions", c.write_transitions);
        get("output_dir", c.output_dir);
        c.validate();
        return c;
    }

    void validate() const {
        auto fail = [](const std::string& field, const std::string& msg) {
            throw ConfigError("config: " + field + " " + msg);
        };
        if (plant != "unicycle" && plant != "quadrotor") fail("plant", "must be unicycle or quadrotor");
        if (episodes < 0) fail("episodes", "must be >= 0");
        if (steps < 1) fail("steps", "must be >= 1");
        if (!(dt > 0.0)) fail("dt", "must be positive");
        if (!(T > 0.0)) fail("T", "must be positive");
        if (!(a > 0.0)) fail("a", "must be positive");
        const double ratio = T / dt;
        if (std::lround(ratio) < 1 || std::abs(ratio - std::round(ratio)) > 1e-9 * ratio) {
            fail("T", "must be an integer multiple of dt");
        }
        const std::size_t n_beta = plant == "quadrotor" ? 2 : 1;
        if (!beta.empty() && beta.size() != n_beta) {
            fail("beta", "needs " + std::to_string(n_beta) + " gain(s) for " + plant);
        }
        for (double b : beta) {
            if (!(b > 0.0)) fail("beta", "gains must be positive");
        }
        if (policy != "nominal_tracker" && policy != "noisy_explorer" && policy != "constant" &&
            policy != "external") {
            fail("policy", "must be nominal_tracker, noisy_explorer, constant or external");
        }
        if (!noise.empty() && noise.size() != 1 && noise.size() != 2) fail("noise", "needs 1 or 2 entries");
        for (double v : noise) {
            if (!(v >= 0.0)) fail("noise", "amplitudes must be >= 0");
        }
        if (noise_schedule != "constant" && noise_schedule != "linear") {
            fail("noise_schedule", "must be constant or linear");
        }
        if (noise_schedule == "linear" && noise_decay_episodes <= 0) {
            fail("noise_decay_episodes", "must be > 0 with a linear schedule");
        }
        if (policy == "constant" && constant_u.size() != 2) fail("constant_u", "needs 2 entries");
        if (policy == "external" && bridge_command.find_first_not_of(" \t") == std::string::npos) {
            fail("bridge_command", "is required for the external policy");
        }
        if (bridge_timeout_ms <= 0) fail("bridge_timeout_ms", "must be positive");
        if (disturbance != "profile" && disturbance != "zero") fail("disturbance", "must be profile or zero");
        if (!(disturbance_scale >= 0.0)) fail("disturbance_scale", "must be >= 0");
        parse_filter_mode(filter);
        if (threads < 0) fail("threads", "must be >= 0");
        if (block_size < 0) fail("block_size", "must be >= 0");
        for (long c : checkpoints) {
            if (c < 0 || c >= steps) fail("checkpoints", "entries must lie in [0, steps)");
        }
        if (trials < 1) fail("trials", "must be >= 1");
        if (random_disturbances < 0) fail("random_disturbances", "must be >= 0");
        if (!(horizon > 0.0)) fail("horizon", "must be positive");
        if (timing_bin < 1) fail("timing_bin", "must be >= 1");
        if (timing_clock != "thread_cpu" && timing_clock != "wall") {
            fail("timing_clock", "must be thread_cpu or wall");
        }
        if (output_dir.empty()) fail("output_dir", "must not be empty");
    }

    long effective_block_size() const {
        if (block_size > 0) return block_size;
        return plant == "quadrotor" ? 500 : 50;
    }

    long effective_threads() const {
        if (policy == "external") return 1;
        if (threads > 0) return threads;
        return std::max(1u, std::thread::hardware_concurrency());
    }

    /// Default checkpoints: 1, 10, 100, ... below `steps`, plus the last step.
    std::vector<long> effective_checkpoints() const {
        if (!checkpoints.empty()) return checkpoints;
        std::vector<long> out;
        for (long c = 1; c < steps; c *= 10) out.push_back(c);
        if (out.empty() || out.back() != steps - 1) out.push_back(steps - 1);
        return out;
    }
};

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
    }
    return ExperimentConfig::from_json(j);
}

/// Plant, filter options and policy parameters resolved from a config.
struct ExperimentSetup {
    Plant plant;
    UnicycleParams unicycle;
    QuadrotorParams quadrotor;
    EpisodeOptions options;
    Eigen::VectorXd noise;
};

inline ExperimentSetup build_setup(const ExperimentConfig& cfg) {
    cfg.validate();
    ExperimentSetup s;
    const double scale = cfg.disturbance == "zero" ? 0.0 : cfg.disturbance_scale;
    if (cfg.plant == "unicycle") {
        auto& p = s.unicycle;
        if (!cfg.beta.empty()) p.beta_gain = cfg.beta[0];
        p.slip.base *= scale;
        s.plant = make_unicycle(p);
        s.noise = Eigen::Vector2d(1.0, 2.0);
    } else {
        auto& p = s.quadrotor;
        if (!cfg.beta.empty()) {
            p.beta1 = cfg.beta[0];
            p.beta2 = cfg.beta[1];
        }
        p.disturbance.drag *= scale;
        p.disturbance.wind *= scale;
        p.disturbance.rotor_loss_1 *= scale;
        p.disturbance.rotor_loss_2 *= scale;
        s.plant = make_quadrotor(p);
        s.noise = Eigen::Vector2d::Constant(0.05);
    }
    if (cfg.noise.size() == 1) s.noise = Eigen::Vector2d::Constant(cfg.noise[0]);
    if (cfg.noise.size() == 2) s.noise = Eigen::Vector2d(cfg.noise[0], cfg.noise[1]);

    auto& o = s.options;
    o.observer.a = cfg.a;
    o.observer.T = cfg.T;
    o.observer.dt = cfg.dt;
    o.filter = parse_filter_mode(cfg.filter);
    o.steps = cfg.steps;
    o.bound = compute_error_bound(s.plant.model, o.observer);
    o.record_transitions = cfg.write_transitions;
    o.track_estimation = true;
    o.measure_time = true;
    o.clock = cfg.timing_clock == "wall" ? TimingClock::wall : TimingClock::thread_cpu;
    return s;
}

inline std::vector<std::string> split_command(const std::string& cmd) {
    std::istringstream is(cmd);
    std::vector<std::string> argv;
    for (std::string w; is >> w;) argv.push_back(w);
    return argv;
}

inline std::unique_ptr<Policy> make_policy(const ExperimentConfig& cfg, const ExperimentSetup& s,
                                           const std::shared_ptr<ProcessBridge>& bridge) {
    auto tracker = [&]() -> std::unique_ptr<Policy> {
        if (cfg.plant == "unicycle") return std::make_unique<UnicycleTracker>(s.unicycle);
        return std::make_unique<QuadrotorTracker>(s.quadrotor);
    };
    if (cfg.policy == "nominal_tracker") return tracker();
    if (cfg.policy == "noisy_explorer") {
        const auto schedule =
            cfg.noise_schedule == "linear" ? NoisyExplorer::Schedule::linear : NoisyExplorer::Schedule::constant;
        return std::make_unique<NoisyExplorer>(tracker(), s.noise, schedule, cfg.noise_decay_episodes);
    }
    if (cfg.policy == "constant") {
        return std::make_unique<ConstantPolicy>(Eigen::Vector2d(cfg.constant_u[0], cfg.constant_u[1]));
    }
    if (!bridge) throw ConfigError("config: external policy needs a running bridge");
    return std::make_unique<ExternalPolicy>(bridge, s.plant.model.m);
}

/// Per-episode row of the episodes CSV.
struct EpisodeSummary {
    long index = 0;
    std::uint64_t seed = 0;
    long steps = 0;
    bool violation = false;
    double min_h = 0.0;
    double first_violation_t = -1.0;
    long relaxations = 0;
    long first_relaxation_step = -1;
    bool violation_explained = true;
    long filter_active_steps = 0;
    double max_slack = 0.0;
    double max_kkt_residual = 0.0;
    bool left_state_box = false;
    bool aborted = false;
    std::string abort_category;
    double total_reward = 0.0;
    double mean_estimation_error = 0.0;   ///< relative unless the disturbance is zero
};

struct BlockStats {
    long first_episode = 0;
    long episodes = 0;
    long violations = 0;
    double violation_rate = 0.0;          ///< percent
    long relaxed_episodes = 0;
    long unexplained_violations = 0;
};

/// Statistics of the estimation error at one control step across episodes.
struct ErrorStats {
    long checkpoint = 0;
    long samples = 0;
    double mean = 0.0;
    double std = 0.0;
    double min = 0.0;
    double max = 0.0;
    bool relative = true;                 ///< false: |d| vanished, absolute error reported
};

/// Seconds per 1000 control steps.
struct PhaseTimes {
    double observer = 0.0;
    double assembly = 0.0;
    double qp = 0.0;
    double simulation = 0.0;
    double overhead() const { return observer + assembly + qp; }
};

struct MetricsReport {
    ExperimentConfig config;
    ErrorBound bound;
    std::vector<EpisodeSummary> episodes;
    std::vector<BlockStats> blocks;
    std::vector<ErrorStats> estimation_error;
    long violations = 0;
    long qp_relaxation_count = 0;
    long relaxed_episodes = 0;
    long unexplained_violations = 0;
    long aborted = 0;
    std::map<std::string, long> aborts_by_category;
    PhaseTimes mean_step_time;            ///< timing; excluded from determinism
};

namespace detail {

inline std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

inline double clip_relative(double err, double norm, bool relative) {
    return relative ? std::min(1.0, err / norm) : err;
}

inline ErrorStats error_stats(long checkpoint, const std::vector<double>& v, bool relative) {
    ErrorStats s;
    s.checkpoint = checkpoint;
    s.relative = relative;
    s.samples = static_cast<long>(v.size());
    if (v.empty()) return s;
    double sum = 0.0;
    s.min = v.front();
    s.max = v.front();
    for (double x : v) {
        sum += x;
        s.min = std::min(s.min, x);
        s.max = std::max(s.max, x);
    }
    s.mean = sum / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    return s;
}

/// |d_hat - d| / |d| at each checkpoint over all records, clipped at 100%.
/// Falls back to the absolute error when the disturbance vanishes.
inline std::vector<ErrorStats> estimation_stats(const std::vector<EpisodeRecord>& recs,
                                                const std::vector<long>& checkpoints) {
    bool relative = false;
    for (const auto& r : recs) {
        for (double d : r.disturbance_norm) relative = relative || d > 0.0;
    }
    std::vector<ErrorStats> out;
    for (long c : checkpoints) {
        std::vector<double> v;
        for (const auto& r : recs) {
            const auto k = static_cast<std::size_t>(c);
            if (k >= r.estimation_error.size()) continue;
            if (relative && !(r.disturbance_norm[k] > 0.0)) continue;
            v.push_back(clip_relative(r.estimation_error[k], r.disturbance_norm[k], relative));
        }
        out.push_back(error_stats(c, v, relative));
    }
    return out;
}

/// Runs `count` episodes with seeds mix_seed(cfg.seed, i) on a worker pool.
/// Records come back in episode order whatever the completion order.
inline std::vector<EpisodeRecord> run_episodes(const ExperimentConfig& cfg, const ExperimentSetup& setup,
                                               long count) {
    std::vector<EpisodeRecord> recs(static_cast<std::size_t>(count));
    std::shared_ptr<ProcessBridge> bridge;
    if (cfg.policy == "external") {
        bridge = std::make_shared<ProcessBridge>(split_command(cfg.bridge_command),
                                                 static_cast<int>(cfg.bridge_timeout_ms));
    }
    std::atomic<long> next{0};
    std::mutex err_mutex;
    std::exception_ptr first_error;
    auto worker = [&] {
        while (true) {
            const long i = next.fetch_add(1);
            if (i >= count) return;
            try {
                auto policy = make_policy(cfg, setup, bridge);
                recs[static_cast<std::size_t>(i)] = run_episode(
                    setup.plant, *policy, setup.options, mix_seed(cfg.seed, static_cast<std::uint64_t>(i)), i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (!first_error) first_error = std::current_exception();
                next.store(count);
                return;
            }
        }
    };
    const long n_threads = std::min(cfg.effective_threads(), std::max(1L, count));
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (long t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (first_error) std::rethrow_exception(first_error);
    return recs;
}

inline EpisodeSummary summarize(const EpisodeRecord& r, double T) {
    EpisodeSummary s;
    s.index = r.index;
    s.seed = r.seed;
    s.steps = r.steps;
    s.violation = r.violation;
    s.min_h = r.min_h;
    s.first_violation_t = r.first_violation_t;
    s.relaxations = r.relaxations;
    s.first_relaxation_step = r.first_relaxation_step;
    s.violation_explained = r.violation_explained(T);
    s.filter_active_steps = r.filter_active_steps;
    s.max_slack = r.max_slack;
    s.max_kkt_residual = r.max_kkt_residual;
    s.left_state_box = r.left_state_box;
    s.aborted = r.aborted;
    s.abort_category = r.abort_category;
    s.total_reward = r.total_reward;
    bool relative = false;
    for (double d : r.disturbance_norm) relative = relative || d > 0.0;
    double sum = 0.0;
    long n = 0;
    for (std::size_t k = 1; k < r.estimation_error.size(); ++k) {
        if (relative && !(r.disturbance_norm[k] > 0.0)) continue;
        sum += clip_relative(r.estimation_error[k], r.disturbance_norm[k], relative);
        ++n;
    }
    s.mean_estimation_error = n > 0 ? sum / static_cast<double>(n) : 0.0;
    return s;
}

inline PhaseTimes mean_phase_times(const std::vector<EpisodeRecord>& recs) {
    PhaseTimes p;
    long n = 0;
    for (const auto& r : recs) {
        for (const auto& t : r.timing) {
            p.observer += t.observer;
            p.assembly += t.assembly;
            p.qp += t.qp;
            p.simulation += t.simulation;
            ++n;
        }
    }
    if (n > 0) {
        const double k = 1000.0 / static_cast<double>(n);
        p.observer *= k;
        p.assembly *= k;
        p.qp *= k;
        p.simulation *= k;
    }
    return p;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out.precision(12);
    return out;
}

inline nlohmann::json bound_json(const ErrorBound& b) {
    return {{"theta", b.theta}, {"eta", b.eta}, {"gamma", b.gamma}, {"T", b.T}, {"empirical", b.empirical}};
}

inline nlohmann::json stats_json(const std::vector<ErrorStats>& v) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : v) {
        arr.push_back({{"checkpoint", s.checkpoint},
                       {"samples", s.samples},
                       {"mean", s.mean},
                       {"std", s.std},
                       {"min", s.min},
                       {"max", s.max},
                       {"relative", s.relative}});
    }
    return arr;
}

inline void write_stats_csv(std::ostream& os, const std::vector<ErrorStats>& v) {
    os << "checkpoint,samples,mean,std,min,max,relative\n";
    for (const auto& s : v) {
        os << s.checkpoint << ',' << s.samples << ',' << fmt(s.mean) << ',' << fmt(s.std) << ','
           << fmt(s.min) << ',' << fmt(s.max) << ',' << (s.relative ? 1 : 0) << '\n';
    }
}

}  // namespace detail

inline MetricsReport aggregate(const ExperimentConfig& cfg, const ExperimentSetup& setup,
                               const std::vector<EpisodeRecord>& recs) {
    MetricsReport rep;
    rep.config = cfg;
    rep.bound = setup.options.bound;
    const double T = setup.options.observer.T;
    for (const auto& r : recs) {
        rep.episodes.push_back(detail::summarize(r, T));
        const auto& s = rep.episodes.back();
        rep.violations += s.violation;
        rep.qp_relaxation_count += s.relaxations;
        rep.relaxed_episodes += s.relaxations > 0;
        rep.unexplained_violations += !s.violation_explained;
        if (s.aborted) {
            ++rep.aborted;
            ++rep.aborts_by_category[s.abort_category];
        }
    }
    const long bs = cfg.effective_block_size();
    for (long first = 0; first < static_cast<long>(rep.episodes.size()); first += bs) {
        BlockStats b;
        b.first_episode = first;
        const long last = std::min<long>(first + bs, static_cast<long>(rep.episodes.size()));
        b.episodes = last - first;
        for (long i = first; i < last; ++i) {
            const auto& s = rep.episodes[static_cast<std::size_t>(i)];
            b.violations += s.violation;
            b.relaxed_episodes += s.relaxations > 0;
            b.unexplained_violations += !s.violation_explained;
        }
        b.violation_rate = 100.0 * static_cast<double>(b.violations) / static_cast<double>(b.episodes);
        rep.blocks.push_back(b);
    }
    rep.estimation_error = detail::estimation_stats(recs, cfg.effective_checkpoints());
    rep.mean_step_time = detail::mean_phase_times(recs);
    return rep;
}

/// episodes.csv: one row per episode.
inline void write_episodes_csv(std::ostream& os, const MetricsReport& rep) {
    using detail::fmt;
    os << "episode,seed,steps,violation,min_h,first_violation_t,relaxations,first_relaxation_step,"
          "violation_explained,filter_active_steps,max_slack,max_kkt_residual,left_state_box,aborted,"
          "abort_category,total_reward,mean_estimation_error\n";
    for (const auto& s : rep.episodes) {
        os << s.index << ',' << s.seed << ',' << s.steps << ',' << s.violation << ',' << fmt(s.min_h) << ','
           << fmt(s.first_violation_t) << ',' << s.relaxations << ',' << s.first_relaxation_step << ','
           << s.violation_explained << ',' << s.filter_active_steps << ',' << fmt(s.max_slack) << ','
           << fmt(s.max_kkt_residual) << ',' << s.left_state_box << ',' << s.aborted << ','
           << s.abort_category << ',' << fmt(s.total_reward) << ',' << fmt(s.mean_estimation_error) << '\n';
    }
}

/// blocks.csv: violation rate per block of episodes.
inline void write_blocks_csv(std::ostream& os, const MetricsReport& rep) {
    os << "first_episode,episodes,violations,violation_rate,relaxed_episodes,unexplained_violations\n";
    for (const auto& b : rep.blocks) {
        os << b.first_episode << ',' << b.episodes << ',' << b.violations << ','
           << detail::fmt(b.violation_rate) << ',' << b.relaxed_episodes << ',' << b.unexplained_violations
           << '\n';
    }
}

/// Summary without timing, so repeated runs compare byte for byte.
inline nlohmann::json summary_json(const MetricsReport& rep) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : rep.blocks) {
        blocks.push_back({{"first_episode", b.first_episode},
                          {"episodes", b.episodes},
                          {"violations", b.violations},
                          {"violation_rate", b.violation_rate},
                          {"relaxed_episodes", b.relaxed_episodes},
                          {"unexplained_violations", b.unexplained_violations}});
    }
    nlohmann::json relaxed = nlohmann::json::array();
    nlohmann::json min_h = nlohmann::json::array();
    for (const auto& s : rep.episodes) {
        if (s.relaxations > 0) {
            relaxed.push_back({{"episode", s.index},
                               {"relaxations", s.relaxations},
                               {"first_step", s.first_relaxation_step},
                               {"violation", s.violation}});
        }
        min_h.push_back(s.min_h);
    }
    return {{"config", rep.config.to_json()},
            {"bound", detail::bound_json(rep.bound)},
            {"episodes", static_cast<long>(rep.episodes.size())},
            {"violations", rep.violations},
            {"violation_rate_per_block", blocks},
            {"qp_relaxation_count", rep.qp_relaxation_count},
            {"relaxed_episodes", rep.relaxed_episodes},
            {"relaxation_events", relaxed},
            {"unexplained_violations", rep.unexplained_violations},
            {"aborted", rep.aborted},
            {"aborts_by_category", rep.aborts_by_category},
            {"estimation_error", detail::stats_json(rep.estimation_error)},
            {"min_h", min_h}};
}

inline nlohmann::json timing_json(const PhaseTimes& p) {
    return {{"unit", "seconds per 1000 control steps"},
            {"observer", p.observer},
            {"assembly", p.assembly},
            {"qp", p.qp},
            {"overhead", p.overhead()},
            {"simulation", p.simulation}};
}

/// Writes episodes.csv, blocks.csv, estimation_error.csv, summary.json,
/// timing.json and, if enabled, transitions.ndjson into cfg.output_dir.
inline void write_report(const MetricsReport& rep, const std::vector<EpisodeRecord>& recs) {
    const std::filesystem::path dir(rep.config.output_dir);
    {
        auto os = detail::open_output(dir / "episodes.csv");
        write_episodes_csv(os, rep);
    }
    {
        auto os = detail::open_output(dir / "blocks.csv");
        write_blocks_csv(os, rep);
    }
    {
        auto os = detail::open_output(dir / "estimation_error.csv");
        detail::write_stats_csv(os, rep.estimation_error);
    }
    {
        auto os = detail::open_output(dir / "summary.json");
        os << summary_json(rep).dump(2) << '\n';
    }
    {
        auto os = detail::open_output(dir / "timing.json");
        os << timing_json(rep.mean_step_time).dump(2) << '\n';
    }
    if (rep.config.write_transitions) {
        auto os = detail::open_output(dir / "transitions.ndjson");
        for (const auto& r : recs) write_transitions_ndjson(os, r);
    }
}

/// Runs the configured episodes and aggregates them. With `write_files` the
/// report lands in cfg.output_dir; the files are written even when some
/// episodes aborted.
inline MetricsReport run_experiment(const ExperimentConfig& cfg, bool write_files = false) {
    const ExperimentSetup setup = build_setup(cfg);
    const auto recs = detail::run_episodes(cfg, setup, cfg.episodes);
    MetricsReport rep = aggregate(cfg, setup, recs);
    if (write_files) write_report(rep, recs);
    return rep;
}

struct EstimationSweep {
    ErrorBound bound;
    std::vector<ErrorStats> rows;
    long aborted = 0;
};

/// Estimation error at each checkpoint over cfg.trials episodes.
inline EstimationSweep estimation_error_sweep(const ExperimentConfig& cfg, const std::vector<long>& checkpoints) {
    ExperimentConfig c = cfg;
    c.checkpoints = checkpoints;
    c.steps = std::max(cfg.steps, checkpoints.empty() ? 1L : *std::max_element(checkpoints.begin(), checkpoints.end()) + 1);
    c.write_transitions = false;
    c.validate();
    const ExperimentSetup setup = build_setup(c);
    const auto recs = detail::run_episodes(c, setup, c.trials);
    EstimationSweep out;
    out.bound = setup.options.bound;
    out.rows = detail::estimation_stats(recs, c.effective_checkpoints());
    for (const auto& r : recs) out.aborted += r.aborted;
    return out;
}

/// Median of pairwise slopes.
inline double theil_sen_slope(const std::vector<double>& x, const std::vector<double>& y) {
    std::vector<double> slopes;
    for (std::size_t i = 0; i < x.size(); ++i) {
        for (std::size_t j = i + 1; j < x.size(); ++j) {
            if (x[j] != x[i]) slopes.push_back((y[j] - y[i]) / (x[j] - x[i]));
        }
    }
    if (slopes.empty()) return 0.0;
    const auto mid = slopes.begin() + static_cast<std::ptrdiff_t>(slopes.size() / 2);
    std::nth_element(slopes.begin(), mid, slopes.end());
    if (slopes.size() % 2 == 1) return *mid;
    const double hi = *mid;
    const double lo = *std::max_element(slopes.begin(), mid);
    return 0.5 * (lo + hi);
}

struct TimingRow {
    long first_step = 0;    ///< global control-step index (episodes back to back)
    long steps = 0;
    PhaseTimes per_1000;
};

/// Filter overhead against the global control-step index. Host speed drifts
/// over a run, so each bin's overhead is also divided by its own simulation
/// time (a fixed amount of work per step) and rescaled by the mean; the slope
/// of that normalized series is the headline number.
struct TimingProfile {
    std::vector<TimingRow> rows;
    std::vector<double> normalized_overhead;  ///< per bin, seconds per 1000 steps
    PhaseTimes mean;
    double slope_per_1e5 = 0.0;       ///< normalized overhead change over 10^5 steps
    double relative_slope = 0.0;      ///< slope_per_1e5 / mean overhead
    double raw_relative_slope = 0.0;  ///< same, without the normalization
    PhaseTimes baseline;              ///< same run with the filter off
};

inline TimingProfile timing_profile(const ExperimentConfig& cfg) {
    ExperimentConfig c = cfg;
    c.write_transitions = false;
    const ExperimentSetup setup = build_setup(c);
    const auto recs = detail::run_episodes(c, setup, c.episodes);

    TimingProfile prof;
    prof.mean = detail::mean_phase_times(recs);
    TimingRow row;
    long global = 0;
    auto flush = [&] {
        if (row.steps == 0) return;
        const double k = 1000.0 / static_cast<double>(row.steps);
        row.per_1000.observer *= k;
        row.per_1000.assembly *= k;
        row.per_1000.qp *= k;
        row.per_1000.simulation *= k;
        prof.rows.push_back(row);
        row = TimingRow{};
        row.first_step = global;
    };
    for (const auto& r : recs) {
        for (const auto& t : r.timing) {
            row.per_1000.observer += t.observer;
            row.per_1000.assembly += t.assembly;
            row.per_1000.qp += t.qp;
            row.per_1000.simulation += t.simulation;
            ++row.steps;
            ++global;
            if (row.steps == c.timing_bin) flush();
        }
    }
    flush();

    std::vector<double> xs, raw;
    for (const auto& r : prof.rows) {
        xs.push_back(static_cast<double>(r.first_step) + 0.5 * static_cast<double>(r.steps));
        raw.push_back(r.per_1000.overhead());
    }
    const double sim = prof.mean.simulation;
    for (const auto& r : prof.rows) {
        const double ratio = r.per_1000.simulation > 0.0 ? sim / r.per_1000.simulation : 1.0;
        prof.normalized_overhead.push_back(r.per_1000.overhead() * ratio);
    }
    const double m = prof.mean.overhead();
    prof.slope_per_1e5 = theil_sen_slope(xs, prof.normalized_overhead) * 1e5;
    prof.relative_slope = m > 0.0 ? prof.slope_per_1e5 / m : 0.0;
    prof.raw_relative_slope = m > 0.0 ? theil_sen_slope(xs, raw) * 1e5 / m : 0.0;

    if (setup.options.filter != FilterMode::off) {
        ExperimentConfig off = c;
        off.filter = "off";
        const ExperimentSetup s_off = build_setup(off);
        prof.baseline = detail::mean_phase_times(detail::run_episodes(off, s_off, off.episodes));
    }
    return prof;
}

inline void write_timing_profile_csv(std::ostream& os, const TimingProfile& p) {
    using detail::fmt;
    os << "first_step,steps,observer,assembly,qp,overhead,simulation,normalized_overhead\n";
    for (std::size_t i = 0; i < p.rows.size(); ++i) {
        const auto& r = p.rows[i];
        os << r.first_step << ',' << r.steps << ',' << fmt(r.per_1000.observer) << ','
           << fmt(r.per_1000.assembly) << ',' << fmt(r.per_1000.qp) << ',' << fmt(r.per_1000.overhead())
           << ',' << fmt(r.per_1000.simulation) << ',' << fmt(p.normalized_overhead[i]) << '\n';
    }
}

struct CertifyRow {
    std::string disturbance;   ///< "profile" or "random_<k>"
    CertificationReport report;
};

struct CertifyResult {
    ErrorBound bound;
    std::vector<CertifyRow> rows;
    long violations = 0;
    long checked_steps = 0;
    double max_ratio = 0.0;
    double max_error_after_T = 0.0;
};

/// Checks |d_hat - d| <= delta(t) along random closed-loop trajectories, for
/// the plant's own disturbance and cfg.random_disturbances random ones
/// sharing its declared constants.
inline CertifyResult certify(const ExperimentConfig& cfg) {
    const ExperimentSetup setup = build_setup(cfg);
    const auto& model = setup.plant.model;
    const auto& obs = setup.options.observer;
    CertifyResult out;
    out.bound = setup.options.bound;
    auto check = [&](const std::string& label, const DisturbanceFn& d, std::uint64_t seed) {
        CertifyRow row{label, certify_bound(model, obs, out.bound, d, cfg.horizon, static_cast<int>(cfg.trials), seed)};
        out.violations += row.report.violations;
        out.checked_steps += row.report.checked_steps;
        out.max_ratio = std::max(out.max_ratio, row.report.max_ratio);
        out.max_error_after_T = std::max(out.max_error_after_T, row.report.max_error_after_T);
        out.rows.push_back(std::move(row));
    };
    check("profile", setup.plant.disturbance, mix_seed(cfg.seed, 0));
    for (long k = 0; k < cfg.random_disturbances; ++k) {
        const auto d = sample_lipschitz_disturbance(mix_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(k)),
                                                    model.lipschitz_const, model.origin_bound, model.state_box);
        check("random_" + std::to_string(k), d, mix_seed(cfg.seed, 2000 + static_cast<std::uint64_t>(k)));
    }
    return out;
}

}  // namespace dobcbf
