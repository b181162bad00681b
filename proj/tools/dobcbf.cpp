// Command-line front end: run, sweep-error, profile, certify-bound.
#include "dobcbf/dobcbf.hpp"

#include "CLI11.hpp"

#include <iostream>

using namespace dobcbf;

namespace {

enum Exit : int {
    ok = 0,
    internal = 1,
    usage = 2,
    config = 3,
    io = 4,
    solver = 5,
    bridge = 6,
    numerical = 7,
    check_failed = 8,
};

int exit_for(const std::string& category) {
    if (category == "config") return config;
    if (category == "io") return io;
    if (category == "solver") return solver;
    if (category == "bridge" || category == "policy") return bridge;
    return numerical;
}

/// Worst exit code among aborted episodes; solver beats bridge beats the rest.
int exit_for_aborts(const std::map<std::string, long>& aborts) {
    int code = ok;
    for (const auto& [cat, n] : aborts) {
        if (n == 0) continue;
        const int c = exit_for(cat);
        if (code == ok || c < code) code = c;
    }
    return code;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != ' ') {
            cur += ch;
        }
    }
    if (!cur.empty() || !out.empty()) out.push_back(cur);
    return out;
}

/// Converts a flag value to the JSON type of the config field it overrides.
nlohmann::json flag_value(const std::string& key, const nlohmann::json& like, const std::string& text) {
    auto bad = [&] { return ConfigError("config: flag --" + key + " cannot parse \"" + text + "\""); };
    auto to_long = [&](const std::string& s) {
        std::size_t pos = 0;
        long long v = 0;
        try {
            v = std::stoll(s, &pos);
        } catch (const std::exception&) {
            throw bad();
        }
        if (pos != s.size()) throw bad();
        return v;
    };
    auto to_double = [&](const std::string& s) {
        std::size_t pos = 0;
        double v = 0.0;
        try {
            v = std::stod(s, &pos);
        } catch (const std::exception&) {
            throw bad();
        }
        if (pos != s.size()) throw bad();
        return v;
    };
    if (like.is_string()) return text;
    if (like.is_boolean()) {
        if (text == "true" || text == "1") return true;
        if (text == "false" || text == "0") return false;
        throw bad();
    }
    if (like.is_number_unsigned()) {
        const long long v = to_long(text);
        if (v < 0) throw bad();
        return static_cast<std::uint64_t>(v);
    }
    if (like.is_number_integer()) return to_long(text);
    if (like.is_number_float()) return to_double(text);
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& item : split_list(text)) {
        if (key == "checkpoints") arr.push_back(to_long(item));
        else arr.push_back(to_double(item));
    }
    return arr;
}

struct CommonArgs {
    std::string config_path;
    std::map<std::string, std::string> overrides;
};

void add_config_flags(CLI::App* app, CommonArgs& args) {
    app->add_option("-c,--config", args.config_path, "JSON config file; flags override its values");
    const nlohmann::json defaults = ExperimentConfig{}.to_json();
    for (const auto& [key, value] : defaults.items()) {
        std::string dashed = key;
        std::replace(dashed.begin(), dashed.end(), '_', '-');
        std::string names = "--" + dashed;
        if (dashed != key) names += ",--" + key;
        app->add_option_function<std::string>(
            names, [&args, key](const std::string& v) { args.overrides[key] = v; },
            "config field " + key + " (default " + value.dump() + ")");
    }
}

ExperimentConfig resolve(const CommonArgs& args) {
    nlohmann::json j = nlohmann::json::object();
    if (!args.config_path.empty()) {
        std::ifstream in(args.config_path);
        if (!in) throw IoError("cannot open config file " + args.config_path);
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError("config: " + args.config_path + " is not valid JSON: " + e.what());
        }
        if (!j.is_object()) throw ConfigError("config: expected a JSON object");
    }
    const nlohmann::json defaults = ExperimentConfig{}.to_json();
    for (const auto& [key, text] : args.overrides) j[key] = flag_value(key, defaults.at(key), text);
    return ExperimentConfig::from_json(j);
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    auto os = detail::open_output(path);
    os << j.dump(2) << '\n';
}

int cmd_run(const ExperimentConfig& cfg) {
    const MetricsReport rep = run_experiment(cfg, true);
    std::cout << "episodes " << rep.episodes.size() << "  violations " << rep.violations
              << "  relaxation events " << rep.qp_relaxation_count << " (" << rep.relaxed_episodes
              << " episodes)  unexplained " << rep.unexplained_violations << "  aborted " << rep.aborted << '\n';
    for (const auto& b : rep.blocks) {
        std::cout << "  episodes " << b.first_episode + 1 << "-" << b.first_episode + b.episodes
                  << ": violation rate " << b.violation_rate << "%\n";
    }
    std::cout << "filter overhead " << rep.mean_step_time.overhead() << " s per 1000 steps\n";
    std::cout << "wrote " << cfg.output_dir << "/{episodes.csv,blocks.csv,estimation_error.csv,summary.json,timing.json"
              << (cfg.write_transitions ? ",transitions.ndjson" : "") << "}\n";
    for (const auto& [cat, n] : rep.aborts_by_category) {
        std::cerr << "aborted episodes (" << cat << "): " << n << '\n';
    }
    return exit_for_aborts(rep.aborts_by_category);
}

int cmd_sweep(const ExperimentConfig& cfg) {
    const auto sweep = estimation_error_sweep(cfg, cfg.effective_checkpoints());
    const std::filesystem::path dir(cfg.output_dir);
    {
        auto os = detail::open_output(dir / "sweep.csv");
        detail::write_stats_csv(os, sweep.rows);
    }
    write_json(dir / "sweep.json", {{"config", cfg.to_json()},
                                    {"bound", detail::bound_json(sweep.bound)},
                                    {"aborted", sweep.aborted},
                                    {"estimation_error", detail::stats_json(sweep.rows)}});
    for (const auto& r : sweep.rows) {
        std::cout << "step " << r.checkpoint << (r.relative ? "  relative error" : "  absolute error (zero disturbance)")
                  << " mean " << r.mean << " std " << r.std << " min " << r.min << " max " << r.max << '\n';
    }
    std::cout << "wrote " << cfg.output_dir << "/{sweep.csv,sweep.json}\n";
    return sweep.aborted > 0 ? numerical : ok;
}

int cmd_profile(const ExperimentConfig& cfg) {
    const auto prof = timing_profile(cfg);
    const std::filesystem::path dir(cfg.output_dir);
    {
        auto os = detail::open_output(dir / "timing_profile.csv");
        write_timing_profile_csv(os, prof);
    }
    write_json(dir / "timing_profile.json", {{"config", cfg.to_json()},
                                             {"mean", timing_json(prof.mean)},
                                             {"baseline_filter_off", timing_json(prof.baseline)},
                                             {"slope_per_1e5_steps", prof.slope_per_1e5},
                                             {"relative_slope", prof.relative_slope},
                                             {"raw_relative_slope", prof.raw_relative_slope},
                                             {"bins", static_cast<long>(prof.rows.size())}});
    std::cout << "overhead " << prof.mean.overhead() << " s per 1000 steps (observer " << prof.mean.observer
              << ", assembly " << prof.mean.assembly << ", qp " << prof.mean.qp << ")\n";
    std::cout << "filter off: " << prof.baseline.overhead() << " s per 1000 steps\n";
    std::cout << "Theil-Sen slope " << prof.slope_per_1e5 << " per 1e5 steps (" << 100.0 * prof.relative_slope
              << "% of mean; " << 100.0 * prof.raw_relative_slope << "% before drift normalization)\n";
    std::cout << "wrote " << cfg.output_dir << "/{timing_profile.csv,timing_profile.json}\n";
    return ok;
}

int cmd_certify(const ExperimentConfig& cfg) {
    const auto res = certify(cfg);
    const std::filesystem::path dir(cfg.output_dir);
    {
        auto os = detail::open_output(dir / "certify.csv");
        os << "disturbance,checked_steps,violations,max_ratio,max_error_after_T,truncated_trials\n";
        for (const auto& r : res.rows) {
            os << r.disturbance << ',' << r.report.checked_steps << ',' << r.report.violations << ','
               << detail::fmt(r.report.max_ratio) << ',' << detail::fmt(r.report.max_error_after_T) << ','
               << r.report.truncated_trials << '\n';
        }
    }
    write_json(dir / "certify.json", {{"config", cfg.to_json()},
                                      {"bound", detail::bound_json(res.bound)},
                                      {"disturbances", static_cast<long>(res.rows.size())},
                                      {"checked_steps", res.checked_steps},
                                      {"violations", res.violations},
                                      {"max_ratio", res.max_ratio},
                                      {"max_error_after_T", res.max_error_after_T}});
    std::cout << "theta " << res.bound.theta << "  gamma " << res.bound.gamma << "  disturbances "
              << res.rows.size() << "  steps " << res.checked_steps << "  violations " << res.violations
              << "  max error/bound " << res.max_ratio << '\n';
    std::cout << "wrote " << cfg.output_dir << "/{certify.csv,certify.json}\n";
    return res.violations > 0 ? check_failed : ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Disturbance-observer barrier filter experiments"};
    app.require_subcommand(1);
    CommonArgs run_args, sweep_args, profile_args, certify_args;
    auto* run = app.add_subcommand("run", "run episodes and report violation rates");
    auto* sweep = app.add_subcommand("sweep-error", "disturbance estimation error at checkpoints");
    auto* profile = app.add_subcommand("profile", "per-phase filter compute time across training steps");
    auto* cert = app.add_subcommand("certify-bound", "check the estimation error bound on random disturbances");
    add_config_flags(run, run_args);
    add_config_flags(sweep, sweep_args);
    add_config_flags(profile, profile_args);
    add_config_flags(cert, certify_args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : usage;
    }

    try {
        if (run->parsed()) return cmd_run(resolve(run_args));
        if (sweep->parsed()) return cmd_sweep(resolve(sweep_args));
        if (profile->parsed()) return cmd_profile(resolve(profile_args));
        if (cert->parsed()) return cmd_certify(resolve(certify_args));
    } catch (const Error& e) {
        std::cerr << "error [" << e.category() << "]: " << e.what() << '\n';
        return exit_for(e.category());
    } catch (const std::exception& e) {
        std::cerr << "error [internal]: " << e.what() << '\n';
        return internal;
    }
    return usage;
}
