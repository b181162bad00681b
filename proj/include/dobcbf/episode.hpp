#pragma once

#include "dobcbf/envs/plant.hpp"
#include "dobcbf/observer.hpp"
#include "dobcbf/policy.hpp"
#include "dobcbf/qp.hpp"

#include "json.hpp"

#include <time.h>

#include <ostream>
#include <string>
#include <vector>

namespace dobcbf {

enum class FilterMode { dob_cbf, nominal_cbf, off };

inline const char* to_string(FilterMode f) {
    switch (f) {
        case FilterMode::dob_cbf: return "dob_cbf";
        case FilterMode::nominal_cbf: return "nominal_cbf";
        case FilterMode::off: return "off";
    }
    return "unknown";
}

inline FilterMode parse_filter_mode(const std::string& s) {
    if (s == "dob_cbf") return FilterMode::dob_cbf;
    if (s == "nominal_cbf") return FilterMode::nominal_cbf;
    if (s == "off") return FilterMode::off;
    throw ConfigError("filter: expected dob_cbf, nominal_cbf or off, got \"" + s + "\"");
}

enum class TimingClock { thread_cpu, wall };

struct EpisodeOptions {
    ObserverConfig observer;
    FilterMode filter = FilterMode::dob_cbf;
    long steps = 1000;            ///< control steps, one QP per sampling period T
    ErrorBound bound;
    QpOptions qp;
    Eigen::MatrixXd weight;       ///< QP weight P; empty means identity
    double pre_clip = 2.0;        ///< policy output is clamped to this multiple of U
    bool record_transitions = false;
    bool track_estimation = false;
    bool measure_time = false;
    TimingClock clock = TimingClock::thread_cpu;
};

struct Transition {
    long step = 0;
    double t = 0.0;
    StateVector x;
    ControlVector u_rl;
    ControlVector u_safe;
    StateVector x_next;
    double reward = 0.0;
    bool filter_active = false;
    bool slack_used = false;
    double min_h = 0.0;           ///< min over barriers and substeps within the step
};

/// Seconds spent in the filter phases of one control step.
struct StepTiming {
    double observer = 0.0;
    double assembly = 0.0;
    double qp = 0.0;
    double simulation = 0.0;
    double overhead() const { return observer + assembly + qp; }
};

struct EpisodeRecord {
    long index = 0;
    std::uint64_t seed = 0;
    long steps = 0;                   ///< control steps completed
    std::vector<Transition> transitions;
    bool violation = false;
    double min_h = std::numeric_limits<double>::infinity();
    double first_violation_t = -1.0;
    long relaxations = 0;
    long first_relaxation_step = -1;
    long filter_active_steps = 0;
    double max_slack = 0.0;
    double max_kkt_residual = 0.0;
    bool left_state_box = false;
    bool aborted = false;
    std::string abort_category;
    std::string abort_message;
    double total_reward = 0.0;
    StateVector final_state;
    /// Per control step (after the observer update): |d_hat - d(x)| and |d(x)|.
    std::vector<double> estimation_error;
    std::vector<double> disturbance_norm;
    std::vector<StepTiming> timing;

    /// A violation is explained by a relaxation at or before it, or by
    /// happening inside the first sampling period.
    bool violation_explained(double T) const {
        if (!violation) return true;
        if (first_violation_t < T) return true;
        return first_relaxation_step >= 0 &&
               static_cast<double>(first_relaxation_step) * T <= first_violation_t;
    }
};

namespace detail {

inline double clock_seconds(TimingClock c) {
    timespec ts{};
    ::clock_gettime(c == TimingClock::thread_cpu ? CLOCK_THREAD_CPUTIME_ID : CLOCK_MONOTONIC, &ts);
    return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

}  // namespace detail

/// One episode of the shielded interaction loop. Per control step: sample the
/// observer, query the policy, build the barrier rows with the current d_hat
/// and delta, solve the QP, then integrate plant and predictor over T with
/// u_safe held. Barrier values are checked at every integration substep.
///
/// Library errors inside the loop end the episode and are recorded in
/// `aborted` / `abort_category` rather than thrown.
inline EpisodeRecord run_episode(const Plant& plant, Policy& policy, const EpisodeOptions& opt,
                                 std::uint64_t seed, long index = 0) {
    opt.observer.validate();
    const SystemModel& model = plant.model;
    const long sps = opt.observer.steps_per_sample();
    const double T = opt.observer.T;
    const Eigen::MatrixXd P =
        opt.weight.size() > 0 ? opt.weight : Eigen::MatrixXd::Identity(model.m, model.m);
    const BoxSet pre_box = model.input_box.scaled(opt.pre_clip);

    EpisodeRecord rec;
    rec.index = index;
    rec.seed = seed;
    Rng init_rng(mix_seed(seed, 0));
    StateVector x = model.normalize(plant.initial_state(init_rng));
    policy.reset(mix_seed(seed, 1), index);
    ObserverState obs = initialize_observer(x);
    QpSolver solver(opt.qp);
    QpProblem qp;
    qp.weight = P;
    qp.box = model.input_box;

    auto note_h = [&](const StateVector& s, double t) {
        const double h = plant.min_barrier(s);
        if (h < rec.min_h) rec.min_h = h;
        if (h < 0.0 && !rec.violation) {
            rec.violation = true;
            rec.first_violation_t = t;
        }
        if (!model.state_box.contains(s)) rec.left_state_box = true;
        return h;
    };
    note_h(x, 0.0);

    auto now = [&] { return opt.measure_time ? detail::clock_seconds(opt.clock) : 0.0; };
    double last_reward = 0.0;
    double t = 0.0;
    try {
        for (long k = 0; k < opt.steps; ++k) {
            t = static_cast<double>(k) * T;
            StepTiming timing;
            double t0 = now();
            obs = pc_update(obs, opt.observer, x);
            double t1 = now();
            timing.observer = t1 - t0;

            if (opt.track_estimation) {
                const DisturbanceVector d = plant.disturbance(x);
                rec.estimation_error.push_back((obs.d_hat - d).norm());
                rec.disturbance_norm.push_back(d.norm());
            }

            ControlVector u_rl = policy.act(x, t, last_reward);
            if (u_rl.size() != model.m) {
                throw PolicyError("policy returned " + std::to_string(u_rl.size()) +
                                  " inputs, expected " + std::to_string(model.m));
            }
            if (!u_rl.allFinite()) throw PolicyError("policy returned a non-finite action");
            u_rl = pre_box.clamp(u_rl);

            ControlVector u_safe;
            bool slack_used = false;
            t0 = now();
            if (opt.filter == FilterMode::off) {
                u_safe = model.input_box.clamp(u_rl);
                t1 = now();
                timing.assembly = t1 - t0;
            } else {
                const bool dob = opt.filter == FilterMode::dob_cbf;
                const double delta = dob ? opt.bound.delta_for_sample(k) : 0.0;
                const DisturbanceVector d_hat = dob ? obs.d_hat : DisturbanceVector::Zero(model.n);
                qp.ineqs.clear();
                for (const auto& spec : plant.constraints) {
                    qp.ineqs.push_back(assemble_constraint(spec, x, d_hat, delta));
                }
                qp.u_ref = u_rl;
                t1 = now();
                timing.assembly = t1 - t0;
                const QpSolution sol = solver.solve(qp);
                timing.qp = now() - t1;
                if (sol.status == QpStatus::failed) {
                    throw SolverFailure("QP failed at step " + std::to_string(k) + ": " + sol.message);
                }
                if (sol.status == QpStatus::relaxed) {
                    slack_used = true;
                    ++rec.relaxations;
                    if (rec.first_relaxation_step < 0) rec.first_relaxation_step = k;
                    for (double s : sol.slacks) rec.max_slack = std::max(rec.max_slack, s);
                }
                rec.max_kkt_residual = std::max(rec.max_kkt_residual, sol.kkt_residual);
                u_safe = sol.u;
            }
            const bool active = (u_safe - u_rl).norm() > 1e-9;
            if (active) ++rec.filter_active_steps;

            t0 = now();
            StateVector x_next = x;
            double step_min_h = std::numeric_limits<double>::infinity();
            for (long s = 0; s < sps; ++s) {
                CoupledState next = coupled_step(model, opt.observer, x_next, obs, u_safe, plant.disturbance);
                x_next = std::move(next.x);
                obs = std::move(next.obs);
                step_min_h = std::min(step_min_h, note_h(x_next, obs.t));
            }
            timing.simulation = now() - t0;

            const double t_next = static_cast<double>(k + 1) * T;
            const double r = clip_reward(plant.raw_reward(x_next, u_safe, t_next));
            rec.total_reward += r;
            if (opt.record_transitions) {
                rec.transitions.push_back(
                    {k, t, x, u_rl, u_safe, x_next, r, active, slack_used, step_min_h});
            }
            if (opt.measure_time) rec.timing.push_back(timing);
            x = std::move(x_next);
            last_reward = r;
            rec.steps = k + 1;
        }
        policy.finish(x, static_cast<double>(rec.steps) * T, last_reward);
    } catch (const Error& e) {
        rec.aborted = true;
        rec.abort_category = e.category();
        rec.abort_message = e.what();
    }
    rec.final_state = x;
    return rec;
}

inline nlohmann::json to_json_array(const Eigen::VectorXd& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
}

/// One transition per line:
/// {episode, step, t, x, u_rl, u_safe, x_next, reward, filter_active, slack_used, min_h}.
inline void write_transitions_ndjson(std::ostream& os, const EpisodeRecord& rec) {
    for (const auto& tr : rec.transitions) {
        nlohmann::json j = {{"episode", rec.index},
                            {"step", tr.step},
                            {"t", tr.t},
                            {"x", to_json_array(tr.x)},
                            {"u_rl", to_json_array(tr.u_rl)},
                            {"u_safe", to_json_array(tr.u_safe)},
                            {"x_next", to_json_array(tr.x_next)},
                            {"reward", tr.reward},
                            {"filter_active", tr.filter_active},
                            {"slack_used", tr.slack_used},
                            {"min_h", tr.min_h}};
        os << j.dump() << '\n';
    }
}

}  // namespace dobcbf
