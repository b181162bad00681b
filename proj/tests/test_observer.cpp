#include <catch2/catch_amalgamated.hpp>

#include "dobcbf/observer.hpp"

#include <cmath>

using namespace dobcbf;
using Catch::Approx;

namespace {

/// x' = u + d on [-2, 2]^n, u in [-1, 1]^n.
SystemModel integrator(int n, double half_width = 2.0) {
    SystemModel m;
    m.n = n;
    m.m = n;
    m.drift = [n](const StateVector&) { return Eigen::VectorXd::Zero(n); };
    m.input_matrix = [n](const StateVector&) { return Eigen::MatrixXd::Identity(n, n); };
    m.state_box = BoxSet::symmetric(Eigen::VectorXd::Constant(n, half_width));
    m.input_box = BoxSet::symmetric(Eigen::VectorXd::Constant(n, 1.0));
    return m;
}

/// x' = 0 with no input authority; only the disturbance moves x.
SystemModel inert(int n, double half_width) {
    SystemModel m = integrator(n, half_width);
    m.input_matrix = [n](const StateVector&) { return Eigen::MatrixXd::Zero(n, n); };
    return m;
}

DisturbanceFn constant_disturbance(const Eigen::VectorXd& c) {
    DisturbanceFn d;
    d.eval = [c](const StateVector&) { return DisturbanceVector(c); };
    d.declared_lipschitz = 0.0;
    d.declared_origin_bound = c.norm();
    return d;
}

/// Observer run on a fixed input; returns |d_hat - d| sampled right after each pc_update.
std::vector<double> sample_errors(const SystemModel& model, const ObserverConfig& cfg,
                                  const DisturbanceFn& d, const StateVector& x0,
                                  const ControlVector& u, long samples) {
    std::vector<double> errs;
    StateVector x = x0;
    ObserverState obs = initialize_observer(x);
    const long sps = cfg.steps_per_sample();
    for (long k = 0; k < samples * sps; ++k) {
        if (k % sps == 0) {
            obs = pc_update(obs, cfg, x);
            errs.push_back((obs.d_hat - d(x)).norm());
        }
        auto next = coupled_step(model, cfg, x, obs, u, d);
        x = next.x;
        obs = next.obs;
    }
    return errs;
}

}  // namespace

TEST_CASE("ObserverConfig validates its parameters", "[observer]") {
    CHECK_NOTHROW(ObserverConfig{}.validate());
    CHECK_THROWS_AS((ObserverConfig{0.0, 1e-2, 1e-3}.validate()), ContractError);
    CHECK_THROWS_AS((ObserverConfig{1.0, -1e-2, 1e-3}.validate()), ContractError);
    CHECK_THROWS_AS((ObserverConfig{1.0, 1e-2, 0.0}.validate()), ContractError);
    CHECK_THROWS_AS((ObserverConfig{1.0, 1.5e-3, 1e-3}.validate()), ContractError);
    CHECK(ObserverConfig{1.0, 1e-2, 1e-3}.steps_per_sample() == 10);
}

TEST_CASE("pc_update with zero prediction error gives zero estimate", "[observer]") {
    ObserverConfig cfg;
    const StateVector x = Eigen::Vector3d(0.3, -1.0, 2.0);
    const ObserverState obs = pc_update(initialize_observer(x), cfg, x);
    CHECK(obs.d_hat.isZero(0.0));
    CHECK(obs.sample_index == 1);
}

TEST_CASE("pc_update gain with e^{aT} - 1 = 1", "[observer]") {
    const double T = std::log(2.0);
    ObserverConfig cfg{1.0, T, T / 10.0};
    CHECK(cfg.pc_gain() == Approx(1.0).epsilon(1e-15));
    const StateVector x = StateVector::Constant(1, 1.0);
    ObserverState obs = initialize_observer(x);
    obs.x_hat[0] = 1.5;
    obs = pc_update(obs, cfg, x);
    CHECK(obs.d_hat[0] == Approx(-0.5).epsilon(1e-14));
}

TEST_CASE("pc_update off the sampling grid is a scheduling error", "[observer]") {
    ObserverConfig cfg;
    SystemModel m = integrator(1);
    const StateVector x = StateVector::Zero(1);
    ObserverState obs = pc_update(initialize_observer(x), cfg, x);
    obs = predictor_step(obs, m, cfg, x, ControlVector::Zero(1));
    CHECK_THROWS_AS(pc_update(obs, cfg, x), SchedulingError);

    // A skipped sample is also rejected.
    ObserverState late = initialize_observer(x);
    for (int k = 0; k < 10; ++k) late = predictor_step(late, m, cfg, x, ControlVector::Zero(1));
    CHECK_THROWS_AS(pc_update(late, cfg, x), SchedulingError);
}

TEST_CASE("predictor tracks the state exactly without disturbance", "[observer]") {
    ObserverConfig cfg{5.0, 1e-2, 1e-3};
    SystemModel m = integrator(2);
    StateVector x = Eigen::Vector2d(0.2, -0.4);
    ObserverState obs = initialize_observer(x);
    const auto zero = DisturbanceFn::zero(2);
    const ControlVector u = Eigen::Vector2d(0.7, -0.3);
    for (int k = 0; k < 500; ++k) {
        if (k % 10 == 0) obs = pc_update(obs, cfg, x);
        auto next = coupled_step(m, cfg, x, obs, u, zero);
        x = next.x;
        obs = next.obs;
        REQUIRE((obs.x_hat - x).norm() <= 1e-14);
    }
}

TEST_CASE("prediction error with constant disturbance matches the closed form", "[observer]") {
    // xt' = -a xt - c with xt(0) = 0  =>  xt(t) = -(c/a)(1 - e^{-at}).
    const double a = 100.0, c = 0.8, dt = 1e-3;
    ObserverConfig cfg{a, 1.0, dt};
    SystemModel m = inert(1, 10.0);
    const auto d = constant_disturbance(StateVector::Constant(1, c));
    StateVector x = StateVector::Zero(1);
    ObserverState obs = initialize_observer(x);
    double worst = 0.0;
    for (int k = 1; k <= 200; ++k) {
        auto next = coupled_step(m, cfg, x, obs, ControlVector::Zero(1), d);
        x = next.x;
        obs = next.obs;
        const double t = k * dt;
        const double expected = -(c / a) * -std::expm1(-a * t);
        worst = std::max(worst, std::abs((obs.x_hat[0] - x[0]) - expected));
    }
    CHECK(worst <= 1e-6);
}

TEST_CASE("large predictor gain contracts the prediction error", "[observer]") {
    // |xt(t)| <= |xt(0)| e^{-at} + |d_hat - d| / a.
    const double a = 1e3, c = 0.5, dt = 1e-5;
    ObserverConfig cfg{a, 1.0, dt};
    SystemModel m = inert(1, 10.0);
    const auto d = constant_disturbance(StateVector::Constant(1, c));
    StateVector x = StateVector::Zero(1);
    ObserverState obs = initialize_observer(x);
    obs.x_hat[0] = 1.0;
    const long steps = std::lround(10.0 / a / dt);
    for (long k = 0; k < steps; ++k) {
        auto next = coupled_step(m, cfg, x, obs, ControlVector::Zero(1), d);
        x = next.x;
        obs = next.obs;
    }
    CHECK(std::abs(obs.x_hat[0] - x[0]) <= std::exp(-10.0) + c / a);
}

TEST_CASE("constant disturbance estimate is attenuated by e^{-aT}", "[observer]") {
    // From xt(0) = 0 every sample yields d_hat = c e^{-aT}.
    for (double a : {1.0, 10.0, 100.0}) {
        ObserverConfig cfg{a, 1e-2, 1e-4};
        SystemModel m = inert(2, 10.0);
        const Eigen::Vector2d c(0.6, -0.2);
        const auto d = constant_disturbance(c);
        StateVector x = Eigen::Vector2d(0.1, 0.1);
        ObserverState obs = initialize_observer(x);
        for (long k = 0; k < 400; ++k) {
            if (k % 100 == 0) {
                obs = pc_update(obs, cfg, x);
                if (k >= 100) {
                    const Eigen::Vector2d expected = c * std::exp(-a * cfg.T);
                    CHECK((obs.d_hat - expected).norm() <= 1e-9);
                }
            }
            auto next = coupled_step(m, cfg, x, obs, ControlVector::Zero(2), d);
            x = next.x;
            obs = next.obs;
        }
    }
}

TEST_CASE("constant disturbance error after two samples is within gamma", "[observer]") {
    ObserverConfig cfg{1.0, 1e-2, 1e-3};
    SystemModel m = inert(1, 10.0);
    const double c = 0.7;
    m.lipschitz_const = 0.0;
    m.origin_bound = c;
    const ErrorBound b = compute_error_bound(m, cfg);
    const auto d = constant_disturbance(StateVector::Constant(1, c));
    const auto errs = sample_errors(m, cfg, d, StateVector::Zero(1), ControlVector::Zero(1), 5);
    for (std::size_t i = 2; i < errs.size(); ++i) CHECK(errs[i] <= b.gamma * (1.0 + 1e-9));
}

TEST_CASE("error bound with no uncertainty is zero", "[observer][bound]") {
    SystemModel m = integrator(2);
    const ErrorBound b = compute_error_bound(m, ObserverConfig{});
    CHECK(b.theta == 0.0);
    CHECK(b.eta == 0.0);
    CHECK(b.gamma == 0.0);
}

TEST_CASE("error bound on a scalar example", "[observer][bound]") {
    SystemModel m = integrator(1, 1.0);
    m.drift = [](const StateVector&) { return Eigen::VectorXd::Zero(1); };
    m.input_matrix = [](const StateVector&) { return Eigen::MatrixXd::Zero(1, 1); };
    m.lipschitz_const = 1.0;
    m.origin_bound = 1.0;
    ObserverConfig cfg{1.0, 0.01, 0.001};
    const ErrorBound b = compute_error_bound(m, cfg);
    CHECK(b.theta == Approx(2.0).epsilon(1e-15));
    CHECK(b.eta == Approx(2.0).epsilon(1e-15));
    const double oracle = 2.0 * 2.0 * 0.01 + (1.0 - std::exp(-0.01)) * 2.0;
    CHECK(b.gamma == Approx(oracle).epsilon(1e-12));
    CHECK(std::abs(b.gamma - 0.0598) <= 2e-4);
}

TEST_CASE("error bound uses the maximal nominal rate over the boxes", "[observer][bound]") {
    // f = A x, g = B on [-1, 1]^2 x [-1, 1]; |A x + B u| peaks at a vertex.
    Eigen::Matrix2d A;
    A << 0.0, 1.0, -2.0, -0.5;
    Eigen::Vector2d B(0.0, 1.0);
    SystemModel m;
    m.n = 2;
    m.m = 1;
    m.drift = [A](const StateVector& x) -> Eigen::VectorXd { return A * x; };
    m.input_matrix = [B](const StateVector&) -> Eigen::MatrixXd { return B; };
    m.state_box = BoxSet::symmetric(Eigen::Vector2d::Ones());
    m.input_box = BoxSet::symmetric(Eigen::VectorXd::Ones(1));
    m.lipschitz_const = 0.5;
    m.origin_bound = 0.1;
    double oracle = 0.0;
    for (double x1 : {-1.0, 1.0})
        for (double x2 : {-1.0, 1.0})
            for (double u : {-1.0, 1.0}) oracle = std::max(oracle, (A * Eigen::Vector2d(x1, x2) + B * u).norm());
    CHECK(max_nominal_rate(m) == Approx(oracle).epsilon(1e-12));
    const ErrorBound b = compute_error_bound(m, ObserverConfig{});
    CHECK(b.theta == Approx(0.5 * std::sqrt(2.0) + 0.1).epsilon(1e-14));
    CHECK(b.eta == Approx(0.5 * (oracle + b.theta)).epsilon(1e-12));
}

TEST_CASE("gamma decreases strictly with T and vanishes in the limit", "[observer][bound][property]") {
    double prev = std::numeric_limits<double>::infinity();
    for (double T : {1e-1, 1e-2, 1e-3, 1e-4, 1e-5}) {
        const double g = gamma_of(3, 2.5, 1.2, 4.0, T);
        CHECK(g < prev);
        CHECK(g > 0.0);
        prev = g;
    }
    CHECK(prev < 1e-3);

    Rng rng(11);
    for (int i = 0; i < 200; ++i) {
        const double eta = rng.uniform(0.01, 10.0), theta = rng.uniform(0.01, 10.0);
        const double a = rng.uniform(0.1, 100.0), T = rng.uniform(1e-4, 1e-1);
        CHECK(gamma_of(2, eta, theta, a, T / 2.0) < gamma_of(2, eta, theta, a, T));
    }
}

TEST_CASE("delta switches from theta to gamma at T", "[observer][bound]") {
    ErrorBound b;
    b.theta = 3.0;
    b.gamma = 0.2;
    b.T = 0.01;
    CHECK(b.delta_of_t(0.0) == 3.0);
    CHECK(b.delta_of_t(0.0099) == 3.0);
    CHECK(b.delta_of_t(0.01) == 0.2);
    CHECK(b.delta_of_t(5.0) == 0.2);
    CHECK(b.delta_for_sample(0) == 3.0);
    CHECK(b.delta_for_sample(1) == 0.2);
    CHECK(b.max_delta() == 3.0);
}

TEST_CASE("compute_error_bound reports unbounded dynamics", "[observer][bound]") {
    SystemModel m = integrator(1);
    m.lipschitz_const = 1.0;
    m.drift = [](const StateVector&) { return Eigen::VectorXd::Constant(1, std::numeric_limits<double>::infinity()); };
    CHECK_THROWS_AS(compute_error_bound(m, ObserverConfig{}), BoundComputationError);
}

TEST_CASE("d_hat is piecewise constant between samples", "[observer][property]") {
    ObserverConfig cfg{2.0, 1e-2, 1e-3};
    SystemModel m = integrator(2);
    const auto d = sample_lipschitz_disturbance(3, 1.0, 0.5, m.state_box);
    StateVector x = Eigen::Vector2d(0.1, -0.2);
    ObserverState obs = initialize_observer(x);
    DisturbanceVector held;
    for (int k = 0; k < 300; ++k) {
        if (k % 10 == 0) {
            obs = pc_update(obs, cfg, x);
            held = obs.d_hat;
        }
        REQUIRE(obs.d_hat.size() == held.size());
        for (Eigen::Index i = 0; i < held.size(); ++i) REQUIRE(obs.d_hat[i] == held[i]);
        auto next = coupled_step(m, cfg, x, obs, Eigen::Vector2d(0.3, 0.1), d);
        x = next.x;
        obs = next.obs;
    }
}

TEST_CASE("predictor stays consistent when the estimate is exact", "[observer][property]") {
    ObserverConfig cfg{10.0, 1e-2, 1e-3};
    SystemModel m = integrator(2, 100.0);
    const Eigen::Vector2d c(0.25, -0.4);
    const auto d = constant_disturbance(c);
    StateVector x = Eigen::Vector2d(0.0, 0.0);
    ObserverState obs = initialize_observer(x);
    obs.d_hat = c;
    for (int k = 0; k < 20000; ++k) {
        auto next = coupled_step(m, cfg, x, obs, Eigen::Vector2d(0.1, 0.05), d);
        x = next.x;
        obs = next.obs;
    }
    CHECK((obs.x_hat - x).norm() <= 1e-10);
}

TEST_CASE("certify_bound with zero disturbance sees no error after the first sample", "[observer][certify]") {
    SystemModel m = integrator(2);
    ObserverConfig cfg{1.0, 1e-2, 1e-3};
    const ErrorBound b = compute_error_bound(m, cfg);
    const auto rep = certify_bound(m, cfg, b, DisturbanceFn::zero(2), 1.0, 3, 5);
    CHECK(rep.max_error_after_T == 0.0);
    CHECK(rep.violations == 0);
}

TEST_CASE("certify_bound finds no violations over random Lipschitz disturbances", "[observer][certify][property]") {
    ObserverConfig cfg{100.0, 1e-3, 1e-4};
    long checked = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        SystemModel m = integrator(2, 3.0);
        const auto d = sample_lipschitz_disturbance(seed, 1.5, 0.8, m.state_box);
        m.lipschitz_const = d.declared_lipschitz;
        m.origin_bound = d.declared_origin_bound;
        const ErrorBound b = compute_error_bound(m, cfg);
        const auto rep = certify_bound(m, cfg, b, d, 0.5, 2, seed);
        CHECK(rep.violation_fraction() == 0.0);
        CHECK(rep.max_error_after_T <= b.gamma);
        checked += rep.checked_steps;
    }
    CHECK(checked > 100000);
}

TEST_CASE("observed estimation error shrinks with the sampling time", "[observer][certify]") {
    SystemModel m = integrator(2, 3.0);
    const auto d = sample_lipschitz_disturbance(21, 2.0, 0.5, m.state_box);
    m.lipschitz_const = d.declared_lipschitz;
    m.origin_bound = d.declared_origin_bound;
    ObserverConfig coarse{100.0, 1e-2, 1e-4};
    ObserverConfig fine{100.0, 1e-3, 1e-4};
    const auto rc = certify_bound(m, coarse, compute_error_bound(m, coarse), d, 0.5, 4, 9);
    const auto rf = certify_bound(m, fine, compute_error_bound(m, fine), d, 0.5, 4, 9);
    CHECK(rf.max_error_after_T < rc.max_error_after_T);
}

TEST_CASE("empirical bound scales the observed error", "[observer][certify]") {
    ErrorBound th;
    th.theta = 4.0;
    th.gamma = 1.0;
    CertificationReport r1, r2;
    r1.max_error_after_T = 0.01;
    r2.max_error_after_T = 0.03;
    const ErrorBound e = empirical_bound(th, {r1, r2}, 2.0);
    CHECK(e.gamma == Approx(0.06));
    CHECK(e.theta == 4.0);
    CHECK(e.empirical);
}

TEST_CASE("predictor_step rejects wrong dimensions", "[observer]") {
    SystemModel m = integrator(2);
    ObserverConfig cfg;
    const ObserverState obs = initialize_observer(Eigen::Vector2d::Zero());
    CHECK_THROWS_AS(predictor_step(obs, m, cfg, Eigen::Vector3d::Zero(), ControlVector::Zero(2)), ContractError);
}
