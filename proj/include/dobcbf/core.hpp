#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>

namespace dobcbf {

using StateVector = Eigen::VectorXd;
using ControlVector = Eigen::VectorXd;
using DisturbanceVector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Base for every error raised by the library. `category()` is stable and
/// used by the CLI to pick an exit code.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& what)
        : std::runtime_error(what), category_(std::move(category)) {}

    const std::string& category() const noexcept { return category_; }

private:
    std::string category_;
};

struct ContractError : Error {
    explicit ContractError(const std::string& what) : Error("contract", what) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error("config", what) {}
};

/// Raised when an RK4 stage produces a non-finite state.
struct IntegrationBlowup : Error {
    IntegrationBlowup(int stage, const std::string& what)
        : Error("integration", what), stage(stage) {}
    int stage;
};

struct ObserverDivergence : Error {
    explicit ObserverDivergence(const std::string& what) : Error("observer", what) {}
};

struct SchedulingError : Error {
    explicit SchedulingError(const std::string& what) : Error("scheduling", what) {}
};

struct BoundComputationError : Error {
    explicit BoundComputationError(const std::string& what) : Error("bound", what) {}
};

struct SolverFailure : Error {
    explicit SolverFailure(const std::string& what) : Error("solver", what) {}
};

inline bool all_finite(const Eigen::Ref<const Eigen::MatrixXd>& v) {
    return v.allFinite();
}

inline void require_dim(const Eigen::Ref<const Eigen::VectorXd>& v, Eigen::Index expected,
                        const char* what) {
    if (v.size() != expected) {
        throw ContractError(std::string(what) + ": expected dimension " + std::to_string(expected) +
                            ", got " + std::to_string(v.size()));
    }
}

/// Axis-aligned box {v : lower <= v <= upper}.
class BoxSet {
public:
    BoxSet() = default;

    BoxSet(Eigen::VectorXd lower, Eigen::VectorXd upper)
        : lower_(std::move(lower)), upper_(std::move(upper)) {
        if (lower_.size() != upper_.size()) {
            throw ContractError("BoxSet: lower/upper dimension mismatch");
        }
        if (!lower_.allFinite() || !upper_.allFinite()) {
            throw ContractError("BoxSet: bounds must be finite");
        }
        for (Eigen::Index i = 0; i < lower_.size(); ++i) {
            if (lower_[i] > upper_[i]) {
                throw ContractError("BoxSet: lower[" + std::to_string(i) + "] > upper[" +
                                    std::to_string(i) + "]");
            }
        }
    }

    static BoxSet symmetric(const Eigen::VectorXd& half_width) {
        return BoxSet(-half_width, half_width);
    }

    Eigen::Index dim() const { return lower_.size(); }
    const Eigen::VectorXd& lower() const { return lower_; }
    const Eigen::VectorXd& upper() const { return upper_; }
    Eigen::VectorXd center() const { return 0.5 * (lower_ + upper_); }

    bool contains(const Eigen::VectorXd& v, double tol = 0.0) const {
        if (v.size() != dim()) return false;
        for (Eigen::Index i = 0; i < dim(); ++i) {
            if (v[i] < lower_[i] - tol || v[i] > upper_[i] + tol) return false;
        }
        return true;
    }

    Eigen::VectorXd clamp(const Eigen::VectorXd& v) const {
        return v.cwiseMax(lower_).cwiseMin(upper_);
    }

    /// Box with the same center and `factor` times the half-widths.
    BoxSet scaled(double factor) const {
        const Eigen::VectorXd c = center();
        const Eigen::VectorXd hw = 0.5 * factor * (upper_ - lower_);
        return BoxSet(c - hw, c + hw);
    }

    /// The vertex maximizing the linear functional coeff·v (ties go to upper).
    Eigen::VectorXd argmax_linear(const Eigen::VectorXd& coeff) const {
        Eigen::VectorXd v(dim());
        for (Eigen::Index i = 0; i < dim(); ++i) v[i] = coeff[i] >= 0.0 ? upper_[i] : lower_[i];
        return v;
    }

    /// Largest Euclidean norm over the box; attained at a vertex.
    double max_norm() const {
        double s = 0.0;
        for (Eigen::Index i = 0; i < dim(); ++i) {
            const double m = std::max(std::abs(lower_[i]), std::abs(upper_[i]));
            s += m * m;
        }
        return std::sqrt(s);
    }

    std::size_t vertex_count() const { return std::size_t{1} << dim(); }

    Eigen::VectorXd vertex(std::size_t mask) const {
        Eigen::VectorXd v(dim());
        for (Eigen::Index i = 0; i < dim(); ++i) {
            v[i] = (mask >> i) & 1U ? upper_[i] : lower_[i];
        }
        return v;
    }

private:
    Eigen::VectorXd lower_;
    Eigen::VectorXd upper_;
};

/// Seeded uniform source. Draws are derived bitwise from mt19937_64 so
/// sequences are identical across standard-library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    std::uint64_t next() { return engine_(); }

    Eigen::VectorXd uniform_in(const BoxSet& box) {
        Eigen::VectorXd v(box.dim());
        for (Eigen::Index i = 0; i < box.dim(); ++i) v[i] = uniform(box.lower()[i], box.upper()[i]);
        return v;
    }

private:
    std::mt19937_64 engine_;
};

/// splitmix64 finalizer; derives independent per-episode seeds from a base seed.
constexpr std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace dobcbf
