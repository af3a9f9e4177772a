#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace ropelab {

// ---- error types -----------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define ROPELAB_ERROR(Name)                       \
    struct Name : Error {                         \
        using Error::Error;                       \
    }

ROPELAB_ERROR(InvalidDirection);
ROPELAB_ERROR(DegenerateLink);
ROPELAB_ERROR(DimensionMismatch);
ROPELAB_ERROR(InvalidGrasp);
ROPELAB_ERROR(IoError);
ROPELAB_ERROR(FormatError);
ROPELAB_ERROR(CorruptDataset);
ROPELAB_ERROR(WindowTooLong);
ROPELAB_ERROR(ShapeError);
ROPELAB_ERROR(DomainError);
ROPELAB_ERROR(EmptyDataset);
ROPELAB_ERROR(CorruptCheckpoint);
ROPELAB_ERROR(ProtocolError);
ROPELAB_ERROR(AmbiguousCrossing);
ROPELAB_ERROR(ConfigError);

#undef ROPELAB_ERROR

// ---- 3d vector -------------------------------------------------------------

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    Vec3& operator+=(const Vec3& o) {
        x += o.x;
        y += o.y;
        z += o.z;
        return *this;
    }
    Vec3& operator-=(const Vec3& o) {
        x -= o.x;
        y -= o.y;
        z -= o.z;
        return *this;
    }
    bool operator==(const Vec3& o) const = default;
};

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(const Vec3& a) {
    double n = norm(a);
    return {a.x / n, a.y / n, a.z / n};
}

// ---- deterministic rng -----------------------------------------------------

// SplitMix64. Chosen over <random> distributions because their output is
// implementation-defined; reproducibility here must hold across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    // Derives an independent stream from (seed, stream index). Used to fan a
    // single command seed out to trajectories, batches etc.
    static Rng stream(std::uint64_t seed, std::uint64_t stream_id) {
        Rng mix(seed ^ (0x9e3779b97f4a7c15ULL * (stream_id + 1)));
        mix.next_u64();
        return mix;
    }

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // uniform in [0, n)
    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

    // standard normal via Box-Muller (both values used alternately)
    double next_normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

private:
    std::uint64_t state_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

}  // namespace ropelab
