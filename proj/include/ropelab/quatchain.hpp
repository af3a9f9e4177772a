#pragma once

#include <cstddef>
#include <vector>

#include "ropelab/core.hpp"

namespace ropelab {

// Cartesian rope state: positions of L segments, millimeters.
struct RopeState {
    std::vector<Vec3> positions;

    std::size_t segment_count() const { return positions.size(); }
};

struct UnitQuaternion {
    double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

    bool operator==(const UnitQuaternion& o) const = default;

    static UnitQuaternion identity() { return {1.0, 0.0, 0.0, 0.0}; }

    double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

    // Canonical form: w >= 0; if w == 0 the first nonzero of (x, y, z) is
    // positive. Resolves the double cover so regression targets are unique.
    UnitQuaternion canonical() const {
        double sign = 1.0;
        if (w < 0.0) {
            sign = -1.0;
        } else if (w == 0.0) {
            if (x != 0.0)
                sign = x > 0.0 ? 1.0 : -1.0;
            else if (y != 0.0)
                sign = y > 0.0 ? 1.0 : -1.0;
            else if (z != 0.0)
                sign = z > 0.0 ? 1.0 : -1.0;
        }
        return {sign * w, sign * x, sign * y, sign * z};
    }

    UnitQuaternion normalized() const {
        double n = norm();
        return {w / n, x / n, y / n, z / n};
    }

    Vec3 rotate(const Vec3& v) const {
        // v' = v + 2 u x (u x v + w v), u = (x, y, z)
        Vec3 u{x, y, z};
        Vec3 t = cross(u, v) * 2.0;
        return v + t * w + cross(u, t);
    }
};

// Hybrid state: base position plus L-1 relative link rotations.
struct QuatChainState {
    Vec3 base;
    std::vector<UnitQuaternion> rotations;  // size L - 1
    double link_length = 1.0;

    std::size_t segment_count() const { return rotations.size() + 1; }
    std::size_t flat_dim() const { return 3 + 4 * rotations.size(); }
};

inline constexpr double kUnitTol = 1e-9;

// Minimal (zero-twist) rotation taking unit vector u onto unit vector v.
inline UnitQuaternion shortest_arc(const Vec3& u, const Vec3& v) {
    if (std::abs(norm(u) - 1.0) > kUnitTol || std::abs(norm(v) - 1.0) > kUnitTol)
        throw InvalidDirection("shortest_arc: inputs must be unit vectors");
    double c = dot(u, v);
    if (c < -1.0 + kUnitTol) {
        // Antiparallel: 180 deg about an axis perpendicular to u, built from
        // the basis vector least aligned with u (ties to the lowest index).
        double a[3] = {std::abs(u.x), std::abs(u.y), std::abs(u.z)};
        int k = 0;
        if (a[1] < a[k]) k = 1;
        if (a[2] < a[k]) k = 2;
        Vec3 e{k == 0 ? 1.0 : 0.0, k == 1 ? 1.0 : 0.0, k == 2 ? 1.0 : 0.0};
        Vec3 axis = normalized(cross(u, e));
        return UnitQuaternion{0.0, axis.x, axis.y, axis.z}.canonical();
    }
    Vec3 a = cross(u, v);
    UnitQuaternion q{1.0 + c, a.x, a.y, a.z};
    return q.normalized().canonical();
}

inline const Vec3 kChainReferenceAxis{1.0, 0.0, 0.0};

// Positions -> base + relative rotations. The first rotation is taken
// relative to the world +X axis.
inline QuatChainState encode_chain(const RopeState& state, double link_length) {
    const auto& p = state.positions;
    if (p.size() < 2) throw DegenerateLink("encode_chain: need at least 2 segments");
    QuatChainState out;
    out.base = p[0];
    out.link_length = link_length;
    out.rotations.reserve(p.size() - 1);
    Vec3 prev_dir = kChainReferenceAxis;
    for (std::size_t i = 1; i < p.size(); ++i) {
        Vec3 d = p[i] - p[i - 1];
        double n = norm(d);
        if (n <= 1e-9) throw DegenerateLink("encode_chain: coincident consecutive points");
        Vec3 dir = d / n;
        out.rotations.push_back(shortest_arc(prev_dir, dir));
        prev_dir = dir;
    }
    return out;
}

// Forward kinematics; every output link has length exactly link_length.
inline RopeState decode_chain(const QuatChainState& qcs) {
    RopeState out;
    out.positions.reserve(qcs.segment_count());
    out.positions.push_back(qcs.base);
    Vec3 dir = kChainReferenceAxis;
    for (const auto& q : qcs.rotations) {
        dir = normalized(q.rotate(dir));
        out.positions.push_back(out.positions.back() + dir * qcs.link_length);
    }
    return out;
}

// Layout: [p0 | q1 .. q{L-1}], quaternions as (w, x, y, z).
inline std::vector<double> flatten(const QuatChainState& qcs) {
    std::vector<double> v;
    v.reserve(qcs.flat_dim());
    v.push_back(qcs.base.x);
    v.push_back(qcs.base.y);
    v.push_back(qcs.base.z);
    for (const auto& q : qcs.rotations) {
        v.push_back(q.w);
        v.push_back(q.x);
        v.push_back(q.y);
        v.push_back(q.z);
    }
    return v;
}

struct UnflattenResult {
    QuatChainState state;
    bool degenerate = false;  // some 4-block had norm < 1e-6 and was replaced
};

inline UnflattenResult unflatten(const std::vector<double>& v, std::size_t segment_count,
                                 double link_length) {
    if (segment_count < 2 || v.size() != 3 + 4 * (segment_count - 1))
        throw DimensionMismatch("unflatten: vector length does not match segment count");
    UnflattenResult out;
    out.state.base = {v[0], v[1], v[2]};
    out.state.link_length = link_length;
    out.state.rotations.reserve(segment_count - 1);
    for (std::size_t i = 0; i + 1 < segment_count; ++i) {
        const double* b = v.data() + 3 + 4 * i;
        UnitQuaternion q{b[0], b[1], b[2], b[3]};
        if (q.norm() < 1e-6) {
            out.state.rotations.push_back(UnitQuaternion::identity());
            out.degenerate = true;
        } else {
            out.state.rotations.push_back(q.normalized().canonical());
        }
    }
    return out;
}

}  // namespace ropelab
