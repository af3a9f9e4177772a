#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "ropelab/core.hpp"
#include "ropelab/quatchain.hpp"

namespace ropelab {

// Position along the directed curve: segment index plus parameter in [0, 1].
struct ArcPosition {
    std::size_t segment = 0;
    double t = 0.0;

    double scalar() const { return static_cast<double>(segment) + t; }
    bool operator<(const ArcPosition& o) const { return scalar() < o.scalar(); }
};

struct Crossing {
    int label = 0;           // 1..C in order of first traversal encounter
    ArcPosition first;       // earlier arc position (s_a)
    ArcPosition second;      // later arc position (s_b)
    bool over_first = false; // true if the strand at `first` passes over
};

struct CrossingScan {
    std::vector<Crossing> crossings;
    std::size_t grazing = 0;  // near-endpoint intersections, excluded
};

// Signed integers: +label for an over-pass, -label for an under-pass, in
// traversal order from segment 0 to L-1.
using GaussCode = std::vector<int>;

namespace detail {
inline double cross2(double ax, double ay, double bx, double by) { return ax * by - ay * bx; }
}  // namespace detail

// Projects the polyline to the XY plane and finds proper intersections of
// non-adjacent segments. Over/under comes from the interpolated z; equal z
// within eps is an error, not a guess.
inline CrossingScan find_crossings(const RopeState& state, double eps = 1e-6) {
    const auto& p = state.positions;
    CrossingScan scan;
    if (p.size() < 2) return scan;
    const std::size_t n_seg = p.size() - 1;
    for (std::size_t i = 0; i < n_seg; ++i) {
        for (std::size_t j = i + 2; j < n_seg; ++j) {
            double dix = p[i + 1].x - p[i].x, diy = p[i + 1].y - p[i].y;
            double djx = p[j + 1].x - p[j].x, djy = p[j + 1].y - p[j].y;
            double denom = detail::cross2(dix, diy, djx, djy);
            if (denom == 0.0) continue;  // parallel in projection
            double rx = p[j].x - p[i].x, ry = p[j].y - p[i].y;
            double t = detail::cross2(rx, ry, djx, djy) / denom;
            double s = detail::cross2(rx, ry, dix, diy) / denom;
            if (t < -eps || t > 1.0 + eps || s < -eps || s > 1.0 + eps) continue;
            if (t < eps || t > 1.0 - eps || s < eps || s > 1.0 - eps) {
                ++scan.grazing;
                continue;
            }
            double zi = p[i].z + t * (p[i + 1].z - p[i].z);
            double zj = p[j].z + s * (p[j + 1].z - p[j].z);
            if (std::abs(zi - zj) <= eps)
                throw AmbiguousCrossing("find_crossings: strands at equal height");
            Crossing c;
            c.first = {i, t};
            c.second = {j, s};
            c.over_first = zi > zj;
            scan.crossings.push_back(c);
        }
    }
    std::sort(scan.crossings.begin(), scan.crossings.end(),
              [](const Crossing& a, const Crossing& b) { return a.first < b.first; });
    for (std::size_t k = 0; k < scan.crossings.size(); ++k)
        scan.crossings[k].label = static_cast<int>(k) + 1;
    return scan;
}

inline GaussCode gauss_code_from(const CrossingScan& scan) {
    struct Event {
        ArcPosition pos;
        int signed_label;
    };
    std::vector<Event> events;
    events.reserve(scan.crossings.size() * 2);
    for (const auto& c : scan.crossings) {
        events.push_back({c.first, c.over_first ? c.label : -c.label});
        events.push_back({c.second, c.over_first ? -c.label : c.label});
    }
    std::sort(events.begin(), events.end(),
              [](const Event& a, const Event& b) { return a.pos < b.pos; });
    GaussCode code;
    code.reserve(events.size());
    for (const auto& e : events) code.push_back(e.signed_label);
    return code;
}

inline GaussCode gauss_code(const RopeState& state, double eps = 1e-6) {
    return gauss_code_from(find_crossings(state, eps));
}

struct TopologyScore {
    std::vector<int> match;      // per step: 1 exact Gauss-code match, else 0
    std::vector<int> ambiguous;  // per step: 1 if either side was ambiguous
    double match_fraction = 0.0;
    double ambiguous_fraction = 0.0;
};

inline TopologyScore topology_accuracy(const std::vector<RopeState>& pred,
                                       const std::vector<RopeState>& truth,
                                       double eps = 1e-6) {
    if (pred.size() != truth.size())
        throw ProtocolError("topology_accuracy: sequence length mismatch");
    TopologyScore score;
    score.match.reserve(pred.size());
    score.ambiguous.reserve(pred.size());
    for (std::size_t t = 0; t < pred.size(); ++t) {
        try {
            score.match.push_back(gauss_code(pred[t], eps) == gauss_code(truth[t], eps) ? 1 : 0);
            score.ambiguous.push_back(0);
        } catch (const AmbiguousCrossing&) {
            score.match.push_back(0);
            score.ambiguous.push_back(1);
        }
    }
    if (!score.match.empty()) {
        double m = 0, a = 0;
        for (std::size_t t = 0; t < score.match.size(); ++t) {
            m += score.match[t];
            a += score.ambiguous[t];
        }
        score.match_fraction = m / score.match.size();
        score.ambiguous_fraction = a / score.match.size();
    }
    return score;
}

}  // namespace ropelab
