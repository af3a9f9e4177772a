#pragma once

// Test-only Gauss-code oracle: brute-force all-pairs intersection with
// extended-precision arithmetic and sign-based orientation predicates.
// Independent of ropelab::find_crossings; shares only the labeling rules.

#include <algorithm>
#include <vector>

#include "ropelab/core.hpp"
#include "ropelab/quatchain.hpp"
#include "ropelab/topology.hpp"

namespace oracle {

inline long double orient2d(long double ax, long double ay, long double bx, long double by,
                            long double cx, long double cy) {
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
}

inline ropelab::GaussCode oracle_gauss_code(const ropelab::RopeState& state, double eps = 1e-6) {
    using ropelab::AmbiguousCrossing;
    const auto& p = state.positions;
    struct Hit {
        long double arc_a, arc_b;
        bool over_first;
    };
    std::vector<Hit> hits;
    if (p.size() < 2) return {};
    std::size_t n_seg = p.size() - 1;
    for (std::size_t i = 0; i < n_seg; ++i) {
        for (std::size_t j = i + 2; j < n_seg; ++j) {
            long double ax = p[i].x, ay = p[i].y, bx = p[i + 1].x, by = p[i + 1].y;
            long double cx = p[j].x, cy = p[j].y, dx = p[j + 1].x, dy = p[j + 1].y;
            long double o1 = orient2d(ax, ay, bx, by, cx, cy);
            long double o2 = orient2d(ax, ay, bx, by, dx, dy);
            long double o3 = orient2d(cx, cy, dx, dy, ax, ay);
            long double o4 = orient2d(cx, cy, dx, dy, bx, by);
            if (!((o1 > 0) != (o2 > 0)) || !((o3 > 0) != (o4 > 0))) continue;
            if (o1 == 0 || o2 == 0 || o3 == 0 || o4 == 0) continue;
            long double t = o3 / (o3 - o4);  // parameter on segment i
            long double s = o1 / (o1 - o2);  // parameter on segment j
            if (t < eps || t > 1.0L - eps || s < eps || s > 1.0L - eps) continue;  // grazing
            long double zi = (long double)p[i].z + t * ((long double)p[i + 1].z - p[i].z);
            long double zj = (long double)p[j].z + s * ((long double)p[j + 1].z - p[j].z);
            if (zi <= zj + eps && zi >= zj - eps)
                throw AmbiguousCrossing("oracle: strands at equal height");
            hits.push_back({(long double)i + t, (long double)j + s, zi > zj});
        }
    }
    std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) { return a.arc_a < b.arc_a; });
    struct Event {
        long double arc;
        int signed_label;
    };
    std::vector<Event> events;
    for (std::size_t k = 0; k < hits.size(); ++k) {
        int label = (int)k + 1;
        events.push_back({hits[k].arc_a, hits[k].over_first ? label : -label});
        events.push_back({hits[k].arc_b, hits[k].over_first ? -label : label});
    }
    std::sort(events.begin(), events.end(),
              [](const Event& a, const Event& b) { return a.arc < b.arc; });
    ropelab::GaussCode code;
    for (const auto& e : events) code.push_back(e.signed_label);
    return code;
}

}  // namespace oracle
