#include "rendermatch/alignment.hpp"

#include "rendermatch/featurizer.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>

namespace rmatch {

AlignmentScore align_loss(const std::vector<double>& query_data, const FeatureMap& rendered) {
    if (query_data.size() != rendered.data.size()) {
        throw std::invalid_argument("align_loss: map shapes differ");
    }
    const int d = rendered.depth;
    double total = 0.0;
    int fg = 0;
    for (int y = 0; y < rendered.height; ++y) {
        for (int x = 0; x < rendered.width; ++x) {
            if (!rendered.masked(y, x)) continue;
            ++fg;
            const double* q = &query_data[(static_cast<std::size_t>(y) * rendered.width + x) * d];
            const double* p = rendered.pixel(y, x);
            double qq = 0.0, pp = 0.0, qp = 0.0;
            for (int c = 0; c < d; ++c) {
                qq += q[c] * q[c];
                pp += p[c] * p[c];
                qp += q[c] * p[c];
            }
            if (qq == 0.0 || pp == 0.0) {
                total += 1.0;  // zero-norm pixel: cosine 0
                continue;
            }
            const double cosv = std::clamp(qp / (std::sqrt(qq) * std::sqrt(pp)), -1.0, 1.0);
            total += 1.0 - cosv;
        }
    }
    if (fg == 0) throw std::runtime_error("no foreground: rendered mask is empty");
    return AlignmentScore{total / fg, fg};
}

double score_pose(const FeatureBank& bank, const std::vector<double>& query_data,
                  const Pose& pose, const Camera& cam, const SplatConfig& cfg,
                  FeatureMap& scratch) {
    render_features_into(scratch, bank, pose, cam, cfg);
    for (const std::uint8_t m : scratch.mask) {
        if (m) return align_loss(query_data, scratch).loss;
    }
    return kWorstScore;
}

PoseGradient pose_gradient_fd(const FeatureBank& bank, const std::vector<double>& query_data,
                              const Pose& pose, const Camera& cam, const SplatConfig& cfg,
                              double h) {
    if (!(h > 0.0)) throw std::invalid_argument("pose_gradient_fd: h must be positive");

    FeatureMap scratch;
    auto probe = [&](const Pose& p) -> std::optional<double> {
        render_features_into(scratch, bank, p, cam, cfg);
        for (const std::uint8_t m : scratch.mask) {
            if (m) return align_loss(query_data, scratch).loss;
        }
        return std::nullopt;
    };

    std::optional<double> center;  // evaluated lazily for one-sided fallback
    auto center_loss = [&]() -> std::optional<double> {
        if (!center) center = probe(pose);
        return center;
    };

    double out[3] = {0.0, 0.0, 0.0};
    for (int axis = 0; axis < 3; ++axis) {
        Pose hi = pose, lo = pose;
        double* hi_angle = axis == 0 ? &hi.elev : axis == 1 ? &hi.azim : &hi.theta;
        double* lo_angle = axis == 0 ? &lo.elev : axis == 1 ? &lo.azim : &lo.theta;
        *hi_angle += h;
        *lo_angle -= h;

        const std::optional<double> l_hi = probe(hi);
        const std::optional<double> l_lo = probe(lo);
        if (l_hi && l_lo) {
            out[axis] = (*l_hi - *l_lo) / (2.0 * h);
        } else if (l_hi) {
            const std::optional<double> c = center_loss();
            out[axis] = c ? (*l_hi - *c) / h : 0.0;
        } else if (l_lo) {
            const std::optional<double> c = center_loss();
            out[axis] = c ? (*c - *l_lo) / h : 0.0;
        }
    }
    return PoseGradient{out[0], out[1], out[2]};
}

}  // namespace rmatch
