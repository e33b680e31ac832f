#pragma once

#include "rendermatch/renderer.hpp"

#include <vector>

namespace rmatch {

struct FeatureBank;

/// Masked cosine alignment score. loss is the mean over rendered-mask
/// pixels of (1 - cosine similarity), always in [0, 2].
struct AlignmentScore {
    double loss = 0.0;
    int valid_pixels = 0;
};

/// Loss assigned to candidates whose rendering has an empty foreground.
inline constexpr double kWorstScore = 2.0;

struct PoseGradient {
    double d_elev = 0.0;
    double d_azim = 0.0;
    double d_theta = 0.0;
};

/// Masked mean of (1 - cosine) between the query data and the rendered
/// map, evaluated over the rendered map's mask only (the query never
/// carries a mask). Zero-norm pixel vectors count as cosine 0. Throws
/// "no foreground" when the rendered mask is empty.
AlignmentScore align_loss(const std::vector<double>& query_data, const FeatureMap& rendered);

/// Loss of the bank rendered at `pose` against the query, with the empty
/// foreground case mapped to kWorstScore.
double score_pose(const FeatureBank& bank, const std::vector<double>& query_data,
                  const Pose& pose, const Camera& cam, const SplatConfig& cfg,
                  FeatureMap& scratch);

/// Central finite differences of the alignment loss in the three pose
/// angles (6 renders). A probe with an empty rendered mask degrades that
/// component to a one-sided difference; when both probes are empty the
/// component is 0.
PoseGradient pose_gradient_fd(const FeatureBank& bank, const std::vector<double>& query_data,
                              const Pose& pose, const Camera& cam, const SplatConfig& cfg,
                              double h);

}  // namespace rmatch
