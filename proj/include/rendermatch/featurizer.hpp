#pragma once

#include "rendermatch/geometry.hpp"
#include "rendermatch/renderer.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace rmatch {

/// One multi-scale level: an FPS subset of the parent cloud with a
/// descriptor per point.
struct ScaleLevel {
    MatX3 points;  // N_s x 3, subset of the parent cloud
    MatXd feats;   // N_s x D_s
};

/// Per-shape feature bank: the sampled cloud, its scale levels, and the
/// fused full-resolution per-point features (unit-norm rows).
struct FeatureBank {
    PointCloud cloud;
    std::vector<ScaleLevel> scales;
    MatXd fused;  // C x D
    std::string shape_id;
    std::string category;
};

/// Fixed seeded linear map standing in for the fusion MLP: rows of the
/// input concat are projected to `out_dim`, standardized per row (mean 0,
/// variance 1 across feature components), then L2-normalized.
struct ProjectionHead {
    MatXd weight;  // out_dim x in_dim

    int in_dim() const { return static_cast<int>(weight.cols()); }
    int out_dim() const { return static_cast<int>(weight.rows()); }

    static ProjectionHead seeded(int out_dim, int in_dim, std::uint64_t seed);
    MatXd apply(const MatXd& concat) const;
};

/// KNN interpolation weights: per query point, k neighbor indices into a
/// scale level and the matching convex weights (each row sums to 1).
struct InterpWeights {
    Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> indices;  // C x k
    MatXd weights;                                                                // C x k
};

/// k nearest neighbors by squared Euclidean distance, sorted ascending,
/// ties broken by lowest index. Throws when k exceeds the point count.
void knn(const Vec3& query, const MatX3& points, int k, std::vector<int>& indices,
         std::vector<double>& sq_dists);

/// Temperature softmax over negated squared distances, computed with
/// max-subtraction: w_j = exp(-d_j / tau) / sum exp(-d / tau).
std::vector<double> interp_weights(const std::vector<double>& sq_dists, double tau);

InterpWeights compute_interp_weights(const PointCloud& cloud, const ScaleLevel& scale, int k,
                                     double tau);

/// Per-point weighted average of the k nearest scale-level features
/// (temperature softmax weights over squared distances).
MatXd interpolate_scale(const PointCloud& cloud, const ScaleLevel& scale, int k, double tau);

/// Deterministic geometric descriptor standing in for a learned encoder.
/// Channels: position (3), radial distance (1), local covariance
/// eigenvalues over a fixed-radius neighborhood in the parent cloud (3,
/// scaled by 1/radius^2, ascending), then seeded sinusoidal projections up
/// to `dim`. Requires dim >= 8.
MatXd synth_descriptor(const MatX3& scale_points, const PointCloud& parent, int dim,
                       std::uint64_t seed);

/// Neighborhood radius used by the covariance channels of synth_descriptor
/// (normalized units).
inline constexpr double kDescriptorRadius = 0.25;

/// Builds the full bank: FPS + synth_descriptor per scale, KNN softmax
/// interpolation back to full resolution, concat across scales, projection
/// head fusion. scale_spec pairs are (N_s, D_s) with N_s strictly
/// decreasing; the head input dim must equal the sum of D_s.
FeatureBank build_bank(const PointCloud& cloud, const std::vector<std::pair<int, int>>& scale_spec,
                       const ProjectionHead& head, int k, double tau, std::uint64_t seed);

/// A teacher view for distillation: a target feature map with the pose it
/// was produced at.
struct DistillTarget {
    FeatureMap map;
    Pose pose;
};

/// Mean alignment loss of the bank rendered at target.pose against
/// target.map, plus (optionally) its gradient with respect to the fused
/// feature matrix. The compositor is linear in the features, so the
/// gradient is exact.
double distill_loss_and_gradient(const FeatureBank& bank, const DistillTarget& target,
                                 const Camera& cam, const SplatConfig& cfg, MatXd* grad);

/// Gradient descent on the fused per-point features against the target
/// maps, re-normalizing rows to unit L2 after every step. The step size is
/// halved whenever a step would increase the mean loss, so the recorded
/// loss sequence is non-increasing. Returns the updated bank.
FeatureBank distill_bank(const FeatureBank& bank, const std::vector<DistillTarget>& targets,
                         int iters, double lr, const Camera& cam, const SplatConfig& cfg,
                         std::vector<double>* loss_history = nullptr);

/// Bank blob I/O: little-endian header (magic "FBNK", version u32, shape_id,
/// category, C, D, scale count), the cloud positions (C x 3 float32), each
/// scale (N_s, D_s, points, feats as float32), then the fused C x D float32
/// matrix.
void save_bank(const FeatureBank& bank, const std::string& path);
FeatureBank load_bank(const std::string& path);

}  // namespace rmatch
