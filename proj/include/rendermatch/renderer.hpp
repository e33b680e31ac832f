#pragma once

#include "rendermatch/geometry.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace rmatch {

struct FeatureBank;

/// Point-splatting parameters. The radius lives in normalized screen units
/// where the image half-extent is 1, so 0.04 on a 37-pixel map covers about
/// 0.74 px around the projected point.
struct SplatConfig {
    double radius = 0.04;
    int points_per_pixel = 16;
    int height = 37;
    int width = 37;
    double epsilon = 1e-10;
};

/// D x H x W feature image plus the foreground mask. Data is stored
/// pixel-major internally; at(c, y, x) indexes the conceptual D x H x W
/// layout. Mask-false pixels hold exact zeros (black background).
struct FeatureMap {
    int depth = 0;   // D
    int height = 0;  // H
    int width = 0;   // W
    std::vector<double> data;   // (y, x, d) layout, size H*W*D
    std::vector<std::uint8_t> mask;  // size H*W

    void resize(int d, int h, int w);
    double& at(int c, int y, int x) { return data[(static_cast<std::size_t>(y) * width + x) * depth + c]; }
    double at(int c, int y, int x) const { return data[(static_cast<std::size_t>(y) * width + x) * depth + c]; }
    const double* pixel(int y, int x) const { return &data[(static_cast<std::size_t>(y) * width + x) * depth]; }
    double* pixel(int y, int x) { return &data[(static_cast<std::size_t>(y) * width + x) * depth]; }
    bool masked(int y, int x) const { return mask[static_cast<std::size_t>(y) * width + x] != 0; }
};

/// One rasterized point covering a pixel.
struct Fragment {
    std::int32_t point = -1;
    double dist = 0.0;   // screen-space distance to the pixel center
    double depth = 0.0;  // camera depth, ascending within a pixel
};

/// Per-pixel fragment lists, each holding at most points_per_pixel entries
/// sorted by (depth, point index).
struct RasterFragments {
    int height = 0;
    int width = 0;
    int per_pixel = 0;
    std::vector<std::uint16_t> counts;   // size H*W
    std::vector<Fragment> slots;         // size H*W*per_pixel

    void resize(int h, int w, int k);
    int count(int y, int x) const { return counts[static_cast<std::size_t>(y) * width + x]; }
    const Fragment* frags(int y, int x) const {
        return &slots[(static_cast<std::size_t>(y) * width + x) * per_pixel];
    }
};

/// Converts a continuous pixel coordinate to the normalized screen metric
/// (pixel i has center (2i + 1) / n - 1).
inline double pixel_to_screen(double px, int n) { return (2.0 * px + 1.0) / n - 1.0; }

/// Collects, per pixel, the up-to-points_per_pixel nearest-in-depth points
/// whose screen-space distance from the pixel center is <= radius. Points
/// behind the camera never produce fragments.
RasterFragments rasterize(const PointCloud& cloud, const Pose& pose, const Camera& cam,
                          const SplatConfig& cfg);

/// Normalized weighted blending: alpha_i = 1 - (dist_i / radius)^2, pixel
/// feature = sum(alpha_i * feat_i) / (sum(alpha) + epsilon). Linear in the
/// features for fixed fragments. Mask is true exactly where sum(alpha) > 0.
FeatureMap composite(const RasterFragments& frags, const MatXd& feats, const SplatConfig& cfg);

/// rasterize + composite over the bank's fused features.
FeatureMap render_features(const FeatureBank& bank, const Pose& pose, const Camera& cam,
                           const SplatConfig& cfg);

/// In-place variant used by the hot search/refinement loops to reuse the
/// map's storage.
void render_features_into(FeatureMap& out, const FeatureBank& bank, const Pose& pose,
                          const Camera& cam, const SplatConfig& cfg);

/// Exact adjoint of composite: each point accumulates
/// (alpha_i / (sum(alpha) + epsilon)) * residual over masked pixels.
MatXd feature_gradient(const RasterFragments& frags, const std::vector<double>& residual,
                       const std::vector<std::uint8_t>& mask, int feat_count, int feat_dim,
                       const SplatConfig& cfg);

/// Debug exports: the mask as a binary PGM, and the feature image as a PPM
/// after projecting the channels onto their top-3 principal components
/// (computed per map over masked pixels) and min-max scaling to 0-255.
void save_mask_pgm(const FeatureMap& map, const std::string& path);
void save_feature_ppm(const FeatureMap& map, const std::string& path);

}  // namespace rmatch
