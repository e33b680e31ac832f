#include "rendermatch/renderer.hpp"

#include "rendermatch/featurizer.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace rmatch {

void FeatureMap::resize(int d, int h, int w) {
    depth = d;
    height = h;
    width = w;
    data.assign(static_cast<std::size_t>(h) * w * d, 0.0);
    mask.assign(static_cast<std::size_t>(h) * w, 0);
}

void RasterFragments::resize(int h, int w, int k) {
    height = h;
    width = w;
    per_pixel = k;
    counts.assign(static_cast<std::size_t>(h) * w, 0);
    slots.assign(static_cast<std::size_t>(h) * w * k, Fragment{});
}

namespace {

inline bool frag_before(const Fragment& a, const Fragment& b) {
    if (a.depth != b.depth) return a.depth < b.depth;
    return a.point < b.point;
}

// Inserts into the pixel's depth-sorted list, evicting the deepest entry
// once the list is full.
inline void insert_fragment(Fragment* slots, std::uint16_t& count, int cap, const Fragment& f) {
    if (count < cap) {
        int i = count;
        while (i > 0 && frag_before(f, slots[i - 1])) {
            slots[i] = slots[i - 1];
            --i;
        }
        slots[i] = f;
        ++count;
        return;
    }
    if (!frag_before(f, slots[cap - 1])) return;
    int i = cap - 1;
    while (i > 0 && frag_before(f, slots[i - 1])) {
        slots[i] = slots[i - 1];
        --i;
    }
    slots[i] = f;
}

}  // namespace

RasterFragments rasterize(const PointCloud& cloud, const Pose& pose, const Camera& cam,
                          const SplatConfig& cfg) {
    RasterFragments out;
    out.resize(cfg.height, cfg.width, cfg.points_per_pixel);

    const auto projected = project_points(cloud, pose, cam);
    const double r = cfg.radius;
    const double r2 = r * r;
    const int w = cfg.width, h = cfg.height;

    for (int p = 0; p < static_cast<int>(projected.size()); ++p) {
        const ProjectedPoint& pp = projected[p];
        if (!pp.valid) continue;
        const double sx = pixel_to_screen(pp.u, w);
        const double sy = pixel_to_screen(pp.v, h);
        if (!std::isfinite(sx) || !std::isfinite(sy)) continue;

        // Pixel index range whose centers can lie inside the splat disk,
        // padded by one pixel; the exact d2 <= r2 test below decides.
        const int x0 = std::max(0, static_cast<int>(std::ceil(((sx - r) + 1.0) * w / 2.0 - 0.5)) - 1);
        const int x1 = std::min(w - 1, static_cast<int>(std::floor(((sx + r) + 1.0) * w / 2.0 - 0.5)) + 1);
        const int y0 = std::max(0, static_cast<int>(std::ceil(((sy - r) + 1.0) * h / 2.0 - 0.5)) - 1);
        const int y1 = std::min(h - 1, static_cast<int>(std::floor(((sy + r) + 1.0) * h / 2.0 - 0.5)) + 1);

        for (int y = y0; y <= y1; ++y) {
            const double dy = pixel_to_screen(static_cast<double>(y), h) - sy;
            for (int x = x0; x <= x1; ++x) {
                const double dx = pixel_to_screen(static_cast<double>(x), w) - sx;
                const double d2 = dx * dx + dy * dy;
                if (d2 > r2) continue;
                Fragment f;
                f.point = p;
                f.dist = std::sqrt(d2);
                f.depth = pp.depth;
                const std::size_t pix = static_cast<std::size_t>(y) * w + x;
                insert_fragment(&out.slots[pix * cfg.points_per_pixel], out.counts[pix],
                                cfg.points_per_pixel, f);
            }
        }
    }
    return out;
}

namespace {

void composite_into(FeatureMap& map, const RasterFragments& frags, const MatXd& feats,
                    const SplatConfig& cfg) {
    const int d = static_cast<int>(feats.cols());
    map.resize(d, frags.height, frags.width);
    const double r = cfg.radius;

    for (int y = 0; y < frags.height; ++y) {
        for (int x = 0; x < frags.width; ++x) {
            const int n = frags.count(y, x);
            if (n == 0) continue;
            const Fragment* fs = frags.frags(y, x);
            double sum_alpha = 0.0;
            double* px = map.pixel(y, x);
            for (int i = 0; i < n; ++i) {
                const double t = fs[i].dist / r;
                const double alpha = std::clamp(1.0 - t * t, 0.0, 1.0);
                if (alpha == 0.0) continue;
                sum_alpha += alpha;
                const double* row = feats.data() + static_cast<std::size_t>(fs[i].point) * d;
                for (int c = 0; c < d; ++c) px[c] += alpha * row[c];
            }
            if (sum_alpha > 0.0) {
                map.mask[static_cast<std::size_t>(y) * frags.width + x] = 1;
                const double inv = 1.0 / (sum_alpha + cfg.epsilon);
                for (int c = 0; c < d; ++c) px[c] *= inv;
            } else {
                for (int c = 0; c < d; ++c) px[c] = 0.0;
            }
        }
    }
}

}  // namespace

FeatureMap composite(const RasterFragments& frags, const MatXd& feats, const SplatConfig& cfg) {
    FeatureMap map;
    composite_into(map, frags, feats, cfg);
    return map;
}

FeatureMap render_features(const FeatureBank& bank, const Pose& pose, const Camera& cam,
                           const SplatConfig& cfg) {
    FeatureMap map;
    render_features_into(map, bank, pose, cam, cfg);
    return map;
}

void render_features_into(FeatureMap& out, const FeatureBank& bank, const Pose& pose,
                          const Camera& cam, const SplatConfig& cfg) {
    const RasterFragments frags = rasterize(bank.cloud, pose, cam, cfg);
    composite_into(out, frags, bank.fused, cfg);
}

MatXd feature_gradient(const RasterFragments& frags, const std::vector<double>& residual,
                       const std::vector<std::uint8_t>& mask, int feat_count, int feat_dim,
                       const SplatConfig& cfg) {
    if (residual.size() != static_cast<std::size_t>(frags.height) * frags.width * feat_dim) {
        throw std::invalid_argument("feature_gradient: residual size mismatch");
    }
    if (mask.size() != static_cast<std::size_t>(frags.height) * frags.width) {
        throw std::invalid_argument("feature_gradient: mask size mismatch");
    }
    MatXd grad = MatXd::Zero(feat_count, feat_dim);
    const double r = cfg.radius;

    for (int y = 0; y < frags.height; ++y) {
        for (int x = 0; x < frags.width; ++x) {
            const std::size_t pix = static_cast<std::size_t>(y) * frags.width + x;
            if (!mask[pix]) continue;
            const int n = frags.count(y, x);
            if (n == 0) continue;
            const Fragment* fs = frags.frags(y, x);
            double sum_alpha = 0.0;
            for (int i = 0; i < n; ++i) {
                const double t = fs[i].dist / r;
                sum_alpha += std::clamp(1.0 - t * t, 0.0, 1.0);
            }
            const double inv = 1.0 / (sum_alpha + cfg.epsilon);
            const double* res = &residual[pix * feat_dim];
            for (int i = 0; i < n; ++i) {
                const double t = fs[i].dist / r;
                const double alpha = std::clamp(1.0 - t * t, 0.0, 1.0);
                if (alpha == 0.0) continue;
                double* row = grad.data() + static_cast<std::size_t>(fs[i].point) * feat_dim;
                const double wgt = alpha * inv;
                for (int c = 0; c < feat_dim; ++c) row[c] += wgt * res[c];
            }
        }
    }
    return grad;
}

// --- Debug exports ----------------------------------------------------------

void save_mask_pgm(const FeatureMap& map, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write PGM file: " + path);
    out << "P5\n" << map.width << ' ' << map.height << "\n255\n";
    for (std::size_t i = 0; i < map.mask.size(); ++i) {
        out.put(map.mask[i] ? static_cast<char>(255) : static_cast<char>(0));
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

void save_feature_ppm(const FeatureMap& map, const std::string& path) {
    const int d = map.depth;
    std::vector<std::size_t> fg;
    for (std::size_t i = 0; i < map.mask.size(); ++i) {
        if (map.mask[i]) fg.push_back(i);
    }

    // Project masked pixel vectors onto their top-3 principal components.
    MatXd proj = MatXd::Zero(static_cast<int>(fg.size()), 3);
    if (!fg.empty()) {
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
        for (const std::size_t pix : fg) {
            mean += Eigen::Map<const Eigen::VectorXd>(&map.data[pix * d], d);
        }
        mean /= static_cast<double>(fg.size());

        MatXd cov = MatXd::Zero(d, d);
        for (const std::size_t pix : fg) {
            const Eigen::VectorXd v =
                Eigen::Map<const Eigen::VectorXd>(&map.data[pix * d], d) - mean;
            cov += v * v.transpose();
        }
        cov /= static_cast<double>(fg.size());

        Eigen::SelfAdjointEigenSolver<MatXd> solver(cov);
        // Eigenvalues come out ascending; take the last three columns.
        for (int i = 0; i < static_cast<int>(fg.size()); ++i) {
            const Eigen::VectorXd v =
                Eigen::Map<const Eigen::VectorXd>(&map.data[fg[i] * d], d) - mean;
            for (int c = 0; c < 3; ++c) {
                const int col = std::max(0, d - 1 - c);
                proj(i, c) = v.dot(solver.eigenvectors().col(col));
            }
        }
    }

    Eigen::Vector3d lo = Eigen::Vector3d::Zero(), hi = Eigen::Vector3d::Ones();
    if (proj.rows() > 0) {
        lo = proj.colwise().minCoeff();
        hi = proj.colwise().maxCoeff();
    }

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write PPM file: " + path);
    out << "P6\n" << map.width << ' ' << map.height << "\n255\n";
    std::size_t next = 0;
    for (std::size_t pix = 0; pix < map.mask.size(); ++pix) {
        unsigned char rgb[3] = {0, 0, 0};
        if (map.mask[pix] && next < fg.size() && fg[next] == pix) {
            for (int c = 0; c < 3; ++c) {
                const double range = hi[c] - lo[c];
                const double t = range > 0.0 ? (proj(static_cast<int>(next), c) - lo[c]) / range : 0.5;
                rgb[c] = static_cast<unsigned char>(std::clamp(t, 0.0, 1.0) * 255.0 + 0.5);
            }
            ++next;
        }
        out.write(reinterpret_cast<const char*>(rgb), 3);
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace rmatch
