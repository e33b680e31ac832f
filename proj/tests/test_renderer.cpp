#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rendermatch/featurizer.hpp"
#include "rendermatch/renderer.hpp"
#include "rendermatch/rng.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

using namespace rmatch;

namespace {

PointCloud random_cloud(int n, std::uint64_t seed) {
    Rng rng(seed);
    PointCloud cloud;
    cloud.points.resize(n, 3);
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) cloud.points(i, c) = rng.uniform(-0.9, 0.9);
    return cloud;
}

FeatureBank bank_from(const PointCloud& cloud, int feat_dim, std::uint64_t seed) {
    FeatureBank bank;
    bank.cloud = cloud;
    Rng rng(seed);
    bank.fused.resize(cloud.size(), feat_dim);
    for (int i = 0; i < cloud.size(); ++i) {
        for (int c = 0; c < feat_dim; ++c) bank.fused(i, c) = rng.normal();
        bank.fused.row(i).normalize();
    }
    return bank;
}

// O(N*H*W) reference rasterizer: per pixel, scan every point.
RasterFragments rasterize_oracle(const PointCloud& cloud, const Pose& pose, const Camera& cam,
                                 const SplatConfig& cfg) {
    RasterFragments out;
    out.resize(cfg.height, cfg.width, cfg.points_per_pixel);
    const auto projected = project_points(cloud, pose, cam);

    for (int y = 0; y < cfg.height; ++y) {
        for (int x = 0; x < cfg.width; ++x) {
            std::vector<Fragment> all;
            for (int p = 0; p < static_cast<int>(projected.size()); ++p) {
                if (!projected[p].valid) continue;
                const double dx = pixel_to_screen(static_cast<double>(x), cfg.width) -
                                  pixel_to_screen(projected[p].u, cfg.width);
                const double dy = pixel_to_screen(static_cast<double>(y), cfg.height) -
                                  pixel_to_screen(projected[p].v, cfg.height);
                const double d2 = dx * dx + dy * dy;
                if (d2 > cfg.radius * cfg.radius) continue;
                all.push_back(Fragment{p, std::sqrt(d2), projected[p].depth});
            }
            std::sort(all.begin(), all.end(), [](const Fragment& a, const Fragment& b) {
                if (a.depth != b.depth) return a.depth < b.depth;
                return a.point < b.point;
            });
            const int keep = std::min<int>(cfg.points_per_pixel, static_cast<int>(all.size()));
            out.counts[static_cast<std::size_t>(y) * cfg.width + x] = static_cast<std::uint16_t>(keep);
            for (int i = 0; i < keep; ++i) {
                out.slots[(static_cast<std::size_t>(y) * cfg.width + x) * cfg.points_per_pixel + i] =
                    all[i];
            }
        }
    }
    return out;
}

bool fragments_equal(const RasterFragments& a, const RasterFragments& b) {
    if (a.height != b.height || a.width != b.width) return false;
    for (int y = 0; y < a.height; ++y) {
        for (int x = 0; x < a.width; ++x) {
            if (a.count(y, x) != b.count(y, x)) return false;
            for (int i = 0; i < a.count(y, x); ++i) {
                const Fragment& fa = a.frags(y, x)[i];
                const Fragment& fb = b.frags(y, x)[i];
                if (fa.point != fb.point || fa.dist != fb.dist || fa.depth != fb.depth) return false;
            }
        }
    }
    return true;
}

}  // namespace

TEST_CASE("rasterize empty cloud produces empty fragments") {
    PointCloud cloud;
    cloud.points.resize(0, 3);
    const RasterFragments frags = rasterize(cloud, Pose{}, Camera::make_default(), SplatConfig{});
    for (const auto c : frags.counts) CHECK(c == 0);
}

TEST_CASE("rasterize point at a pixel center has distance zero") {
    // The origin projects to the principal point = center pixel (18, 18).
    PointCloud cloud;
    cloud.points = MatX3::Zero(1, 3);
    const RasterFragments frags = rasterize(cloud, Pose{}, Camera::make_default(), SplatConfig{});
    REQUIRE(frags.count(18, 18) == 1);
    CHECK(frags.frags(18, 18)[0].point == 0);
    CHECK(frags.frags(18, 18)[0].dist == 0.0);
}

TEST_CASE("rasterize matches the brute-force oracle") {
    const Camera cam = Camera::make_default();
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const PointCloud cloud = random_cloud(256, 100 + trial);
        Pose pose;
        pose.elev = rng.uniform(-1.0, 1.0);
        pose.azim = rng.uniform(0.0, 2 * M_PI);
        pose.theta = rng.uniform(-0.7, 0.7);
        SplatConfig cfg;
        cfg.radius = trial % 2 == 0 ? 0.04 : 0.1;
        cfg.points_per_pixel = trial % 3 == 0 ? 4 : 16;
        CHECK(fragments_equal(rasterize(cloud, pose, cam, cfg),
                              rasterize_oracle(cloud, pose, cam, cfg)));
    }
}

TEST_CASE("rasterize fragment lists respect the radius and cap") {
    const PointCloud cloud = random_cloud(512, 5);
    SplatConfig cfg;
    cfg.radius = 0.3;
    cfg.points_per_pixel = 8;
    const RasterFragments frags = rasterize(cloud, Pose{}, Camera::make_default(), cfg);
    for (int y = 0; y < frags.height; ++y) {
        for (int x = 0; x < frags.width; ++x) {
            const int n = frags.count(y, x);
            CHECK(n <= 8);
            for (int i = 0; i < n; ++i) {
                CHECK(frags.frags(y, x)[i].dist <= cfg.radius);
                if (i > 0) CHECK(frags.frags(y, x)[i - 1].depth <= frags.frags(y, x)[i].depth);
            }
        }
    }
}

TEST_CASE("composite single fragment at distance zero") {
    RasterFragments frags;
    frags.resize(2, 2, 4);
    frags.counts[0] = 1;
    frags.slots[0] = Fragment{0, 0.0, 1.0};
    MatXd feats(1, 3);
    feats << 2.0, -1.0, 0.5;
    SplatConfig cfg;
    const FeatureMap map = composite(frags, feats, cfg);
    CHECK(map.masked(0, 0));
    for (int c = 0; c < 3; ++c) {
        CHECK(map.at(c, 0, 0) == doctest::Approx(feats(0, c) / (1.0 + cfg.epsilon)));
    }
    CHECK_FALSE(map.masked(1, 1));
}

TEST_CASE("composite averages equal-distance fragments") {
    RasterFragments frags;
    frags.resize(1, 1, 4);
    frags.counts[0] = 2;
    frags.slots[0] = Fragment{0, 0.01, 1.0};
    frags.slots[1] = Fragment{1, 0.01, 2.0};
    MatXd feats(2, 2);
    feats << 1.0, 0.0, 0.0, 1.0;
    const FeatureMap map = composite(frags, feats, SplatConfig{});
    CHECK(map.at(0, 0, 0) == doctest::Approx(map.at(1, 0, 0)));
}

TEST_CASE("composite is linear in the features") {
    const PointCloud cloud = random_cloud(128, 17);
    const RasterFragments frags = rasterize(cloud, Pose{}, Camera::make_default(), SplatConfig{});
    Rng rng(18);
    const double a = rng.uniform(-2.0, 2.0);
    const double b = rng.uniform(-2.0, 2.0);
    MatXd f1 = MatXd::Random(128, 5), f2 = MatXd::Random(128, 5);
    const FeatureMap m1 = composite(frags, f1, SplatConfig{});
    const FeatureMap m2 = composite(frags, f2, SplatConfig{});
    const FeatureMap mc = composite(frags, a * f1 + b * f2, SplatConfig{});
    for (std::size_t i = 0; i < mc.data.size(); ++i) {
        CHECK(std::abs(mc.data[i] - (a * m1.data[i] + b * m2.data[i])) < 1e-9);
    }
}

TEST_CASE("composite weights stay in range and normalize below one") {
    const PointCloud cloud = random_cloud(256, 23);
    SplatConfig cfg;
    cfg.radius = 0.15;
    const RasterFragments frags = rasterize(cloud, Pose{}, Camera::make_default(), cfg);
    for (int y = 0; y < frags.height; ++y) {
        for (int x = 0; x < frags.width; ++x) {
            double sum = 0.0;
            for (int i = 0; i < frags.count(y, x); ++i) {
                const double t = frags.frags(y, x)[i].dist / cfg.radius;
                const double alpha = 1.0 - t * t;
                CHECK(alpha >= 0.0);
                CHECK(alpha <= 1.0);
                sum += alpha;
            }
            if (sum > 0.0) CHECK(sum / (sum + cfg.epsilon) < 1.0);
        }
    }
}

TEST_CASE("render_features is deterministic bitwise") {
    const FeatureBank bank = bank_from(random_cloud(200, 31), 8, 32);
    const Pose pose{0.3, 1.2, -0.2};
    const FeatureMap a = render_features(bank, pose, Camera::make_default(), SplatConfig{});
    const FeatureMap b = render_features(bank, pose, Camera::make_default(), SplatConfig{});
    CHECK(a.data == b.data);
    CHECK(a.mask == b.mask);
}

TEST_CASE("render_features behind the camera yields an empty map") {
    const FeatureBank bank = bank_from(random_cloud(64, 41), 4, 42);
    Pose pose;
    pose.dist = -2.5;  // unphysical test-only distance: everything behind
    const FeatureMap map = render_features(bank, pose, Camera::make_default(), SplatConfig{});
    for (const auto m : map.mask) CHECK(m == 0);
    for (const double v : map.data) CHECK(v == 0.0);
}

TEST_CASE("mask and data are consistent") {
    const FeatureBank bank = bank_from(random_cloud(128, 51), 6, 52);
    const FeatureMap map = render_features(bank, Pose{0.2, 0.7, 0.1}, Camera::make_default(),
                                           SplatConfig{});
    int fg = 0;
    for (int y = 0; y < map.height; ++y) {
        for (int x = 0; x < map.width; ++x) {
            if (map.masked(y, x)) {
                ++fg;
            } else {
                for (int c = 0; c < map.depth; ++c) CHECK(map.at(c, y, x) == 0.0);
            }
        }
    }
    CHECK(fg > 0);
}

TEST_CASE("sphere with normal features renders a front-facing response") {
    // Fibonacci sphere with features = surface normals (the positions).
    const int n = 1024;
    PointCloud cloud;
    cloud.points.resize(n, 3);
    for (int i = 0; i < n; ++i) {
        const double z = 1.0 - 2.0 * (i + 0.5) / n;
        const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double phi = i * 2.399963229728653;  // golden angle
        cloud.points.row(i) << r * std::cos(phi), r * std::sin(phi), z;
    }
    FeatureBank bank;
    bank.cloud = cloud;
    bank.fused = cloud.points;  // unit normals double as features

    const FeatureMap map = render_features(bank, Pose{}, Camera::make_default(), SplatConfig{});
    // The camera sits on +Z looking along -Z. Splatting blends through the
    // sphere (no occlusion culling), and perspective packs the far
    // hemisphere into fewer pixels, so the blended normal leans along the
    // viewing direction: the mean z-channel is negative.
    double mean_z = 0.0;
    int fg = 0;
    for (int y = 0; y < map.height; ++y) {
        for (int x = 0; x < map.width; ++x) {
            if (!map.masked(y, x)) continue;
            mean_z += map.at(2, y, x);
            ++fg;
        }
    }
    REQUIRE(fg > 0);
    CHECK(mean_z / fg < 0.0);
}

TEST_CASE("azimuth shift by an exact 2 pi reproduces the map bitwise") {
    const FeatureBank bank = bank_from(random_cloud(200, 61), 8, 62);
    // 0.5 + 2*pi is exact in doubles (same binade as 2*pi), and the wrap
    // reduction is Sterbenz-exact, so both poses project identically.
    const Pose a = Pose{0.25, 0.5, 0.1}.normalized();
    const Pose b = Pose{0.25, 0.5 + 2.0 * M_PI, 0.1}.normalized();
    CHECK(b.azim == a.azim);
    const FeatureMap ma = render_features(bank, a, Camera::make_default(), SplatConfig{});
    const FeatureMap mb = render_features(bank, b, Camera::make_default(), SplatConfig{});
    CHECK(ma.data == mb.data);
    CHECK(ma.mask == mb.mask);
}

TEST_CASE("feature_gradient zero residual and single-fragment cases") {
    RasterFragments frags;
    frags.resize(1, 1, 4);
    frags.counts[0] = 1;
    const double dist = 0.02;
    frags.slots[0] = Fragment{0, dist, 1.0};
    SplatConfig cfg;

    std::vector<double> residual(3, 0.0);
    std::vector<std::uint8_t> mask{1};
    MatXd g = feature_gradient(frags, residual, mask, 2, 3, cfg);
    CHECK(g.cwiseAbs().maxCoeff() == 0.0);

    residual = {1.0, -2.0, 0.5};
    g = feature_gradient(frags, residual, mask, 2, 3, cfg);
    const double alpha = 1.0 - (dist / cfg.radius) * (dist / cfg.radius);
    const double w = alpha / (alpha + cfg.epsilon);
    CHECK(g(0, 0) == doctest::Approx(w * 1.0));
    CHECK(g(0, 1) == doctest::Approx(w * -2.0));
    CHECK(g(0, 2) == doctest::Approx(w * 0.5));
    CHECK(g.row(1).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("feature_gradient matches finite differences of composite") {
    const PointCloud cloud = random_cloud(32, 71);
    SplatConfig cfg;
    cfg.height = cfg.width = 12;
    cfg.radius = 0.12;
    const Camera cam = Camera::make_default(12);
    const RasterFragments frags = rasterize(cloud, Pose{}, cam, cfg);

    MatXd feats = MatXd::Random(32, 4);
    const FeatureMap base = composite(frags, feats, cfg);

    Rng rng(72);
    std::vector<double> residual(base.data.size());
    for (double& r : residual) r = rng.normal();

    // Scalar objective: sum over masked pixels of residual . map.
    auto objective = [&](const MatXd& f) {
        const FeatureMap m = composite(frags, f, cfg);
        double total = 0.0;
        for (int y = 0; y < m.height; ++y)
            for (int x = 0; x < m.width; ++x) {
                if (!m.masked(y, x)) continue;
                for (int c = 0; c < m.depth; ++c)
                    total += m.at(c, y, x) *
                             residual[(static_cast<std::size_t>(y) * m.width + x) * m.depth + c];
            }
        return total;
    };

    const MatXd grad = feature_gradient(frags, residual, base.mask, 32, 4, cfg);
    const double scale = std::max(1e-12, grad.cwiseAbs().maxCoeff());
    const double delta = 1e-6;
    for (int i = 0; i < 32; i += 3) {
        for (int c = 0; c < 4; ++c) {
            MatXd hi = feats, lo = feats;
            hi(i, c) += delta;
            lo(i, c) -= delta;
            const double fd = (objective(hi) - objective(lo)) / (2.0 * delta);
            CHECK(std::abs(fd - grad(i, c)) / scale < 1e-6);
        }
    }
}
