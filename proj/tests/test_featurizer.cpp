#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rendermatch/featurizer.hpp"
#include "rendermatch/rng.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <vector>

using namespace rmatch;

namespace {

PointCloud random_cloud(int n, std::uint64_t seed) {
    Rng rng(seed);
    PointCloud cloud;
    cloud.points.resize(n, 3);
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) cloud.points(i, c) = rng.uniform(-1.0, 1.0);
    return cloud;
}

MatX3 random_points(int n, std::uint64_t seed) { return random_cloud(n, seed).points; }

// Plain full-sort KNN used as the reference.
void knn_oracle(const Vec3& query, const MatX3& points, int k, std::vector<int>& idx,
                std::vector<double>& d2) {
    const int n = static_cast<int>(points.rows());
    std::vector<std::pair<double, int>> all(n);
    for (int i = 0; i < n; ++i) {
        all[i] = {(points.row(i).transpose() - query).squaredNorm(), i};
    }
    std::sort(all.begin(), all.end());
    idx.resize(k);
    d2.resize(k);
    for (int i = 0; i < k; ++i) {
        d2[i] = all[i].first;
        idx[i] = all[i].second;
    }
}

FeatureBank tiny_bank(int n_points, int feat_dim, std::uint64_t seed) {
    FeatureBank bank;
    bank.cloud = normalize_cloud(random_cloud(n_points, seed));
    Rng rng(mix_seed(seed, "feats"));
    bank.fused.resize(n_points, feat_dim);
    for (int i = 0; i < n_points; ++i) {
        for (int c = 0; c < feat_dim; ++c) bank.fused(i, c) = rng.normal();
        bank.fused.row(i).normalize();
    }
    bank.shape_id = "tiny";
    bank.category = "test";
    return bank;
}

}  // namespace

TEST_CASE("knn trivial cases") {
    const MatX3 pts = random_points(16, 3);
    std::vector<int> idx;
    std::vector<double> d2;

    knn(pts.row(5).transpose(), pts, 1, idx, d2);
    CHECK(idx[0] == 5);
    CHECK(d2[0] == 0.0);

    knn(Vec3(0.1, 0.2, 0.3), pts, 16, idx, d2);
    CHECK(std::is_sorted(d2.begin(), d2.end()));
    std::vector<int> sorted_idx = idx;
    std::sort(sorted_idx.begin(), sorted_idx.end());
    for (int i = 0; i < 16; ++i) CHECK(sorted_idx[i] == i);
}

TEST_CASE("knn matches the linear-scan oracle") {
    const MatX3 pts = random_points(128, 21);
    Rng rng(5);
    std::vector<int> idx, oidx;
    std::vector<double> d2, od2;
    for (int trial = 0; trial < 50; ++trial) {
        const Vec3 q(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        knn(q, pts, 3, idx, d2);
        knn_oracle(q, pts, 3, oidx, od2);
        CHECK(idx == oidx);
        CHECK(d2 == od2);
    }
}

TEST_CASE("knn breaks distance ties by lowest index") {
    MatX3 pts(4, 3);
    pts << 1, 0, 0, 0, 1, 0, -1, 0, 0, 0, -1, 0;  // all at distance 1 from origin
    std::vector<int> idx;
    std::vector<double> d2;
    knn(Vec3::Zero(), pts, 2, idx, d2);
    CHECK(idx == std::vector<int>{0, 1});
}

TEST_CASE("knn rejects k beyond the point count") {
    const MatX3 pts = random_points(4, 1);
    std::vector<int> idx;
    std::vector<double> d2;
    CHECK_THROWS_AS(knn(Vec3::Zero(), pts, 5, idx, d2), std::invalid_argument);
}

TEST_CASE("interp_weights trivial cases") {
    CHECK(interp_weights({0.7}, 0.05) == std::vector<double>{1.0});

    const auto equal = interp_weights({0.2, 0.2, 0.2}, 0.05);
    for (const double w : equal) CHECK(w == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("interp_weights matches the softmax oracle") {
    // d = [0, 0.01, 0.04] at tau = 0.05: exponents are 0, -0.2, -0.8.
    const double e0 = 1.0, e1 = std::exp(-0.2L), e2 = std::exp(-0.8L);
    const double sum = e0 + e1 + e2;
    const auto w = interp_weights({0.0, 0.01, 0.04}, 0.05);
    CHECK(w[0] == doctest::Approx(e0 / sum).epsilon(1e-12));
    CHECK(w[1] == doctest::Approx(e1 / sum).epsilon(1e-12));
    CHECK(w[2] == doctest::Approx(e2 / sum).epsilon(1e-12));
    // The nearest neighbor dominates and weights strictly decrease. Frozen
    // values from a 30-digit softmax evaluation.
    CHECK(w[0] > w[1]);
    CHECK(w[1] > w[2]);
    CHECK(w[0] == doctest::Approx(0.440905498395187857).epsilon(1e-12));
    CHECK(w[1] == doctest::Approx(0.360982890737315076).epsilon(1e-12));
    CHECK(w[2] == doctest::Approx(0.198111610867497067).epsilon(1e-12));
}

TEST_CASE("interp_weights rows are convex over random inputs") {
    Rng rng(77);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> d(3);
        for (double& x : d) x = rng.uniform(0.0, 4.0);
        const auto w = interp_weights(d, 0.05);
        double sum = 0.0;
        for (const double x : w) {
            CHECK(x >= 0.0);
            sum += x;
        }
        CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
}

TEST_CASE("interp_weights is stable for huge distance gaps") {
    const auto w = interp_weights({0.0, 5000.0}, 0.05);
    CHECK(w[0] == doctest::Approx(1.0));
    CHECK(std::isfinite(w[1]));
}

TEST_CASE("interpolate_scale collapses to the nearest point at tiny tau") {
    ScaleLevel scale;
    scale.points = random_points(8, 2);
    scale.feats = MatXd::Random(8, 4);
    PointCloud cloud;
    cloud.points.resize(1, 3);
    cloud.points.row(0) = scale.points.row(3);
    const MatXd out = interpolate_scale(cloud, scale, 3, 1e-8);
    CHECK((out.row(0) - scale.feats.row(3)).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("interpolate_scale respects convexity") {
    ScaleLevel scale;
    scale.points = random_points(8, 4);
    scale.feats.resize(8, 5);
    Eigen::RowVectorXd v(5);
    v << 1, -2, 3, 0.5, 0;
    for (int i = 0; i < 8; ++i) scale.feats.row(i) = v;
    const PointCloud cloud = random_cloud(16, 6);
    const MatXd out = interpolate_scale(cloud, scale, 3, 0.05);
    for (int i = 0; i < 16; ++i) CHECK((out.row(i) - v).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("interpolate_scale matches a naive-loop oracle") {
    ScaleLevel scale;
    scale.points = random_points(8, 31);
    scale.feats = MatXd::Random(8, 6);
    const PointCloud cloud = random_cloud(32, 32);
    const MatXd out = interpolate_scale(cloud, scale, 3, 0.05);

    for (int i = 0; i < 32; ++i) {
        // Naive loops: exhaustive distances, softmax, weighted sum.
        std::vector<std::pair<double, int>> dists;
        for (int j = 0; j < 8; ++j) {
            dists.push_back({(scale.points.row(j) - cloud.points.row(i)).squaredNorm(), j});
        }
        std::sort(dists.begin(), dists.end());
        double denom = 0.0;
        for (int j = 0; j < 3; ++j) denom += std::exp(-dists[j].first / 0.05);
        Eigen::RowVectorXd expect = Eigen::RowVectorXd::Zero(6);
        for (int j = 0; j < 3; ++j) {
            expect += std::exp(-dists[j].first / 0.05) / denom * scale.feats.row(dists[j].second);
        }
        CHECK((out.row(i) - expect).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("interpolated feature norm never exceeds the max neighbor norm") {
    ScaleLevel scale;
    scale.points = random_points(10, 41);
    scale.feats = MatXd::Random(10, 4);
    double max_norm = 0.0;
    for (int i = 0; i < 10; ++i) max_norm = std::max(max_norm, scale.feats.row(i).norm());
    const PointCloud cloud = random_cloud(25, 42);
    const MatXd out = interpolate_scale(cloud, scale, 3, 0.05);
    for (int i = 0; i < 25; ++i) CHECK(out.row(i).norm() <= max_norm + 1e-9);
}

TEST_CASE("interp weights are invariant under joint rotation") {
    const Mat3 rot = pose_to_rotation(Pose{0.3, 1.1, -0.4});
    ScaleLevel scale;
    scale.points = random_points(12, 51);
    const PointCloud cloud = random_cloud(20, 52);

    ScaleLevel rotated_scale;
    rotated_scale.points = (rot * scale.points.transpose()).transpose();
    PointCloud rotated_cloud;
    rotated_cloud.points = (rot * cloud.points.transpose()).transpose();

    const InterpWeights a = compute_interp_weights(cloud, scale, 3, 0.05);
    const InterpWeights b = compute_interp_weights(rotated_cloud, rotated_scale, 3, 0.05);
    CHECK((a.indices - b.indices).cwiseAbs().maxCoeff() == 0);
    CHECK((a.weights - b.weights).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("synth_descriptor is deterministic") {
    const PointCloud parent = random_cloud(64, 61);
    const MatX3 pts = parent.points.topRows(16);
    const MatXd a = synth_descriptor(pts, parent, 16, 9);
    const MatXd b = synth_descriptor(pts, parent, 16, 9);
    CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("synth_descriptor rotation behavior") {
    const PointCloud parent = normalize_cloud(random_cloud(128, 62));
    const MatX3 pts = parent.points.topRows(24);
    const Mat3 rot = pose_to_rotation(Pose{0.2, 0.9, 0.5});

    PointCloud rparent;
    rparent.points = (rot * parent.points.transpose()).transpose();
    const MatX3 rpts = (rot * pts.transpose()).transpose();

    const MatXd a = synth_descriptor(pts, parent, 16, 9);
    const MatXd b = synth_descriptor(rpts, rparent, 16, 9);

    // Position channels rotate with the cloud.
    const MatX3 rotated_pos = (rot * a.leftCols(3).transpose()).transpose();
    CHECK((b.leftCols(3) - rotated_pos).cwiseAbs().maxCoeff() < 1e-9);
    // Radial distance and covariance eigenvalues are invariant.
    CHECK((b.col(3) - a.col(3)).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((b.middleCols(4, 3) - a.middleCols(4, 3)).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("synth_descriptor degenerate neighborhood yields zero eigenvalues") {
    PointCloud parent;
    parent.points.resize(1, 3);
    parent.points << 5, 5, 5;  // far from the probe point
    MatX3 pts(1, 3);
    pts << 0, 0, 0;
    const MatXd d = synth_descriptor(pts, parent, 12, 4);
    CHECK(d(0, 4) == 0.0);
    CHECK(d(0, 5) == 0.0);
    CHECK(d(0, 6) == 0.0);
}

TEST_CASE("synth_descriptor requires dim >= 8") {
    const PointCloud parent = random_cloud(8, 1);
    CHECK_THROWS_AS(synth_descriptor(parent.points, parent, 7, 1), std::invalid_argument);
}

TEST_CASE("projection head standardizes and normalizes rows") {
    const ProjectionHead head = ProjectionHead::seeded(16, 24, 77);
    CHECK(head.out_dim() == 16);
    CHECK(head.in_dim() == 24);
    const MatXd input = MatXd::Random(10, 24);
    const MatXd out = head.apply(input);
    for (int i = 0; i < 10; ++i) {
        CHECK(out.row(i).norm() == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(std::abs(out.row(i).mean()) < 1e-9);
    }
}

TEST_CASE("build_bank shape and determinism contract") {
    const PointCloud cloud = normalize_cloud(random_cloud(256, 81));
    const std::vector<std::pair<int, int>> spec{{64, 12}, {16, 12}};
    const ProjectionHead head = ProjectionHead::seeded(16, 24, 5);
    const FeatureBank bank = build_bank(cloud, spec, head, 3, 0.05, 11);

    CHECK(bank.fused.rows() == 256);
    CHECK(bank.fused.cols() == 16);
    for (int i = 0; i < bank.fused.rows(); ++i) {
        CHECK(bank.fused.row(i).norm() == doctest::Approx(1.0).epsilon(1e-6));
    }
    REQUIRE(bank.scales.size() == 2);
    CHECK(bank.scales[0].points.rows() == 64);
    CHECK(bank.scales[1].points.rows() == 16);

    // Every scale point is a member of the parent cloud.
    for (const ScaleLevel& scale : bank.scales) {
        for (int i = 0; i < scale.points.rows(); ++i) {
            double best = 1e9;
            for (int j = 0; j < cloud.size(); ++j) {
                best = std::min(best, (cloud.points.row(j) - scale.points.row(i)).squaredNorm());
            }
            CHECK(best == 0.0);
        }
    }

    const FeatureBank again = build_bank(cloud, spec, head, 3, 0.05, 11);
    CHECK((bank.fused - again.fused).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("build_bank validates the scale spec") {
    const PointCloud cloud = normalize_cloud(random_cloud(64, 82));
    const ProjectionHead head = ProjectionHead::seeded(8, 16, 5);
    CHECK_THROWS_AS(build_bank(cloud, {{16, 8}, {16, 8}}, head, 3, 0.05, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(build_bank(cloud, {{32, 8}, {16, 12}}, head, 3, 0.05, 1),
                    std::invalid_argument);
}

TEST_CASE("cube bank features separate faces") {
    // Cube surface: +x-face features should look more like each other than
    // like the -x face.
    TriMesh cube;
    cube.vertices.resize(8, 3);
    std::vector<Eigen::Vector3i> faces;
    int vi = 0;
    for (int corner = 0; corner < 8; ++corner) {
        cube.vertices(vi, 0) = (corner & 1) ? 1.0 : -1.0;
        cube.vertices(vi, 1) = (corner & 2) ? 1.0 : -1.0;
        cube.vertices(vi, 2) = (corner & 4) ? 1.0 : -1.0;
        ++vi;
    }
    const int quads[6][4] = {{0, 4, 6, 2}, {1, 3, 7, 5}, {0, 1, 5, 4},
                             {2, 6, 7, 3}, {0, 2, 3, 1}, {4, 5, 7, 6}};
    cube.faces.resize(12, 3);
    for (int f = 0; f < 6; ++f) {
        cube.faces.row(2 * f) << quads[f][0], quads[f][1], quads[f][2];
        cube.faces.row(2 * f + 1) << quads[f][0], quads[f][2], quads[f][3];
    }

    const PointCloud cloud = normalize_cloud(sample_mesh_surface(cube, 1024, 7));
    const ProjectionHead head = ProjectionHead::seeded(32, 32, 3);
    const FeatureBank bank = build_bank(cloud, {{256, 16}, {64, 16}}, head, 3, 0.05, 9);

    std::vector<int> plus_x, minus_x;
    for (int i = 0; i < cloud.size(); ++i) {
        if (cloud.points(i, 0) > 0.55) plus_x.push_back(i);
        if (cloud.points(i, 0) < -0.55) minus_x.push_back(i);
    }
    REQUIRE(plus_x.size() > 20);
    REQUIRE(minus_x.size() > 20);

    double same = 0.0;
    int same_n = 0;
    for (std::size_t a = 0; a < plus_x.size(); a += 3) {
        for (std::size_t b = a + 1; b < plus_x.size(); b += 3) {
            same += bank.fused.row(plus_x[a]).dot(bank.fused.row(plus_x[b]));
            ++same_n;
        }
    }
    double cross = 0.0;
    int cross_n = 0;
    for (std::size_t a = 0; a < plus_x.size(); a += 3) {
        for (std::size_t b = 0; b < minus_x.size(); b += 3) {
            cross += bank.fused.row(plus_x[a]).dot(bank.fused.row(minus_x[b]));
            ++cross_n;
        }
    }
    CHECK(same / same_n > cross / cross_n);
}

TEST_CASE("distill fixed point: own renders change nothing") {
    const FeatureBank bank = tiny_bank(64, 8, 3);
    const Camera cam = Camera::make_default(16);
    SplatConfig cfg;
    cfg.height = cfg.width = 16;
    cfg.radius = 0.08;

    std::vector<DistillTarget> targets;
    for (const double azim : {0.3, 2.1}) {
        const Pose pose{0.2, azim, 0.0};
        targets.push_back({render_features(bank, pose, cam, cfg), pose});
    }

    std::vector<double> history;
    const FeatureBank out = distill_bank(bank, targets, 5, 0.5, cam, cfg, &history);
    CHECK(history.front() <= 1e-6);
    CHECK((out.fused - bank.fused).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("distill converges toward a constant-direction target") {
    const FeatureBank bank = tiny_bank(64, 8, 5);
    const Camera cam = Camera::make_default(16);
    SplatConfig cfg;
    cfg.height = cfg.width = 16;
    cfg.radius = 0.08;

    const Pose pose{0.1, 1.0, 0.0};
    const FeatureMap ref = render_features(bank, pose, cam, cfg);
    DistillTarget target;
    target.pose = pose;
    target.map.resize(ref.depth, ref.height, ref.width);
    Eigen::VectorXd dir = Eigen::VectorXd::Zero(8);
    dir[2] = 1.0;
    for (int y = 0; y < ref.height; ++y)
        for (int x = 0; x < ref.width; ++x)
            for (int c = 0; c < 8; ++c) target.map.at(c, y, x) = dir[c];

    std::vector<double> history;
    distill_bank(bank, {target}, 150, 1.0, cam, cfg, &history);
    CHECK(history.back() < 0.1 * history.front());
    // Accepted steps never increase the loss beyond rounding.
    for (std::size_t i = 1; i < history.size(); ++i) {
        CHECK(history[i] <= history[i - 1] + 1e-9);
    }
}

TEST_CASE("distill analytic gradient matches finite differences") {
    const FeatureBank bank = tiny_bank(16, 6, 8);
    const Camera cam = Camera::make_default(8);
    SplatConfig cfg;
    cfg.height = cfg.width = 8;
    cfg.radius = 0.15;

    const Pose pose{0.15, 0.8, 0.1};
    // Teacher map from an independently seeded bank of the same geometry.
    FeatureBank teacher = tiny_bank(16, 6, 9);
    teacher.cloud = bank.cloud;
    DistillTarget target{render_features(teacher, pose, cam, cfg), pose};

    MatXd analytic;
    distill_loss_and_gradient(bank, target, cam, cfg, &analytic);

    const double delta = 1e-5;
    double max_rel = 0.0;
    double max_abs_grad = analytic.cwiseAbs().maxCoeff();
    REQUIRE(max_abs_grad > 0.0);
    for (int i = 0; i < 16; ++i) {
        for (int c = 0; c < 6; ++c) {
            FeatureBank hi = bank, lo = bank;
            hi.fused(i, c) += delta;
            lo.fused(i, c) -= delta;
            const double lh = distill_loss_and_gradient(hi, target, cam, cfg, nullptr);
            const double ll = distill_loss_and_gradient(lo, target, cam, cfg, nullptr);
            const double fd = (lh - ll) / (2.0 * delta);
            max_rel = std::max(max_rel, std::abs(fd - analytic(i, c)) / max_abs_grad);
        }
    }
    CHECK(max_rel < 1e-4);
}

TEST_CASE("bank blob round trip") {
    const PointCloud cloud = normalize_cloud(random_cloud(64, 91));
    const ProjectionHead head = ProjectionHead::seeded(8, 16, 2);
    FeatureBank bank = build_bank(cloud, {{16, 8}, {8, 8}}, head, 3, 0.05, 13);
    bank.shape_id = "roundtrip_0";
    bank.category = "testcat";

    const auto path = std::filesystem::temp_directory_path() / "rendermatch_test.fbnk";
    save_bank(bank, path.string());
    const FeatureBank loaded = load_bank(path.string());
    CHECK(loaded.shape_id == bank.shape_id);
    CHECK(loaded.category == bank.category);
    REQUIRE(loaded.scales.size() == bank.scales.size());
    CHECK((loaded.fused.cast<float>() - bank.fused.cast<float>()).cwiseAbs().maxCoeff() == 0.0f);
    CHECK((loaded.cloud.points.cast<float>() - bank.cloud.points.cast<float>())
              .cwiseAbs()
              .maxCoeff() == 0.0f);
    std::filesystem::remove(path);
}
