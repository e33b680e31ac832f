#include "rendermatch/featurizer.hpp"

#include "rendermatch/alignment.hpp"
#include "rendermatch/rng.hpp"

#include "binary_io.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace rmatch {

void knn(const Vec3& query, const MatX3& points, int k, std::vector<int>& indices,
         std::vector<double>& sq_dists) {
    const int n = static_cast<int>(points.rows());
    if (k < 1 || k > n) throw std::invalid_argument("knn: need 1 <= k <= point count");

    indices.clear();
    sq_dists.clear();
    indices.reserve(k);
    sq_dists.reserve(k);

    // Linear scan with an insertion-sorted best-k list; ties keep the
    // lowest index because candidates arrive in index order.
    for (int i = 0; i < n; ++i) {
        const double d = (points.row(i).transpose() - query).squaredNorm();
        if (static_cast<int>(indices.size()) == k && d >= sq_dists.back()) continue;
        int pos = static_cast<int>(indices.size());
        if (pos < k) {
            indices.push_back(i);
            sq_dists.push_back(d);
        } else {
            --pos;
        }
        while (pos > 0 && sq_dists[pos - 1] > d) {
            sq_dists[pos] = sq_dists[pos - 1];
            indices[pos] = indices[pos - 1];
            --pos;
        }
        sq_dists[pos] = d;
        indices[pos] = i;
    }
}

std::vector<double> interp_weights(const std::vector<double>& sq_dists, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("interp_weights: tau must be positive");
    std::vector<double> w(sq_dists.size());
    double hi = -std::numeric_limits<double>::infinity();
    for (const double d : sq_dists) hi = std::max(hi, -d / tau);
    double sum = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = std::exp(-sq_dists[i] / tau - hi);
        sum += w[i];
    }
    for (double& x : w) x /= sum;
    return w;
}

InterpWeights compute_interp_weights(const PointCloud& cloud, const ScaleLevel& scale, int k,
                                     double tau) {
    const int c = cloud.size();
    InterpWeights out;
    out.indices.resize(c, k);
    out.weights.resize(c, k);

    std::vector<int> idx;
    std::vector<double> d2;
    for (int i = 0; i < c; ++i) {
        knn(cloud.points.row(i).transpose(), scale.points, k, idx, d2);
        const std::vector<double> w = interp_weights(d2, tau);
        for (int j = 0; j < k; ++j) {
            out.indices(i, j) = idx[j];
            out.weights(i, j) = w[j];
        }
    }
    return out;
}

MatXd interpolate_scale(const PointCloud& cloud, const ScaleLevel& scale, int k, double tau) {
    const InterpWeights iw = compute_interp_weights(cloud, scale, k, tau);
    const int c = cloud.size();
    const int d = static_cast<int>(scale.feats.cols());
    MatXd out = MatXd::Zero(c, d);
    for (int i = 0; i < c; ++i) {
        for (int j = 0; j < k; ++j) {
            out.row(i) += iw.weights(i, j) * scale.feats.row(iw.indices(i, j));
        }
    }
    return out;
}

MatXd synth_descriptor(const MatX3& scale_points, const PointCloud& parent, int dim,
                       std::uint64_t seed) {
    if (dim < 8) throw std::invalid_argument("synth_descriptor: dim must be >= 8");
    const int n = static_cast<int>(scale_points.rows());
    MatXd out = MatXd::Zero(n, dim);

    // Seeded sinusoidal projections fill everything past the 7 geometric
    // channels. Directions/frequencies depend only on the seed so that two
    // identical clouds with the same seed yield identical descriptors.
    const int n_sin = dim - 7;
    Rng rng(mix_seed(seed, "sinusoid"));
    MatX3 dirs(n_sin, 3);
    std::vector<double> freqs(n_sin), phases(n_sin);
    for (int j = 0; j < n_sin; ++j) {
        Vec3 dir(rng.normal(), rng.normal(), rng.normal());
        const double len = dir.norm();
        if (len > 0.0) {
            dir /= len;
        } else {
            dir = Vec3::UnitX();
        }
        dirs.row(j) = dir.transpose();
        freqs[j] = rng.uniform(M_PI, 4.0 * M_PI);
        phases[j] = rng.uniform(0.0, 2.0 * M_PI);
    }

    const double r2 = kDescriptorRadius * kDescriptorRadius;
    std::vector<Vec3> nbrs;
    for (int i = 0; i < n; ++i) {
        const Vec3 p = scale_points.row(i).transpose();
        out(i, 0) = p.x();
        out(i, 1) = p.y();
        out(i, 2) = p.z();
        out(i, 3) = p.norm();

        // Covariance eigenvalues over the fixed-radius neighborhood in the
        // parent cloud; fewer than 3 neighbors leave the channels at zero.
        nbrs.clear();
        for (int q = 0; q < parent.size(); ++q) {
            const Vec3 pq = parent.points.row(q).transpose();
            if ((pq - p).squaredNorm() <= r2) nbrs.push_back(pq);
        }
        if (nbrs.size() >= 3) {
            Vec3 mean = Vec3::Zero();
            for (const Vec3& q : nbrs) mean += q;
            mean /= static_cast<double>(nbrs.size());
            Mat3 cov = Mat3::Zero();
            for (const Vec3& q : nbrs) cov += (q - mean) * (q - mean).transpose();
            cov /= static_cast<double>(nbrs.size());
            Eigen::SelfAdjointEigenSolver<Mat3> solver(cov);
            for (int c = 0; c < 3; ++c) out(i, 4 + c) = solver.eigenvalues()[c] / r2;
        }

        for (int j = 0; j < n_sin; ++j) {
            out(i, 7 + j) = std::sin(freqs[j] * dirs.row(j).dot(p) + phases[j]);
        }
    }
    return out;
}

ProjectionHead ProjectionHead::seeded(int out_dim, int in_dim, std::uint64_t seed) {
    ProjectionHead head;
    head.weight.resize(out_dim, in_dim);
    Rng rng(seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (int i = 0; i < out_dim; ++i)
        for (int j = 0; j < in_dim; ++j) head.weight(i, j) = scale * rng.normal();
    return head;
}

MatXd ProjectionHead::apply(const MatXd& concat) const {
    if (concat.cols() != weight.cols()) {
        throw std::invalid_argument("projection head: input dim mismatch");
    }
    MatXd out = concat * weight.transpose();
    const int d = out_dim();
    for (int i = 0; i < out.rows(); ++i) {
        const double mean = out.row(i).mean();
        out.row(i).array() -= mean;
        const double var = out.row(i).squaredNorm() / d;
        if (var > 1e-24) out.row(i) /= std::sqrt(var);
        const double norm = out.row(i).norm();
        if (norm > 1e-12) {
            out.row(i) /= norm;
        } else {
            out.row(i).setZero();
            out(i, 0) = 1.0;
        }
    }
    return out;
}

FeatureBank build_bank(const PointCloud& cloud, const std::vector<std::pair<int, int>>& scale_spec,
                       const ProjectionHead& head, int k, double tau, std::uint64_t seed) {
    if (scale_spec.empty()) throw std::invalid_argument("build_bank: empty scale spec");
    int dim_sum = 0;
    for (std::size_t s = 0; s < scale_spec.size(); ++s) {
        if (s > 0 && scale_spec[s].first >= scale_spec[s - 1].first) {
            throw std::invalid_argument("build_bank: scale sizes must strictly decrease");
        }
        if (scale_spec[s].first < k) {
            throw std::invalid_argument("build_bank: scale smaller than k");
        }
        dim_sum += scale_spec[s].second;
    }
    if (dim_sum != head.in_dim()) {
        throw std::invalid_argument("build_bank: scale dims do not match head input");
    }

    FeatureBank bank;
    bank.cloud = cloud;
    bank.scales.reserve(scale_spec.size());

    MatXd concat(cloud.size(), dim_sum);
    int col = 0;
    for (std::size_t s = 0; s < scale_spec.size(); ++s) {
        const auto [ns, ds] = scale_spec[s];
        const std::vector<int> picked =
            farthest_point_sample(cloud, ns, mix_seed(seed, mix_seed(s, "fps")));
        ScaleLevel level;
        level.points.resize(ns, 3);
        for (int i = 0; i < ns; ++i) level.points.row(i) = cloud.points.row(picked[i]);
        level.feats = synth_descriptor(level.points, cloud, ds, mix_seed(seed, mix_seed(s, "desc")));
        concat.middleCols(col, ds) = interpolate_scale(cloud, level, k, tau);
        col += ds;
        bank.scales.push_back(std::move(level));
    }

    bank.fused = head.apply(concat);
    return bank;
}

// --- Distillation -----------------------------------------------------------

double distill_loss_and_gradient(const FeatureBank& bank, const DistillTarget& target,
                                 const Camera& cam, const SplatConfig& cfg, MatXd* grad) {
    const RasterFragments frags = rasterize(bank.cloud, target.pose, cam, cfg);
    const FeatureMap rendered = composite(frags, bank.fused, cfg);

    const int d = rendered.depth;
    if (target.map.data.size() != rendered.data.size()) {
        throw std::invalid_argument("distill target map shape mismatch");
    }

    int fg = 0;
    for (const std::uint8_t m : rendered.mask) fg += m != 0;
    if (fg == 0) throw std::runtime_error("no foreground: rendered mask is empty");

    double loss = 0.0;
    std::vector<double> residual(grad ? rendered.data.size() : 0, 0.0);
    for (int y = 0; y < rendered.height; ++y) {
        for (int x = 0; x < rendered.width; ++x) {
            if (!rendered.masked(y, x)) continue;
            const double* q = &target.map.data[(static_cast<std::size_t>(y) * rendered.width + x) * d];
            const double* p = rendered.pixel(y, x);
            double qq = 0.0, pp = 0.0, qp = 0.0;
            for (int c = 0; c < d; ++c) {
                qq += q[c] * q[c];
                pp += p[c] * p[c];
                qp += q[c] * p[c];
            }
            const double nq = std::sqrt(qq), np = std::sqrt(pp);
            if (nq == 0.0 || np == 0.0) {
                loss += 1.0;  // cosine treated as 0; gradient contribution 0
                continue;
            }
            const double cosv = std::clamp(qp / (nq * np), -1.0, 1.0);
            loss += 1.0 - cosv;
            if (grad) {
                // d(1 - cos)/dp = -(q / (|q||p|) - cos * p / |p|^2)
                double* res = &residual[(static_cast<std::size_t>(y) * rendered.width + x) * d];
                const double inv_qp = 1.0 / (nq * np);
                const double inv_pp = cosv / pp;
                for (int c = 0; c < d; ++c) res[c] = -(q[c] * inv_qp - p[c] * inv_pp) / fg;
            }
        }
    }
    loss /= fg;

    if (grad) {
        *grad = feature_gradient(frags, residual, rendered.mask,
                                 static_cast<int>(bank.fused.rows()), d, cfg);
    }
    return loss;
}

namespace {

double mean_distill_loss(const FeatureBank& bank, const std::vector<DistillTarget>& targets,
                         const Camera& cam, const SplatConfig& cfg, MatXd* grad) {
    double loss = 0.0;
    if (grad) grad->setZero();
    MatXd g;
    for (const DistillTarget& t : targets) {
        loss += distill_loss_and_gradient(bank, t, cam, cfg, grad ? &g : nullptr);
        if (grad) *grad += g;
    }
    const double inv = 1.0 / static_cast<double>(targets.size());
    if (grad) *grad *= inv;
    return loss * inv;
}

void renormalize_rows(MatXd& m) {
    for (int i = 0; i < m.rows(); ++i) {
        const double norm = m.row(i).norm();
        if (norm > 1e-12) {
            m.row(i) /= norm;
        } else {
            m.row(i).setZero();
            m(i, 0) = 1.0;
        }
    }
}

}  // namespace

FeatureBank distill_bank(const FeatureBank& bank, const std::vector<DistillTarget>& targets,
                         int iters, double lr, const Camera& cam, const SplatConfig& cfg,
                         std::vector<double>* loss_history) {
    if (targets.empty()) throw std::invalid_argument("distill_bank: no targets");

    FeatureBank out = bank;
    MatXd grad = MatXd::Zero(out.fused.rows(), out.fused.cols());
    double step = lr;

    double loss = mean_distill_loss(out, targets, cam, cfg, &grad);
    if (loss_history) loss_history->push_back(loss);

    for (int it = 0; it < iters; ++it) {
        MatXd proposal;
        double new_loss = 0.0;
        // Halve the step until the proposal stops increasing the objective
        // (bounded retries; at vanishing step the proposal converges to the
        // current iterate).
        for (int attempt = 0;; ++attempt) {
            proposal = out.fused - step * grad;
            renormalize_rows(proposal);
            FeatureBank trial = out;
            trial.fused = proposal;
            new_loss = mean_distill_loss(trial, targets, cam, cfg, nullptr);
            if (new_loss <= loss || attempt >= 60) break;
            step *= 0.5;
        }
        out.fused = std::move(proposal);
        loss = new_loss;
        if (loss_history) loss_history->push_back(loss);
        if (it + 1 < iters) {
            loss = mean_distill_loss(out, targets, cam, cfg, &grad);
        }
    }
    return out;
}

// --- Bank I/O -----------------------------------------------------------------

using detail::get_f32;
using detail::get_string;
using detail::get_u32;
using detail::put_f32;
using detail::put_string;
using detail::put_u32;

namespace {

template <typename Mat>
void put_mat_f32(std::ostream& out, const Mat& m) {
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j) put_f32(out, static_cast<float>(m(i, j)));
}

template <typename Mat>
void get_mat_f32(std::istream& in, Mat& m) {
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j) m(i, j) = get_f32(in);
}

}  // namespace

void save_bank(const FeatureBank& bank, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write bank file: " + path);
    out.write("FBNK", 4);
    put_u32(out, 1);
    put_string(out, bank.shape_id);
    put_string(out, bank.category);
    put_u32(out, static_cast<std::uint32_t>(bank.cloud.size()));
    put_u32(out, static_cast<std::uint32_t>(bank.fused.cols()));
    put_u32(out, static_cast<std::uint32_t>(bank.scales.size()));
    for (int i = 0; i < bank.cloud.size(); ++i)
        for (int c = 0; c < 3; ++c) put_f32(out, static_cast<float>(bank.cloud.points(i, c)));
    for (const ScaleLevel& s : bank.scales) {
        put_u32(out, static_cast<std::uint32_t>(s.points.rows()));
        put_u32(out, static_cast<std::uint32_t>(s.feats.cols()));
        put_mat_f32(out, s.points);
        put_mat_f32(out, s.feats);
    }
    put_mat_f32(out, bank.fused);
    if (!out) throw std::runtime_error("write failed: " + path);
}

FeatureBank load_bank(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open bank file: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::strncmp(magic, "FBNK", 4) != 0) {
        throw std::runtime_error("not an FBNK file: " + path);
    }
    const std::uint32_t version = get_u32(in);
    if (version != 1) throw std::runtime_error("unsupported FBNK version in " + path);

    FeatureBank bank;
    bank.shape_id = get_string(in);
    bank.category = get_string(in);
    const std::uint32_t c = get_u32(in);
    const std::uint32_t d = get_u32(in);
    const std::uint32_t n_scales = get_u32(in);

    bank.cloud.points.resize(c, 3);
    for (std::uint32_t i = 0; i < c; ++i)
        for (int j = 0; j < 3; ++j) bank.cloud.points(i, j) = get_f32(in);

    bank.scales.resize(n_scales);
    for (std::uint32_t s = 0; s < n_scales; ++s) {
        const std::uint32_t ns = get_u32(in);
        const std::uint32_t ds = get_u32(in);
        bank.scales[s].points.resize(ns, 3);
        bank.scales[s].feats.resize(ns, ds);
        get_mat_f32(in, bank.scales[s].points);
        get_mat_f32(in, bank.scales[s].feats);
    }

    bank.fused.resize(c, d);
    get_mat_f32(in, bank.fused);
    if (!in) throw std::runtime_error("truncated FBNK file: " + path);
    return bank;
}

}  // namespace rmatch
