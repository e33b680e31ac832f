#include "rendermatch/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace rmatch {

PoseGrid build_pose_grid(int n_elev, int n_azim, int n_theta, const GridRanges& ranges,
                         double dist) {
    if (n_elev < 1 || n_azim < 1 || n_theta < 1) {
        throw std::invalid_argument("build_pose_grid: counts must be >= 1");
    }
    PoseGrid grid;
    grid.elevs.resize(n_elev);
    grid.azims.resize(n_azim);
    grid.thetas.resize(n_theta);
    for (int i = 0; i < n_elev; ++i) {
        grid.elevs[i] = ranges.elev_min + (i + 0.5) * (ranges.elev_max - ranges.elev_min) / n_elev;
    }
    for (int i = 0; i < n_azim; ++i) {
        grid.azims[i] = (i + 0.5) * 2.0 * M_PI / n_azim;
    }
    for (int i = 0; i < n_theta; ++i) {
        grid.thetas[i] = ranges.theta_min + (i + 0.5) * (ranges.theta_max - ranges.theta_min) / n_theta;
    }
    grid.poses.reserve(static_cast<std::size_t>(n_elev) * n_azim * n_theta);
    for (const double e : grid.elevs) {
        for (const double a : grid.azims) {
            for (const double t : grid.thetas) {
                grid.poses.push_back(Pose{e, a, t, dist}.normalized());
            }
        }
    }
    return grid;
}

namespace {

void sort_candidates(std::vector<Candidate>& cands) {
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
        if (a.score != b.score) return a.score < b.score;
        return a.shape_id < b.shape_id;
    });
}

}  // namespace

std::vector<Candidate> initial_search(const std::vector<double>& query_data,
                                      std::span<const FeatureBank> banks, const PoseGrid& grid,
                                      const Camera& cam, const SplatConfig& cfg) {
    std::vector<const std::vector<double>*> one{&query_data};
    return initial_search_batch(one, banks, grid, cam, cfg).front();
}

std::vector<std::vector<Candidate>> initial_search_batch(
    const std::vector<const std::vector<double>*>& queries, std::span<const FeatureBank> banks,
    const PoseGrid& grid, const Camera& cam, const SplatConfig& cfg) {
    if (banks.empty()) throw std::runtime_error("initial_search: empty database");
    if (grid.poses.empty()) throw std::invalid_argument("initial_search: empty pose grid");

    const std::size_t nq = queries.size();
    const std::size_t nb = banks.size();
    std::vector<double> best(nq * nb, std::numeric_limits<double>::infinity());
    std::vector<int> best_pose(nq * nb, 0);

    // Each (bank, pose) pair is rendered once and scored against every
    // query; results match the per-query search exactly.
    FeatureMap map;
    for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t pi = 0; pi < grid.poses.size(); ++pi) {
            render_features_into(map, banks[b], grid.poses[pi], cam, cfg);
            bool any = false;
            for (const std::uint8_t m : map.mask) {
                if (m) {
                    any = true;
                    break;
                }
            }
            for (std::size_t q = 0; q < nq; ++q) {
                const double score = any ? align_loss(*queries[q], map).loss : kWorstScore;
                const std::size_t slot = q * nb + b;
                if (score < best[slot]) {
                    best[slot] = score;
                    best_pose[slot] = static_cast<int>(pi);
                }
            }
        }
    }

    std::vector<std::vector<Candidate>> out(nq);
    for (std::size_t q = 0; q < nq; ++q) {
        out[q].reserve(nb);
        for (std::size_t b = 0; b < nb; ++b) {
            const std::size_t slot = q * nb + b;
            out[q].push_back(Candidate{banks[b].shape_id, grid.poses[best_pose[slot]], best[slot]});
        }
        sort_candidates(out[q]);
    }
    return out;
}

void adamw_step(AdamWState& state, std::span<double> params, std::span<const double> grad,
                const AdamWConfig& cfg) {
    if (params.size() != state.m.size() || grad.size() != state.m.size()) {
        throw std::invalid_argument("adamw_step: size mismatch");
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        const double m_hat = state.m[i] / bc1;
        const double v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * (m_hat / (std::sqrt(v_hat) + cfg.eps)) +
                     cfg.lr * cfg.weight_decay * params[i];
    }
}

std::pair<Pose, double> refine_pose(const FeatureBank& bank, const std::vector<double>& query_data,
                                    const Pose& pose0, const Camera& cam, const SplatConfig& cfg,
                                    const AdamWConfig& opt, double fd_h) {
    FeatureMap scratch;
    Pose best_pose = pose0;
    double best_loss = score_pose(bank, query_data, pose0, cam, cfg, scratch);

    Pose current = pose0;
    AdamWState state(3);
    for (int step = 0; step < opt.steps; ++step) {
        const PoseGradient g = pose_gradient_fd(bank, query_data, current, cam, cfg, fd_h);
        double params[3] = {current.elev, current.azim, current.theta};
        const double grad[3] = {g.d_elev, g.d_azim, g.d_theta};
        adamw_step(state, params, grad, opt);
        current.elev = std::clamp(params[0], -M_PI / 2.0, M_PI / 2.0);
        current.azim = wrap_two_pi(params[1]);
        current.theta = wrap_pi(params[2]);

        const double loss = score_pose(bank, query_data, current, cam, cfg, scratch);
        if (loss < best_loss) {
            best_loss = loss;
            best_pose = current;
        }
    }
    return {best_pose, best_loss};
}

RetrievalResult retrieve(const std::vector<double>& query_data, std::span<const FeatureBank> banks,
                         const PoseGrid& grid, const Camera& cam, const SplatConfig& cfg,
                         const AdamWConfig& opt, int top_k, double fd_h) {
    const std::vector<Candidate> initial = initial_search(query_data, banks, grid, cam, cfg);
    return retrieve_from_initial(query_data, banks, initial, cam, cfg, opt, top_k, fd_h);
}

RetrievalResult retrieve_from_initial(const std::vector<double>& query_data,
                                      std::span<const FeatureBank> banks,
                                      const std::vector<Candidate>& initial, const Camera& cam,
                                      const SplatConfig& cfg, const AdamWConfig& opt, int top_k,
                                      double fd_h) {
    if (banks.empty() || initial.empty()) throw std::runtime_error("retrieve: empty database");
    if (top_k < 1) throw std::invalid_argument("retrieve: top_k must be >= 1");

    RetrievalResult result;
    result.initial_ranking = initial;

    const int k = std::min<int>(top_k, static_cast<int>(initial.size()));
    std::vector<Candidate> refined;
    refined.reserve(k);
    for (int i = 0; i < k; ++i) {
        const Candidate& cand = initial[i];
        const FeatureBank* bank = nullptr;
        for (const FeatureBank& b : banks) {
            if (b.shape_id == cand.shape_id) {
                bank = &b;
                break;
            }
        }
        if (!bank) throw std::runtime_error("retrieve: candidate bank missing: " + cand.shape_id);
        const auto [pose, loss] = refine_pose(*bank, query_data, cand.pose, cam, cfg, opt, fd_h);
        refined.push_back(Candidate{cand.shape_id, pose, loss});
    }
    sort_candidates(refined);
    result.refined_ranking = refined;

    result.ranked = refined;
    result.ranked.insert(result.ranked.end(), initial.begin() + k, initial.end());
    result.top1_pose = result.ranked.front().pose;

    for (const FeatureBank& b : banks) {
        if (b.shape_id == result.ranked.front().shape_id) {
            result.predicted_category = b.category;
            break;
        }
    }
    return result;
}

}  // namespace rmatch
