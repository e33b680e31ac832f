#pragma once

#include "rendermatch/alignment.hpp"
#include "rendermatch/featurizer.hpp"
#include "rendermatch/geometry.hpp"
#include "rendermatch/renderer.hpp"

#include <span>
#include <string>
#include <vector>

namespace rmatch {

/// Angle intervals for the pose grid. Azimuth always covers the full
/// circle; elevation and in-plane rotation use bin centers of these ranges.
struct GridRanges {
    double elev_min = -M_PI / 6.0;   // -30 deg
    double elev_max = M_PI / 3.0;    //  60 deg
    double theta_min = -M_PI / 4.0;  // -45 deg
    double theta_max = M_PI / 4.0;   //  45 deg
};

struct PoseGrid {
    std::vector<double> elevs;
    std::vector<double> azims;
    std::vector<double> thetas;
    std::vector<Pose> poses;  // size N_e * N_a * N_theta, (e, a, theta) nesting
};

struct Candidate {
    std::string shape_id;
    Pose pose;
    double score = kWorstScore;
};

struct AdamWConfig {
    double lr = 0.01;
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int steps = 50;
};

struct AdamWState {
    std::vector<double> m;
    std::vector<double> v;
    long t = 0;

    explicit AdamWState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

struct RetrievalResult {
    std::vector<Candidate> ranked;           // best first
    Pose top1_pose;
    std::string predicted_category;
    std::vector<Candidate> initial_ranking;  // diagnostics: stage scores
    std::vector<Candidate> refined_ranking;
};

/// Cartesian product of bin-center samples: azimuth over the full circle,
/// elevation and theta over the configured ranges.
PoseGrid build_pose_grid(int n_elev, int n_azim, int n_theta, const GridRanges& ranges = {},
                         double dist = 2.5);

/// Scores every (bank, grid pose) pair and keeps each bank's best pose.
/// Output is sorted ascending by score with ties broken by shape_id.
/// Renders with an empty foreground score kWorstScore.
std::vector<Candidate> initial_search(const std::vector<double>& query_data,
                                      std::span<const FeatureBank> banks, const PoseGrid& grid,
                                      const Camera& cam, const SplatConfig& cfg);

/// Batch variant: renders each (bank, pose) once and scores it against all
/// queries. Produces exactly the same candidates as per-query
/// initial_search.
std::vector<std::vector<Candidate>> initial_search_batch(
    const std::vector<const std::vector<double>*>& queries, std::span<const FeatureBank> banks,
    const PoseGrid& grid, const Camera& cam, const SplatConfig& cfg);

/// One decoupled-weight-decay Adam update; params and grad must match the
/// state's size.
void adamw_step(AdamWState& state, std::span<double> params, std::span<const double> grad,
                const AdamWConfig& cfg);

/// AdamW test-time refinement of (elev, azim, theta) from pose0 with
/// finite-difference gradients. Tracks and returns the best (pose, loss)
/// seen, including pose0 itself; elevation is clamped and azimuth/theta
/// wrapped after every step.
std::pair<Pose, double> refine_pose(const FeatureBank& bank, const std::vector<double>& query_data,
                                    const Pose& pose0, const Camera& cam, const SplatConfig& cfg,
                                    const AdamWConfig& opt, double fd_h);

/// Full two-stage retrieval: initial grid search, AdamW refinement of the
/// top_k candidates, re-ranking by refined score. Throws on an empty
/// database.
RetrievalResult retrieve(const std::vector<double>& query_data, std::span<const FeatureBank> banks,
                         const PoseGrid& grid, const Camera& cam, const SplatConfig& cfg,
                         const AdamWConfig& opt, int top_k, double fd_h = 0.5 * M_PI / 180.0);

/// Variant reusing precomputed initial candidates (the refinement stage is
/// identical to retrieve's).
RetrievalResult retrieve_from_initial(const std::vector<double>& query_data,
                                      std::span<const FeatureBank> banks,
                                      const std::vector<Candidate>& initial, const Camera& cam,
                                      const SplatConfig& cfg, const AdamWConfig& opt, int top_k,
                                      double fd_h = 0.5 * M_PI / 180.0);

}  // namespace rmatch
