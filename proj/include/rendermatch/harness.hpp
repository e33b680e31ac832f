#pragma once

#include "rendermatch/featurizer.hpp"
#include "rendermatch/geometry.hpp"
#include "rendermatch/renderer.hpp"
#include "rendermatch/retrieval.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rmatch {

/// Configuration / flag errors (CLI exit code 2), as opposed to data
/// errors which surface as std::runtime_error (exit code 3).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Flat key-value configuration covering every tunable default. Every key
/// can be overridden by a CLI flag of the same name.
struct Config {
    // dataset
    std::uint64_t seed = 42;
    std::vector<std::string> categories = {"box-furniture", "tables", "chairs-like", "winged"};
    int shapes_per_category = 5;

    // featurizer
    int n_points = 4096;
    std::vector<int> scale_sizes = {1024, 256, 64};
    std::vector<int> scale_dims = {32, 32, 32};
    int feat_dim = 64;
    int knn_k = 3;
    double tau = 0.05;

    // renderer / camera
    double radius = 0.04;
    int points_per_pixel = 16;
    int map_size = 37;
    double epsilon = 1e-10;
    double dist = 2.5;

    // pose grid
    int grid_elevs = 4;
    int grid_azims = 12;
    int grid_thetas = 4;
    double elev_min_deg = -30.0;
    double elev_max_deg = 60.0;
    double theta_min_deg = -45.0;
    double theta_max_deg = 45.0;

    // test-time optimization
    double lr = 0.01;
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int steps = 50;
    int top_k = 5;
    double fd_step_deg = 0.5;

    // queries
    double noise_sigma = 0.05;
    int queries_per_category = 25;
    std::vector<std::string> levels = {"L0", "L1", "L2", "L3"};

    // output
    bool heatmaps = false;
    std::string out_dir = "out";

    static Config from_json_file(const std::string& path);
    static Config from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    void validate_or_throw() const;

    Camera camera() const;
    SplatConfig splat() const;
    GridRanges grid_ranges() const;
    PoseGrid grid() const;
    AdamWConfig adamw() const;
    std::vector<std::pair<int, int>> scale_spec() const;
    double fd_h() const;
};

// --- Dataset -----------------------------------------------------------------

struct ManifestEntry {
    std::string shape_id;
    std::string category;
    std::string mesh_path;  // relative to the manifest's directory
    std::uint64_t seed = 0;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    std::uint64_t global_seed = 0;
    nlohmann::json config_snapshot;

    void save(const std::string& path) const;
    static DatasetManifest load(const std::string& path);
};

/// Parametric triangle mesh for one category instance; dimensions and part
/// layout vary with the seed.
TriMesh generate_category_mesh(const std::string& category, std::uint64_t seed);

/// Generates per-category meshes, writes them as OBJ files under out_dir,
/// and returns the manifest (also written as manifest.json).
DatasetManifest generate_shapes(std::uint64_t seed, const std::vector<std::string>& categories,
                                int per_category, const std::string& out_dir,
                                const nlohmann::json& config_snapshot);

/// Seed used for a category instance; shared between generate_shapes and
/// in-memory database construction.
std::uint64_t shape_seed(std::uint64_t global_seed, const std::string& category, int instance);

/// Builds the bank for one shape with the database-wide head and seeds.
FeatureBank build_shape_bank(const Config& cfg, const TriMesh& mesh, const std::string& shape_id,
                             const std::string& category);

/// Database-wide projection head (shared across shapes so features are
/// comparable).
ProjectionHead database_head(const Config& cfg);

/// Procedurally builds the full bank database in memory (same banks that
/// `gen` + `featurize` produce via files).
std::vector<FeatureBank> build_database(const Config& cfg);

// --- Queries & occlusion --------------------------------------------------------

enum class OcclusionLevel { L0, L1, L2, L3 };

OcclusionLevel occlusion_level_from_string(const std::string& s);
std::string occlusion_level_to_string(OcclusionLevel level);
/// Target fraction range of occluded object pixels for a level.
std::pair<double, double> occlusion_range(OcclusionLevel level);

/// Places seeded random rectangles over the map until the covered fraction
/// of object pixels first enters the level's range, shrinking the final
/// rectangle on overshoot. Covered pixels (object and background alike) are
/// replaced by seeded random unit vectors. Returns the achieved fraction.
/// Throws when the object mask is empty.
double apply_occlusion(std::vector<double>& data, int depth, int height, int width,
                       const std::vector<std::uint8_t>& object_mask, OcclusionLevel level,
                       std::uint64_t seed);

/// Retriever-facing query: the feature data only; mask and pose are kept
/// for evaluation bookkeeping.
struct QueryRecord {
    std::string query_id;
    std::string gt_shape_id;
    std::string gt_category;
    Pose gt_pose;
    OcclusionLevel level = OcclusionLevel::L0;
    int depth = 0;
    int height = 0;
    int width = 0;
    std::vector<double> data;  // (y, x, d) layout, matches FeatureMap
    double occlusion_fraction = 0.0;
};

/// Renders the ground-truth bank at `pose`, adds per-pixel Gaussian feature
/// noise (re-normalizing each pixel vector), then applies occlusion.
QueryRecord make_query(const FeatureBank& bank, const Pose& pose, OcclusionLevel level,
                       double noise_sigma, std::uint64_t seed, const Camera& cam,
                       const SplatConfig& cfg);

/// Deterministic query set for one occlusion level. The pose/noise seeds
/// depend only on the query index, so levels differ purely in occlusion.
std::vector<QueryRecord> generate_queries(const Config& cfg, const std::vector<FeatureBank>& banks,
                                          OcclusionLevel level);

// --- Metrics --------------------------------------------------------------------

struct EvalItem {
    const QueryRecord* query = nullptr;
    const RetrievalResult* result = nullptr;
};

struct QueryOutcome {
    std::string query_id;
    std::string gt_category;
    bool top1 = false;
    bool top5 = false;
    bool cls = false;
    double pose_err_deg = 0.0;
};

struct MetricsBucket {
    int n = 0;
    double top1 = 0.0;
    double top5 = 0.0;
    double acc_pi_6 = 0.0;
    double acc_pi_18 = 0.0;
    double med_err_deg = 0.0;
    double cls_top1 = 0.0;
};

struct MetricsReport {
    MetricsBucket overall;
    std::map<std::string, MetricsBucket> per_category;

    nlohmann::json to_json() const;
};

/// Per-query outcomes: retrieval hits by ranked-prefix membership and the
/// top-1 pose's geodesic error against the ground truth (computed whether
/// or not the retrieved shape is correct).
std::vector<QueryOutcome> evaluate_rows(const std::vector<EvalItem>& items);

MetricsReport evaluate(const std::vector<EvalItem>& items);

// --- Experiment -------------------------------------------------------------------

struct SuiteRun {
    std::vector<RetrievalResult> results;
    double initial_search_seconds = 0.0;
    double refine_seconds = 0.0;
};

/// Batch initial search plus refinement for a query set. steps_override < 0
/// keeps cfg.steps.
SuiteRun run_suite(const Config& cfg, const std::vector<FeatureBank>& banks,
                   const std::vector<QueryRecord>& queries, int steps_override = -1);

/// Full orchestration: builds the database, generates queries for every
/// configured level, retrieves, evaluates, and writes report.json (plus
/// optional heatmaps) under cfg.out_dir. Returns the report.
nlohmann::json run_experiment(const Config& cfg);
nlohmann::json run_experiment_file(const std::string& config_path);

}  // namespace rmatch
