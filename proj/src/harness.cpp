#include "rendermatch/harness.hpp"
#include "rendermatch/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

namespace rmatch {

namespace fs = std::filesystem;
using nlohmann::json;

// --- Config ---------------------------------------------------------------------

namespace {

double deg2rad(double deg) { return deg * M_PI / 180.0; }

template <typename T>
void read_key(const json& j, const char* key, T& value) {
    if (!j.contains(key)) return;
    try {
        value = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad value for config key '") + key + "': " + e.what());
    }
}

const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "seed",          "categories",        "shapes_per_category",
        "n_points",      "scale_sizes",       "scale_dims",
        "feat_dim",      "knn_k",             "tau",
        "radius",        "points_per_pixel",  "map_size",
        "epsilon",       "dist",              "grid_elevs",
        "grid_azims",    "grid_thetas",       "elev_min_deg",
        "elev_max_deg",  "theta_min_deg",     "theta_max_deg",
        "lr",            "weight_decay",      "beta1",
        "beta2",         "adam_eps",          "steps",
        "top_k",         "fd_step_deg",       "noise_sigma",
        "queries_per_category",               "levels",
        "heatmaps",      "out_dir",
    };
    return keys;
}

}  // namespace

Config Config::from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    for (const auto& item : j.items()) {
        if (!known_keys().count(item.key())) {
            throw ConfigError("unknown config key: " + item.key());
        }
    }
    Config cfg;
    read_key(j, "seed", cfg.seed);
    read_key(j, "categories", cfg.categories);
    read_key(j, "shapes_per_category", cfg.shapes_per_category);
    read_key(j, "n_points", cfg.n_points);
    read_key(j, "scale_sizes", cfg.scale_sizes);
    read_key(j, "scale_dims", cfg.scale_dims);
    read_key(j, "feat_dim", cfg.feat_dim);
    read_key(j, "knn_k", cfg.knn_k);
    read_key(j, "tau", cfg.tau);
    read_key(j, "radius", cfg.radius);
    read_key(j, "points_per_pixel", cfg.points_per_pixel);
    read_key(j, "map_size", cfg.map_size);
    read_key(j, "epsilon", cfg.epsilon);
    read_key(j, "dist", cfg.dist);
    read_key(j, "grid_elevs", cfg.grid_elevs);
    read_key(j, "grid_azims", cfg.grid_azims);
    read_key(j, "grid_thetas", cfg.grid_thetas);
    read_key(j, "elev_min_deg", cfg.elev_min_deg);
    read_key(j, "elev_max_deg", cfg.elev_max_deg);
    read_key(j, "theta_min_deg", cfg.theta_min_deg);
    read_key(j, "theta_max_deg", cfg.theta_max_deg);
    read_key(j, "lr", cfg.lr);
    read_key(j, "weight_decay", cfg.weight_decay);
    read_key(j, "beta1", cfg.beta1);
    read_key(j, "beta2", cfg.beta2);
    read_key(j, "adam_eps", cfg.adam_eps);
    read_key(j, "steps", cfg.steps);
    read_key(j, "top_k", cfg.top_k);
    read_key(j, "fd_step_deg", cfg.fd_step_deg);
    read_key(j, "noise_sigma", cfg.noise_sigma);
    read_key(j, "queries_per_category", cfg.queries_per_category);
    read_key(j, "levels", cfg.levels);
    read_key(j, "heatmaps", cfg.heatmaps);
    read_key(j, "out_dir", cfg.out_dir);
    cfg.validate_or_throw();
    return cfg;
}

Config Config::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("bad config JSON in " + path + ": " + e.what());
    }
    return from_json(j);
}

json Config::to_json() const {
    json j;
    j["seed"] = seed;
    j["categories"] = categories;
    j["shapes_per_category"] = shapes_per_category;
    j["n_points"] = n_points;
    j["scale_sizes"] = scale_sizes;
    j["scale_dims"] = scale_dims;
    j["feat_dim"] = feat_dim;
    j["knn_k"] = knn_k;
    j["tau"] = tau;
    j["radius"] = radius;
    j["points_per_pixel"] = points_per_pixel;
    j["map_size"] = map_size;
    j["epsilon"] = epsilon;
    j["dist"] = dist;
    j["grid_elevs"] = grid_elevs;
    j["grid_azims"] = grid_azims;
    j["grid_thetas"] = grid_thetas;
    j["elev_min_deg"] = elev_min_deg;
    j["elev_max_deg"] = elev_max_deg;
    j["theta_min_deg"] = theta_min_deg;
    j["theta_max_deg"] = theta_max_deg;
    j["lr"] = lr;
    j["weight_decay"] = weight_decay;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["adam_eps"] = adam_eps;
    j["steps"] = steps;
    j["top_k"] = top_k;
    j["fd_step_deg"] = fd_step_deg;
    j["noise_sigma"] = noise_sigma;
    j["queries_per_category"] = queries_per_category;
    j["levels"] = levels;
    j["heatmaps"] = heatmaps;
    j["out_dir"] = out_dir;
    return j;
}

void Config::validate_or_throw() const {
    if (categories.empty()) throw ConfigError("categories must be nonempty");
    if (shapes_per_category < 1) throw ConfigError("shapes_per_category must be >= 1");
    if (n_points < 1) throw ConfigError("n_points must be >= 1");
    if (scale_sizes.empty() || scale_sizes.size() != scale_dims.size()) {
        throw ConfigError("scale_sizes and scale_dims must be nonempty and equal length");
    }
    for (std::size_t i = 0; i < scale_sizes.size(); ++i) {
        if (scale_sizes[i] < 1 || scale_sizes[i] > n_points) {
            throw ConfigError("scale_sizes entries must be in [1, n_points]");
        }
        if (i > 0 && scale_sizes[i] >= scale_sizes[i - 1]) {
            throw ConfigError("scale_sizes must strictly decrease");
        }
        if (scale_dims[i] < 8) throw ConfigError("scale_dims entries must be >= 8");
    }
    if (feat_dim < 1) throw ConfigError("feat_dim must be >= 1");
    if (knn_k < 1 || knn_k > scale_sizes.back()) {
        throw ConfigError("knn_k must be in [1, smallest scale size]");
    }
    if (!(tau > 0.0)) throw ConfigError("tau must be positive");
    if (!(radius > 0.0)) throw ConfigError("radius must be positive");
    if (points_per_pixel < 1) throw ConfigError("points_per_pixel must be >= 1");
    if (map_size < 1) throw ConfigError("map_size must be >= 1");
    if (!(dist > 0.0)) throw ConfigError("dist must be positive");
    if (grid_elevs < 1 || grid_azims < 1 || grid_thetas < 1) {
        throw ConfigError("grid counts must be >= 1");
    }
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw ConfigError("betas must be in [0, 1)");
    }
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (top_k < 1) throw ConfigError("top_k must be >= 1");
    if (!(fd_step_deg > 0.0)) throw ConfigError("fd_step_deg must be positive");
    if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
    if (queries_per_category < 1) throw ConfigError("queries_per_category must be >= 1");
    if (levels.empty()) throw ConfigError("levels must be nonempty");
    for (const std::string& level : levels) occlusion_level_from_string(level);
}

Camera Config::camera() const { return Camera::make_default(map_size, dist); }

SplatConfig Config::splat() const {
    SplatConfig s;
    s.radius = radius;
    s.points_per_pixel = points_per_pixel;
    s.height = map_size;
    s.width = map_size;
    s.epsilon = epsilon;
    return s;
}

GridRanges Config::grid_ranges() const {
    GridRanges r;
    r.elev_min = deg2rad(elev_min_deg);
    r.elev_max = deg2rad(elev_max_deg);
    r.theta_min = deg2rad(theta_min_deg);
    r.theta_max = deg2rad(theta_max_deg);
    return r;
}

PoseGrid Config::grid() const {
    return build_pose_grid(grid_elevs, grid_azims, grid_thetas, grid_ranges(), dist);
}

AdamWConfig Config::adamw() const {
    AdamWConfig a;
    a.lr = lr;
    a.weight_decay = weight_decay;
    a.beta1 = beta1;
    a.beta2 = beta2;
    a.eps = adam_eps;
    a.steps = steps;
    return a;
}

std::vector<std::pair<int, int>> Config::scale_spec() const {
    std::vector<std::pair<int, int>> spec;
    for (std::size_t i = 0; i < scale_sizes.size(); ++i) {
        spec.emplace_back(scale_sizes[i], scale_dims[i]);
    }
    return spec;
}

double Config::fd_h() const { return deg2rad(fd_step_deg); }

// --- Database --------------------------------------------------------------------

ProjectionHead database_head(const Config& cfg) {
    const int in_dim = std::accumulate(cfg.scale_dims.begin(), cfg.scale_dims.end(), 0);
    return ProjectionHead::seeded(cfg.feat_dim, in_dim, mix_seed(cfg.seed, "head"));
}

FeatureBank build_shape_bank(const Config& cfg, const TriMesh& mesh, const std::string& shape_id,
                             const std::string& category) {
    const PointCloud raw =
        sample_mesh_surface(mesh, cfg.n_points, mix_seed(mix_seed(cfg.seed, "sample"), shape_id));
    const PointCloud cloud = normalize_cloud(raw);
    FeatureBank bank = build_bank(cloud, cfg.scale_spec(), database_head(cfg), cfg.knn_k, cfg.tau,
                                  mix_seed(cfg.seed, "bank"));
    bank.shape_id = shape_id;
    bank.category = category;
    return bank;
}

std::vector<FeatureBank> build_database(const Config& cfg) {
    std::vector<FeatureBank> banks;
    banks.reserve(cfg.categories.size() * cfg.shapes_per_category);
    for (const std::string& category : cfg.categories) {
        for (int i = 0; i < cfg.shapes_per_category; ++i) {
            const TriMesh mesh = generate_category_mesh(category, shape_seed(cfg.seed, category, i));
            banks.push_back(
                build_shape_bank(cfg, mesh, category + "_" + std::to_string(i), category));
        }
    }
    return banks;
}

// --- Occlusion ---------------------------------------------------------------------

OcclusionLevel occlusion_level_from_string(const std::string& s) {
    if (s == "L0") return OcclusionLevel::L0;
    if (s == "L1") return OcclusionLevel::L1;
    if (s == "L2") return OcclusionLevel::L2;
    if (s == "L3") return OcclusionLevel::L3;
    throw ConfigError("unknown occlusion level: " + s);
}

std::string occlusion_level_to_string(OcclusionLevel level) {
    switch (level) {
        case OcclusionLevel::L0: return "L0";
        case OcclusionLevel::L1: return "L1";
        case OcclusionLevel::L2: return "L2";
        case OcclusionLevel::L3: return "L3";
    }
    return "L0";
}

std::pair<double, double> occlusion_range(OcclusionLevel level) {
    switch (level) {
        case OcclusionLevel::L0: return {0.0, 0.0};
        case OcclusionLevel::L1: return {0.02, 0.10};
        case OcclusionLevel::L2: return {0.10, 0.20};
        case OcclusionLevel::L3: return {0.20, 0.40};
    }
    return {0.0, 0.0};
}

namespace {

struct Rect {
    int x0, y0, x1, y1;  // inclusive
};

int count_covered_object(const std::vector<std::uint8_t>& covered,
                         const std::vector<std::uint8_t>& object_mask) {
    int n = 0;
    for (std::size_t i = 0; i < covered.size(); ++i) n += (covered[i] && object_mask[i]) ? 1 : 0;
    return n;
}

int rect_gain(const Rect& r, const std::vector<std::uint8_t>& covered,
              const std::vector<std::uint8_t>& object_mask, int width) {
    int gain = 0;
    for (int y = r.y0; y <= r.y1; ++y) {
        for (int x = r.x0; x <= r.x1; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * width + x;
            if (!covered[i] && object_mask[i]) ++gain;
        }
    }
    return gain;
}

}  // namespace

double apply_occlusion(std::vector<double>& data, int depth, int height, int width,
                       const std::vector<std::uint8_t>& object_mask, OcclusionLevel level,
                       std::uint64_t seed) {
    if (object_mask.size() != static_cast<std::size_t>(height) * width) {
        throw std::invalid_argument("apply_occlusion: mask size mismatch");
    }
    int object_px = 0;
    for (const std::uint8_t m : object_mask) object_px += m != 0;
    if (object_px == 0) throw std::runtime_error("occlusion target unreachable: empty object mask");

    const auto [lo, hi] = occlusion_range(level);
    if (level == OcclusionLevel::L0) return 0.0;

    Rng rng(seed);

    // Object bounding box (inflated) keeps the rectangle proposals relevant.
    int bx0 = width, bx1 = -1, by0 = height, by1 = -1;
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            if (object_mask[static_cast<std::size_t>(y) * width + x]) {
                bx0 = std::min(bx0, x);
                bx1 = std::max(bx1, x);
                by0 = std::min(by0, y);
                by1 = std::max(by1, y);
            }
        }
    }
    bx0 = std::max(0, bx0 - 2);
    by0 = std::max(0, by0 - 2);
    bx1 = std::min(width - 1, bx1 + 2);
    by1 = std::min(height - 1, by1 + 2);

    std::vector<std::uint8_t> covered(object_mask.size(), 0);
    int covered_obj = 0;

    while (static_cast<double>(covered_obj) / object_px < lo) {
        const int cx = bx0 + static_cast<int>(rng.uniform_index(bx1 - bx0 + 1));
        const int cy = by0 + static_cast<int>(rng.uniform_index(by1 - by0 + 1));
        int rw = 2 + static_cast<int>(rng.uniform_index(9));  // half extents 2..10 px
        int rh = 2 + static_cast<int>(rng.uniform_index(9));

        auto clip = [&](int w2, int h2) {
            return Rect{std::max(0, cx - w2 / 2), std::max(0, cy - h2 / 2),
                        std::min(width - 1, cx + (w2 - 1) / 2), std::min(height - 1, cy + (h2 - 1) / 2)};
        };

        Rect rect = clip(rw, rh);
        int gain = rect_gain(rect, covered, object_mask, width);
        if (gain == 0) continue;

        // Shrink on overshoot past the range's upper bound; a 1x1 rectangle
        // that still overshoots stays within one pixel of the bound.
        while (static_cast<double>(covered_obj + gain) / object_px > hi && (rw > 1 || rh > 1)) {
            if (rw >= rh) {
                --rw;
            } else {
                --rh;
            }
            rect = clip(rw, rh);
            gain = rect_gain(rect, covered, object_mask, width);
        }
        if (gain == 0) continue;

        for (int y = rect.y0; y <= rect.y1; ++y) {
            for (int x = rect.x0; x <= rect.x1; ++x) {
                covered[static_cast<std::size_t>(y) * width + x] = 1;
            }
        }
        covered_obj = count_covered_object(covered, object_mask);
    }

    // Distractor texture: an independent random unit vector per covered pixel.
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const std::size_t pix = static_cast<std::size_t>(y) * width + x;
            if (!covered[pix]) continue;
            double norm2 = 0.0;
            double* px = &data[pix * depth];
            for (int c = 0; c < depth; ++c) {
                px[c] = rng.normal();
                norm2 += px[c] * px[c];
            }
            const double norm = std::sqrt(norm2);
            if (norm > 0.0) {
                for (int c = 0; c < depth; ++c) px[c] /= norm;
            } else {
                px[0] = 1.0;
            }
        }
    }

    return static_cast<double>(covered_obj) / object_px;
}

// --- Queries ------------------------------------------------------------------------

QueryRecord make_query(const FeatureBank& bank, const Pose& pose, OcclusionLevel level,
                       double noise_sigma, std::uint64_t seed, const Camera& cam,
                       const SplatConfig& cfg) {
    const FeatureMap map = render_features(bank, pose, cam, cfg);

    QueryRecord query;
    query.gt_shape_id = bank.shape_id;
    query.gt_category = bank.category;
    query.gt_pose = pose;
    query.level = level;
    query.depth = map.depth;
    query.height = map.height;
    query.width = map.width;
    query.data = map.data;

    if (noise_sigma > 0.0) {
        Rng rng(mix_seed(seed, "noise"));
        for (std::size_t pix = 0; pix < map.mask.size(); ++pix) {
            double* px = &query.data[pix * map.depth];
            double norm2 = 0.0;
            for (int c = 0; c < map.depth; ++c) {
                px[c] += noise_sigma * rng.normal();
                norm2 += px[c] * px[c];
            }
            const double norm = std::sqrt(norm2);
            if (norm > 0.0) {
                for (int c = 0; c < map.depth; ++c) px[c] /= norm;
            }
        }
    }

    query.occlusion_fraction = apply_occlusion(query.data, map.depth, map.height, map.width,
                                               map.mask, level, mix_seed(seed, "occ"));
    return query;
}

std::vector<QueryRecord> generate_queries(const Config& cfg, const std::vector<FeatureBank>& banks,
                                          OcclusionLevel level) {
    const Camera cam = cfg.camera();
    const SplatConfig splat = cfg.splat();
    const GridRanges ranges = cfg.grid_ranges();

    std::vector<QueryRecord> queries;
    queries.reserve(cfg.categories.size() * cfg.queries_per_category);
    for (std::size_t ci = 0; ci < cfg.categories.size(); ++ci) {
        const std::string& category = cfg.categories[ci];
        for (int q = 0; q < cfg.queries_per_category; ++q) {
            const int instance = q % cfg.shapes_per_category;
            const FeatureBank& bank = banks[ci * cfg.shapes_per_category + instance];

            // The seed ignores the level: the same pose and noise underlie
            // every occlusion level of a given query index.
            const std::uint64_t qseed =
                mix_seed(mix_seed(mix_seed(cfg.seed, "query"), category), static_cast<std::uint64_t>(q));
            Rng rng(mix_seed(qseed, "pose"));
            Pose pose;
            pose.elev = rng.uniform(ranges.elev_min, ranges.elev_max);
            pose.azim = rng.uniform(0.0, 2.0 * M_PI);
            pose.theta = rng.uniform(ranges.theta_min, ranges.theta_max);
            pose.dist = cfg.dist;
            pose = pose.normalized();

            QueryRecord query = make_query(bank, pose, level, cfg.noise_sigma, qseed, cam, splat);
            query.query_id = occlusion_level_to_string(level) + "_" + category + "_" + std::to_string(q);
            queries.push_back(std::move(query));
        }
    }
    return queries;
}

// --- Metrics -------------------------------------------------------------------------

std::vector<QueryOutcome> evaluate_rows(const std::vector<EvalItem>& items) {
    if (items.empty()) throw std::invalid_argument("evaluate: no results");
    std::vector<QueryOutcome> rows;
    rows.reserve(items.size());
    for (const EvalItem& item : items) {
        const QueryRecord& q = *item.query;
        const RetrievalResult& r = *item.result;
        QueryOutcome row;
        row.query_id = q.query_id;
        row.gt_category = q.gt_category;
        row.top1 = !r.ranked.empty() && r.ranked.front().shape_id == q.gt_shape_id;
        const std::size_t prefix = std::min<std::size_t>(5, r.ranked.size());
        for (std::size_t i = 0; i < prefix; ++i) {
            if (r.ranked[i].shape_id == q.gt_shape_id) {
                row.top5 = true;
                break;
            }
        }
        row.cls = r.predicted_category == q.gt_category;
        row.pose_err_deg =
            geodesic_distance(pose_to_rotation(q.gt_pose), pose_to_rotation(r.ranked.front().pose)) *
            180.0 / M_PI;
        rows.push_back(std::move(row));
    }
    return rows;
}

namespace {

MetricsBucket bucket_from_rows(const std::vector<const QueryOutcome*>& rows) {
    MetricsBucket b;
    b.n = static_cast<int>(rows.size());
    if (b.n == 0) return b;
    std::vector<double> errs;
    errs.reserve(rows.size());
    for (const QueryOutcome* row : rows) {
        b.top1 += row->top1 ? 1.0 : 0.0;
        b.top5 += row->top5 ? 1.0 : 0.0;
        b.cls_top1 += row->cls ? 1.0 : 0.0;
        b.acc_pi_6 += row->pose_err_deg < 30.0 ? 1.0 : 0.0;
        b.acc_pi_18 += row->pose_err_deg < 10.0 ? 1.0 : 0.0;
        errs.push_back(row->pose_err_deg);
    }
    b.top1 /= b.n;
    b.top5 /= b.n;
    b.cls_top1 /= b.n;
    b.acc_pi_6 /= b.n;
    b.acc_pi_18 /= b.n;
    std::sort(errs.begin(), errs.end());
    const std::size_t mid = errs.size() / 2;
    b.med_err_deg = errs.size() % 2 == 1 ? errs[mid] : 0.5 * (errs[mid - 1] + errs[mid]);
    return b;
}

json bucket_to_json(const MetricsBucket& b) {
    return json{{"n", b.n},
                {"top1", b.top1},
                {"top5", b.top5},
                {"acc_pi_6", b.acc_pi_6},
                {"acc_pi_18", b.acc_pi_18},
                {"med_err_deg", b.med_err_deg},
                {"cls_top1", b.cls_top1}};
}

}  // namespace

MetricsReport evaluate(const std::vector<EvalItem>& items) {
    const std::vector<QueryOutcome> rows = evaluate_rows(items);
    MetricsReport report;
    std::vector<const QueryOutcome*> all;
    std::map<std::string, std::vector<const QueryOutcome*>> by_cat;
    for (const QueryOutcome& row : rows) {
        all.push_back(&row);
        by_cat[row.gt_category].push_back(&row);
    }
    report.overall = bucket_from_rows(all);
    for (const auto& [cat, cat_rows] : by_cat) {
        report.per_category[cat] = bucket_from_rows(cat_rows);
    }
    return report;
}

json MetricsReport::to_json() const {
    json j;
    j["overall"] = bucket_to_json(overall);
    json cats = json::object();
    for (const auto& [cat, bucket] : per_category) cats[cat] = bucket_to_json(bucket);
    j["per_category"] = cats;
    return j;
}

// --- Experiment ------------------------------------------------------------------------

namespace {

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

RetrievalResult initial_only_result(const std::vector<Candidate>& initial,
                                    const std::map<std::string, std::string>& id_to_category) {
    RetrievalResult r;
    r.ranked = initial;
    r.initial_ranking = initial;
    r.top1_pose = initial.front().pose;
    const auto it = id_to_category.find(initial.front().shape_id);
    if (it != id_to_category.end()) r.predicted_category = it->second;
    return r;
}

json pose_to_json(const Pose& p) {
    return json{{"elev", p.elev}, {"azim", p.azim}, {"theta", p.theta}, {"dist", p.dist}};
}

}  // namespace

SuiteRun run_suite(const Config& cfg, const std::vector<FeatureBank>& banks,
                   const std::vector<QueryRecord>& queries, int steps_override) {
    const Camera cam = cfg.camera();
    const SplatConfig splat = cfg.splat();
    const PoseGrid grid = cfg.grid();
    AdamWConfig opt = cfg.adamw();
    if (steps_override >= 0) opt.steps = steps_override;

    std::vector<const std::vector<double>*> query_data;
    query_data.reserve(queries.size());
    for (const QueryRecord& q : queries) query_data.push_back(&q.data);

    SuiteRun run;
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<std::vector<Candidate>> initial =
        initial_search_batch(query_data, banks, grid, cam, splat);
    run.initial_search_seconds = seconds_since(t0);

    const auto t1 = std::chrono::steady_clock::now();
    run.results.reserve(queries.size());
    for (std::size_t q = 0; q < queries.size(); ++q) {
        run.results.push_back(retrieve_from_initial(queries[q].data, banks, initial[q], cam, splat,
                                                    opt, cfg.top_k, cfg.fd_h()));
    }
    run.refine_seconds = seconds_since(t1);
    return run;
}

json run_experiment(const Config& cfg) {
    const auto t_start = std::chrono::steady_clock::now();
    fs::create_directories(cfg.out_dir);

    const auto t_db = std::chrono::steady_clock::now();
    const std::vector<FeatureBank> banks = build_database(cfg);
    const double db_seconds = seconds_since(t_db);

    std::map<std::string, std::string> id_to_category;
    for (const FeatureBank& b : banks) id_to_category[b.shape_id] = b.category;

    json levels_json = json::object();
    json query_rows = json::array();
    double initial_seconds = 0.0, refine_seconds = 0.0;

    for (const std::string& level_name : cfg.levels) {
        const OcclusionLevel level = occlusion_level_from_string(level_name);
        const std::vector<QueryRecord> queries = generate_queries(cfg, banks, level);
        const SuiteRun run = run_suite(cfg, banks, queries);
        initial_seconds += run.initial_search_seconds;
        refine_seconds += run.refine_seconds;

        std::vector<EvalItem> refined_items, initial_items;
        std::vector<RetrievalResult> initial_results;
        initial_results.reserve(queries.size());
        for (std::size_t q = 0; q < queries.size(); ++q) {
            refined_items.push_back({&queries[q], &run.results[q]});
            initial_results.push_back(
                initial_only_result(run.results[q].initial_ranking, id_to_category));
        }
        for (std::size_t q = 0; q < queries.size(); ++q) {
            initial_items.push_back({&queries[q], &initial_results[q]});
        }

        const MetricsReport metrics = evaluate(refined_items);
        const MetricsReport initial_metrics = evaluate(initial_items);
        levels_json[level_name] = {{"metrics", metrics.to_json()},
                                   {"initial_metrics", initial_metrics.to_json()}};

        const std::vector<QueryOutcome> rows = evaluate_rows(refined_items);
        for (std::size_t q = 0; q < queries.size(); ++q) {
            const QueryRecord& query = queries[q];
            const RetrievalResult& result = run.results[q];
            json row;
            row["query_id"] = query.query_id;
            row["level"] = level_name;
            row["gt_shape_id"] = query.gt_shape_id;
            row["gt_category"] = query.gt_category;
            row["gt_pose"] = pose_to_json(query.gt_pose);
            row["occlusion_fraction"] = query.occlusion_fraction;
            row["top1_shape_id"] = result.ranked.front().shape_id;
            row["top1_score"] = result.ranked.front().score;
            row["top1_pose"] = pose_to_json(result.top1_pose);
            row["predicted_category"] = result.predicted_category;
            row["pose_err_deg"] = rows[q].pose_err_deg;
            row["initial_top1_shape_id"] = result.initial_ranking.front().shape_id;
            row["initial_top1_score"] = result.initial_ranking.front().score;
            json top5 = json::array();
            for (std::size_t i = 0; i < std::min<std::size_t>(5, result.ranked.size()); ++i) {
                top5.push_back(result.ranked[i].shape_id);
            }
            row["top5_shape_ids"] = top5;
            query_rows.push_back(std::move(row));
        }

        if (cfg.heatmaps) {
            const fs::path dir = fs::path(cfg.out_dir) / "heatmaps";
            fs::create_directories(dir);
            const Camera cam = cfg.camera();
            const SplatConfig splat = cfg.splat();
            for (std::size_t q = 0; q < std::min<std::size_t>(2, queries.size()); ++q) {
                const QueryRecord& query = queries[q];
                FeatureMap qmap;
                qmap.depth = query.depth;
                qmap.height = query.height;
                qmap.width = query.width;
                qmap.data = query.data;
                qmap.mask.assign(static_cast<std::size_t>(query.height) * query.width, 0);
                for (std::size_t pix = 0; pix < qmap.mask.size(); ++pix) {
                    for (int c = 0; c < query.depth; ++c) {
                        if (query.data[pix * query.depth + c] != 0.0) {
                            qmap.mask[pix] = 1;
                            break;
                        }
                    }
                }
                save_feature_ppm(qmap, (dir / (query.query_id + "_query.ppm")).string());

                const RetrievalResult& result = run.results[q];
                for (const FeatureBank& bank : banks) {
                    if (bank.shape_id != result.ranked.front().shape_id) continue;
                    const FeatureMap top = render_features(bank, result.top1_pose, cam, splat);
                    save_feature_ppm(top, (dir / (query.query_id + "_top1.ppm")).string());
                    save_mask_pgm(top, (dir / (query.query_id + "_top1_mask.pgm")).string());
                    break;
                }
            }
        }
    }

    json report;
    report["config"] = cfg.to_json();
    report["levels"] = levels_json;
    report["queries"] = query_rows;
    report["runtimes"] = {{"build_database_s", db_seconds},
                          {"initial_search_s", initial_seconds},
                          {"refine_s", refine_seconds},
                          {"total_s", seconds_since(t_start)}};

    std::ofstream out(fs::path(cfg.out_dir) / "report.json");
    if (!out) throw std::runtime_error("cannot write report under " + cfg.out_dir);
    out << report.dump(2) << '\n';
    return report;
}

json run_experiment_file(const std::string& config_path) {
    return run_experiment(Config::from_json_file(config_path));
}

}  // namespace rmatch
