#include "rendermatch/harness.hpp"
#include "rendermatch/rng.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace rmatch {

namespace {

/// Appends an axis-aligned box (12 triangles) to the vertex/face lists.
void add_box(std::vector<Vec3>& verts, std::vector<Eigen::Vector3i>& faces, const Vec3& center,
             const Vec3& half) {
    const int base = static_cast<int>(verts.size());
    for (int corner = 0; corner < 8; ++corner) {
        const double sx = (corner & 1) ? 1.0 : -1.0;
        const double sy = (corner & 2) ? 1.0 : -1.0;
        const double sz = (corner & 4) ? 1.0 : -1.0;
        verts.emplace_back(center.x() + sx * half.x(), center.y() + sy * half.y(),
                           center.z() + sz * half.z());
    }
    // Two triangles per face, outward winding.
    static const int quads[6][4] = {
        {0, 4, 6, 2},  // -x
        {1, 3, 7, 5},  // +x
        {0, 1, 5, 4},  // -y
        {2, 6, 7, 3},  // +y
        {0, 2, 3, 1},  // -z
        {4, 5, 7, 6},  // +z
    };
    for (const auto& q : quads) {
        faces.emplace_back(base + q[0], base + q[1], base + q[2]);
        faces.emplace_back(base + q[0], base + q[2], base + q[3]);
    }
}

void add_legs(std::vector<Vec3>& verts, std::vector<Eigen::Vector3i>& faces, double top_y,
              double half_w, double half_d, double leg_s, double inset) {
    const double lx = half_w - inset - leg_s;
    const double lz = half_d - inset - leg_s;
    for (int i = 0; i < 4; ++i) {
        const double sx = (i & 1) ? 1.0 : -1.0;
        const double sz = (i & 2) ? 1.0 : -1.0;
        add_box(verts, faces, Vec3(sx * lx, top_y / 2.0, sz * lz),
                Vec3(leg_s, top_y / 2.0, leg_s));
    }
}

TriMesh finish(std::vector<Vec3>& verts, std::vector<Eigen::Vector3i>& faces) {
    TriMesh mesh;
    mesh.vertices.resize(static_cast<int>(verts.size()), 3);
    for (std::size_t i = 0; i < verts.size(); ++i) mesh.vertices.row(static_cast<int>(i)) = verts[i];
    mesh.faces.resize(static_cast<int>(faces.size()), 3);
    for (std::size_t i = 0; i < faces.size(); ++i) mesh.faces.row(static_cast<int>(i)) = faces[i];
    return mesh;
}

TriMesh make_box_furniture(Rng& rng) {
    std::vector<Vec3> verts;
    std::vector<Eigen::Vector3i> faces;
    const double w = rng.uniform(0.5, 1.1);
    const double h = rng.uniform(0.7, 1.4);
    const double d = rng.uniform(0.3, 0.6);
    add_box(verts, faces, Vec3(0, h / 2.0, 0), Vec3(w, h / 2.0, d));
    // Top slab overhanging the body.
    const double slab = rng.uniform(0.03, 0.08);
    add_box(verts, faces, Vec3(0, h + slab, 0), Vec3(w * rng.uniform(1.05, 1.2), slab, d * 1.1));
    // Plinth.
    const double plinth = rng.uniform(0.04, 0.12);
    add_box(verts, faces, Vec3(0, -plinth, 0), Vec3(w * rng.uniform(0.8, 0.95), plinth, d * 0.9));
    if (rng.uniform() < 0.5) {
        // Backboard rising above the body.
        const double back_h = rng.uniform(0.15, 0.4);
        add_box(verts, faces, Vec3(0, h + 2.0 * slab + back_h, -d * 0.9),
                Vec3(w, back_h, d * 0.08));
    }
    return finish(verts, faces);
}

TriMesh make_table(Rng& rng) {
    std::vector<Vec3> verts;
    std::vector<Eigen::Vector3i> faces;
    const double w = rng.uniform(0.8, 1.5);
    const double d = rng.uniform(0.5, 1.0);
    const double h = rng.uniform(0.55, 0.9);
    const double t = rng.uniform(0.04, 0.12);
    const double leg = rng.uniform(0.03, 0.1);
    const double inset = rng.uniform(0.02, 0.12);
    add_box(verts, faces, Vec3(0, h + t, 0), Vec3(w, t, d));
    add_legs(verts, faces, h, w, d, leg, inset);
    if (rng.uniform() < 0.4) {
        // Lower shelf.
        const double shelf_y = h * rng.uniform(0.25, 0.5);
        add_box(verts, faces, Vec3(0, shelf_y, 0), Vec3(w * 0.8, t * 0.6, d * 0.8));
    }
    return finish(verts, faces);
}

TriMesh make_chair(Rng& rng) {
    std::vector<Vec3> verts;
    std::vector<Eigen::Vector3i> faces;
    const double w = rng.uniform(0.35, 0.6);
    const double d = rng.uniform(0.35, 0.6);
    const double h = rng.uniform(0.35, 0.55);
    const double t = rng.uniform(0.04, 0.09);
    const double leg = rng.uniform(0.025, 0.07);
    const double back_h = rng.uniform(0.35, 0.75);
    const double back_t = rng.uniform(0.03, 0.07);
    add_box(verts, faces, Vec3(0, h + t, 0), Vec3(w, t, d));
    add_legs(verts, faces, h, w, d, leg, rng.uniform(0.0, 0.05));
    // Backrest at the rear edge.
    add_box(verts, faces, Vec3(0, h + 2.0 * t + back_h, -(d - back_t)),
            Vec3(w * rng.uniform(0.85, 1.0), back_h, back_t));
    if (rng.uniform() < 0.35) {
        // Armrests.
        const double arm_h = rng.uniform(0.12, 0.25);
        for (const double sx : {-1.0, 1.0}) {
            add_box(verts, faces, Vec3(sx * (w - 0.02), h + 2.0 * t + arm_h, 0),
                    Vec3(0.03, arm_h, d * 0.8));
        }
    }
    return finish(verts, faces);
}

TriMesh make_winged(Rng& rng) {
    std::vector<Vec3> verts;
    std::vector<Eigen::Vector3i> faces;
    const double len = rng.uniform(0.9, 1.6);
    const double body = rng.uniform(0.08, 0.18);
    const double span = rng.uniform(0.7, 1.4);
    const double chord = rng.uniform(0.15, 0.35);
    const double wing_t = rng.uniform(0.02, 0.05);
    // Fuselage along z.
    add_box(verts, faces, Vec3(0, 0, 0), Vec3(body, body, len));
    // Main wing.
    const double wing_z = rng.uniform(-0.2, 0.3) * len;
    add_box(verts, faces, Vec3(0, 0, wing_z), Vec3(span, wing_t, chord));
    // Tail plane and vertical stabilizer at the rear.
    const double tail_span = span * rng.uniform(0.3, 0.5);
    add_box(verts, faces, Vec3(0, 0, -len * 0.92), Vec3(tail_span, wing_t, chord * 0.6));
    const double fin_h = rng.uniform(0.15, 0.35);
    add_box(verts, faces, Vec3(0, body + fin_h, -len * 0.92),
            Vec3(wing_t, fin_h, chord * 0.6));
    return finish(verts, faces);
}

}  // namespace

TriMesh generate_category_mesh(const std::string& category, std::uint64_t seed) {
    Rng rng(seed);
    if (category == "box-furniture") return make_box_furniture(rng);
    if (category == "tables") return make_table(rng);
    if (category == "chairs-like") return make_chair(rng);
    if (category == "winged") return make_winged(rng);
    throw std::runtime_error("unknown shape category: " + category);
}

std::uint64_t shape_seed(std::uint64_t global_seed, const std::string& category, int instance) {
    return mix_seed(mix_seed(global_seed, category), static_cast<std::uint64_t>(instance));
}

DatasetManifest generate_shapes(std::uint64_t seed, const std::vector<std::string>& categories,
                                int per_category, const std::string& out_dir,
                                const nlohmann::json& config_snapshot) {
    if (per_category < 1) throw std::invalid_argument("generate_shapes: counts must be >= 1");
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    DatasetManifest manifest;
    manifest.global_seed = seed;
    manifest.config_snapshot = config_snapshot;

    for (const std::string& category : categories) {
        for (int i = 0; i < per_category; ++i) {
            ManifestEntry entry;
            entry.category = category;
            entry.seed = shape_seed(seed, category, i);
            entry.shape_id = category + "_" + std::to_string(i);
            entry.mesh_path = entry.shape_id + ".obj";
            const TriMesh mesh = generate_category_mesh(category, entry.seed);
            save_mesh_obj(mesh, (fs::path(out_dir) / entry.mesh_path).string());
            manifest.entries.push_back(std::move(entry));
        }
    }
    manifest.save((fs::path(out_dir) / "manifest.json").string());
    return manifest;
}

void DatasetManifest::save(const std::string& path) const {
    nlohmann::json j;
    j["global_seed"] = global_seed;
    j["config"] = config_snapshot;
    nlohmann::json arr = nlohmann::json::array();
    for (const ManifestEntry& e : entries) {
        arr.push_back({{"shape_id", e.shape_id},
                       {"category", e.category},
                       {"mesh_path", e.mesh_path},
                       {"seed", e.seed}});
    }
    j["entries"] = arr;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest: " + path);
    out << j.dump(2) << '\n';
}

DatasetManifest DatasetManifest::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("bad manifest " + path + ": " + e.what());
    }
    DatasetManifest manifest;
    manifest.global_seed = j.at("global_seed").get<std::uint64_t>();
    if (j.contains("config")) manifest.config_snapshot = j["config"];
    for (const auto& e : j.at("entries")) {
        ManifestEntry entry;
        entry.shape_id = e.at("shape_id").get<std::string>();
        entry.category = e.at("category").get<std::string>();
        entry.mesh_path = e.at("mesh_path").get<std::string>();
        entry.seed = e.at("seed").get<std::uint64_t>();
        manifest.entries.push_back(std::move(entry));
    }
    return manifest;
}

}  // namespace rmatch
