#include "rendermatch/geometry.hpp"
#include "rendermatch/rng.hpp"

#include "binary_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace rmatch {

// --- TriMesh --------------------------------------------------------------

void TriMesh::validate() const {
    const int nv = static_cast<int>(vertices.rows());
    for (int f = 0; f < faces.rows(); ++f) {
        for (int c = 0; c < 3; ++c) {
            const int idx = faces(f, c);
            if (idx < 0 || idx >= nv) {
                throw std::runtime_error("mesh face " + std::to_string(f) +
                                         " references vertex " + std::to_string(idx) +
                                         " out of range");
            }
        }
    }
}

double TriMesh::face_area(int f) const {
    const Vec3 a = vertices.row(faces(f, 0));
    const Vec3 b = vertices.row(faces(f, 1));
    const Vec3 c = vertices.row(faces(f, 2));
    return 0.5 * (b - a).cross(c - a).norm();
}

double TriMesh::total_area() const {
    double sum = 0.0;
    for (int f = 0; f < faces.rows(); ++f) sum += face_area(f);
    return sum;
}

// --- Pose / angle wrapping -------------------------------------------------

double wrap_two_pi(double x) {
    constexpr double two_pi = 2.0 * M_PI;
    if (x >= 0.0 && x < two_pi) return x;
    if (x >= two_pi && x < 2.0 * two_pi) return x - two_pi;  // Sterbenz-exact
    if (x < 0.0 && x >= -two_pi) {
        const double y = x + two_pi;
        return y < two_pi ? y : 0.0;
    }
    double y = std::fmod(x, two_pi);
    if (y < 0.0) y += two_pi;
    if (y >= two_pi) y = 0.0;
    return y;
}

double wrap_pi(double x) {
    const double y = wrap_two_pi(x + M_PI);
    return y - M_PI;
}

Pose Pose::normalized() const {
    Pose p = *this;
    p.azim = wrap_two_pi(azim);
    p.theta = wrap_pi(theta);
    p.elev = std::clamp(elev, -M_PI / 2.0, M_PI / 2.0);
    return p;
}

Camera Camera::make_default(int size, double dist) {
    Camera cam;
    cam.height = size;
    cam.width = size;
    cam.focal = 0.8 * (size / 2.0) * dist;
    cam.cx = (size - 1) / 2.0;
    cam.cy = (size - 1) / 2.0;
    return cam;
}

// --- Rotations --------------------------------------------------------------

Mat3 rot_x(double a) {
    const double c = std::cos(a), s = std::sin(a);
    Mat3 r;
    r << 1, 0, 0,
         0, c, -s,
         0, s, c;
    return r;
}

Mat3 rot_y(double a) {
    const double c = std::cos(a), s = std::sin(a);
    Mat3 r;
    r << c, 0, s,
         0, 1, 0,
         -s, 0, c;
    return r;
}

Mat3 rot_z(double a) {
    const double c = std::cos(a), s = std::sin(a);
    Mat3 r;
    r << c, -s, 0,
         s, c, 0,
         0, 0, 1;
    return r;
}

Mat3 pose_to_rotation(const Pose& pose) {
    return rot_z(pose.theta) * rot_x(pose.elev) * rot_y(-pose.azim);
}

double geodesic_distance(const Mat3& r1, const Mat3& r2) {
    const double tr = (r1.transpose() * r2).trace();
    const double c = std::clamp((tr - 1.0) / 2.0, -1.0, 1.0);
    return std::acos(c);
}

// --- Sampling ----------------------------------------------------------------

PointCloud sample_mesh_surface(const TriMesh& mesh, int n, std::uint64_t seed,
                               bool with_normals) {
    if (n < 1) throw std::invalid_argument("sample count must be >= 1");
    mesh.validate();

    const int nf = static_cast<int>(mesh.faces.rows());
    std::vector<double> cumulative(nf);
    double total = 0.0;
    for (int f = 0; f < nf; ++f) {
        total += mesh.face_area(f);
        cumulative[f] = total;
    }
    if (!(total > 0.0)) throw std::runtime_error("degenerate mesh: total surface area is zero");

    Rng rng(seed);
    PointCloud cloud;
    cloud.points.resize(n, 3);
    if (with_normals) cloud.normals.resize(n, 3);

    for (int i = 0; i < n; ++i) {
        const double pick = rng.uniform() * total;
        const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), pick);
        const int f = std::min<int>(static_cast<int>(it - cumulative.begin()), nf - 1);

        const Vec3 a = mesh.vertices.row(mesh.faces(f, 0));
        const Vec3 b = mesh.vertices.row(mesh.faces(f, 1));
        const Vec3 c = mesh.vertices.row(mesh.faces(f, 2));

        // Uniform barycentric sample via square-root warping.
        double u = rng.uniform();
        double v = rng.uniform();
        const double su = std::sqrt(u);
        const double w0 = 1.0 - su;
        const double w1 = su * (1.0 - v);
        const double w2 = su * v;
        cloud.points.row(i) = (w0 * a + w1 * b + w2 * c).transpose();

        if (with_normals) {
            Vec3 nrm = (b - a).cross(c - a);
            const double len = nrm.norm();
            if (len > 0.0) nrm /= len;
            cloud.normals.row(i) = nrm.transpose();
        }
    }
    return cloud;
}

PointCloud normalize_cloud(const PointCloud& cloud) {
    if (cloud.size() < 1) throw std::invalid_argument("empty point cloud");
    PointCloud out;
    const Eigen::RowVector3d centroid = cloud.points.colwise().mean();
    out.points = cloud.points.rowwise() - centroid;
    const double scale = out.points.rowwise().norm().maxCoeff();
    if (!(scale > 0.0)) throw std::runtime_error("zero extent: all points identical");
    out.points /= scale;
    out.normals = cloud.normals;
    return out;
}

std::vector<int> farthest_point_sample(const PointCloud& cloud, int m, std::uint64_t seed) {
    const int n = cloud.size();
    if (m < 1 || m > n) throw std::invalid_argument("farthest_point_sample: need 1 <= m <= N");

    // Seeded draw in the bounding box picks the starting point.
    Rng rng(seed);
    const Vec3 lo = cloud.points.colwise().minCoeff();
    const Vec3 hi = cloud.points.colwise().maxCoeff();
    Vec3 probe;
    for (int c = 0; c < 3; ++c) probe[c] = rng.uniform(lo[c], hi[c]);

    int first = 0;
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
        const double d = (cloud.points.row(i).transpose() - probe).squaredNorm();
        if (d < best) {
            best = d;
            first = i;
        }
    }

    std::vector<int> picked;
    picked.reserve(m);
    picked.push_back(first);

    std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
    int last = first;
    for (int round = 1; round < m; ++round) {
        int arg = -1;
        double far = -1.0;
        for (int i = 0; i < n; ++i) {
            const double d = (cloud.points.row(i) - cloud.points.row(last)).squaredNorm();
            if (d < min_dist[i]) min_dist[i] = d;
            if (min_dist[i] > far) {
                far = min_dist[i];
                arg = i;
            }
        }
        picked.push_back(arg);
        last = arg;
    }
    return picked;
}

std::vector<ProjectedPoint> project_points(const PointCloud& cloud, const Pose& pose,
                                           const Camera& cam) {
    const Mat3 rot = pose_to_rotation(pose);
    std::vector<ProjectedPoint> out(cloud.size());
    for (int i = 0; i < cloud.size(); ++i) {
        const Vec3 pc = rot * cloud.points.row(i).transpose();
        // Camera center sits at dist along its own +Z; depth is measured
        // down the -Z viewing axis.
        const double depth = pose.dist - pc.z();
        ProjectedPoint& p = out[i];
        p.depth = depth;
        p.valid = depth > 0.0 && std::isfinite(depth);
        if (p.valid) {
            p.u = cam.cx + cam.focal * pc.x() / depth;
            p.v = cam.cy - cam.focal * pc.y() / depth;
        }
    }
    return out;
}

// --- Mesh I/O -----------------------------------------------------------------

TriMesh load_mesh_obj(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open mesh file: " + path);

    std::vector<Vec3> verts;
    std::vector<Eigen::Vector3i> tris;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ss(line);
        std::string tag;
        if (!(ss >> tag)) continue;
        if (tag == "v") {
            Vec3 v;
            if (!(ss >> v.x() >> v.y() >> v.z())) {
                throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad vertex record");
            }
            verts.push_back(v);
        } else if (tag == "f") {
            std::vector<long> idx;
            std::string tok;
            while (ss >> tok) {
                // Accept "i", "i/j", "i/j/k" forms; only the vertex index matters.
                const std::size_t slash = tok.find('/');
                if (slash != std::string::npos) tok = tok.substr(0, slash);
                long v = 0;
                try {
                    v = std::stol(tok);
                } catch (const std::exception&) {
                    throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad face index");
                }
                if (v < 1) {
                    throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                             ": face indices must be positive");
                }
                idx.push_back(v - 1);
            }
            if (idx.size() != 3) {
                throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                         ": only triangulated faces are supported");
            }
            tris.emplace_back(static_cast<int>(idx[0]), static_cast<int>(idx[1]),
                              static_cast<int>(idx[2]));
        }
        // Other record types (vn, vt, comments) are ignored.
    }

    TriMesh mesh;
    mesh.vertices.resize(static_cast<int>(verts.size()), 3);
    for (std::size_t i = 0; i < verts.size(); ++i) mesh.vertices.row(static_cast<int>(i)) = verts[i];
    mesh.faces.resize(static_cast<int>(tris.size()), 3);
    for (std::size_t i = 0; i < tris.size(); ++i) mesh.faces.row(static_cast<int>(i)) = tris[i];
    mesh.validate();
    return mesh;
}

void save_mesh_obj(const TriMesh& mesh, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write mesh file: " + path);
    out.precision(17);  // exact double round-trip
    for (int i = 0; i < mesh.vertices.rows(); ++i) {
        out << "v " << mesh.vertices(i, 0) << ' ' << mesh.vertices(i, 1) << ' '
            << mesh.vertices(i, 2) << '\n';
    }
    for (int f = 0; f < mesh.faces.rows(); ++f) {
        out << "f " << mesh.faces(f, 0) + 1 << ' ' << mesh.faces(f, 1) + 1 << ' '
            << mesh.faces(f, 2) + 1 << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

// --- Cloud blob I/O --------------------------------------------------------

using detail::get_f32;
using detail::get_u32;
using detail::put_f32;
using detail::put_u32;

void save_cloud(const PointCloud& cloud, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write cloud file: " + path);
    out.write("PCLD", 4);
    put_u32(out, 1);
    put_u32(out, static_cast<std::uint32_t>(cloud.size()));
    put_u32(out, cloud.has_normals() ? 1u : 0u);
    for (int i = 0; i < cloud.size(); ++i)
        for (int c = 0; c < 3; ++c) put_f32(out, static_cast<float>(cloud.points(i, c)));
    if (cloud.has_normals()) {
        for (int i = 0; i < cloud.size(); ++i)
            for (int c = 0; c < 3; ++c) put_f32(out, static_cast<float>(cloud.normals(i, c)));
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

PointCloud load_cloud(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open cloud file: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::strncmp(magic, "PCLD", 4) != 0) {
        throw std::runtime_error("not a PCLD file: " + path);
    }
    const std::uint32_t version = get_u32(in);
    if (version != 1) throw std::runtime_error("unsupported PCLD version in " + path);
    const std::uint32_t n = get_u32(in);
    const std::uint32_t flags = get_u32(in);

    PointCloud cloud;
    cloud.points.resize(n, 3);
    for (std::uint32_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) cloud.points(i, c) = get_f32(in);
    if (flags & 1u) {
        cloud.normals.resize(n, 3);
        for (std::uint32_t i = 0; i < n; ++i)
            for (int c = 0; c < 3; ++c) cloud.normals(i, c) = get_f32(in);
    }
    if (!in) throw std::runtime_error("truncated PCLD file: " + path);
    return cloud;
}

}  // namespace rmatch
