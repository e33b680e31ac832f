#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace rmatch {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using MatX3 = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using MatXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Triangle mesh in model units. Faces are triples of 0-based vertex indices.
struct TriMesh {
    MatX3 vertices;
    Eigen::Matrix<int, Eigen::Dynamic, 3, Eigen::RowMajor> faces;

    /// Throws std::runtime_error if a face index is out of range.
    void validate() const;
    double face_area(int f) const;
    double total_area() const;
};

/// N x 3 point set, optionally with per-point unit normals.
struct PointCloud {
    MatX3 points;
    MatX3 normals;  // 0 rows when absent

    int size() const { return static_cast<int>(points.rows()); }
    bool has_normals() const { return normals.rows() == points.rows() && points.rows() > 0; }
};

/// Viewpoint parameterized by elevation/azimuth/in-plane rotation (radians)
/// with a fixed camera distance. Angles are stored wrapped: azim in [0, 2pi),
/// theta in [-pi, pi), elev clamped to [-pi/2, pi/2].
struct Pose {
    double elev = 0.0;
    double azim = 0.0;
    double theta = 0.0;
    double dist = 2.5;

    /// Returns a copy with the wrapping/clamping invariants applied.
    Pose normalized() const;
};

/// Wraps x into [0, 2pi). Exact (Sterbenz) for inputs within a few turns.
double wrap_two_pi(double x);
/// Wraps x into [-pi, pi).
double wrap_pi(double x);

/// Pinhole camera; the image is square by default (H = W = 37).
struct Camera {
    double focal = 37.0;   // pixels
    double cx = 18.0;      // principal point, pixels
    double cy = 18.0;
    int height = 37;
    int width = 37;

    /// Default intrinsics: focal chosen so a unit sphere at distance `dist`
    /// spans ~80% of the image; principal point at the center pixel.
    static Camera make_default(int size = 37, double dist = 2.5);
};

struct ProjectedPoint {
    double u = 0.0;      // pixels, +u right
    double v = 0.0;      // pixels, +v down
    double depth = 0.0;  // camera-frame viewing-axis coordinate
    bool valid = false;  // false when the point lies behind the camera
};

// --- Rotations ----------------------------------------------------------

Mat3 rot_x(double angle);
Mat3 rot_y(double angle);
Mat3 rot_z(double angle);

/// World-to-camera rotation: Rz(theta) * Rx(elev) * Ry(-azim). At
/// (0, 0, 0) the camera sits on +Z looking down -Z with up = +Y, so the
/// pose maps to the identity. Continuous in all three angles, including
/// at the elevation poles.
Mat3 pose_to_rotation(const Pose& pose);

/// Geodesic distance on SO(3): arccos(clamp((trace(r1^T r2) - 1) / 2)).
/// Always in [0, pi].
double geodesic_distance(const Mat3& r1, const Mat3& r2);

// --- Core geometry operations -------------------------------------------

/// Uniform surface sampling with face-selection probability proportional to
/// face area and uniform barycentric coordinates per face. Deterministic
/// given the seed. Throws "degenerate mesh" when the total area is zero.
PointCloud sample_mesh_surface(const TriMesh& mesh, int n, std::uint64_t seed,
                               bool with_normals = false);

/// Translates the centroid to the origin and scales so the maximum point
/// norm is 1 (unit bounding sphere). Normals pass through unchanged.
/// Throws "zero extent" when all points coincide.
PointCloud normalize_cloud(const PointCloud& cloud);

/// Farthest point sampling. The first index is the point nearest a seeded
/// uniform draw in the cloud's bounding box; each following index maximizes
/// the minimum distance to the already-selected set. Ties break toward the
/// lowest index.
std::vector<int> farthest_point_sample(const PointCloud& cloud, int m, std::uint64_t seed);

/// Projects every point through the world-to-camera transform and the
/// pinhole model. Points behind the camera are flagged invalid, never
/// dropped.
std::vector<ProjectedPoint> project_points(const PointCloud& cloud, const Pose& pose,
                                           const Camera& cam);

// --- Persistence ---------------------------------------------------------

/// ASCII wavefront-style mesh I/O (v/f records, triangles only). Face
/// indices are 1-based in the file; "f 1/2/3 ..." style records keep only
/// the leading vertex index.
TriMesh load_mesh_obj(const std::string& path);
void save_mesh_obj(const TriMesh& mesh, const std::string& path);

/// Point cloud blob: little-endian header (magic "PCLD", version u32,
/// N u32, flags u32; bit0 = has normals) followed by N x 3 float32
/// positions and, when flagged, N x 3 float32 normals.
PointCloud load_cloud(const std::string& path);
void save_cloud(const PointCloud& cloud, const std::string& path);

}  // namespace rmatch
