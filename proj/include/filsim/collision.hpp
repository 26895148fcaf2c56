#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <variant>
#include <vector>

#include <Eigen/SparseCore>

#include "filsim/common.hpp"

namespace filsim {

struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& local) const { return rotation * local + translation; }
  Vec3 inverse_apply(const Vec3& world) const {
    return rotation.transpose() * (world - translation);
  }
};

struct Sphere {
  double radius = 0.0;
};

/// Segment of length 2 * half_length along the local z axis, swept by a ball.
struct Capsule {
  double radius = 0.0;
  double half_length = 0.0;
};

struct Box {
  Vec3 half_extents = Vec3::Zero();
};

/// Solid region z <= 0 in the local frame.
struct HalfSpace {};

using ShapeGeometry = std::variant<Sphere, Capsule, Box, HalfSpace>;

struct Shape {
  ShapeGeometry geometry;
  Pose pose;

  void validate() const;
};

/// What a contact point is attached to, with the data needed to map
/// generalized velocities to the velocity of the material point.
struct ContactSide {
  enum class Kind { kNone, kRodSegment, kBody };
  Kind kind = Kind::kNone;
  int index = -1;         // rod or body index
  int segment = -1;       // edge index for rods
  double param = 0.0;     // position along the segment in [0, 1]
  Vec3 offset = Vec3::Zero();  // witness point minus body origin, world frame

  bool operator==(const ContactSide&) const = default;
};

struct PatchData {
  double area = 0.0;      // m^2
  double pressure = 0.0;  // Pa
  double gradient = 0.0;  // effective pressure slope along -n, Pa/m
};

/// Normal force A p, stiffness A g and effective signed distance -p / g of
/// a patch polygon.
double patch_normal_force(const PatchData& patch);
double patch_stiffness(const PatchData& patch);
double patch_signed_distance(const PatchData& patch);

struct ContactPoint {
  ContactSide a, b;
  Vec3 position = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();  // from B into A
  double signed_distance = 0.0;
  double friction = 0.0;
  std::optional<PatchData> patch;
};

/// Orthonormal (t1, t2, n) with n the contact normal.
Mat3 contact_frame(const Vec3& normal);

/// Point contacts between two primitives whose signed distance is at most
/// `margin`. Sides are left unset.
std::vector<ContactPoint> point_contact_query(const Shape& a, const Shape& b,
                                              double margin = 0.0);

// ---------------------------------------------------------------------------
// Broad phase.

struct CollisionObject {
  Shape shape;
  ContactSide owner;     // param/offset unused
  int group = -1;        // objects of the same rod share a group
  int segment = -1;      // edge index inside the group
  int group_edges = 0;   // number of edges of the rod (for wrap-around)
  bool closed = false;   // closed rod: first and last edges are adjacent
  bool self_collision = true;
  bool dynamic = true;   // pairs of two non-dynamic objects are skipped
  double friction = 0.0;
};

struct CandidatePair {
  int first = 0;
  int second = 0;  // first < second
  bool operator==(const CandidatePair&) const = default;
  auto operator<=>(const CandidatePair&) const = default;
};

struct Aabb {
  Vec3 lo = Vec3::Constant(1e300);
  Vec3 hi = Vec3::Constant(-1e300);
  bool overlaps(const Aabb& o) const {
    return (lo.array() <= o.hi.array()).all() && (o.lo.array() <= hi.array()).all();
  }
};

Aabb shape_bounds(const Shape& shape);

/// Capsule spanning the segment a-b.
Shape segment_capsule(const Vec3& a, const Vec3& b, double radius);

/// Box spanning the segment a-b with `width` along `d1` and `height` along
/// the remaining direction.
Shape segment_box(const Vec3& a, const Vec3& b, const Vec3& d1, double width, double height);

/// True if two objects must never be tested against each other: the same
/// rod with self-collision disabled, or segments of one rod within
/// `exclusion` edges of each other (1 = sharing a node).
bool excluded_pair(const CollisionObject& a, const CollisionObject& b, int exclusion = 1);

/// Sweep-and-prune over bounds inflated by `margin`; returns sorted pairs.
std::vector<CandidatePair> filament_self_and_body_pairs(const std::vector<CollisionObject>& objects,
                                                        double margin = 0.0, int exclusion = 1);

// ---------------------------------------------------------------------------
// Pressure-field contact.

struct PressureBody {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 4>> tets;
  std::vector<double> pressure;  // per vertex
  double p_max = 0.0;
  /// Half-spaces are represented analytically: pressure p_max * depth /
  /// slab_depth below the plane z = 0 of `slab_pose`, down to slab_depth.
  std::optional<double> slab_depth;
  Pose slab_pose;

  PressureBody transformed(const Pose& pose) const;
};

/// Tetrahedralizes `shape` (in world coordinates, using shape.pose) with zero
/// pressure on the boundary and p_max at the center or axis. `resolution`
/// counts refinement levels; half-spaces become an analytic slab.
PressureBody build_pressure_body(const Shape& shape, double p_max, int resolution,
                                 double slab_depth = 1.0);

struct PatchPolygon {
  std::vector<Vec3> vertices;
  Vec3 normal = Vec3::UnitZ();
  Vec3 centroid = Vec3::Zero();
  double area = 0.0;
  double pressure = 0.0;
  double gradient = 0.0;
  double gradient_a = 0.0, gradient_b = 0.0;
};

/// Equal-pressure polygons between two bodies given in world coordinates,
/// each reduced to a point contact. Sides are left unset.
std::vector<ContactPoint> patch_contact_query(const PressureBody& a, const PressureBody& b,
                                              std::vector<PatchPolygon>* polygons = nullptr);

/// One polygon per line: `ida idb nx ny nz area x0 y0 z0 x1 y1 z1 ...`.
void write_polygon_soup(std::ostream& out, int body_a, int body_b,
                        const std::vector<PatchPolygon>& polygons);

// ---------------------------------------------------------------------------
// Contact Jacobian.

/// Where each rod and body lives in the generalized velocity vector. Bodies
/// occupy six entries (angular, then linear velocity, world frame); an
/// offset of -1 marks a body without velocity DoFs (static).
struct DofLayout {
  std::vector<int> rod_offsets;
  std::vector<int> rod_nodes;
  std::vector<int> body_offsets;
  int num_dofs = 0;
};

/// Sparse J (num_dofs x 3 n_c) with v_c = J^T v, v_c stacked per contact in
/// its (t1, t2, n) frame, velocity of A relative to B.
Eigen::SparseMatrix<double> contact_jacobian(const std::vector<ContactPoint>& contacts,
                                             const DofLayout& layout);

/// Harmonic combination 2 mu_a mu_b / (mu_a + mu_b), zero if either is zero.
double combine_friction(double mu_a, double mu_b);

}  // namespace filsim
