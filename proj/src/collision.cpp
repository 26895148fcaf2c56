#include "filsim/collision.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <ostream>

namespace filsim {

namespace {

constexpr double kMinPatchArea = 1e-14;
constexpr double kMinGradient = 1e-12;
constexpr double kHuge = 1e300;

struct Ball {
  Vec3 center;
  double radius;
};

Vec3 capsule_end(const Capsule& c, const Pose& pose, double sign) {
  return pose.apply(Vec3(0.0, 0.0, sign * c.half_length));
}

/// Closest points between segments p0-p1 and q0-q1 (parameters in [0, 1]).
std::pair<double, double> closest_segment_params(const Vec3& p0, const Vec3& p1, const Vec3& q0,
                                                 const Vec3& q1) {
  const Vec3 d1 = p1 - p0, d2 = q1 - q0, r = p0 - q0;
  const double a = d1.squaredNorm(), e = d2.squaredNorm(), f = d2.dot(r);
  constexpr double kEps = 1e-300;
  if (a <= kEps && e <= kEps) return {0.0, 0.0};
  if (a <= kEps) return {0.0, std::clamp(f / e, 0.0, 1.0)};
  const double c = d1.dot(r);
  if (e <= kEps) return {std::clamp(-c / a, 0.0, 1.0), 0.0};
  const double b = d1.dot(d2), denom = a * e - b * b;
  double s = denom > 1e-14 * a * e ? std::clamp((b * f - c * e) / denom, 0.0, 1.0) : 0.5;
  double t = (b * s + f) / e;
  if (t < 0.0) {
    t = 0.0;
    s = std::clamp(-c / a, 0.0, 1.0);
  } else if (t > 1.0) {
    t = 1.0;
    s = std::clamp((b - c) / a, 0.0, 1.0);
  }
  return {s, t};
}

double closest_point_param(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 d = b - a;
  const double len2 = d.squaredNorm();
  if (len2 <= 1e-300) return 0.0;
  return std::clamp((p - a).dot(d) / len2, 0.0, 1.0);
}

std::optional<ContactPoint> ball_ball(const Ball& a, const Ball& b, double margin) {
  const Vec3 d = a.center - b.center;
  const double len = d.norm();
  const double phi = len - a.radius - b.radius;
  if (phi > margin) return std::nullopt;
  ContactPoint c;
  c.normal = len > 1e-15 ? Vec3(d / len) : Vec3::UnitZ();
  c.signed_distance = phi;
  const Vec3 on_a = a.center - a.radius * c.normal;
  const Vec3 on_b = b.center + b.radius * c.normal;
  c.position = 0.5 * (on_a + on_b);
  return c;
}

struct BoxDistance {
  double distance;
  Vec3 normal;   // outward, world frame
  Vec3 closest;  // on the box surface, world frame
};

BoxDistance point_box(const Box& box, const Pose& pose, const Vec3& p) {
  const Vec3 x = pose.inverse_apply(p);
  const Vec3& h = box.half_extents;
  const Vec3 q = x.cwiseAbs() - h;
  BoxDistance out;
  if ((q.array() > 0.0).any()) {
    const Vec3 c = x.cwiseMax(-h).cwiseMin(h);
    const Vec3 diff = x - c;
    out.distance = diff.norm();
    out.normal = pose.rotation * (diff / out.distance);
    out.closest = pose.apply(c);
  } else {
    int axis = 0;
    q.maxCoeff(&axis);
    const double side = x[axis] >= 0.0 ? 1.0 : -1.0;
    out.distance = q[axis];
    Vec3 n = Vec3::Zero();
    n[axis] = side;
    Vec3 c = x;
    c[axis] = side * h[axis];
    out.normal = pose.rotation * n;
    out.closest = pose.apply(c);
  }
  return out;
}

std::optional<ContactPoint> ball_box(const Ball& a, const Box& box, const Pose& pose,
                                     double margin) {
  const BoxDistance d = point_box(box, pose, a.center);
  const double phi = d.distance - a.radius;
  if (phi > margin) return std::nullopt;
  ContactPoint c;
  c.normal = d.normal;
  c.signed_distance = phi;
  c.position = 0.5 * ((a.center - a.radius * d.normal) + d.closest);
  return c;
}

std::optional<ContactPoint> ball_halfspace(const Ball& a, const Pose& plane, double margin) {
  const Vec3 n = plane.rotation.col(2);
  const double h = n.dot(a.center - plane.translation);
  const double phi = h - a.radius;
  if (phi > margin) return std::nullopt;
  ContactPoint c;
  c.normal = n;
  c.signed_distance = phi;
  c.position = 0.5 * ((a.center - a.radius * n) + (a.center - h * n));
  return c;
}

std::array<Vec3, 8> box_vertices(const Box& box, const Pose& pose) {
  std::array<Vec3, 8> v;
  for (int i = 0; i < 8; ++i) {
    const Vec3 s((i & 1) ? 1.0 : -1.0, (i & 2) ? 1.0 : -1.0, (i & 4) ? 1.0 : -1.0);
    v[i] = pose.apply(s.cwiseProduct(box.half_extents));
  }
  return v;
}

void push(std::vector<ContactPoint>& out, std::optional<ContactPoint> c) {
  if (c) out.push_back(*c);
}

// Native queries, ordered by variant index of A <= index of B.

std::vector<ContactPoint> query(const Sphere& a, const Pose& pa, const Sphere& b, const Pose& pb,
                                double m) {
  std::vector<ContactPoint> out;
  push(out, ball_ball({pa.translation, a.radius}, {pb.translation, b.radius}, m));
  return out;
}

std::vector<ContactPoint> query(const Sphere& a, const Pose& pa, const Capsule& b, const Pose& pb,
                                double m) {
  const Vec3 e0 = capsule_end(b, pb, -1.0), e1 = capsule_end(b, pb, 1.0);
  const double s = closest_point_param(pa.translation, e0, e1);
  std::vector<ContactPoint> out;
  push(out, ball_ball({pa.translation, a.radius}, {e0 + s * (e1 - e0), b.radius}, m));
  return out;
}

std::vector<ContactPoint> query(const Sphere& a, const Pose& pa, const Box& b, const Pose& pb,
                                double m) {
  std::vector<ContactPoint> out;
  push(out, ball_box({pa.translation, a.radius}, b, pb, m));
  return out;
}

std::vector<ContactPoint> query(const Sphere& a, const Pose& pa, const HalfSpace&, const Pose& pb,
                                double m) {
  std::vector<ContactPoint> out;
  push(out, ball_halfspace({pa.translation, a.radius}, pb, m));
  return out;
}

std::vector<ContactPoint> query(const Capsule& a, const Pose& pa, const Capsule& b,
                                const Pose& pb, double m) {
  const Vec3 a0 = capsule_end(a, pa, -1.0), a1 = capsule_end(a, pa, 1.0);
  const Vec3 b0 = capsule_end(b, pb, -1.0), b1 = capsule_end(b, pb, 1.0);
  const auto [s, t] = closest_segment_params(a0, a1, b0, b1);
  std::vector<ContactPoint> out;
  push(out, ball_ball({a0 + s * (a1 - a0), a.radius}, {b0 + t * (b1 - b0), b.radius}, m));
  return out;
}

std::vector<ContactPoint> query(const Capsule& a, const Pose& pa, const Box& b, const Pose& pb,
                                double m) {
  const Vec3 a0 = capsule_end(a, pa, -1.0), a1 = capsule_end(a, pa, 1.0);
  auto f = [&](double s) { return point_box(b, pb, a0 + s * (a1 - a0)).distance; };
  // The signed distance to a convex set is convex along the segment.
  const double ratio = 0.5 * (std::sqrt(5.0) - 1.0);
  double lo = 0.0, hi = 1.0;
  double x1 = hi - ratio * (hi - lo), x2 = lo + ratio * (hi - lo);
  double f1 = f(x1), f2 = f(x2);
  for (int it = 0; it < 80 && hi - lo > 1e-13; ++it) {
    if (f1 <= f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - ratio * (hi - lo);
      f1 = f(x1);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + ratio * (hi - lo);
      f2 = f(x2);
    }
  }
  double best = 0.5 * (lo + hi);
  for (double cand : {0.0, 1.0})
    if (f(cand) < f(best)) best = cand;
  std::vector<ContactPoint> out;
  push(out, ball_box({a0 + best * (a1 - a0), a.radius}, b, pb, m));
  return out;
}

std::vector<ContactPoint> query(const Capsule& a, const Pose& pa, const HalfSpace&,
                                const Pose& pb, double m) {
  std::vector<ContactPoint> out;
  for (double sign : {-1.0, 1.0}) push(out, ball_halfspace({capsule_end(a, pa, sign), a.radius}, pb, m));
  return out;
}

std::vector<ContactPoint> query(const Box& a, const Pose& pa, const Box& b, const Pose& pb,
                                double m) {
  std::vector<ContactPoint> out;
  for (const Vec3& v : box_vertices(a, pa)) {
    const BoxDistance d = point_box(b, pb, v);
    if (d.distance > m) continue;
    ContactPoint c;
    c.normal = d.normal;
    c.signed_distance = d.distance;
    c.position = 0.5 * (v + d.closest);
    out.push_back(c);
  }
  for (const Vec3& v : box_vertices(b, pb)) {
    const BoxDistance d = point_box(a, pa, v);
    if (d.distance > m) continue;
    ContactPoint c;
    c.normal = -d.normal;
    c.signed_distance = d.distance;
    c.position = 0.5 * (v + d.closest);
    out.push_back(c);
  }
  return out;
}

std::vector<ContactPoint> query(const Box& a, const Pose& pa, const HalfSpace&, const Pose& pb,
                                double m) {
  std::vector<ContactPoint> out;
  for (const Vec3& v : box_vertices(a, pa)) push(out, ball_halfspace({v, 0.0}, pb, m));
  return out;
}

std::vector<ContactPoint> query(const HalfSpace&, const Pose&, const HalfSpace&, const Pose&,
                                double) {
  throw SimError(ErrorCode::kUnsupportedPair, "half-space against half-space");
}

}  // namespace

void Shape::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw SimError(ErrorCode::kInvalidParameters, what);
  };
  require((pose.rotation * pose.rotation.transpose() - Mat3::Identity()).norm() < 1e-9,
          "shape rotation is not orthonormal");
  if (const auto* s = std::get_if<Sphere>(&geometry)) require(s->radius > 0.0, "sphere radius");
  if (const auto* c = std::get_if<Capsule>(&geometry))
    require(c->radius > 0.0 && c->half_length >= 0.0, "capsule dimensions");
  if (const auto* b = std::get_if<Box>(&geometry))
    require((b->half_extents.array() > 0.0).all(), "box half extents");
}

Mat3 contact_frame(const Vec3& normal) {
  Mat3 f;
  const Vec3 t1 = any_orthogonal(normal);
  f.col(0) = t1;
  f.col(1) = normal.cross(t1);
  f.col(2) = normal;
  return f;
}

std::vector<ContactPoint> point_contact_query(const Shape& a, const Shape& b, double margin) {
  if (a.geometry.index() <= b.geometry.index()) {
    return std::visit(
        [&](const auto& ga, const auto& gb) -> std::vector<ContactPoint> {
          if constexpr (requires { query(ga, a.pose, gb, b.pose, margin); })
            return query(ga, a.pose, gb, b.pose, margin);
          else
            throw SimError(ErrorCode::kUnsupportedPair, "unordered pair");
        },
        a.geometry, b.geometry);
  }
  std::vector<ContactPoint> out = point_contact_query(b, a, margin);
  for (ContactPoint& c : out) c.normal = -c.normal;
  return out;
}

double patch_normal_force(const PatchData& patch) { return patch.area * patch.pressure; }
double patch_stiffness(const PatchData& patch) { return patch.area * patch.gradient; }
double patch_signed_distance(const PatchData& patch) { return -patch.pressure / patch.gradient; }

double combine_friction(double mu_a, double mu_b) {
  if (mu_a <= 0.0 || mu_b <= 0.0) return 0.0;
  return 2.0 * mu_a * mu_b / (mu_a + mu_b);
}

// ---------------------------------------------------------------------------

Aabb shape_bounds(const Shape& shape) {
  Aabb box;
  const Pose& p = shape.pose;
  if (const auto* s = std::get_if<Sphere>(&shape.geometry)) {
    box.lo = p.translation.array() - s->radius;
    box.hi = p.translation.array() + s->radius;
  } else if (const auto* c = std::get_if<Capsule>(&shape.geometry)) {
    const Vec3 e0 = capsule_end(*c, p, -1.0), e1 = capsule_end(*c, p, 1.0);
    box.lo = e0.cwiseMin(e1).array() - c->radius;
    box.hi = e0.cwiseMax(e1).array() + c->radius;
  } else if (const auto* b = std::get_if<Box>(&shape.geometry)) {
    const Vec3 ext = p.rotation.cwiseAbs() * b->half_extents;
    box.lo = p.translation - ext;
    box.hi = p.translation + ext;
  } else {
    box.lo = Vec3::Constant(-kHuge);
    box.hi = Vec3::Constant(kHuge);
    // Axis-aligned planes bound one coordinate.
    const Vec3 n = p.rotation.col(2);
    for (int k = 0; k < 3; ++k) {
      if (std::abs(std::abs(n[k]) - 1.0) > 1e-14) continue;
      if (n[k] > 0.0) box.hi[k] = p.translation[k];
      else box.lo[k] = p.translation[k];
    }
  }
  return box;
}

Shape segment_capsule(const Vec3& a, const Vec3& b, double radius) {
  Shape s;
  const Vec3 d = b - a;
  const double len = d.norm();
  const Vec3 z = len > 0.0 ? Vec3(d / len) : Vec3::UnitZ();
  const Vec3 x = any_orthogonal(z);
  s.pose.rotation.col(0) = x;
  s.pose.rotation.col(1) = z.cross(x);
  s.pose.rotation.col(2) = z;
  s.pose.translation = 0.5 * (a + b);
  s.geometry = Capsule{radius, 0.5 * len};
  return s;
}

Shape segment_box(const Vec3& a, const Vec3& b, const Vec3& d1, double width, double height) {
  Shape s;
  const Vec3 d = b - a;
  const double len = d.norm();
  const Vec3 z = d / len;
  const Vec3 x = (d1 - d1.dot(z) * z).normalized();
  s.pose.rotation.col(0) = x;
  s.pose.rotation.col(1) = z.cross(x);
  s.pose.rotation.col(2) = z;
  s.pose.translation = 0.5 * (a + b);
  s.geometry = Box{Vec3(0.5 * width, 0.5 * height, 0.5 * len)};
  return s;
}

bool excluded_pair(const CollisionObject& a, const CollisionObject& b, int exclusion) {
  if (!a.dynamic && !b.dynamic) return true;
  if (a.group < 0 || a.group != b.group) return false;
  if (!a.self_collision || !b.self_collision) return true;
  int d = std::abs(a.segment - b.segment);
  if (a.closed) d = std::min(d, a.group_edges - d);
  return d <= exclusion;
}

std::vector<CandidatePair> filament_self_and_body_pairs(const std::vector<CollisionObject>& objects,
                                                        double margin, int exclusion) {
  const int n = static_cast<int>(objects.size());
  std::vector<Aabb> bounds(n);
  for (int i = 0; i < n; ++i) {
    bounds[i] = shape_bounds(objects[i].shape);
    bounds[i].lo.array() -= margin;
    bounds[i].hi.array() += margin;
  }
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return bounds[a].lo.x() < bounds[b].lo.x(); });
  std::vector<CandidatePair> pairs;
  std::vector<int> active;
  for (int idx : order) {
    const double x = bounds[idx].lo.x();
    std::erase_if(active, [&](int a) { return bounds[a].hi.x() < x; });
    for (int other : active) {
      if (!bounds[idx].overlaps(bounds[other])) continue;
      if (excluded_pair(objects[idx], objects[other], exclusion)) continue;
      pairs.push_back({std::min(idx, other), std::max(idx, other)});
    }
    active.push_back(idx);
  }
  std::sort(pairs.begin(), pairs.end());
  return pairs;
}

// ---------------------------------------------------------------------------
// Pressure bodies.

namespace {

struct MeshBuilder {
  PressureBody body;

  int vertex(const Vec3& x, double p) {
    body.vertices.push_back(x);
    body.pressure.push_back(p);
    return static_cast<int>(body.vertices.size()) - 1;
  }

  void tet(int a, int b, int c, int d) {
    const auto& v = body.vertices;
    const double vol = (v[b] - v[a]).cross(v[c] - v[a]).dot(v[d] - v[a]);
    if (std::abs(vol) < 1e-300) return;
    if (vol < 0.0) std::swap(c, d);
    body.tets.push_back({a, b, c, d});
  }

  /// Cone from triangle (a, b, c) to apex.
  void cone(int apex, int a, int b, int c) { tet(apex, a, b, c); }
};

void icosphere(std::vector<Vec3>& verts, std::vector<std::array<int, 3>>& faces, int levels) {
  const double t = 0.5 * (1.0 + std::sqrt(5.0));
  verts = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
           {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (Vec3& v : verts) v.normalize();
  faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
           {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
           {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
           {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (int level = 0; level < levels; ++level) {
    std::map<std::pair<int, int>, int> midpoints;
    auto mid = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = midpoints.find(key);
      if (it != midpoints.end()) return it->second;
      verts.push_back((verts[a] + verts[b]).normalized());
      const int id = static_cast<int>(verts.size()) - 1;
      midpoints.emplace(key, id);
      return id;
    };
    std::vector<std::array<int, 3>> next;
    for (const auto& f : faces) {
      const int ab = mid(f[0], f[1]), bc = mid(f[1], f[2]), ca = mid(f[2], f[0]);
      next.push_back({f[0], ab, ca});
      next.push_back({f[1], bc, ab});
      next.push_back({f[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    faces = std::move(next);
  }
}

PressureBody sphere_body(const Sphere& s, const Pose& pose, double p_max, int resolution) {
  std::vector<Vec3> verts;
  std::vector<std::array<int, 3>> faces;
  icosphere(verts, faces, resolution);
  MeshBuilder m;
  const int center = m.vertex(pose.translation, p_max);
  for (const Vec3& v : verts) m.vertex(pose.apply(s.radius * v), 0.0);
  for (const auto& f : faces) m.cone(center, f[0] + 1, f[1] + 1, f[2] + 1);
  return m.body;
}

PressureBody capsule_body(const Capsule& c, const Pose& pose, double p_max, int resolution) {
  const int around = 6 << resolution;
  const int lat = 1 << resolution;  // latitude bands per cap
  const double arc = 2.0 * std::numbers::pi * c.radius / around;
  const int stations =
      std::max(1, static_cast<int>(std::ceil(2.0 * c.half_length / std::max(arc, 1e-300))));
  MeshBuilder m;
  auto ring = [&](double z, double rho, std::vector<int>& ids) {
    ids.resize(around);
    for (int i = 0; i < around; ++i) {
      const double th = 2.0 * std::numbers::pi * i / around;
      ids[i] = m.vertex(pose.apply(Vec3(rho * std::cos(th), rho * std::sin(th), z)), 0.0);
    }
  };
  std::vector<int> axis(stations + 1);
  std::vector<std::vector<int>> rings(stations + 1);
  for (int k = 0; k <= stations; ++k) {
    const double z = -c.half_length + 2.0 * c.half_length * k / stations;
    axis[k] = m.vertex(pose.apply(Vec3(0, 0, z)), p_max);
    ring(z, c.radius, rings[k]);
  }
  for (int k = 0; k < stations; ++k) {
    for (int i = 0; i < around; ++i) {
      const int j = (i + 1) % around;
      // Prism (axis_k, s_ki, s_kj) -> (axis_k+1, s_k+1i, s_k+1j) as three tets.
      const int v0 = axis[k], v1 = rings[k][i], v2 = rings[k][j];
      const int v3 = axis[k + 1], v4 = rings[k + 1][i], v5 = rings[k + 1][j];
      m.tet(v0, v1, v2, v3);
      m.tet(v1, v2, v3, v4);
      m.tet(v2, v3, v4, v5);
    }
  }
  for (double side : {-1.0, 1.0}) {
    const int apex = side < 0 ? axis.front() : axis.back();
    std::vector<int> prev = side < 0 ? rings.front() : rings.back();
    for (int l = 1; l <= lat; ++l) {
      const double ang = 0.5 * std::numbers::pi * l / lat;
      const double z = side * (c.half_length + c.radius * std::sin(ang));
      if (l == lat) {
        const int pole = m.vertex(pose.apply(Vec3(0, 0, z)), 0.0);
        for (int i = 0; i < around; ++i) m.cone(apex, prev[i], prev[(i + 1) % around], pole);
        break;
      }
      std::vector<int> cur;
      ring(z, c.radius * std::cos(ang), cur);
      for (int i = 0; i < around; ++i) {
        const int j = (i + 1) % around;
        m.cone(apex, prev[i], prev[j], cur[j]);
        m.cone(apex, prev[i], cur[j], cur[i]);
      }
      prev = std::move(cur);
    }
  }
  return m.body;
}

PressureBody box_body(const Box& b, const Pose& pose, double p_max, int resolution) {
  const int cells = 1 << resolution;
  MeshBuilder m;
  const int center = m.vertex(pose.translation, p_max);
  const Vec3& h = b.half_extents;
  std::map<std::array<long, 3>, int> ids;
  auto surface_vertex = [&](const Vec3& unit) {
    // unit has entries in [-1, 1] on a grid of step 2 / cells.
    const std::array<long, 3> key{std::lround(unit.x() * cells), std::lround(unit.y() * cells),
                                  std::lround(unit.z() * cells)};
    auto it = ids.find(key);
    if (it != ids.end()) return it->second;
    const int id = m.vertex(pose.apply(unit.cwiseProduct(h)), 0.0);
    ids.emplace(key, id);
    return id;
  };
  for (int axis = 0; axis < 3; ++axis) {
    for (double side : {-1.0, 1.0}) {
      const int u = (axis + 1) % 3, w = (axis + 2) % 3;
      for (int i = 0; i < cells; ++i) {
        for (int j = 0; j < cells; ++j) {
          auto corner = [&](int di, int dj) {
            Vec3 x;
            x[axis] = side;
            x[u] = -1.0 + 2.0 * (i + di) / cells;
            x[w] = -1.0 + 2.0 * (j + dj) / cells;
            return surface_vertex(x);
          };
          const int a = corner(0, 0), bb = corner(1, 0), cc = corner(1, 1), d = corner(0, 1);
          m.cone(center, a, bb, cc);
          m.cone(center, a, cc, d);
        }
      }
    }
  }
  return m.body;
}

/// Linear pressure field p(x) = grad . x + offset.
struct LinearField {
  Vec3 grad;
  double offset;
  double at(const Vec3& x) const { return grad.dot(x) + offset; }
};

LinearField tet_field(const PressureBody& body, const std::array<int, 4>& t) {
  const auto& v = body.vertices;
  const auto& p = body.pressure;
  Mat3 e;
  e.row(0) = v[t[1]] - v[t[0]];
  e.row(1) = v[t[2]] - v[t[0]];
  e.row(2) = v[t[3]] - v[t[0]];
  const Vec3 dp(p[t[1]] - p[t[0]], p[t[2]] - p[t[0]], p[t[3]] - p[t[0]]);
  LinearField f;
  f.grad = e.partialPivLu().solve(dp);
  f.offset = p[t[0]] - f.grad.dot(v[t[0]]);
  return f;
}

/// Convex region as inward half-spaces n . x >= c.
struct HalfPlane {
  Vec3 n;
  double c;
};

std::array<HalfPlane, 4> tet_faces(const PressureBody& body, const std::array<int, 4>& t) {
  std::array<HalfPlane, 4> out;
  const auto& v = body.vertices;
  for (int k = 0; k < 4; ++k) {
    const Vec3& a = v[t[(k + 1) % 4]];
    const Vec3& b = v[t[(k + 2) % 4]];
    const Vec3& c = v[t[(k + 3) % 4]];
    Vec3 n = (b - a).cross(c - a);
    if (n.dot(v[t[k]] - a) < 0.0) n = -n;
    out[k] = {n, n.dot(a)};
  }
  return out;
}

std::vector<Vec3> clip(const std::vector<Vec3>& poly, const HalfPlane& h) {
  std::vector<Vec3> out;
  const size_t n = poly.size();
  for (size_t i = 0; i < n; ++i) {
    const Vec3& a = poly[i];
    const Vec3& b = poly[(i + 1) % n];
    const double da = h.n.dot(a) - h.c, db = h.n.dot(b) - h.c;
    if (da >= 0.0) out.push_back(a);
    if ((da >= 0.0) != (db >= 0.0)) out.push_back(a + (da / (da - db)) * (b - a));
  }
  return out;
}

/// Intersection of the plane {x : n . x = c} with tetrahedron `t`, as a
/// convex polygon ordered counterclockwise about n.
std::vector<Vec3> plane_tet_section(const PressureBody& body, const std::array<int, 4>& t,
                                    const Vec3& n, double c) {
  std::vector<Vec3> pts;
  const auto& v = body.vertices;
  for (int i = 0; i < 4; ++i) {
    for (int j = i + 1; j < 4; ++j) {
      const double di = n.dot(v[t[i]]) - c, dj = n.dot(v[t[j]]) - c;
      if ((di > 0.0) != (dj > 0.0)) pts.push_back(v[t[i]] + (di / (di - dj)) * (v[t[j]] - v[t[i]]));
      else if (di == 0.0 && dj != 0.0) pts.push_back(v[t[i]]);
    }
  }
  if (pts.size() < 3) return {};
  Vec3 centroid = Vec3::Zero();
  for (const Vec3& p : pts) centroid += p;
  centroid /= static_cast<double>(pts.size());
  const Vec3 u = any_orthogonal(n.normalized());
  const Vec3 w = n.normalized().cross(u);
  std::sort(pts.begin(), pts.end(), [&](const Vec3& a, const Vec3& b) {
    return std::atan2((a - centroid).dot(w), (a - centroid).dot(u)) <
           std::atan2((b - centroid).dot(w), (b - centroid).dot(u));
  });
  return pts;
}

std::pair<double, Vec3> area_centroid(const std::vector<Vec3>& poly, const Vec3& n) {
  double area = 0.0;
  Vec3 centroid = Vec3::Zero();
  for (size_t i = 1; i + 1 < poly.size(); ++i) {
    const double a = 0.5 * (poly[i] - poly[0]).cross(poly[i + 1] - poly[0]).dot(n);
    area += a;
    centroid += a * (poly[0] + poly[i] + poly[i + 1]) / 3.0;
  }
  if (std::abs(area) > 0.0) centroid /= area;
  return {std::abs(area), centroid};
}

Aabb tet_bounds(const PressureBody& body, const std::array<int, 4>& t) {
  Aabb b;
  for (int k : t) {
    b.lo = b.lo.cwiseMin(body.vertices[k]);
    b.hi = b.hi.cwiseMax(body.vertices[k]);
  }
  return b;
}

struct Region {
  LinearField field;
  std::vector<HalfPlane> planes;
};

/// Polygon between tet field `fa` over tet `ta` of `a` and region `rb`.
std::optional<PatchPolygon> equal_pressure_polygon(const PressureBody& a,
                                                   const std::array<int, 4>& ta,
                                                   const LinearField& fa, const Region& rb) {
  const Vec3 g = fa.grad - rb.field.grad;
  const double gn = g.norm();
  if (gn < kMinGradient)
    throw SimError(ErrorCode::kDegenerateGradient, "pressure fields have equal gradients");
  std::vector<Vec3> poly = plane_tet_section(a, ta, g, rb.field.offset - fa.offset);
  for (const HalfPlane& h : rb.planes) {
    if (poly.size() < 3) return std::nullopt;
    poly = clip(poly, h);
  }
  if (poly.size() < 3) return std::nullopt;
  PatchPolygon out;
  out.normal = g / gn;
  const auto [area, centroid] = area_centroid(poly, out.normal);
  if (area < kMinPatchArea) return std::nullopt;
  out.gradient_a = fa.grad.dot(out.normal);
  out.gradient_b = -rb.field.grad.dot(out.normal);
  if (out.gradient_a <= 0.0 || out.gradient_b <= 0.0) return std::nullopt;
  out.vertices = std::move(poly);
  out.area = area;
  out.centroid = centroid;
  out.pressure = fa.at(centroid);
  out.gradient = out.gradient_a * out.gradient_b / (out.gradient_a + out.gradient_b);
  return out;
}

}  // namespace

PressureBody PressureBody::transformed(const Pose& pose) const {
  PressureBody out = *this;
  for (Vec3& v : out.vertices) v = pose.apply(v);
  out.slab_pose.rotation = pose.rotation * slab_pose.rotation;
  out.slab_pose.translation = pose.apply(slab_pose.translation);
  return out;
}

PressureBody build_pressure_body(const Shape& shape, double p_max, int resolution,
                                 double slab_depth) {
  shape.validate();
  if (!(p_max > 0.0)) throw SimError(ErrorCode::kInvalidParameters, "p_max must be positive");
  if (resolution < 0)
    throw SimError(ErrorCode::kResolutionTooCoarse, "mesh resolution must be >= 0");
  PressureBody body;
  if (const auto* s = std::get_if<Sphere>(&shape.geometry))
    body = sphere_body(*s, shape.pose, p_max, resolution);
  else if (const auto* c = std::get_if<Capsule>(&shape.geometry))
    body = capsule_body(*c, shape.pose, p_max, resolution);
  else if (const auto* b = std::get_if<Box>(&shape.geometry))
    body = box_body(*b, shape.pose, p_max, resolution);
  else {
    if (!(slab_depth > 0.0))
      throw SimError(ErrorCode::kInvalidParameters, "slab depth must be positive");
    body.slab_depth = slab_depth;
    body.slab_pose = shape.pose;
  }
  body.p_max = p_max;
  if (!body.slab_depth &&
      std::none_of(body.pressure.begin(), body.pressure.end(), [](double p) { return p > 0.0; }))
    throw SimError(ErrorCode::kResolutionTooCoarse, "mesh has no interior vertex");
  return body;
}

std::vector<ContactPoint> patch_contact_query(const PressureBody& a, const PressureBody& b,
                                              std::vector<PatchPolygon>* polygons) {
  if (a.slab_depth && b.slab_depth)
    throw SimError(ErrorCode::kUnsupportedPair, "half-space against half-space");
  if (a.slab_depth) {
    std::vector<ContactPoint> out = patch_contact_query(b, a, polygons);
    for (ContactPoint& c : out) c.normal = -c.normal;
    if (polygons)
      for (PatchPolygon& p : *polygons) {
        p.normal = -p.normal;
        std::swap(p.gradient_a, p.gradient_b);
      }
    return out;
  }

  std::vector<PatchPolygon> found;
  std::vector<LinearField> fields_a(a.tets.size());
  std::vector<Aabb> bounds_a(a.tets.size());
  for (size_t i = 0; i < a.tets.size(); ++i) {
    fields_a[i] = tet_field(a, a.tets[i]);
    bounds_a[i] = tet_bounds(a, a.tets[i]);
  }

  if (b.slab_depth) {
    const Vec3 n = b.slab_pose.rotation.col(2);
    const double top = n.dot(b.slab_pose.translation);
    const double depth = *b.slab_depth;
    Region slab;
    slab.field.grad = -(b.p_max / depth) * n;
    slab.field.offset = (b.p_max / depth) * top;
    slab.planes = {{-n, -top}, {n, top - depth}};
    for (size_t i = 0; i < a.tets.size(); ++i) {
      double lo = kHuge, hi = -kHuge;
      for (int k : a.tets[i]) {
        const double h = n.dot(a.vertices[k]) - top;
        lo = std::min(lo, h);
        hi = std::max(hi, h);
      }
      if (lo > 0.0 || hi < -depth) continue;
      if (auto p = equal_pressure_polygon(a, a.tets[i], fields_a[i], slab)) found.push_back(*p);
    }
  } else {
    std::vector<Aabb> bounds_b(b.tets.size());
    std::vector<int> order(b.tets.size());
    for (size_t j = 0; j < b.tets.size(); ++j) {
      bounds_b[j] = tet_bounds(b, b.tets[j]);
      order[j] = static_cast<int>(j);
    }
    std::sort(order.begin(), order.end(),
              [&](int x, int y) { return bounds_b[x].lo.x() < bounds_b[y].lo.x(); });
    std::vector<double> sorted_lo(order.size());
    double max_width = 0.0;
    for (size_t k = 0; k < order.size(); ++k) {
      sorted_lo[k] = bounds_b[order[k]].lo.x();
      max_width = std::max(max_width, bounds_b[order[k]].hi.x() - sorted_lo[k]);
    }
    std::vector<std::optional<Region>> regions(b.tets.size());
    for (size_t i = 0; i < a.tets.size(); ++i) {
      const auto first = std::lower_bound(sorted_lo.begin(), sorted_lo.end(),
                                          bounds_a[i].lo.x() - max_width);
      for (auto it = first; it != sorted_lo.end() && *it <= bounds_a[i].hi.x(); ++it) {
        const int j = order[it - sorted_lo.begin()];
        if (!bounds_a[i].overlaps(bounds_b[j])) continue;
        if (!regions[j]) {
          Region r;
          r.field = tet_field(b, b.tets[j]);
          for (const HalfPlane& h : tet_faces(b, b.tets[j])) r.planes.push_back(h);
          regions[j] = std::move(r);
        }
        if (auto p = equal_pressure_polygon(a, a.tets[i], fields_a[i], *regions[j]))
          found.push_back(*p);
      }
    }
  }

  std::sort(found.begin(), found.end(), [](const PatchPolygon& x, const PatchPolygon& y) {
    return std::lexicographical_compare(x.centroid.data(), x.centroid.data() + 3,
                                        y.centroid.data(), y.centroid.data() + 3);
  });
  std::vector<ContactPoint> out;
  out.reserve(found.size());
  for (const PatchPolygon& p : found) {
    ContactPoint c;
    c.position = p.centroid;
    c.normal = p.normal;
    c.patch = PatchData{p.area, p.pressure, p.gradient};
    c.signed_distance = patch_signed_distance(*c.patch);
    out.push_back(c);
  }
  if (polygons) *polygons = std::move(found);
  return out;
}

void write_polygon_soup(std::ostream& out, int body_a, int body_b,
                        const std::vector<PatchPolygon>& polygons) {
  for (const PatchPolygon& p : polygons) {
    out << body_a << ' ' << body_b << ' ' << p.normal.x() << ' ' << p.normal.y() << ' '
        << p.normal.z() << ' ' << p.area;
    for (const Vec3& v : p.vertices) out << ' ' << v.x() << ' ' << v.y() << ' ' << v.z();
    out << '\n';
  }
}

// ---------------------------------------------------------------------------

Eigen::SparseMatrix<double> contact_jacobian(const std::vector<ContactPoint>& contacts,
                                             const DofLayout& layout) {
  std::vector<Eigen::Triplet<double>> trip;
  const int nc = static_cast<int>(contacts.size());
  for (int i = 0; i < nc; ++i) {
    const ContactPoint& c = contacts[i];
    const Mat3 frame = contact_frame(c.normal);
    auto add_side = [&](const ContactSide& side, double sign) {
      if (side.kind == ContactSide::Kind::kRodSegment) {
        const int off = layout.rod_offsets[side.index];
        const int n0 = side.segment, n1 = (side.segment + 1) % layout.rod_nodes[side.index];
        for (int k = 0; k < 3; ++k)
          for (int a = 0; a < 3; ++a) {
            const double f = sign * frame(a, k);
            if (f == 0.0) continue;
            trip.emplace_back(off + 4 * n0 + a, 3 * i + k, (1.0 - side.param) * f);
            trip.emplace_back(off + 4 * n1 + a, 3 * i + k, side.param * f);
          }
      } else if (side.kind == ContactSide::Kind::kBody) {
        const int off = layout.body_offsets[side.index];
        if (off < 0) return;
        for (int k = 0; k < 3; ++k) {
          const Vec3 ang = side.offset.cross(frame.col(k));
          for (int a = 0; a < 3; ++a) {
            trip.emplace_back(off + a, 3 * i + k, sign * ang[a]);
            trip.emplace_back(off + 3 + a, 3 * i + k, sign * frame(a, k));
          }
        }
      }
    };
    add_side(c.a, 1.0);
    add_side(c.b, -1.0);
  }
  Eigen::SparseMatrix<double> j(layout.num_dofs, 3 * nc);
  j.setFromTriplets(trip.begin(), trip.end());
  j.prune(0.0);
  return j;
}

}  // namespace filsim
