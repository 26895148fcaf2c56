#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "doctest.h"
#include "filsim/collision.hpp"
#include "filsim/oracles.hpp"

using namespace filsim;

namespace {

Pose random_pose(std::mt19937& rng, double spread) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Pose p;
  p.rotation = Eigen::AngleAxisd(3.0 * u(rng), Vec3(u(rng), u(rng), u(rng)).normalized())
                   .toRotationMatrix();
  p.translation = spread * Vec3(u(rng), u(rng), u(rng));
  return p;
}

Shape at(ShapeGeometry g, const Pose& pose = {}) { return Shape{g, pose}; }

Shape ground() { return at(HalfSpace{}); }

CollisionObject segment_object(const Vec3& a, const Vec3& b, double r, int group, int seg,
                               int edges, bool closed = false) {
  CollisionObject o;
  o.shape = segment_capsule(a, b, r);
  o.owner.kind = ContactSide::Kind::kRodSegment;
  o.owner.index = group;
  o.owner.segment = seg;
  o.group = group;
  o.segment = seg;
  o.group_edges = edges;
  o.closed = closed;
  return o;
}

std::vector<CollisionObject> rod_objects(const std::vector<Vec3>& x, double r, int group = 0) {
  std::vector<CollisionObject> out;
  const int edges = static_cast<int>(x.size()) - 1;
  for (int j = 0; j < edges; ++j) out.push_back(segment_object(x[j], x[j + 1], r, group, j, edges));
  return out;
}

}  // namespace

TEST_CASE("sphere resting in a half-space") {
  Pose p;
  p.translation = Vec3(0, 0, 0.8);
  const auto c = point_contact_query(at(Sphere{1.0}, p), ground());
  REQUIRE(c.size() == 1);
  CHECK(c[0].signed_distance == doctest::Approx(-0.2));
  CHECK((c[0].normal - Vec3(0, 0, 1)).norm() < 1e-15);
  CHECK((c[0].position - Vec3(0, 0, -0.1)).norm() < 1e-15);
}

TEST_CASE("separated spheres produce no contact") {
  Pose p;
  p.translation = Vec3(3, 0, 0);
  CHECK(point_contact_query(at(Sphere{1.0}), at(Sphere{1.0}, p)).empty());
  CHECK(point_contact_query(at(Sphere{1.0}), at(Sphere{1.0}, p), 1.0).size() == 1);
}

TEST_CASE("half-space pairs are unsupported") {
  CHECK_THROWS_AS(point_contact_query(ground(), ground()), SimError);
}

TEST_CASE("capsule-box distance agrees with a sampled estimate") {
  std::mt19937 rng(41);
  std::uniform_real_distribution<double> u(0.05, 0.3);
  int overlapping = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const Capsule cap{u(rng) * 0.5, u(rng)};
    const Box box{Vec3(u(rng), u(rng), u(rng))};
    const Pose pb = random_pose(rng, 0.2);
    Pose pc = random_pose(rng, 0.0);
    // Place the capsule near the box along a random direction.
    std::uniform_real_distribution<double> dist(-0.03, 0.2);
    const Vec3 dir = random_pose(rng, 0.0).rotation.col(0);
    pc.translation = pb.translation + dir * (box.half_extents.maxCoeff() + cap.radius + dist(rng));
    const double oracle = oracles::sampled_capsule_box_distance(cap, pc, box, pb);
    const auto c = point_contact_query(at(cap, pc), at(box, pb), 10.0);
    REQUIRE(c.size() == 1);
    CAPTURE(trial);
    CHECK(std::abs(c[0].signed_distance - oracle) <= 1e-3);
    overlapping += c[0].signed_distance < 0.0;
  }
  CHECK(overlapping > 0);
}

TEST_CASE("swapping the bodies negates the normal and keeps the distance") {
  std::mt19937 rng(43);
  const std::vector<ShapeGeometry> shapes{Sphere{0.3}, Capsule{0.2, 0.3}, Box{Vec3(0.3, 0.2, 0.25)},
                                          HalfSpace{}};
  for (int trial = 0; trial < 40; ++trial) {
    for (size_t i = 0; i < shapes.size(); ++i) {
      for (size_t j = 0; j < shapes.size(); ++j) {
        if (i == 3 && j == 3) continue;
        const Shape a = at(shapes[i], random_pose(rng, 0.3));
        const Shape b = at(shapes[j], random_pose(rng, 0.3));
        const auto ab = point_contact_query(a, b, 0.1);
        const auto ba = point_contact_query(b, a, 0.1);
        REQUIRE(ab.size() == ba.size());
        for (const ContactPoint& c : ab) {
          // Box-box lists vertices of each box in turn; match by position.
          bool matched = false;
          for (const ContactPoint& d : ba) {
            if ((c.position - d.position).norm() > 1e-12) continue;
            matched = true;
            CHECK(d.signed_distance == doctest::Approx(c.signed_distance).epsilon(1e-12));
            CHECK((d.normal + c.normal).norm() < 1e-12);
          }
          CHECK(matched);
          CHECK(c.signed_distance <= 0.1);
          CHECK(std::abs(c.normal.norm() - 1.0) < 1e-12);
        }
      }
    }
  }
}

TEST_CASE("capsule lying on the ground touches at both ends") {
  Shape cap = segment_capsule(Vec3(0, 0, 0.09), Vec3(1, 0, 0.09), 0.1);
  const auto c = point_contact_query(cap, ground());
  REQUIRE(c.size() == 2);
  for (const ContactPoint& p : c) CHECK(p.signed_distance == doctest::Approx(-0.01));
}

TEST_CASE("box on the ground reports its penetrating corners") {
  Pose p;
  p.translation = Vec3(0, 0, 0.49);
  const auto c = point_contact_query(at(Box{Vec3(0.5, 0.5, 0.5)}, p), ground());
  CHECK(c.size() == 4);
}

TEST_CASE("pair enumeration") {
  SUBCASE("straight three-edge rod pairs only its end segments") {
    auto objs = rod_objects({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}}, 0.6);
    const auto pairs = filament_self_and_body_pairs(objs);
    REQUIRE(pairs.size() == 1);
    CHECK(pairs[0] == CandidatePair{0, 2});
  }
  SUBCASE("rod far from a body") {
    auto objs = rod_objects({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}}, 0.1);
    CollisionObject body;
    body.shape = at(Sphere{0.5}, Pose{Mat3::Identity(), Vec3(0, 0, 10)});
    body.owner.kind = ContactSide::Kind::kBody;
    objs.push_back(body);
    CHECK(filament_self_and_body_pairs(objs).empty());
  }
  SUBCASE("self-collision toggle") {
    auto objs = rod_objects({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}}, 0.6);
    for (auto& o : objs) o.self_collision = false;
    CHECK(filament_self_and_body_pairs(objs).empty());
  }
  SUBCASE("closed rods exclude the wrap-around neighbours") {
    std::vector<CollisionObject> objs;
    for (int j = 0; j < 4; ++j) {
      const double a0 = j * std::numbers::pi / 2, a1 = (j + 1) * std::numbers::pi / 2;
      objs.push_back(segment_object({std::cos(a0), std::sin(a0), 0},
                                    {std::cos(a1), std::sin(a1), 0}, 0.8, 0, j, 4, true));
    }
    const auto pairs = filament_self_and_body_pairs(objs);
    CHECK(pairs == std::vector<CandidatePair>{{0, 2}, {1, 3}});
  }
  SUBCASE("tight knot matches exhaustive enumeration") {
    std::vector<Vec3> x;
    for (int i = 0; i <= 20; ++i) {
      const double t = -0.2 + (2.0 * std::numbers::pi + 0.4) * i / 20.0;
      x.emplace_back(0.01 * (std::sin(t) + 2 * std::sin(2 * t)),
                     0.01 * (std::cos(t) - 2 * std::cos(2 * t)), -0.01 * std::sin(3 * t));
    }
    auto objs = rod_objects(x, 0.004);
    CollisionObject floor;
    floor.shape = at(HalfSpace{}, Pose{Mat3::Identity(), Vec3(0, 0, -0.009)});
    floor.owner.kind = ContactSide::Kind::kBody;
    floor.dynamic = false;
    objs.push_back(floor);
    for (double margin : {0.0, 0.002}) {
      const auto pairs = filament_self_and_body_pairs(objs, margin);
      CHECK(pairs == oracles::brute_force_pairs(objs, margin, 1));
      CHECK(!pairs.empty());
    }
  }
  SUBCASE("random scenes match exhaustive enumeration") {
    std::mt19937 rng(47);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<Vec3> x{Vec3::Zero()};
      for (int i = 0; i < 30; ++i) x.push_back(x.back() + 0.3 * Vec3(u(rng), u(rng), u(rng)));
      auto objs = rod_objects(x, 0.1);
      for (int b = 0; b < 5; ++b) {
        CollisionObject o;
        o.shape = at(b % 2 ? ShapeGeometry(Box{Vec3(0.2, 0.1, 0.3)}) : ShapeGeometry(Sphere{0.3}),
                     random_pose(rng, 1.5));
        o.owner.kind = ContactSide::Kind::kBody;
        o.owner.index = b;
        o.dynamic = b % 3 != 0;
        objs.push_back(o);
      }
      CHECK(filament_self_and_body_pairs(objs, 0.01, 2) == oracles::brute_force_pairs(objs, 0.01, 2));
    }
  }
}

TEST_CASE("pressure bodies") {
  SUBCASE("sphere: center at p_max, surface at zero") {
    const PressureBody b = build_pressure_body(at(Sphere{0.5}), 1e4, 2);
    for (size_t i = 0; i < b.vertices.size(); ++i) {
      if (b.vertices[i].norm() < 1e-12) CHECK(b.pressure[i] == 1e4);
      else {
        CHECK(b.vertices[i].norm() == doctest::Approx(0.5));
        CHECK(b.pressure[i] == 0.0);
      }
    }
  }
  SUBCASE("capsule: axis vertices at p_max") {
    const PressureBody b = build_pressure_body(at(Capsule{0.1, 0.3}), 2e4, 1);
    int axis = 0;
    for (size_t i = 0; i < b.vertices.size(); ++i) {
      const Vec3& v = b.vertices[i];
      if (std::hypot(v.x(), v.y()) < 1e-12 && std::abs(v.z()) <= 0.3 + 1e-12) {
        CHECK(b.pressure[i] == 2e4);
        ++axis;
      } else {
        CHECK(b.pressure[i] == 0.0);
      }
    }
    CHECK(axis >= 2);
  }
  SUBCASE("tets are positively oriented and their fields interpolate the vertices") {
    for (const Shape& s : {at(Sphere{0.5}), at(Capsule{0.1, 0.2}), at(Box{Vec3(0.1, 0.2, 0.3)})}) {
      const PressureBody b = build_pressure_body(s, 1e3, 1);
      double volume = 0.0;
      for (const auto& t : b.tets) {
        const auto& v = b.vertices;
        const double vol = (v[t[1]] - v[t[0]]).cross(v[t[2]] - v[t[0]]).dot(v[t[3]] - v[t[0]]) / 6;
        CHECK(vol > 0.0);
        volume += vol;
        // Barycentric interpolation at each vertex returns the vertex value.
        Mat3 e;
        e.col(0) = v[t[1]] - v[t[0]];
        e.col(1) = v[t[2]] - v[t[0]];
        e.col(2) = v[t[3]] - v[t[0]];
        for (int k = 0; k < 4; ++k) {
          const Vec3 w = e.inverse() * (v[t[k]] - v[t[0]]);
          const double p = (1 - w.sum()) * b.pressure[t[0]] + w[0] * b.pressure[t[1]] +
                           w[1] * b.pressure[t[2]] + w[2] * b.pressure[t[3]];
          CHECK(p == doctest::Approx(b.pressure[t[k]]).scale(1e3));
        }
      }
      CHECK(volume > 0.0);
    }
    const PressureBody box = build_pressure_body(at(Box{Vec3(0.1, 0.2, 0.3)}), 1e3, 2);
    double volume = 0.0;
    for (const auto& t : box.tets) {
      const auto& v = box.vertices;
      volume += (v[t[1]] - v[t[0]]).cross(v[t[2]] - v[t[0]]).dot(v[t[3]] - v[t[0]]) / 6;
    }
    CHECK(volume == doctest::Approx(0.2 * 0.4 * 0.6));
  }
  SUBCASE("negative resolution is too coarse") {
    CHECK_THROWS_AS(build_pressure_body(at(Sphere{0.5}), 1e3, -1), SimError);
  }
}

TEST_CASE("patch polygon formulas") {
  const PatchData p{0.01, 100.0, 1e4};
  CHECK(patch_normal_force(p) == doctest::Approx(1.0));
  CHECK(patch_stiffness(p) == doctest::Approx(100.0));
  CHECK(patch_signed_distance(p) == doctest::Approx(-0.01));
}

TEST_CASE("coincident identical fields are degenerate") {
  const PressureBody b = build_pressure_body(at(Sphere{0.5}), 1e3, 0);
  try {
    patch_contact_query(b, b);
    FAIL("expected DegenerateGradient");
  } catch (const SimError& e) {
    CHECK(e.code() == ErrorCode::kDegenerateGradient);
  }
}

TEST_CASE("sphere pressed into a slab matches the series-spring model") {
  const double radius = 0.1, p_sphere = 1e5, p_slab = 1e5, depth_scale = 0.5;
  for (double delta : {0.004, 0.01, 0.02}) {
    Pose p;
    p.translation = Vec3(0, 0, radius - delta);
    const PressureBody sphere = build_pressure_body(at(Sphere{radius}, p), p_sphere, 5);
    const PressureBody slab = build_pressure_body(ground(), p_slab, 0, depth_scale);
    std::vector<PatchPolygon> polys;
    const auto contacts = patch_contact_query(sphere, slab, &polys);
    double force = 0.0;
    for (const ContactPoint& c : contacts) {
      CHECK(c.signed_distance <= 0.0);
      CHECK(c.patch->gradient > 0.0);
      force += patch_normal_force(*c.patch) * c.normal.z();
    }
    const double model =
        oracles::series_spring_sphere_slab_force(radius, p_sphere, p_slab, depth_scale, delta);
    CAPTURE(delta);
    CHECK(std::abs(force - model) <= 0.05 * model);
    std::ostringstream soup;
    write_polygon_soup(soup, 0, 1, polys);
    const std::string text = soup.str();
    CHECK(std::count(text.begin(), text.end(), '\n') == static_cast<long>(polys.size()));
  }
}

TEST_CASE("patch contact converges to point contact for a sphere on a half-space") {
  const double radius = 0.1;
  Pose p;
  p.translation = Vec3(0, 0, radius - 0.004);
  const Shape sphere = at(Sphere{radius}, p);
  const auto point = point_contact_query(sphere, ground());
  REQUIRE(point.size() == 1);
  std::vector<double> errors;
  for (int res = 2; res <= 5; ++res) {
    const PressureBody a = build_pressure_body(sphere, 1e5, res);
    // A very stiff slab so the patch sits at the geometric surface.
    const PressureBody b = build_pressure_body(ground(), 1e9, 0, 1.0);
    const auto patch = patch_contact_query(a, b);
    REQUIRE(!patch.empty());
    // Deepest polygon against the point contact; area-weighted mean normal.
    double phi = 0.0;
    Vec3 n = Vec3::Zero();
    for (const ContactPoint& c : patch) {
      phi = std::min(phi, c.signed_distance);
      n += c.patch->area * c.normal;
    }
    n.normalize();
    errors.push_back(std::abs(phi - point[0].signed_distance) + (n - point[0].normal).norm() * radius);
  }
  for (size_t i = 1; i < errors.size(); ++i) {
    CAPTURE(i);
    CHECK(errors[i] <= 0.5 * errors[i - 1] + 1e-7);
  }
}

TEST_CASE("patch data is symmetric under body swap") {
  Pose p;
  p.translation = Vec3(0.01, 0, 0.09);
  const PressureBody a = build_pressure_body(at(Sphere{0.1}, p), 1e5, 2);
  Pose q;
  q.translation = Vec3(0, 0.02, -0.05);
  q.rotation = Eigen::AngleAxisd(0.3, Vec3::UnitX()).toRotationMatrix();
  const PressureBody b = build_pressure_body(at(Box{Vec3(0.2, 0.2, 0.1)}, q), 2e5, 1);
  const auto ab = patch_contact_query(a, b);
  const auto ba = patch_contact_query(b, a);
  REQUIRE(!ab.empty());
  double fa = 0.0, fb = 0.0, phia = 0.0, phib = 0.0;
  Vec3 na = Vec3::Zero(), nb = Vec3::Zero();
  for (const auto& c : ab) {
    fa += patch_normal_force(*c.patch);
    na += c.patch->area * c.normal;
    phia = std::min(phia, c.signed_distance);
  }
  for (const auto& c : ba) {
    fb += patch_normal_force(*c.patch);
    nb += c.patch->area * c.normal;
    phib = std::min(phib, c.signed_distance);
  }
  CHECK(fa == doctest::Approx(fb).epsilon(1e-9));
  CHECK((na + nb).norm() < 1e-9 * na.norm());
  CHECK(phia == doctest::Approx(phib).epsilon(1e-9));
}

TEST_CASE("patch query against a slab agrees when the slab comes first") {
  Pose p;
  p.translation = Vec3(0, 0, 0.095);
  const PressureBody a = build_pressure_body(at(Sphere{0.1}, p), 1e5, 2);
  const PressureBody b = build_pressure_body(ground(), 1e5, 0, 0.5);
  const auto ab = patch_contact_query(a, b);
  const auto ba = patch_contact_query(b, a);
  REQUIRE(ab.size() == ba.size());
  for (size_t i = 0; i < ab.size(); ++i) {
    CHECK((ab[i].normal + ba[i].normal).norm() < 1e-12);
    CHECK(ab[i].signed_distance == doctest::Approx(ba[i].signed_distance));
    CHECK(ab[i].patch->area == doctest::Approx(ba[i].patch->area));
  }
}

TEST_CASE("contact Jacobian") {
  SUBCASE("contact at a rod node selects that node") {
    ContactPoint c;
    c.normal = Vec3(0, 1, 1).normalized();
    c.a = {ContactSide::Kind::kRodSegment, 0, 1, 0.0, Vec3::Zero()};
    DofLayout layout{{0}, {4}, {}, 15};
    const MatX j = MatX(contact_jacobian({c}, layout));
    const Mat3 frame = contact_frame(c.normal);
    CHECK((j.block<3, 3>(4, 0) - frame).norm() < 1e-15);
    CHECK(j.norm() == doctest::Approx(frame.norm()));
  }
  SUBCASE("translating body over static ground") {
    ContactPoint c;
    c.normal = Vec3::UnitZ();
    c.a = {ContactSide::Kind::kBody, 0, -1, 0.0, Vec3(0.1, 0.2, -0.3)};
    c.b = {ContactSide::Kind::kBody, 1, -1, 0.0, Vec3::Zero()};
    DofLayout layout{{}, {}, {0, -1}, 6};
    VecX v(6);
    v << 0, 0, 0, 1.0, -2.0, 3.0;
    const VecX vc = MatX(contact_jacobian({c}, layout)).transpose() * v;
    CHECK((vc - contact_frame(c.normal).transpose() * Vec3(1, -2, 3)).norm() < 1e-15);
  }
  SUBCASE("matches differenced witness-point motion") {
    std::mt19937 rng(53);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
      // One rod of 4 nodes and two rigid bodies.
      std::vector<Vec3> x(4);
      for (Vec3& p : x) p = Vec3(u(rng), u(rng), u(rng));
      std::array<Pose, 2> body{random_pose(rng, 1.0), random_pose(rng, 1.0)};
      DofLayout layout{{0}, {4}, {15, 21}, 27};
      VecX v = VecX::NullaryExpr(27, [&]() { return u(rng); });
      std::vector<ContactPoint> contacts;
      std::vector<std::pair<Vec3, Vec3>> local;  // per contact, witness in each body's frame
      for (int k = 0; k < 3; ++k) {
        ContactPoint c;
        c.normal = Vec3(u(rng), u(rng), u(rng)).normalized();
        c.position = Vec3(u(rng), u(rng), u(rng));
        c.a = {ContactSide::Kind::kRodSegment, 0, k, 0.5 * (u(rng) + 1.0), Vec3::Zero()};
        c.b = {ContactSide::Kind::kBody, k % 2, -1, 0.0, c.position - body[k % 2].translation};
        contacts.push_back(c);
      }
      const VecX vc = MatX(contact_jacobian(contacts, layout)).transpose() * v;
      const double dt = 1e-7;
      for (int k = 0; k < 3; ++k) {
        const ContactPoint& c = contacts[k];
        const int s = c.a.segment;
        auto rod_point = [&](double t) {
          const Vec3 a = x[s] + t * v.segment<3>(4 * s), b = x[s + 1] + t * v.segment<3>(4 * s + 4);
          return Vec3((1 - c.a.param) * a + c.a.param * b);
        };
        const int bi = c.b.index;
        const Vec3 w = v.segment<3>(layout.body_offsets[bi]);
        const Vec3 lin = v.segment<3>(layout.body_offsets[bi] + 3);
        auto body_point = [&](double t) {
          const Mat3 r = w.norm() > 0 ? Mat3(Eigen::AngleAxisd(w.norm() * t, w.normalized())) : Mat3::Identity();
          return Vec3(body[bi].translation + lin * t + r * c.b.offset);
        };
        const Vec3 rel = ((rod_point(dt) - rod_point(-dt)) - (body_point(dt) - body_point(-dt))) / (2 * dt);
        const Vec3 expected = contact_frame(c.normal).transpose() * rel;
        CHECK((vc.segment<3>(3 * k) - expected).norm() < 1e-6);
      }
    }
  }
}

TEST_CASE("friction combination") {
  CHECK(combine_friction(0.2, 0.2) == doctest::Approx(0.2));
  CHECK(combine_friction(0.3, 0.6) == doctest::Approx(0.4));
  CHECK(combine_friction(0.0, 0.6) == 0.0);
}
