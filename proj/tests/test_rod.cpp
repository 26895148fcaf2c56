#include <cmath>
#include <numbers>
#include <random>

#include <Eigen/Eigenvalues>

#include "doctest.h"
#include "filsim/oracles.hpp"
#include "filsim/rod.hpp"

using namespace filsim;

namespace {

RodParameters round_rod(double radius = 0.05) {
  RodParameters p;
  p.youngs_modulus = 1e5;
  p.shear_modulus = 4e4;
  p.section = CircularSection{radius};
  p.density = 1000.0;
  return p;
}

RodParameters flat_rod() {
  RodParameters p = round_rod();
  p.section = RectangularSection{0.08, 0.03};
  return p;
}

std::vector<Vec3> straight_nodes(int n, double spacing = 0.3) {
  std::vector<Vec3> x;
  for (int i = 0; i < n; ++i) x.emplace_back(spacing * i, 0.0, 0.0);
  return x;
}

std::vector<Vec3> wavy_nodes(int n, std::mt19937& rng, bool closed = false) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Vec3> x;
  const double a = 0.2 * u(rng), b = 0.2 * u(rng), c = 0.4 * u(rng);
  for (int i = 0; i < n; ++i) {
    if (closed) {
      const double s = 2.0 * std::numbers::pi * i / n;
      x.emplace_back(std::cos(s) + a * std::sin(2 * s), std::sin(s) + b * std::cos(3 * s),
                     c * std::sin(s));
    } else {
      const double s = 0.3 * i;
      x.emplace_back(s, a * std::sin(3 * s) + 0.05 * u(rng), b * std::cos(2 * s) + c * s * s);
    }
  }
  return x;
}

/// Random rest shape, random deformed shape and random edge angles.
RodState random_state(std::mt19937& rng, int n = 8, bool closed = false) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  RodState rest = make_rod(wavy_nodes(n, rng, closed), closed);
  std::vector<Vec3> x = rest.nodes;
  for (Vec3& p : x) p += 0.04 * Vec3(u(rng), u(rng), u(rng));
  RodState s = with_initial_shape(rest, x);
  for (int j = 0; j < s.num_edges(); ++j) s.edge_angles[j] = 0.5 * u(rng);
  return s;
}

double total_energy(const RodState& base, const RodParameters& p, const VecX& q) {
  return elastic_energy(with_coordinates(base, {q.data(), static_cast<size_t>(q.size())}), p)
      .total();
}

VecX gradient_at(const RodState& base, const RodParameters& p, const VecX& q) {
  return elastic_gradient(with_coordinates(base, {q.data(), static_cast<size_t>(q.size())}), p);
}

double rel_err(const MatX& a, const MatX& ref) {
  return (a - ref).cwiseAbs().maxCoeff() / std::max(1.0, ref.cwiseAbs().maxCoeff());
}

}  // namespace

TEST_CASE("straight rod has no turning angle and material frame equals reference") {
  RodState s = make_rod(straight_nodes(5), false);
  const RodKinematicsCache c = compute_frames(s);
  for (int i : s.interior_nodes()) {
    CHECK(c.reference_twist[i] == doctest::Approx(0.0));
    CHECK(c.curvature[i].norm() == doctest::Approx(0.0));
  }
  for (int j = 0; j < s.num_edges(); ++j) CHECK((c.m1[j] - s.d1[j]).norm() < 1e-15);
}

TEST_CASE("right-angle corner has curvature binormal (0,0,2)") {
  RodState s = make_rod({{0, 0, 0}, {1, 0, 0}, {1, 1, 0}}, false, Vec3::UnitZ());
  const RodKinematicsCache c = compute_frames(s);
  CHECK((c.curvature_binormal[1] - Vec3(0, 0, 2)).norm() < 1e-14);
}

TEST_CASE("turning angle matches an explicit rotation-matrix transport") {
  std::mt19937 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    RodState s = random_state(rng, 10);
    // Rotate the reference directors so the turning angles are nonzero.
    std::uniform_real_distribution<double> u(-2.5, 2.5);
    for (int j = 0; j < s.num_edges(); ++j) {
      const double a = u(rng);
      const Vec3 d1 = std::cos(a) * s.d1[j] + std::sin(a) * s.d2[j];
      s.d1[j] = d1;
      s.d2[j] = s.tangents[j].cross(d1);
    }
    std::fill(s.reference_twist.begin(), s.reference_twist.end(), 0.0);
    const RodKinematicsCache c = compute_frames(s);
    for (int i : s.interior_nodes()) {
      const int e0 = s.prev_edge(i);
      const double ref =
          oracles::transported_twist_angle(s.d1[e0], s.tangents[e0], s.d1[i], s.tangents[i]);
      CHECK(c.reference_twist[i] == doctest::Approx(ref).epsilon(1e-10));
    }
  }
}

TEST_CASE("energy examples") {
  SUBCASE("undeformed rod stores no energy") {
    std::mt19937 rng(3);
    RodState s = make_rod(wavy_nodes(9, rng), false);
    const ElasticEnergy e = elastic_energy(s, round_rod());
    CHECK(e.stretching == 0.0);
    CHECK(std::abs(e.bending) < 1e-20);
    CHECK(std::abs(e.twisting) < 1e-20);
  }
  SUBCASE("stretched edge") {
    RodParameters p = round_rod();
    p.youngs_modulus = 2.0 / p.area();  // EA = 2 N
    RodState s = with_initial_shape(make_rod({{0, 0, 0}, {1, 0, 0}}, false),
                                    {{0, 0, 0}, {1.1, 0, 0}});
    CHECK(elastic_energy(s, p).stretching == doctest::Approx(0.01).epsilon(1e-12));
  }
  SUBCASE("twisted two-edge rod") {
    RodParameters p = round_rod();
    RodState s = make_rod(straight_nodes(3, 1.0), false);
    p.shear_modulus = s.voronoi_lengths[1] / p.polar_moment();  // GJ / l = 1 N m
    s.edge_angles[0] = 0.1;
    s.edge_angles[1] = 0.4;
    const ElasticEnergy e = elastic_energy(s, p);
    CHECK(e.twisting == doctest::Approx(0.045).epsilon(1e-12));
    CHECK(std::abs(e.bending) < 1e-24);
  }
}

TEST_CASE("gradient examples") {
  SUBCASE("undeformed rod has zero gradient") {
    std::mt19937 rng(5);
    RodState s = make_rod(wavy_nodes(8, rng), false);
    CHECK(elastic_gradient(s, flat_rod()).cwiseAbs().maxCoeff() < 1e-9);
  }
  SUBCASE("stretched edge pulls its nodes together") {
    RodParameters p = round_rod();
    RodState s = with_initial_shape(make_rod({{0, 0, 0}, {0, 0.5, 0}}, false),
                                    {{0, 0, 0}, {0, 0.6, 0}});
    const VecX g = elastic_gradient(s, p);
    const double magnitude = p.youngs_modulus * p.area() * (0.6 / 0.5 - 1.0);
    // Force = -gradient.
    CHECK((-g.segment<3>(0) - Vec3(0, magnitude, 0)).norm() < 1e-9 * magnitude);
    CHECK((-g.segment<3>(4) + Vec3(0, magnitude, 0)).norm() < 1e-9 * magnitude);
  }
  SUBCASE("bent anisotropic rod has a nonzero angle gradient") {
    RodParameters p = flat_rod();
    RodState rest = make_rod(straight_nodes(3), false);
    RodState s = with_initial_shape(rest, {{0, 0, 0}, {0.3, 0, 0}, {0.5, 0.2, 0.05}});
    s.edge_angles[1] = 0.3;
    const VecX g = elastic_gradient(s, p);
    const VecX q = pack_coordinates(s);
    const VecX fd = oracles::fd_gradient([&](const VecX& x) { return total_energy(s, p, x); }, q);
    CHECK(std::abs(g[RodState::edge_dof(1)]) > 1e-3);
    CHECK(g[RodState::edge_dof(1)] == doctest::Approx(fd[RodState::edge_dof(1)]).epsilon(1e-6));
  }
}

TEST_CASE("analytic gradient matches central differences on random states") {
  std::mt19937 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const bool closed = trial % 5 == 4;
    const RodParameters p = trial % 2 ? flat_rod() : round_rod();
    RodState s = random_state(rng, 8, closed);
    const VecX q = pack_coordinates(s);
    const VecX g = elastic_gradient(s, p);
    const VecX fd = oracles::fd_gradient([&](const VecX& x) { return total_energy(s, p, x); }, q);
    CAPTURE(trial);
    CHECK(rel_err(g, fd) <= 1e-6);
  }
}

TEST_CASE("analytic Hessian matches differenced gradients on random states") {
  std::mt19937 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const bool closed = trial % 5 == 4;
    const RodParameters p = trial % 2 ? flat_rod() : round_rod();
    RodState s = random_state(rng, 8, closed);
    const VecX q = pack_coordinates(s);
    const MatX k = MatX(elastic_hessian(s, p));
    const MatX jac =
        oracles::fd_jacobian([&](const VecX& x) { return gradient_at(s, p, x); }, q);
    // The reference frames are re-transported from the base state, so the
    // differenced gradient carries an antisymmetric holonomy part.
    const MatX sym = 0.5 * (jac + jac.transpose());
    CAPTURE(trial);
    CHECK(rel_err(k, sym) <= 1e-5);
    CHECK((k - k.transpose()).cwiseAbs().maxCoeff() == 0.0);
    if (trial < 10) {
      const MatX h2 =
          oracles::fd_hessian([&](const VecX& x) { return total_energy(s, p, x); }, q, 1e-4);
      CHECK(rel_err(k, h2) <= 1e-5);
    }
  }
}

TEST_CASE("undeformed straight rod has a positive semidefinite Hessian") {
  RodState s = make_rod(straight_nodes(8), false);
  const MatX k = MatX(elastic_hessian(s, flat_rod()));
  Eigen::SelfAdjointEigenSolver<MatX> eig(k);
  CHECK(eig.eigenvalues().minCoeff() >= -1e-10 * k.norm());
}

TEST_CASE("Hessian couples only DoFs within two nodes of each other") {
  std::mt19937 rng(17);
  RodState s = random_state(rng, 12);
  const auto k = elastic_hessian(s, round_rod());
  for (int c = 0; c < k.outerSize(); ++c)
    for (Eigen::SparseMatrix<double>::InnerIterator it(k, c); it; ++it) {
      // Node of a DoF: x_k -> k, gamma_j -> j (its first node).
      const int a = static_cast<int>(it.row()) / 4, b = static_cast<int>(it.col()) / 4;
      CHECK(std::abs(a - b) <= 2);
    }
}

TEST_CASE("lumped mass") {
  SUBCASE("two-edge rod") {
    RodParameters p = round_rod();
    p.density = 1.0 / p.area();  // rho A |e| = 1 kg per unit edge
    RodState s = make_rod(straight_nodes(3, 1.0), false);
    const VecX m = lumped_mass(s, p);
    CHECK(m[0] == doctest::Approx(0.5));
    CHECK(m[4] == doctest::Approx(1.0));
    CHECK(m[8] == doctest::Approx(0.5));
    CHECK(m[3] == doctest::Approx(p.density * p.polar_moment()));
  }
  SUBCASE("zero density is rejected") {
    RodParameters p = round_rod();
    p.density = 0.0;
    CHECK_THROWS_AS(lumped_mass(make_rod(straight_nodes(3), false), p), SimError);
  }
  SUBCASE("translational trace equals the rod mass") {
    std::mt19937 rng(19);
    RodState s = make_rod(wavy_nodes(11, rng), false);
    const RodParameters p = round_rod();
    const VecX m = lumped_mass(s, p);
    double trace = 0.0, length = 0.0;
    for (int k = 0; k < s.num_nodes(); ++k) trace += m[RodState::node_dof(k)];
    for (double l : s.rest_lengths) length += l;
    CHECK(trace == doctest::Approx(p.density * p.area() * length).epsilon(1e-14));
  }
}

TEST_CASE("time parallel transport") {
  std::mt19937 rng(23);
  RodState s = random_state(rng, 9);
  SUBCASE("unchanged nodes keep the frames") {
    RodState t = time_parallel_transport(s, s.nodes);
    for (int j = 0; j < s.num_edges(); ++j) CHECK((t.d1[j] - s.d1[j]).norm() < 1e-15);
  }
  SUBCASE("transport commutes with rigid rotations") {
    const Mat3 r = Eigen::AngleAxisd(0.7, Vec3(1, 2, 3).normalized()).toRotationMatrix();
    std::normal_distribution<double> n(0.0, 2e-2);
    std::vector<Vec3> x = s.nodes;
    for (Vec3& p : x) p += Vec3(n(rng), n(rng), n(rng));
    RodState rotated = s;
    std::vector<Vec3> x_rotated;
    for (Vec3& p : rotated.nodes) p = r * p;
    for (int j = 0; j < s.num_edges(); ++j) {
      rotated.d1[j] = r * s.d1[j];
      rotated.d2[j] = r * s.d2[j];
      rotated.tangents[j] = r * s.tangents[j];
    }
    for (const Vec3& p : x) x_rotated.push_back(r * p);
    const RodState a = time_parallel_transport(s, x);
    const RodState b = time_parallel_transport(rotated, x_rotated);
    for (int j = 0; j < s.num_edges(); ++j) {
      CHECK((b.d1[j] - r * a.d1[j]).norm() < 1e-10);
      CHECK((b.d2[j] - r * a.d2[j]).norm() < 1e-10);
    }
  }
  SUBCASE("orthonormality survives many transports") {
    std::normal_distribution<double> n(0.0, 1e-3);
    RodState t = s;
    for (int step = 0; step < 10000; ++step) {
      std::vector<Vec3> x = t.nodes;
      for (Vec3& p : x) p += Vec3(n(rng), n(rng), n(rng));
      t = time_parallel_transport(t, x);
    }
    for (int j = 0; j < t.num_edges(); ++j) {
      CHECK(std::abs(t.d1[j].norm() - 1.0) < 1e-9);
      CHECK(std::abs(t.d1[j].dot(t.tangents[j])) < 1e-9);
      CHECK((t.d2[j] - t.tangents[j].cross(t.d1[j])).norm() < 1e-9);
    }
  }
}

TEST_CASE("energy is invariant under rigid motions") {
  std::mt19937 rng(29);
  for (int trial = 0; trial < 10; ++trial) {
    RodState s = random_state(rng, 8, trial % 2 == 1);
    const RodParameters p = flat_rod();
    const Mat3 r = Eigen::AngleAxisd(1.3 * trial, Vec3(0.3, -1, 2).normalized()).toRotationMatrix();
    const Vec3 shift(0.5, -2.0, 1.0);
    RodState moved = s;
    for (Vec3& x : moved.nodes) x = r * x + shift;
    for (int j = 0; j < s.num_edges(); ++j) {
      moved.d1[j] = r * s.d1[j];
      moved.d2[j] = r * s.d2[j];
      moved.tangents[j] = r * s.tangents[j];
    }
    const double e0 = elastic_energy(s, p).total();
    CHECK(elastic_energy(moved, p).total() == doctest::Approx(e0).epsilon(1e-12));
  }
}

TEST_CASE("energy vanishes only at the undeformed shape") {
  std::mt19937 rng(31);
  RodState rest = make_rod(wavy_nodes(8, rng), false);
  const RodParameters p = round_rod();
  for (double amp : {1e-3, 1e-2, 1e-1}) {
    SUBCASE("node displacement") {
      std::vector<Vec3> x = rest.nodes;
      x[3] += amp * Vec3(0.2, 1.0, -0.4);
      CHECK(elastic_energy(with_initial_shape(rest, x), p).total() > 0.0);
    }
    SUBCASE("edge rotation") {
      RodState s = rest;
      s.edge_angles[2] = amp;
      CHECK(elastic_energy(s, p).total() > 0.0);
    }
    SUBCASE("uniform twist") {
      RodState s = rest;
      for (int j = 0; j < s.num_edges(); ++j) s.edge_angles[j] = amp * j;
      CHECK(elastic_energy(s, p).twisting > 0.0);
    }
  }
}

TEST_CASE("degenerate geometry is reported") {
  CHECK_THROWS_AS(make_rod({{0, 0, 0}, {0, 0, 0}}, false), SimError);
  RodState s = make_rod(straight_nodes(3), false);
  try {
    with_initial_shape(s, {{0, 0, 0}, {1, 0, 0}, {0, 0, 0}});
    FAIL("expected AntiparallelTangents");
  } catch (const SimError& e) {
    CHECK(e.code() == ErrorCode::kAntiparallelTangents);
  }
}
