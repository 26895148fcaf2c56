#include <random>

#include "doctest.h"
#include "filsim/contact_solver.hpp"
#include "filsim/oracles.hpp"

using namespace filsim;

namespace {

SparseMat sparse(const MatX& m) { return m.sparseView(); }

MatX random_spd(std::mt19937& rng, int n) {
  std::normal_distribution<double> g;
  MatX a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a(i, j) = g(rng);
  return a * a.transpose() / n + MatX::Identity(n, n);
}

ConeProblem random_problem(std::mt19937& rng) {
  std::uniform_int_distribution<int> nc_dist(1, 5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g;
  ConeProblem p;
  const int nc = nc_dist(rng);
  const int min_dofs = std::min(3 * nc, 12);
  const int n = std::uniform_int_distribution<int>(min_dofs, 12)(rng);
  p.schur = sparse(random_spd(rng, n));
  p.free_velocity = VecX::NullaryExpr(n, [&] { return g(rng); });
  MatX j = MatX::Zero(n, 3 * nc);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < 3 * nc; ++c)
      if (u(rng) < 0.7) j(r, c) = g(rng);
  p.jacobian = sparse(j);
  p.bias = VecX::Zero(3 * nc);
  p.compliance = VecX::Zero(3 * nc);
  for (int i = 0; i < nc; ++i) {
    p.bias[3 * i + 2] = u(rng) - 0.5;
    p.friction.push_back(u(rng) < 0.2 ? 0.0 : 0.1 + 0.9 * u(rng));
    // More constraints than DoFs: keep the problem feasible with compliance.
    if (3 * nc > n) p.compliance.segment<3>(3 * i).setConstant(0.05 + 0.1 * u(rng));
  }
  return p;
}

double s_norm(const SparseMat& s, const VecX& v) { return std::sqrt(v.dot(s * v)); }

ConeProblem single_dof_problem() {
  ConeProblem p;
  p.schur = sparse(MatX::Identity(1, 1));
  p.free_velocity = VecX::Constant(1, -1.0);
  MatX j = MatX::Zero(1, 3);
  j(0, 2) = 1.0;
  p.jacobian = sparse(j);
  p.bias = VecX::Zero(3);
  p.compliance = VecX::Zero(3);
  p.friction = {0.0};
  return p;
}

// Unit mass in x (tangential) and z (normal) pushed into the ground.
ConeProblem stick_slip_problem(double mu) {
  ConeProblem p;
  p.schur = sparse(MatX::Identity(2, 2));
  p.free_velocity = VecX(2);
  p.free_velocity << -0.3, -1.0;
  MatX j = MatX::Zero(2, 3);
  j(0, 0) = 1.0;
  j(1, 2) = 1.0;
  p.jacobian = sparse(j);
  p.bias = VecX::Zero(3);
  p.compliance = VecX::Zero(3);
  p.friction = {mu};
  return p;
}

}  // namespace

TEST_CASE("partition: empty and single-node contact") {
  const SparseMat a = sparse(MatX::Identity(6, 6) * 2.0);
  SparseMat j(6, 0);
  auto part = partition_dofs(a, j);
  CHECK(part.participating.empty());
  CHECK(part.non_participating.size() == 6);
  CHECK(part.j_p.rows() == 0);

  MatX jd = MatX::Zero(6, 3);
  jd.block<3, 3>(3, 0) = Mat3::Identity();
  part = partition_dofs(a, sparse(jd));
  CHECK(part.participating == std::vector<int>{3, 4, 5});
  CHECK(part.non_participating == std::vector<int>{0, 1, 2});
  CHECK(MatX(part.j_p).isApprox(Mat3::Identity()));
}

TEST_CASE("partition: random sparse J matches a row scan") {
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 15;
    const MatX a = random_spd(rng, n);
    MatX j = MatX::Zero(n, 6);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < 6; ++c)
        if (u(rng) < 0.08) j(r, c) = u(rng) + 0.1;
    const auto part = partition_dofs(sparse(a), sparse(j));
    std::vector<int> expect_p, expect_n;
    for (int r = 0; r < n; ++r)
      (j.row(r).cwiseAbs().maxCoeff() > 0.0 ? expect_p : expect_n).push_back(r);
    CHECK(part.participating == expect_p);
    CHECK(part.non_participating == expect_n);
    for (size_t x = 0; x < expect_p.size(); ++x) {
      for (size_t y = 0; y < expect_p.size(); ++y)
        CHECK(part.a_pp.coeff(x, y) == a(expect_p[x], expect_p[y]));
      for (size_t y = 0; y < expect_n.size(); ++y)
        CHECK(part.a_pn.coeff(x, y) == a(expect_p[x], expect_n[y]));
    }
  }
}

TEST_CASE("schur complement: hand example and block diagonal") {
  MatX a(2, 2);
  a << 2, 1, 1, 2;
  MatX j = MatX::Zero(2, 3);
  j(0, 2) = 1.0;
  const auto part = partition_dofs(sparse(a), sparse(j));
  const SchurComplement sc(part);
  CHECK(MatX(sc.matrix())(0, 0) == doctest::Approx(1.5).epsilon(1e-14));

  MatX b = MatX::Zero(4, 4);
  b.topLeftCorner(2, 2) << 3, 1, 1, 2;
  b.bottomRightCorner(2, 2) << 5, 0, 0, 7;
  MatX jb = MatX::Zero(4, 3);
  jb(0, 0) = jb(1, 2) = 1.0;
  const auto pb = partition_dofs(sparse(b), sparse(jb));
  CHECK(MatX(SchurComplement(pb).matrix()).isApprox(b.topLeftCorner(2, 2)));
}

TEST_CASE("schur complement: random 20x20 against the dense formula") {
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 20;
    const MatX a = random_spd(rng, n);
    MatX j = MatX::Zero(n, 3);
    for (int r = 0; r < n; ++r)
      if (u(rng) < 0.4) j(r, trial % 3) = 1.0;
    j(trial, 0) = 1.0;
    const auto part = partition_dofs(sparse(a), sparse(j));
    const int np = static_cast<int>(part.participating.size());
    const int nn = static_cast<int>(part.non_participating.size());
    MatX app(np, np), apn(np, nn), ann(nn, nn);
    for (int x = 0; x < np; ++x) {
      for (int y = 0; y < np; ++y) app(x, y) = a(part.participating[x], part.participating[y]);
      for (int y = 0; y < nn; ++y) apn(x, y) = a(part.participating[x], part.non_participating[y]);
    }
    for (int x = 0; x < nn; ++x)
      for (int y = 0; y < nn; ++y) ann(x, y) = a(part.non_participating[x], part.non_participating[y]);
    const MatX expect = app - apn * ann.llt().solve(apn.transpose());
    const MatX got = MatX(SchurComplement(part).matrix());
    CHECK((got - expect).cwiseAbs().maxCoeff() <= 1e-10 * expect.cwiseAbs().maxCoeff());
    CHECK(got.llt().info() == Eigen::Success);
  }
}

TEST_CASE("schur complement: indefinite A_nn is reported") {
  MatX a(2, 2);
  a << 2, 0, 0, -1;
  MatX j = MatX::Zero(2, 3);
  j(0, 2) = 1.0;
  const auto part = partition_dofs(sparse(a), sparse(j));
  try {
    SchurComplement sc(part);
    FAIL("expected FactorizationFailure");
  } catch (const SimError& e) {
    CHECK(e.code() == ErrorCode::kFactorizationFailure);
  }
}

TEST_CASE("solve: no contacts returns the free velocity") {
  ConeProblem p;
  p.schur = sparse(MatX::Identity(3, 3));
  p.free_velocity = Vec3(1, 2, 3);
  p.jacobian.resize(3, 0);
  p.bias = VecX(0);
  p.compliance = VecX(0);
  const auto sol = solve_cone_qp(p);
  CHECK(sol.converged);
  CHECK(sol.velocity == p.free_velocity);
  CHECK(sol.impulse.size() == 0);
}

TEST_CASE("solve: unit mass stopped by the ground") {
  const auto sol = solve_cone_qp(single_dof_problem());
  REQUIRE(sol.converged);
  CHECK(std::abs(sol.velocity[0]) <= 1e-9);
  CHECK(sol.impulse[2] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(sol.modes[0] == ContactMode::kStick);
}

TEST_CASE("solve: stick and slip against the dense oracle") {
  {
    const auto p = stick_slip_problem(0.5);
    const auto sol = solve_cone_qp(p);
    const auto ref = oracles::dense_cone_qp(p);
    REQUIRE(sol.converged);
    CHECK(sol.modes[0] == ContactMode::kStick);
    CHECK(std::abs(sol.velocity[0]) <= 1e-9);
    CHECK(sol.impulse[0] == doctest::Approx(0.3).epsilon(1e-8));
    CHECK((sol.impulse - ref.impulse).lpNorm<Eigen::Infinity>() <= 1e-7);
  }
  {
    const auto p = stick_slip_problem(0.2);
    const auto sol = solve_cone_qp(p);
    const auto ref = oracles::dense_cone_qp(p);
    REQUIRE(sol.converged);
    CHECK(sol.modes[0] == ContactMode::kSlip);
    const double lt = std::hypot(sol.impulse[0], sol.impulse[1]);
    CHECK(lt == doctest::Approx(0.2 * sol.impulse[2]).epsilon(1e-8));
    CHECK(sol.velocity[0] * sol.impulse[0] < 0.0);
    CHECK((sol.impulse - ref.impulse).lpNorm<Eigen::Infinity>() <= 1e-7);
    CHECK((sol.velocity - ref.velocity).norm() <= 1e-7);
  }
}

TEST_CASE("solve: 100 random problems agree with the dense oracle") {
  std::mt19937 rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    CAPTURE(trial);
    const auto p = random_problem(rng);
    const auto sol = solve_cone_qp(p);
    const auto ref = oracles::dense_cone_qp(p);
    CAPTURE(sol.certificate.momentum_residual);
    CAPTURE(sol.certificate.complementarity);
    CAPTURE(sol.certificate.relative_complementarity);
    CAPTURE(sol.certificate.impulse_cone_violation);
    CAPTURE(sol.certificate.velocity_cone_violation);
    CAPTURE(sol.iterations);
    REQUIRE(sol.converged);
    CHECK_FALSE(sol.regularized);
    const double dv = s_norm(p.schur, sol.velocity - ref.velocity);
    CHECK(dv <= 1e-6 * std::max(1.0, s_norm(p.schur, ref.velocity)));
    const double dl = (sol.impulse - ref.impulse).lpNorm<Eigen::Infinity>();
    CHECK(dl <= 1e-5 * std::max(1.0, ref.impulse.lpNorm<Eigen::Infinity>()));
    CHECK(sol.certificate.passes(1e-8));
  }
}

TEST_CASE("solve: impulses never add energy") {
  std::mt19937 rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_problem(rng);
    const auto sol = solve_cone_qp(p);
    REQUIRE(sol.converged);
    const VecX y = p.jacobian.transpose() * sol.velocity - p.bias + p.compliance.cwiseProduct(sol.impulse);
    const double scale = sol.impulse.norm() * std::max(y.norm(), p.bias.norm());
    CHECK(std::abs(sol.impulse.dot(y)) <= 1e-8 * std::max(scale, 1e-30));
    for (int i = 0; i < p.num_contacts(); ++i)
      CHECK(sol.impulse[3 * i + 2] * y[3 * i + 2] >= -1e-8 * std::max(scale, 1e-30));
  }
}

TEST_CASE("solve: contact modes are invariant under consistent scaling") {
  std::mt19937 rng(5);
  int slipping = 0, sticking = 0;
  for (int trial = 0; trial < 30; ++trial) {
    const auto p = random_problem(rng);
    const auto base = solve_cone_qp(p);
    REQUIRE(base.converged);
    for (auto m : base.modes) {
      slipping += m == ContactMode::kSlip;
      sticking += m == ContactMode::kStick;
    }
    for (double mass : {1e-6, 1e3}) {
      for (double vel : {1e-4, 1e2}) {
        ConeProblem q = p;
        q.schur = p.schur * mass;
        q.free_velocity = p.free_velocity * vel;
        q.bias = p.bias * vel;
        q.compliance = p.compliance / mass;
        const auto sol = solve_cone_qp(q);
        REQUIRE(sol.converged);
        CHECK(sol.modes == base.modes);
        CHECK((sol.impulse / (mass * vel) - base.impulse).norm() <=
              1e-6 * std::max(1.0, base.impulse.norm()));
      }
    }
  }
  CHECK(slipping > 0);
  CHECK(sticking > 0);
}

TEST_CASE("solve: infeasible rigid contacts fall back to compliance") {
  // Two opposing rigid contacts on one DoF demanding separation from both.
  ConeProblem p;
  p.schur = sparse(MatX::Identity(1, 1));
  p.free_velocity = VecX::Zero(1);
  MatX j = MatX::Zero(1, 6);
  j(0, 2) = 1.0;
  j(0, 5) = -1.0;
  p.jacobian = sparse(j);
  p.bias = VecX::Zero(6);
  p.bias[2] = p.bias[5] = 0.1;
  p.compliance = VecX::Zero(6);
  p.friction = {0.0, 0.0};
  const auto sol = solve_cone_qp(p);
  CHECK(sol.regularized);
  CHECK(sol.converged);
  CHECK(sol.impulse[2] > 0.0);
}

TEST_CASE("solve: invalid problems are rejected") {
  auto p = single_dof_problem();
  p.friction = {-0.1};
  CHECK_THROWS_AS(solve_cone_qp(p), SimError);
  p = single_dof_problem();
  p.compliance[2] = -1.0;
  CHECK_THROWS_AS(solve_cone_qp(p), SimError);
  p = single_dof_problem();
  p.bias = VecX::Zero(2);
  CHECK_THROWS_AS(solve_cone_qp(p), SimError);
}

TEST_CASE("recover: trivial cases and full momentum balance") {
  std::mt19937 rng(9);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 18;
    const MatX a = random_spd(rng, n);
    MatX j = MatX::Zero(n, 6);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < 6; ++c)
        if (u(rng) < 0.15) j(r, c) = g(rng);
    j(0, 2) = j(1, 5) = 1.0;
    const VecX v_star = VecX::NullaryExpr(n, [&] { return g(rng); });
    const auto part = partition_dofs(sparse(a), sparse(j));
    const SchurComplement sc(part);
    VecX vp_star(part.participating.size()), vn_star(part.non_participating.size());
    for (size_t k = 0; k < part.participating.size(); ++k) vp_star[k] = v_star[part.participating[k]];
    for (size_t k = 0; k < part.non_participating.size(); ++k)
      vn_star[k] = v_star[part.non_participating[k]];
    CHECK((sc.recover_nonparticipating(vp_star, vp_star, vn_star) - vn_star).norm() <= 1e-12);

    ConeProblem p;
    p.schur = sc.matrix();
    p.free_velocity = vp_star;
    p.jacobian = part.j_p;
    p.bias = VecX::Zero(6);
    p.bias[2] = 0.3;
    p.bias[5] = -0.2;
    p.compliance = VecX::Zero(6);
    p.friction = {0.4, 0.0};
    const auto sol = solve_cone_qp(p);
    REQUIRE(sol.converged);
    const VecX vn = sc.recover_nonparticipating(sol.velocity, vp_star, vn_star);
    VecX v(n);
    for (size_t k = 0; k < part.participating.size(); ++k) v[part.participating[k]] = sol.velocity[k];
    for (size_t k = 0; k < part.non_participating.size(); ++k) v[part.non_participating[k]] = vn[k];
    const VecX r = a * (v - v_star) - j * sol.impulse;
    CHECK(r.norm() <= 1e-8 * std::max(1.0, (a * v_star).norm()));
  }

  MatX b = MatX::Identity(4, 4);
  MatX jb = MatX::Zero(4, 3);
  jb(0, 2) = 1.0;
  const auto pb = partition_dofs(sparse(b), sparse(jb));
  const SchurComplement sb(pb);
  const VecX vn_star = Vec3(1, 2, 3);
  CHECK(sb.recover_nonparticipating(VecX::Constant(1, 5.0), VecX::Zero(1), vn_star) == vn_star);
}
