#include "filsim/rod.hpp"

#include <cmath>
#include <numbers>

namespace filsim {

namespace {

constexpr double kMinEdgeLength = 1e-12;
constexpr double kAntiparallelTolerance = 1e-9;

using Vec2 = Eigen::Vector2d;
using Vec8 = Eigen::Matrix<double, 8, 1>;
using Mat8 = Eigen::Matrix<double, 8, 8>;
using Vec11 = Eigen::Matrix<double, 11, 1>;
using Mat11 = Eigen::Matrix<double, 11, 11>;

double wrap_to(double raw, double reference) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  return raw + kTwoPi * std::round((reference - raw) / kTwoPi);
}

Vec3 edge_vector(const RodState& s, int edge) {
  return s.nodes[s.next_node(edge)] - s.nodes[edge];
}

std::vector<Vec3> unit_tangents(const RodState& s) {
  std::vector<Vec3> t(s.num_edges());
  for (int j = 0; j < s.num_edges(); ++j) {
    const Vec3 e = edge_vector(s, j);
    const double len = e.norm();
    if (len < kMinEdgeLength)
      throw SimError(ErrorCode::kDegenerateEdge, "edge " + std::to_string(j) + " has length " +
                                                     std::to_string(len));
    t[j] = e / len;
  }
  return t;
}

void check_not_antiparallel(const Vec3& a, const Vec3& b, int node) {
  if (1.0 + a.dot(b) < kAntiparallelTolerance)
    throw SimError(ErrorCode::kAntiparallelTangents,
                   "tangents at node " + std::to_string(node) + " fold back on themselves");
}

double raw_reference_twist(const RodState& s, int node) {
  const int e0 = s.prev_edge(node), e1 = node;
  const Vec3 moved = parallel_transport(s.d1[e0], s.tangents[e0], s.tangents[e1]);
  return signed_angle(moved, s.d1[e1], s.tangents[e1]);
}

void fill_rest_quantities(RodState& s) {
  const int n = s.num_nodes(), ne = s.num_edges();
  s.rest_lengths.resize(ne);
  for (int j = 0; j < ne; ++j) s.rest_lengths[j] = edge_vector(s, j).norm();
  s.voronoi_lengths.assign(n, 0.0);
  for (int i : s.interior_nodes())
    s.voronoi_lengths[i] = 0.5 * (s.rest_lengths[s.prev_edge(i)] + s.rest_lengths[i]);
  const RodKinematicsCache cache = compute_frames(s);
  s.rest_curvature = cache.curvature;
  s.rest_twist = cache.twist;
}

/// Space-parallel transport of d1 along the current tangents, starting from
/// `first_d1` on edge 0.
void transport_along_centerline(RodState& s, const Vec3& first_d1) {
  const int ne = s.num_edges();
  s.tangents = unit_tangents(s);
  s.d1.resize(ne);
  s.d2.resize(ne);
  Vec3 d = first_d1 - first_d1.dot(s.tangents[0]) * s.tangents[0];
  s.d1[0] = d.normalized();
  for (int j = 1; j < ne; ++j) {
    check_not_antiparallel(s.tangents[j - 1], s.tangents[j], j);
    d = parallel_transport(s.d1[j - 1], s.tangents[j - 1], s.tangents[j]);
    d -= d.dot(s.tangents[j]) * s.tangents[j];
    s.d1[j] = d.normalized();
  }
  for (int j = 0; j < ne; ++j) s.d2[j] = s.tangents[j].cross(s.d1[j]);
  s.reference_twist.assign(s.num_nodes(), 0.0);
  for (int i : s.interior_nodes()) s.reference_twist[i] = raw_reference_twist(s, i);
}

/// Edge-space to DoF map for a bend/twist stencil. Edge-space variables are
/// (e0, gamma0, e1, gamma1); DoFs are (x_prev, gamma0, x, gamma1, x_next).
Eigen::Matrix<double, 11, 8> stencil_map() {
  Eigen::Matrix<double, 11, 8> d = Eigen::Matrix<double, 11, 8>::Zero();
  d.block<3, 3>(0, 0) = -Mat3::Identity();
  d(3, 3) = 1.0;
  d.block<3, 3>(4, 0) = Mat3::Identity();
  d.block<3, 3>(4, 4) = -Mat3::Identity();
  d(7, 7) = 1.0;
  d.block<3, 3>(8, 4) = Mat3::Identity();
  return d;
}

struct StencilResult {
  double bending = 0.0;
  double twisting = 0.0;
  Vec11 gradient = Vec11::Zero();
  Mat11 hessian = Mat11::Zero();
};

/// Bending and twisting energy of the stencil around `node`, with gradient
/// and Hessian in stencil DoF order when requested.
StencilResult bend_twist_stencil(const RodState& s, const RodKinematicsCache& c,
                                 const RodParameters& p, int node, bool want_gradient,
                                 bool want_hessian) {
  StencilResult out;
  const int ja = s.prev_edge(node), jb = node;
  const double lbar = s.voronoi_lengths[node];
  const std::array<double, 2> stiff{p.youngs_modulus * p.second_moment_1() / lbar,
                                    p.youngs_modulus * p.second_moment_2() / lbar};
  const double twist_stiff = p.shear_modulus * p.polar_moment() / lbar;
  const Vec2 dkappa = c.curvature[node] - s.rest_curvature[node];
  const double dtau = c.twist[node] - s.rest_twist[node];

  out.bending = 0.5 * (stiff[0] * dkappa[0] * dkappa[0] + stiff[1] * dkappa[1] * dkappa[1]);
  out.twisting = 0.5 * twist_stiff * dtau * dtau;
  if (!want_gradient && !want_hessian) return out;

  const Vec3& t0 = s.tangents[ja];
  const Vec3& t1 = s.tangents[jb];
  const Vec3& kb = c.curvature_binormal[node];
  const std::array<double, 2> inv_len{1.0 / edge_vector(s, ja).norm(),
                                      1.0 / edge_vector(s, jb).norm()};
  const double inv_chi = 1.0 / (1.0 + t0.dot(t1));
  const Vec3 tt = (t0 + t1) * inv_chi;
  const std::array<const Vec3*, 2> tan{&t0, &t1};
  // Material directors per adjacent edge: dir[j][0] = m1, dir[j][1] = m2.
  const std::array<std::array<const Vec3*, 2>, 2> dir{
      {{&c.m1[ja], &c.m2[ja]}, {&c.m1[jb], &c.m2[jb]}}};

  // Per-corner curvatures kappa_k^j: k = 0 -> kb.m2^j, k = 1 -> -kb.m1^j.
  // The nodal kappa_k is their mean.
  std::array<Vec8, 2> grad_kappa{Vec8::Zero(), Vec8::Zero()};
  std::array<Mat8, 2> hess_kappa{Mat8::Zero(), Mat8::Zero()};
  for (int k = 0; k < 2; ++k) {
    const int kother = 1 - k;
    const double sign = (k == 0) ? 1.0 : -1.0;
    for (int j = 0; j < 2; ++j) {
      const Vec3& d_k = *dir[j][k];
      const Vec3& d_other = *dir[j][kother];
      const double kappa = (k == 0) ? kb.dot(*dir[j][1]) : -kb.dot(*dir[j][0]);
      const double two_sign_inv_chi = 2.0 * sign * inv_chi;

      Vec8 g = Vec8::Zero();
      g.segment<3>(0) = inv_len[0] * (two_sign_inv_chi * t1.cross(d_other) - kappa * tt);
      g.segment<3>(4) = inv_len[1] * (-two_sign_inv_chi * t0.cross(d_other) - kappa * tt);
      g[j == 0 ? 3 : 7] = -kb.dot(d_k);
      grad_kappa[k] += 0.5 * g;

      if (!want_hessian) continue;
      const Vec3 c0 = two_sign_inv_chi * t1.cross(d_other);
      const Vec3 c1 = two_sign_inv_chi * t0.cross(d_other);
      const Mat3 tt2 = 2.0 * tt * tt.transpose();
      const Mat3 p0 = Mat3::Identity() - t0 * t0.transpose();
      const Mat3 p1 = Mat3::Identity() - t1 * t1.transpose();
      Mat3 a00 = 0.5 * kappa * tt2 - c0 * tt.transpose() - (0.5 * kappa * inv_chi) * p0;
      Mat3 a11 = 0.5 * kappa * tt2 + c1 * tt.transpose() - (0.5 * kappa * inv_chi) * p1;
      Mat3 a01 = kappa * tt2 - (c0 * tt.transpose() - tt * c1.transpose()) -
                 (kappa * inv_chi) * (Mat3::Identity() + t0 * t1.transpose()) -
                 two_sign_inv_chi * skew(d_other);
      // Second-order change of the transported frame of edge j.
      const Vec3& tj = *tan[j];
      const Mat3 transport = sign * kb * d_other.transpose() +
                             0.5 * kb.cross(tj) * d_k.transpose();
      if (j == 0) a00 += transport - 0.5 * kappa * p0;
      else a11 += transport - 0.5 * kappa * p1;

      Mat8 h = Mat8::Zero();
      h.block<3, 3>(0, 0) = inv_len[0] * inv_len[0] * (a00 + a00.transpose());
      h.block<3, 3>(4, 4) = inv_len[1] * inv_len[1] * (a11 + a11.transpose());
      h.block<3, 3>(0, 4) = inv_len[0] * inv_len[1] * a01;
      h.block<3, 3>(4, 0) = h.block<3, 3>(0, 4).transpose();
      const int th = (j == 0) ? 3 : 7;
      h(th, th) = -kappa;
      const Vec3 de0 = inv_len[0] * (-2.0 * inv_chi * t1.cross(d_k) + kb.dot(d_k) * tt);
      const Vec3 de1 = inv_len[1] * (2.0 * inv_chi * t0.cross(d_k) + kb.dot(d_k) * tt);
      h.block<3, 1>(0, th) = de0;
      h.block<1, 3>(th, 0) = de0.transpose();
      h.block<3, 1>(4, th) = de1;
      h.block<1, 3>(th, 4) = de1.transpose();
      hess_kappa[k] += 0.5 * h;
    }
  }

  // Twist tau = gamma1 - gamma0 + beta.
  Vec8 grad_tau = Vec8::Zero();
  grad_tau.segment<3>(0) = 0.5 * inv_len[0] * kb;
  grad_tau.segment<3>(4) = 0.5 * inv_len[1] * kb;
  grad_tau[3] = -1.0;
  grad_tau[7] = 1.0;

  Vec8 g_edge = stiff[0] * dkappa[0] * grad_kappa[0] + stiff[1] * dkappa[1] * grad_kappa[1] +
                twist_stiff * dtau * grad_tau;
  static const Eigen::Matrix<double, 11, 8> kMap = stencil_map();
  out.gradient = kMap * g_edge;
  if (!want_hessian) return out;

  Mat8 hess_tau = Mat8::Zero();
  {
    Mat3 m = kb * (tt + t1).transpose();
    hess_tau.block<3, 3>(4, 4) = -0.25 * inv_len[1] * inv_len[1] * (m + m.transpose());
    m = kb * (tt + t0).transpose();
    hess_tau.block<3, 3>(0, 0) = -0.25 * inv_len[0] * inv_len[0] * (m + m.transpose());
    const Mat3 mixed =
        0.5 * inv_len[0] * inv_len[1] * (-kb * tt.transpose() + 2.0 * inv_chi * skew(t0));
    hess_tau.block<3, 3>(0, 4) = mixed;
    hess_tau.block<3, 3>(4, 0) = mixed.transpose();
  }

  Mat8 h_edge = Mat8::Zero();
  for (int k = 0; k < 2; ++k)
    h_edge += stiff[k] * (grad_kappa[k] * grad_kappa[k].transpose() + dkappa[k] * hess_kappa[k]);
  h_edge += twist_stiff * (grad_tau * grad_tau.transpose() + dtau * hess_tau);
  h_edge = 0.5 * (h_edge + h_edge.transpose()).eval();
  out.hessian = kMap * h_edge * kMap.transpose();
  out.hessian = 0.5 * (out.hessian + out.hessian.transpose()).eval();
  return out;
}

std::array<int, 11> stencil_dofs(const RodState& s, int node) {
  const int ja = s.prev_edge(node);
  const int prev = ja;  // node index equals the index of its outgoing edge
  const int next = s.next_node(node);
  std::array<int, 11> d{};
  for (int a = 0; a < 3; ++a) {
    d[a] = RodState::node_dof(prev) + a;
    d[4 + a] = RodState::node_dof(node) + a;
    d[8 + a] = RodState::node_dof(next) + a;
  }
  d[3] = RodState::edge_dof(ja);
  d[7] = RodState::edge_dof(node);
  return d;
}

}  // namespace

double RodParameters::area() const {
  if (const auto* c = std::get_if<CircularSection>(&section))
    return std::numbers::pi * c->radius * c->radius;
  const auto& r = std::get<RectangularSection>(section);
  return r.width * r.height;
}

double RodParameters::second_moment_1() const {
  if (const auto* c = std::get_if<CircularSection>(&section))
    return 0.25 * std::numbers::pi * std::pow(c->radius, 4);
  const auto& r = std::get<RectangularSection>(section);
  return r.height * std::pow(r.width, 3) / 12.0;
}

double RodParameters::second_moment_2() const {
  if (const auto* c = std::get_if<CircularSection>(&section))
    return 0.25 * std::numbers::pi * std::pow(c->radius, 4);
  const auto& r = std::get<RectangularSection>(section);
  return r.width * std::pow(r.height, 3) / 12.0;
}

double RodParameters::polar_moment() const {
  if (std::holds_alternative<CircularSection>(section))
    return second_moment_1() + second_moment_2();
  // Saint-Venant torsion constant of a rectangle, long side a, short side b.
  const auto& r = std::get<RectangularSection>(section);
  const double a = std::max(r.width, r.height), b = std::min(r.width, r.height);
  return a * b * b * b * (1.0 / 3.0 - 0.21 * (b / a) * (1.0 - std::pow(b / a, 4) / 12.0));
}

double RodParameters::contact_radius() const {
  if (const auto* c = std::get_if<CircularSection>(&section)) return c->radius;
  const auto& r = std::get<RectangularSection>(section);
  return 0.5 * std::max(r.width, r.height);
}

void RodParameters::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw SimError(ErrorCode::kInvalidParameters, what);
  };
  require(youngs_modulus > 0.0, "Young's modulus must be positive");
  require(shear_modulus > 0.0, "shear modulus must be positive");
  require(density > 0.0, "density must be positive");
  require(rayleigh_alpha >= 0.0 && rayleigh_beta >= 0.0, "Rayleigh coefficients must be >= 0");
  if (const auto* c = std::get_if<CircularSection>(&section)) {
    require(c->radius > 0.0, "section radius must be positive");
  } else {
    const auto& r = std::get<RectangularSection>(section);
    require(r.width > 0.0 && r.height > 0.0, "section sides must be positive");
  }
}

std::vector<int> RodState::interior_nodes() const {
  std::vector<int> out;
  const int n = num_nodes();
  if (closed) {
    for (int i = 0; i < n; ++i) out.push_back(i);
  } else {
    for (int i = 1; i + 1 < n; ++i) out.push_back(i);
  }
  return out;
}

RodState make_rod(const std::vector<Vec3>& rest_nodes, bool closed, std::optional<Vec3> first_d1) {
  if (rest_nodes.size() < (closed ? 3u : 2u))
    throw SimError(ErrorCode::kInvalidParameters, "rod needs at least one edge");
  RodState s;
  s.closed = closed;
  s.nodes = rest_nodes;
  s.edge_angles = VecX::Zero(s.num_edges());
  const Vec3 t0 = unit_tangents(s)[0];
  transport_along_centerline(s, first_d1.value_or(any_orthogonal(t0)));
  if (closed) check_not_antiparallel(s.tangents.back(), s.tangents.front(), 0);
  fill_rest_quantities(s);
  return s;
}

RodState with_initial_shape(const RodState& rest, const std::vector<Vec3>& nodes) {
  if (nodes.size() != rest.nodes.size())
    throw SimError(ErrorCode::kTopologyMismatch, "initial shape has a different node count");
  RodState s = rest;
  s.nodes = nodes;
  s.edge_angles.setZero();
  const Vec3 t0 = unit_tangents(s)[0];
  Vec3 first = rest.d1[0];
  if (1.0 + rest.tangents[0].dot(t0) > kAntiparallelTolerance)
    first = parallel_transport(rest.d1[0], rest.tangents[0], t0);
  transport_along_centerline(s, first);
  return s;
}

RodKinematicsCache compute_frames(const RodState& s) {
  const int ne = s.num_edges(), n = s.num_nodes();
  RodKinematicsCache c;
  c.m1.resize(ne);
  c.m2.resize(ne);
  for (int j = 0; j < ne; ++j) {
    const double cg = std::cos(s.edge_angles[j]), sg = std::sin(s.edge_angles[j]);
    c.m1[j] = cg * s.d1[j] + sg * s.d2[j];
    c.m2[j] = -sg * s.d1[j] + cg * s.d2[j];
  }
  c.curvature_binormal.assign(n, Vec3::Zero());
  c.curvature.assign(n, Eigen::Vector2d::Zero());
  c.reference_twist.assign(n, 0.0);
  c.twist.assign(n, 0.0);
  for (int i : s.interior_nodes()) {
    const int ja = s.prev_edge(i), jb = i;
    const Vec3& t0 = s.tangents[ja];
    const Vec3& t1 = s.tangents[jb];
    check_not_antiparallel(t0, t1, i);
    const Vec3 kb = 2.0 * t0.cross(t1) / (1.0 + t0.dot(t1));
    c.curvature_binormal[i] = kb;
    c.curvature[i] = {0.5 * kb.dot(c.m2[ja] + c.m2[jb]), -0.5 * kb.dot(c.m1[ja] + c.m1[jb])};
    const double ref = i < static_cast<int>(s.reference_twist.size()) ? s.reference_twist[i] : 0.0;
    c.reference_twist[i] = wrap_to(raw_reference_twist(s, i), ref);
    c.twist[i] = s.edge_angles[jb] - s.edge_angles[ja] + c.reference_twist[i];
  }
  return c;
}

ElasticEnergy elastic_energy(const RodState& s, const RodParameters& p) {
  ElasticEnergy e;
  const double ea = p.youngs_modulus * p.area();
  for (int j = 0; j < s.num_edges(); ++j) {
    const double strain = edge_vector(s, j).norm() / s.rest_lengths[j] - 1.0;
    e.stretching += 0.5 * ea * strain * strain * s.rest_lengths[j];
  }
  const RodKinematicsCache c = compute_frames(s);
  for (int i : s.interior_nodes()) {
    const StencilResult r = bend_twist_stencil(s, c, p, i, false, false);
    e.bending += r.bending;
    e.twisting += r.twisting;
  }
  return e;
}

VecX elastic_gradient(const RodState& s, const RodParameters& p) {
  VecX g = VecX::Zero(s.num_dofs());
  const double ea = p.youngs_modulus * p.area();
  for (int j = 0; j < s.num_edges(); ++j) {
    const Vec3 e = edge_vector(s, j);
    const double len = e.norm();
    const Vec3 f = ea * (len / s.rest_lengths[j] - 1.0) * (e / len);
    g.segment<3>(RodState::node_dof(j)) -= f;
    g.segment<3>(RodState::node_dof(s.next_node(j))) += f;
  }
  const RodKinematicsCache c = compute_frames(s);
  for (int i : s.interior_nodes()) {
    const StencilResult r = bend_twist_stencil(s, c, p, i, true, false);
    const auto dofs = stencil_dofs(s, i);
    for (int a = 0; a < 11; ++a) g[dofs[a]] += r.gradient[a];
  }
  return g;
}

std::vector<HessianBlock> elastic_hessian_blocks(const RodState& s, const RodParameters& p) {
  std::vector<HessianBlock> blocks;
  const double ea = p.youngs_modulus * p.area();
  for (int j = 0; j < s.num_edges(); ++j) {
    const Vec3 e = edge_vector(s, j);
    const double len = e.norm();
    const Vec3 t = e / len;
    const Mat3 h = ea * ((1.0 / s.rest_lengths[j] - 1.0 / len) * Mat3::Identity() +
                         (1.0 / len) * t * t.transpose());
    HessianBlock b;
    const int a0 = RodState::node_dof(j), a1 = RodState::node_dof(s.next_node(j));
    b.dofs = {a0, a0 + 1, a0 + 2, a1, a1 + 1, a1 + 2};
    b.block.resize(6, 6);
    b.block << h, -h, -h, h;
    blocks.push_back(std::move(b));
  }
  const RodKinematicsCache c = compute_frames(s);
  for (int i : s.interior_nodes()) {
    const StencilResult r = bend_twist_stencil(s, c, p, i, true, true);
    const auto dofs = stencil_dofs(s, i);
    HessianBlock b;
    b.dofs.assign(dofs.begin(), dofs.end());
    b.block = r.hessian;
    blocks.push_back(std::move(b));
  }
  return blocks;
}

Eigen::SparseMatrix<double> elastic_hessian(const RodState& s, const RodParameters& p) {
  std::vector<Eigen::Triplet<double>> trip;
  for (const HessianBlock& b : elastic_hessian_blocks(s, p)) {
    const int m = static_cast<int>(b.dofs.size());
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < m; ++c) trip.emplace_back(b.dofs[r], b.dofs[c], b.block(r, c));
  }
  Eigen::SparseMatrix<double> k(s.num_dofs(), s.num_dofs());
  k.setFromTriplets(trip.begin(), trip.end());
  // Summation order of duplicates is not mirrored; restore exact symmetry.
  const Eigen::SparseMatrix<double> kt = k.transpose();
  return 0.5 * (k + kt);
}

VecX lumped_mass(const RodState& s, const RodParameters& p) {
  p.validate();
  VecX m = VecX::Zero(s.num_dofs());
  const double rho_a = p.density * p.area();
  const double rho_j = p.density * p.polar_moment();
  for (int j = 0; j < s.num_edges(); ++j) {
    const double half = 0.5 * rho_a * s.rest_lengths[j];
    m.segment<3>(RodState::node_dof(j)).array() += half;
    m.segment<3>(RodState::node_dof(s.next_node(j))).array() += half;
    m[RodState::edge_dof(j)] = rho_j * s.rest_lengths[j];
  }
  return m;
}

RodState time_parallel_transport(const RodState& prev, const std::vector<Vec3>& nodes_new) {
  if (nodes_new.size() != prev.nodes.size())
    throw SimError(ErrorCode::kTopologyMismatch, "transport target has a different node count");
  RodState s = prev;
  s.nodes = nodes_new;
  s.tangents = unit_tangents(s);
  for (int j = 0; j < s.num_edges(); ++j) {
    check_not_antiparallel(prev.tangents[j], s.tangents[j], j);
    Vec3 d = parallel_transport(prev.d1[j], prev.tangents[j], s.tangents[j]);
    d -= d.dot(s.tangents[j]) * s.tangents[j];
    s.d1[j] = d.normalized();
    s.d2[j] = s.tangents[j].cross(s.d1[j]);
  }
  for (int i : s.interior_nodes()) {
    check_not_antiparallel(s.tangents[s.prev_edge(i)], s.tangents[i], i);
    s.reference_twist[i] = wrap_to(raw_reference_twist(s, i), prev.reference_twist[i]);
  }
  return s;
}

VecX pack_coordinates(const RodState& s) {
  VecX q(s.num_dofs());
  for (int k = 0; k < s.num_nodes(); ++k) q.segment<3>(RodState::node_dof(k)) = s.nodes[k];
  for (int j = 0; j < s.num_edges(); ++j) q[RodState::edge_dof(j)] = s.edge_angles[j];
  return q;
}

RodState with_coordinates(const RodState& base, std::span<const double> q) {
  if (static_cast<int>(q.size()) != base.num_dofs())
    throw SimError(ErrorCode::kTopologyMismatch, "coordinate vector has the wrong length");
  std::vector<Vec3> nodes(base.num_nodes());
  for (int k = 0; k < base.num_nodes(); ++k) {
    const int o = RodState::node_dof(k);
    nodes[k] = Vec3(q[o], q[o + 1], q[o + 2]);
  }
  RodState s = time_parallel_transport(base, nodes);
  for (int j = 0; j < s.num_edges(); ++j) s.edge_angles[j] = q[RodState::edge_dof(j)];
  return s;
}

}  // namespace filsim
