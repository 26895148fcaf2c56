#pragma once

#include <array>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include <Eigen/SparseCore>

#include "filsim/common.hpp"

namespace filsim {

struct CircularSection {
  double radius = 0.0;
};

/// Rectangular section; `width` is measured along m1, `height` along m2.
struct RectangularSection {
  double width = 0.0;
  double height = 0.0;
};

using CrossSection = std::variant<CircularSection, RectangularSection>;

struct RodParameters {
  double youngs_modulus = 0.0;  // Pa
  double shear_modulus = 0.0;   // Pa
  CrossSection section = CircularSection{};
  double density = 0.0;         // kg/m^3
  double rayleigh_alpha = 0.0;  // 1/s
  double rayleigh_beta = 0.0;   // s

  double area() const;
  /// Second moment paired with kappa_1 (bending in the t-m1 plane).
  double second_moment_1() const;
  /// Second moment paired with kappa_2.
  double second_moment_2() const;
  double polar_moment() const;
  /// Radius of the collision capsule, or half the larger side for boxes.
  double contact_radius() const;

  void validate() const;
};

/// Configuration of one discrete elastic rod plus its undeformed reference
/// quantities. Open rods have n nodes and n-1 edges; closed rods (rings) have
/// n nodes and n edges, edge j joining node j and node (j+1) mod n.
///
/// Generalized coordinates are interleaved: x_0, gamma_0, x_1, gamma_1, ...
/// so node k lives at offset 4k and edge j's angle at 4j+3.
struct RodState {
  bool closed = false;
  std::vector<Vec3> nodes;
  VecX edge_angles;
  std::vector<Vec3> d1;
  std::vector<Vec3> d2;
  std::vector<Vec3> tangents;
  std::vector<double> rest_lengths;  // per edge
  std::vector<double> voronoi_lengths;  // per node; zero at free ends
  std::vector<Eigen::Vector2d> rest_curvature;  // per node
  std::vector<double> rest_twist;  // per node
  /// Last accepted reference twist per node, used to unwrap beta
  /// continuously across updates.
  std::vector<double> reference_twist;

  int num_nodes() const { return static_cast<int>(nodes.size()); }
  int num_edges() const { return closed ? num_nodes() : num_nodes() - 1; }
  int num_dofs() const { return closed ? 4 * num_nodes() : 4 * num_nodes() - 1; }
  /// Nodes carrying curvature and twist.
  std::vector<int> interior_nodes() const;
  int prev_edge(int node) const { return closed ? (node - 1 + num_edges()) % num_edges() : node - 1; }
  int next_node(int edge) const { return (edge + 1) % num_nodes(); }

  static int node_dof(int node) { return 4 * node; }
  static int edge_dof(int edge) { return 4 * edge + 3; }
};

/// Builds a rod whose undeformed shape is `rest_nodes`, with reference frames
/// obtained by space-parallel transport of `first_d1` (or an arbitrary normal)
/// along the centerline. The deformed configuration equals the rest one.
RodState make_rod(const std::vector<Vec3>& rest_nodes, bool closed,
                  std::optional<Vec3> first_d1 = std::nullopt);

/// Replaces the deformed centerline of `rest` by `nodes` (same topology),
/// recomputing reference frames by space-parallel transport along the new
/// curve. Undeformed quantities are kept; edge angles are reset to zero.
RodState with_initial_shape(const RodState& rest, const std::vector<Vec3>& nodes);

struct RodKinematicsCache {
  std::vector<Vec3> m1, m2;  // per edge
  std::vector<Vec3> curvature_binormal;  // kb per node
  std::vector<Eigen::Vector2d> curvature;  // (kappa_1, kappa_2) per node
  std::vector<double> reference_twist;  // beta per node
  std::vector<double> twist;  // tau per node
};

RodKinematicsCache compute_frames(const RodState& state);

struct ElasticEnergy {
  double stretching = 0.0;
  double twisting = 0.0;
  double bending = 0.0;
  double total() const { return stretching + twisting + bending; }
};

ElasticEnergy elastic_energy(const RodState& state, const RodParameters& params);

/// dE_int/dq in the interleaved order.
VecX elastic_gradient(const RodState& state, const RodParameters& params);

/// Dense per-stencil Hessian contribution: `dofs` lists the rod-local DoF index
/// of each row/column of `block`.
struct HessianBlock {
  std::vector<int> dofs;
  MatX block;
};

/// Exact Hessian of E_int with reference frames defined by transport from the
/// current state, split into per-edge stretching and per-node bend/twist
/// blocks.
std::vector<HessianBlock> elastic_hessian_blocks(const RodState& state,
                                                 const RodParameters& params);

Eigen::SparseMatrix<double> elastic_hessian(const RodState& state,
                                            const RodParameters& params);

/// Diagonal of the lumped mass matrix (length num_dofs).
VecX lumped_mass(const RodState& state, const RodParameters& params);

/// Moves the centerline to `nodes_new`, carrying every reference director by
/// the minimal rotation between old and new tangents (no twist about t).
RodState time_parallel_transport(const RodState& prev,
                                 const std::vector<Vec3>& nodes_new);

/// Generalized coordinates of `state` in interleaved order.
VecX pack_coordinates(const RodState& state);

/// State at coordinates `q`, frames transported from `base`.
RodState with_coordinates(const RodState& base, std::span<const double> q);

}  // namespace filsim
