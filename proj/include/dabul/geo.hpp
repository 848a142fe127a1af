#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace dabul::geo {

// Two-level nested administrative geography. Areas are 0-based internally;
// files use 1-based ids.
struct Geography {
  int m1 = 0;
  int m2 = 0;
  std::vector<int> admin1_of;               // admin2 -> admin1
  std::vector<std::vector<int>> neighbors;  // sorted, symmetric, no self loops

  std::vector<int> admin2_in(int admin1) const;
  int edge_count() const;
  void validate() const;
};

/*
 * Adjacency file layout:
 *
 *   [admin1]
 *   1
 *   2
 *   [areas]
 *   <admin2 id>, <admin1 id>
 *   [edges]
 *   <admin2 id>, <admin2 id>
 *
 * Admin1 and admin2 ids are contiguous from 1. Edges may be listed in one
 * direction only; they are symmetrized on load.
 */
Geography parse_geography(std::istream& in, const std::string& source = "<geography>");
Geography load_geography(const std::filesystem::path& path);
std::string format_geography(const Geography& g);

// Rook-adjacency lattice per admin1 block; blocks are tiled edge to edge in a
// near-square arrangement whose block order is shuffled by `seed`.
Geography generate_synthetic_geography(int n_admin1, int admin2_per_admin1, std::uint64_t seed);

bool is_connected(const Geography& g);

enum class Nesting { global, per_admin1 };

// One sum-to-zero constraint block of the ICAR field.
struct IcarBlock {
  std::vector<int> areas;
  double scale_factor = 1.0;  // geometric mean of diag of the unscaled generalized inverse
  // Columns span the constraint complement and whiten the scaled precision:
  // for u = whitening * w, u' Q_* u = w' w.
  Eigen::MatrixXd whitening;
};

struct StructureMatrix {
  Nesting nesting = Nesting::per_admin1;
  Eigen::MatrixXd q;           // degree minus adjacency (within-block edges when nested)
  Eigen::MatrixXd q_star;      // per-block scaled
  Eigen::MatrixXd q_star_inv;  // generalized inverse of q_star under the block constraints
  std::vector<IcarBlock> blocks;
  std::vector<double> scale_factors;
  std::vector<int> block_of;   // area -> block

  int size() const { return static_cast<int>(q.rows()); }
  // Dimension of the constraint complement (free ICAR coordinates).
  int free_dimension() const;

  // Remove per-block means.
  Eigen::VectorXd project(const Eigen::VectorXd& u) const;
  // u = W w, W the block-diagonal whitening basis.
  Eigen::VectorXd from_whitened(const Eigen::VectorXd& w) const;
  // W' g.
  Eigen::VectorXd to_whitened_gradient(const Eigen::VectorXd& g) const;
};

// Assemble Q and the scaled generalized inverse. With per_admin1 nesting the
// edges between different admin1 areas are dropped so that each admin1 carries
// its own intrinsic field and sum-to-zero constraint. Throws ContractViolation
// naming the block if a block is disconnected.
StructureMatrix build_icar_structure(const Geography& g, Nesting nesting);

}  // namespace dabul::geo
