#include "dabul/geo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <queue>
#include <set>
#include <sstream>

#include "dabul/errors.hpp"
#include "dabul/rng.hpp"
#include "dabul/table_io.hpp"

namespace dabul::geo {

std::vector<int> Geography::admin2_in(int admin1) const {
  std::vector<int> out;
  for (int j = 0; j < m2; ++j) {
    if (admin1_of[j] == admin1) out.push_back(j);
  }
  return out;
}

int Geography::edge_count() const {
  int total = 0;
  for (const auto& nb : neighbors) total += static_cast<int>(nb.size());
  return total / 2;
}

void Geography::validate() const {
  if (m1 < 1) throw ContractViolation("geography: need at least one admin1 area");
  if (m2 < m1) throw ContractViolation("geography: fewer admin2 than admin1 areas");
  if (static_cast<int>(admin1_of.size()) != m2 || static_cast<int>(neighbors.size()) != m2) {
    throw ContractViolation("geography: size mismatch");
  }
  std::vector<int> members(m1, 0);
  for (int j = 0; j < m2; ++j) {
    if (admin1_of[j] < 0 || admin1_of[j] >= m1) {
      throw ContractViolation("geography: admin2 " + std::to_string(j + 1) + " has invalid admin1");
    }
    ++members[admin1_of[j]];
    for (int k : neighbors[j]) {
      if (k == j) throw ContractViolation("geography: self loop at " + std::to_string(j + 1));
      if (!std::binary_search(neighbors[k].begin(), neighbors[k].end(), j)) {
        throw ContractViolation("geography: asymmetric adjacency " + std::to_string(j + 1) +
                                "-" + std::to_string(k + 1));
      }
    }
  }
  for (int i = 0; i < m1; ++i) {
    if (members[i] == 0) throw ContractViolation("geography: admin1 " + std::to_string(i + 1) + " is empty");
  }
}

Geography parse_geography(std::istream& in, const std::string& source) {
  enum class Section { none, admin1, areas, edges } section = Section::none;
  std::vector<int> admin1_ids;
  std::vector<std::pair<long, long>> areas;
  std::vector<std::pair<long, long>> edges;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto body = io::trim(line);
    if (body.empty() || body.front() == '#') continue;
    const std::string where = source + ":" + std::to_string(line_no);
    if (body == "[admin1]") { section = Section::admin1; continue; }
    if (body == "[areas]") { section = Section::areas; continue; }
    if (body == "[edges]") { section = Section::edges; continue; }
    const auto fields = io::split_fields(body);
    switch (section) {
      case Section::none:
        throw ParseError(where + ": record before any section header");
      case Section::admin1:
        if (fields.size() != 1) throw ParseError(where + ": expected one admin1 id");
        admin1_ids.push_back(static_cast<int>(io::parse_long(fields[0], where)));
        break;
      case Section::areas:
        if (fields.size() != 2) throw ParseError(where + ": expected 'id, admin1_id'");
        areas.emplace_back(io::parse_long(fields[0], where), io::parse_long(fields[1], where));
        break;
      case Section::edges:
        if (fields.size() != 2) throw ParseError(where + ": expected 'id_a, id_b'");
        edges.emplace_back(io::parse_long(fields[0], where), io::parse_long(fields[1], where));
        break;
    }
  }

  Geography g;
  g.m1 = static_cast<int>(admin1_ids.size());
  std::sort(admin1_ids.begin(), admin1_ids.end());
  for (int i = 0; i < g.m1; ++i) {
    if (admin1_ids[i] != i + 1) throw ParseError(source + ": admin1 ids must be contiguous from 1");
  }
  g.m2 = static_cast<int>(areas.size());
  g.admin1_of.assign(g.m2, -1);
  for (const auto& [id, parent] : areas) {
    if (id < 1 || id > g.m2) throw ParseError(source + ": admin2 id " + std::to_string(id) + " out of range 1.." + std::to_string(g.m2));
    if (g.admin1_of[id - 1] != -1) throw ParseError(source + ": duplicate admin2 id " + std::to_string(id));
    if (parent < 1 || parent > g.m1) {
      throw ParseError(source + ": admin2 " + std::to_string(id) + " lists nonexistent admin1 " + std::to_string(parent));
    }
    g.admin1_of[id - 1] = static_cast<int>(parent - 1);
  }
  std::vector<std::set<int>> adj(g.m2);
  for (const auto& [a, b] : edges) {
    if (a < 1 || a > g.m2 || b < 1 || b > g.m2) {
      throw ParseError(source + ": edge " + std::to_string(a) + "-" + std::to_string(b) + " references unknown area");
    }
    if (a == b) throw ParseError(source + ": self loop at area " + std::to_string(a));
    adj[a - 1].insert(static_cast<int>(b - 1));
    adj[b - 1].insert(static_cast<int>(a - 1));
  }
  g.neighbors.resize(g.m2);
  for (int j = 0; j < g.m2; ++j) g.neighbors[j].assign(adj[j].begin(), adj[j].end());
  try {
    g.validate();
  } catch (const ContractViolation& e) {
    throw ParseError(source + ": " + e.what());
  }
  return g;
}

Geography load_geography(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  return parse_geography(in, path.string());
}

std::string format_geography(const Geography& g) {
  std::ostringstream out;
  out << "[admin1]\n";
  for (int i = 0; i < g.m1; ++i) out << i + 1 << '\n';
  out << "[areas]\n";
  for (int j = 0; j < g.m2; ++j) out << j + 1 << ", " << g.admin1_of[j] + 1 << '\n';
  out << "[edges]\n";
  for (int j = 0; j < g.m2; ++j) {
    for (int k : g.neighbors[j]) {
      if (k > j) out << j + 1 << ", " << k + 1 << '\n';
    }
  }
  return out.str();
}

Geography generate_synthetic_geography(int n_admin1, int admin2_per_admin1, std::uint64_t seed) {
  if (n_admin1 < 1 || admin2_per_admin1 < 1) {
    throw ContractViolation("generate_synthetic_geography: counts must be >= 1");
  }
  // Shape of one block: rows x cols, filled row-major, so row 0 is always full.
  const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(admin2_per_admin1))));
  const int rows = (admin2_per_admin1 + cols - 1) / cols;
  // Arrangement of blocks: block_rows x block_cols tiles, row-major.
  const int block_cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n_admin1))));
  const int block_rows = (n_admin1 + block_cols - 1) / block_cols;

  std::vector<int> placement(n_admin1);
  std::iota(placement.begin(), placement.end(), 0);
  auto rng = make_rng(seed, {stream::geography});
  std::shuffle(placement.begin(), placement.end(), rng);

  const int grid_w = block_cols * cols;
  const int grid_h = block_rows * rows;
  std::vector<int> cell(grid_w * grid_h, -1);
  Geography g;
  g.m1 = n_admin1;
  g.m2 = n_admin1 * admin2_per_admin1;
  g.admin1_of.resize(g.m2);
  for (int slot = 0; slot < n_admin1; ++slot) {
    const int admin1 = placement[slot];
    const int by = slot / block_cols;
    const int bx = slot % block_cols;
    for (int k = 0; k < admin2_per_admin1; ++k) {
      const int area = admin1 * admin2_per_admin1 + k;
      const int y = by * rows + k / cols;
      const int x = bx * cols + k % cols;
      cell[y * grid_w + x] = area;
      g.admin1_of[area] = admin1;
    }
  }
  std::vector<std::set<int>> adj(g.m2);
  for (int y = 0; y < grid_h; ++y) {
    for (int x = 0; x < grid_w; ++x) {
      const int a = cell[y * grid_w + x];
      if (a < 0) continue;
      if (x + 1 < grid_w) {
        const int b = cell[y * grid_w + x + 1];
        if (b >= 0) { adj[a].insert(b); adj[b].insert(a); }
      }
      if (y + 1 < grid_h) {
        const int b = cell[(y + 1) * grid_w + x];
        if (b >= 0) { adj[a].insert(b); adj[b].insert(a); }
      }
    }
  }
  g.neighbors.resize(g.m2);
  for (int j = 0; j < g.m2; ++j) g.neighbors[j].assign(adj[j].begin(), adj[j].end());
  g.validate();
  return g;
}

bool is_connected(const Geography& g) {
  if (g.m2 == 0) return true;
  std::vector<char> seen(g.m2, 0);
  std::queue<int> frontier;
  frontier.push(0);
  seen[0] = 1;
  int count = 1;
  while (!frontier.empty()) {
    const int a = frontier.front();
    frontier.pop();
    for (int b : g.neighbors[a]) {
      if (!seen[b]) { seen[b] = 1; ++count; frontier.push(b); }
    }
  }
  return count == g.m2;
}

int StructureMatrix::free_dimension() const {
  int total = 0;
  for (const auto& b : blocks) total += static_cast<int>(b.whitening.cols());
  return total;
}

Eigen::VectorXd StructureMatrix::project(const Eigen::VectorXd& u) const {
  Eigen::VectorXd out = u;
  for (const auto& b : blocks) {
    double mean = 0.0;
    for (int j : b.areas) mean += u[j];
    mean /= static_cast<double>(b.areas.size());
    for (int j : b.areas) out[j] -= mean;
  }
  return out;
}

Eigen::VectorXd StructureMatrix::from_whitened(const Eigen::VectorXd& w) const {
  Eigen::VectorXd u = Eigen::VectorXd::Zero(size());
  Eigen::Index offset = 0;
  for (const auto& b : blocks) {
    const auto k = b.whitening.cols();
    if (k > 0) {
      const Eigen::VectorXd local = b.whitening * w.segment(offset, k);
      for (std::size_t r = 0; r < b.areas.size(); ++r) u[b.areas[r]] = local[r];
    }
    offset += k;
  }
  return u;
}

Eigen::VectorXd StructureMatrix::to_whitened_gradient(const Eigen::VectorXd& g) const {
  Eigen::VectorXd out(free_dimension());
  Eigen::Index offset = 0;
  for (const auto& b : blocks) {
    const auto k = b.whitening.cols();
    if (k > 0) {
      Eigen::VectorXd local(b.areas.size());
      for (std::size_t r = 0; r < b.areas.size(); ++r) local[r] = g[b.areas[r]];
      out.segment(offset, k) = b.whitening.transpose() * local;
    }
    offset += k;
  }
  return out;
}

StructureMatrix build_icar_structure(const Geography& g, Nesting nesting) {
  g.validate();
  StructureMatrix s;
  s.nesting = nesting;
  const int n = g.m2;
  s.q = Eigen::MatrixXd::Zero(n, n);
  for (int a = 0; a < n; ++a) {
    for (int b : g.neighbors[a]) {
      if (nesting == Nesting::per_admin1 && g.admin1_of[a] != g.admin1_of[b]) continue;
      s.q(a, b) = -1.0;
      s.q(a, a) += 1.0;
    }
  }

  if (nesting == Nesting::global) {
    std::vector<int> all(n);
    std::iota(all.begin(), all.end(), 0);
    s.blocks.push_back({all, 1.0, {}});
  } else {
    for (int i = 0; i < g.m1; ++i) s.blocks.push_back({g.admin2_in(i), 1.0, {}});
  }

  s.q_star = Eigen::MatrixXd::Zero(n, n);
  s.q_star_inv = Eigen::MatrixXd::Zero(n, n);
  s.block_of.assign(n, -1);
  for (std::size_t bi = 0; bi < s.blocks.size(); ++bi) {
    auto& block = s.blocks[bi];
    const int k = static_cast<int>(block.areas.size());
    for (int j : block.areas) s.block_of[j] = static_cast<int>(bi);
    if (k == 1) {
      // A lone area under a sum-to-zero constraint is identically zero.
      block.whitening = Eigen::MatrixXd(1, 0);
      s.scale_factors.push_back(1.0);
      continue;
    }
    Eigen::MatrixXd local(k, k);
    for (int r = 0; r < k; ++r) {
      for (int c = 0; c < k; ++c) local(r, c) = s.q(block.areas[r], block.areas[c]);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(local);
    const Eigen::VectorXd& lambda = eig.eigenvalues();  // ascending
    const double tol = 1e-9 * std::max(1.0, lambda.maxCoeff());
    int null_dim = 0;
    for (int r = 0; r < k; ++r) {
      if (lambda[r] < tol) ++null_dim;
    }
    if (null_dim != 1) {
      throw ContractViolation("build_icar_structure: block " + std::to_string(bi + 1) +
                              " is disconnected (null space dimension " + std::to_string(null_dim) + ")");
    }
    const Eigen::MatrixXd vecs = eig.eigenvectors().rightCols(k - 1);
    const Eigen::VectorXd pos = lambda.tail(k - 1);
    const Eigen::MatrixXd ginv = vecs * pos.cwiseInverse().asDiagonal() * vecs.transpose();
    double log_gm = 0.0;
    for (int r = 0; r < k; ++r) log_gm += std::log(ginv(r, r));
    const double scale = std::exp(log_gm / k);
    block.scale_factor = scale;
    s.scale_factors.push_back(scale);
    // Q_* = scale * Q, so (Q_*)^- = Q^- / scale and Q_* eigenvalues are scale * lambda.
    block.whitening = vecs * (scale * pos).cwiseSqrt().cwiseInverse().asDiagonal();
    for (int r = 0; r < k; ++r) {
      for (int c = 0; c < k; ++c) {
        s.q_star(block.areas[r], block.areas[c]) = scale * local(r, c);
        s.q_star_inv(block.areas[r], block.areas[c]) = ginv(r, c) / scale;
      }
    }
  }
  return s;
}

}  // namespace dabul::geo
