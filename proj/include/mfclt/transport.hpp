#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <vector>

namespace mfclt {

struct TransportResult {
  double cost = 0.0;
  std::size_t iterations = 0;
  // Basic cells (row, column, mass) of the optimal plan.
  struct Cell {
    std::size_t row, col;
    double mass;
  };
  std::vector<Cell> plan;
};

// Exact balanced transport between supply and demand (both summing to one) by the
// transportation simplex: northwest-corner start, u-v potentials, cycle pivots.
// cost is row-major rows x cols.
inline TransportResult solve_transport(const std::vector<double>& supply, const std::vector<double>& demand,
                                       const std::vector<double>& cost) {
  const std::size_t m = supply.size();
  const std::size_t n = demand.size();
  if (m == 0 || n == 0 || cost.size() != m * n) throw std::invalid_argument("transport problem has inconsistent sizes");

  struct Basic {
    std::size_t row, col;
    double mass;
  };
  std::vector<Basic> basis;
  basis.reserve(m + n - 1);
  {
    std::vector<double> a = supply;
    std::vector<double> b = demand;
    std::size_t i = 0, j = 0;
    while (true) {
      if (i == m - 1 && j == n - 1) {
        basis.push_back({i, j, std::max(0.0, std::min(a[i], b[j]))});
        break;
      }
      if (i == m - 1) {
        const double x = std::max(0.0, std::min(a[i], b[j]));
        basis.push_back({i, j, x});
        a[i] -= x;
        ++j;
        continue;
      }
      if (j == n - 1) {
        const double x = std::max(0.0, std::min(a[i], b[j]));
        basis.push_back({i, j, x});
        b[j] -= x;
        ++i;
        continue;
      }
      const double x = std::max(0.0, std::min(a[i], b[j]));
      basis.push_back({i, j, x});
      a[i] -= x;
      b[j] -= x;
      if (a[i] <= b[j]) {
        ++i;
      } else {
        ++j;
      }
    }
  }

  double scale = 0.0;
  for (double c : cost) scale = std::max(scale, std::abs(c));
  const double tol = 1e-13 * std::max(scale, 1.0);

  // Nodes 0..m-1 are rows, m..m+n-1 columns.
  const std::size_t nodes = m + n;
  std::vector<std::vector<std::size_t>> adjacency(nodes);
  std::vector<double> potential(nodes);
  std::vector<char> seen(nodes);
  std::vector<std::size_t> parent_cell(nodes);
  std::vector<std::size_t> stack;
  const std::size_t max_iterations = 50 * (m + n) * (m + n) + 1000;

  TransportResult result;
  for (std::size_t iter = 0;; ++iter) {
    if (iter > max_iterations) throw std::runtime_error("transport simplex did not converge");
    for (auto& adj : adjacency) adj.clear();
    for (std::size_t k = 0; k < basis.size(); ++k) {
      adjacency[basis[k].row].push_back(k);
      adjacency[m + basis[k].col].push_back(k);
    }
    // Potentials: u_i + v_j = c_ij on basic cells.
    std::fill(seen.begin(), seen.end(), 0);
    potential[0] = 0.0;
    seen[0] = 1;
    stack.assign(1, 0);
    while (!stack.empty()) {
      const std::size_t node = stack.back();
      stack.pop_back();
      for (std::size_t k : adjacency[node]) {
        const std::size_t other = node < m ? m + basis[k].col : basis[k].row;
        if (seen[other]) continue;
        potential[other] = cost[basis[k].row * n + basis[k].col] - potential[node];
        seen[other] = 1;
        stack.push_back(other);
      }
    }
    double best = -tol;
    std::size_t enter_row = m, enter_col = n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double reduced = cost[i * n + j] - potential[i] - potential[m + j];
        if (reduced < best) {
          best = reduced;
          enter_row = i;
          enter_col = j;
        }
      }
    }
    if (enter_row == m) {
      result.iterations = iter;
      break;
    }
    // Tree path from the entering column back to the entering row.
    std::fill(seen.begin(), seen.end(), 0);
    const std::size_t target = enter_row;
    const std::size_t start = m + enter_col;
    seen[start] = 1;
    stack.assign(1, start);
    while (!stack.empty() && !seen[target]) {
      const std::size_t node = stack.back();
      stack.pop_back();
      for (std::size_t k : adjacency[node]) {
        const std::size_t other = node < m ? m + basis[k].col : basis[k].row;
        if (seen[other]) continue;
        seen[other] = 1;
        parent_cell[other] = k;
        stack.push_back(other);
      }
    }
    // Walking from the row back to the column: cells alternate -, +, -, ...
    std::vector<std::size_t> minus, plus;
    std::size_t node = target;
    bool take = true;
    while (node != start) {
      const std::size_t k = parent_cell[node];
      (take ? minus : plus).push_back(k);
      take = !take;
      node = node < m ? m + basis[k].col : basis[k].row;
    }
    std::size_t leaving = minus.front();
    for (std::size_t k : minus) {
      if (basis[k].mass < basis[leaving].mass) leaving = k;
    }
    const double theta = basis[leaving].mass;
    for (std::size_t k : minus) basis[k].mass = std::max(0.0, basis[k].mass - theta);
    for (std::size_t k : plus) basis[k].mass += theta;
    basis[leaving] = {enter_row, enter_col, theta};
  }

  double total = 0.0;
  for (const auto& cell : basis) {
    total += cell.mass * cost[cell.row * n + cell.col];
    if (cell.mass > 0.0) result.plan.push_back({cell.row, cell.col, cell.mass});
  }
  result.cost = total;
  return result;
}

}  // namespace mfclt
