#pragma once

// Matching costs, optimal assignment, and two-round query matching.
//
// Rows are queries, columns are ground truths throughout. Matching always
// runs on detached values.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "themask/errors.hpp"
#include "themask/prediction.hpp"

namespace themask {

inline constexpr double kProbEps = 1e-7;  // probability clamp for cross-entropy
inline constexpr double kDiceSmooth = 1.0;

class CostMatrix {
 public:
  CostMatrix() = default;
  CostMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  CostMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows * cols) throw DimensionError("cost matrix data length mismatch");
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  const std::vector<double>& values() const { return values_; }

  CostMatrix transposed() const {
    CostMatrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  /// Keeps the listed rows, in the given order.
  CostMatrix select_rows(const std::vector<std::size_t>& rows) const {
    CostMatrix s(rows.size(), cols_);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t c = 0; c < cols_; ++c) s(i, c) = (*this)(rows[i], c);
    return s;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

struct CostConfig {
  double lambda_ce = 2.5;
  double lambda_dice = 2.5;
  /// Flat T*H*W positions shared by every (query, gt) pair; empty = all.
  std::vector<std::size_t> points;
};

/// The three terms of the matching score, kept apart so later rounds can
/// reuse them.
struct CostComponents {
  CostMatrix ce;    // [N x N^gt] mean binary cross-entropy
  CostMatrix dice;  // [N x N^gt]
  CostMatrix cls;   // [N x N^gt], entry (j, i) = p_j(c_i)
  double lambda_ce = 2.5;
  double lambda_dice = 2.5;

  std::size_t num_queries() const { return ce.rows(); }
  std::size_t num_gt() const { return ce.cols(); }

  CostMatrix combined() const {
    CostMatrix out(ce.rows(), ce.cols());
    for (std::size_t r = 0; r < ce.rows(); ++r)
      for (std::size_t c = 0; c < ce.cols(); ++c)
        out(r, c) = lambda_ce * ce(r, c) + lambda_dice * dice(r, c) - cls(r, c);
    return out;
  }
};

/// Matching costs from mask probabilities (sigmoid of the predicted logits)
/// and class probabilities.
inline CostComponents build_cost_components(const PredictionSet& preds, const GroundTruth& gts,
                                            const CostConfig& cfg) {
  preds.validate();
  if (gts.pixels() != preds.pixels() || gts.frames != preds.frames ||
      gts.height != preds.height) {
    throw DimensionError("prediction and ground-truth clips differ in T x H x W");
  }
  gts.validate(preds.num_classes());
  const std::size_t n = preds.num_queries();
  const std::size_t ngt = gts.size();
  const std::size_t full = preds.pixels();

  std::vector<std::size_t> points = cfg.points;
  if (points.empty()) {
    points.resize(full);
    for (std::size_t i = 0; i < full; ++i) points[i] = i;
  }
  for (auto p : points) {
    if (p >= full) throw ContractError("sampled point outside the clip");
  }
  const std::size_t np = points.size();

  const Tensor probs = preds.mask_probs();
  const auto pv = probs.data();
  std::vector<double> log_p(n * np), log_q(n * np), prob(n * np);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < np; ++k) {
      const double p = pv[j * full + points[k]];
      const double pc = std::clamp(p, kProbEps, 1.0 - kProbEps);
      log_p[j * np + k] = std::log(pc);
      log_q[j * np + k] = std::log(1.0 - pc);
      prob[j * np + k] = p;
    }
  }

  CostComponents out;
  out.lambda_ce = cfg.lambda_ce;
  out.lambda_dice = cfg.lambda_dice;
  out.ce = CostMatrix(n, ngt);
  out.dice = CostMatrix(n, ngt);
  out.cls = CostMatrix(n, ngt);
  const auto cp = preds.class_probs.data();
  const std::size_t kp1 = preds.class_probs.dim(1);
  for (std::size_t i = 0; i < ngt; ++i) {
    const auto& inst = gts.instances[i];
    std::vector<double> m(np);
    double m_sum = 0.0;
    for (std::size_t k = 0; k < np; ++k) {
      m[k] = inst.mask[points[k]];
      m_sum += m[k];
    }
    for (std::size_t j = 0; j < n; ++j) {
      double ce = 0.0, inter = 0.0, p_sum = 0.0;
      for (std::size_t k = 0; k < np; ++k) {
        const std::size_t jk = j * np + k;
        ce -= m[k] * log_p[jk] + (1.0 - m[k]) * log_q[jk];
        inter += prob[jk] * m[k];
        p_sum += prob[jk];
      }
      out.ce(j, i) = ce / static_cast<double>(np);
      out.dice(j, i) = 1.0 - (2.0 * inter + kDiceSmooth) / (p_sum + m_sum + kDiceSmooth);
      out.cls(j, i) = cp[j * kp1 + static_cast<std::size_t>(inst.label - 1)];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimal assignment

struct Assignment {
  std::vector<std::size_t> row_of_col;  // column c is served by row row_of_col[c]
  double total_cost = 0.0;              // summed in column order
};

namespace detail {

inline void check_assignable(const CostMatrix& cost) {
  if (cost.rows() < cost.cols()) {
    throw ContractError("assignment needs rows >= cols, got " + std::to_string(cost.rows()) +
                        "x" + std::to_string(cost.cols()));
  }
  for (double v : cost.values()) {
    if (!std::isfinite(v)) throw NumericError("non-finite entry in cost matrix");
  }
}

inline double column_order_total(const CostMatrix& cost, const std::vector<std::size_t>& rows) {
  double total = 0.0;
  for (std::size_t c = 0; c < rows.size(); ++c) total += cost(rows[c], c);
  return total;
}

}  // namespace detail

/// Minimum-cost injective map from columns to rows (Kuhn-Munkres with
/// potentials, O(R^3)). Extra columns are padded with a constant strictly
/// larger than any entry. Among optimal assignments the lexicographically
/// smallest row_of_col is returned: every perfect matching on the tight
/// edges of the optimal dual is optimal, so columns are fixed in order to
/// the lowest row that still admits one.
inline Assignment hungarian(const CostMatrix& cost) {
  detail::check_assignable(cost);
  const std::size_t n = cost.rows();
  const std::size_t cols = cost.cols();
  if (cols == 0) return {};

  double max_abs = 0.0, max_entry = -std::numeric_limits<double>::infinity();
  for (double v : cost.values()) {
    max_abs = std::max(max_abs, std::abs(v));
    max_entry = std::max(max_entry, v);
  }
  const double pad = max_entry + 1.0;
  auto a = [&](std::size_t r, std::size_t c) { return c < cols ? cost(r, c) : pad; };

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }

  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> row_of(n), col_of(n);
  for (std::size_t j = 1; j <= n; ++j) {
    row_of[j - 1] = p[j] - 1;
    col_of[p[j] - 1] = j - 1;
  }

  const double tol = 1e-11 * (1.0 + std::max(max_abs, std::abs(pad)));
  auto tight = [&](std::size_t r, std::size_t c) {
    return a(r, c) - u[r + 1] - v[c + 1] <= tol;
  };
  std::vector<char> fixed_row(n, 0), fixed_col(n, 0);
  std::vector<char> seen(n, 0);
  std::size_t banned_col = kNone;

  std::function<bool(std::size_t)> augment = [&](std::size_t x) -> bool {
    for (std::size_t y = 0; y < n; ++y) {
      if (fixed_col[y] || y == banned_col || seen[y] || !tight(x, y)) continue;
      seen[y] = 1;
      if (row_of[y] == kNone || augment(row_of[y])) {
        row_of[y] = x;
        col_of[x] = y;
        return true;
      }
    }
    return false;
  };

  for (std::size_t c = 0; c < cols; ++c) {
    for (std::size_t r = 0; r < n; ++r) {
      if (fixed_row[r] || !tight(r, c)) continue;
      if (row_of[c] == r) {
        fixed_row[r] = fixed_col[c] = 1;
        break;
      }
      const std::size_t r_old = row_of[c];
      const std::size_t c_old = col_of[r];
      row_of[c] = r;
      col_of[r] = c;
      row_of[c_old] = kNone;
      std::fill(seen.begin(), seen.end(), 0);
      banned_col = c;
      const bool ok = augment(r_old);
      banned_col = kNone;
      if (ok) {
        fixed_row[r] = fixed_col[c] = 1;
        break;
      }
      row_of[c] = r_old;
      col_of[r_old] = c;
      col_of[r] = c_old;
      row_of[c_old] = r;
    }
  }

  Assignment out;
  out.row_of_col.assign(row_of.begin(), row_of.begin() + static_cast<long>(cols));
  out.total_cost = detail::column_order_total(cost, out.row_of_col);
  return out;
}

inline constexpr std::size_t kBruteForceMaxRows = 8;

/// Exhaustive search over injective column->row maps; the first optimum in
/// lexicographic order wins.
inline Assignment brute_force_match(const CostMatrix& cost) {
  detail::check_assignable(cost);
  if (cost.rows() > kBruteForceMaxRows) {
    throw ContractError("brute_force_match limited to " + std::to_string(kBruteForceMaxRows) +
                        " rows");
  }
  const std::size_t cols = cost.cols();
  std::vector<std::size_t> cur(cols), best;
  std::vector<char> used(cost.rows(), 0);
  double best_total = std::numeric_limits<double>::infinity();
  std::function<void(std::size_t)> rec = [&](std::size_t c) {
    if (c == cols) {
      const double total = detail::column_order_total(cost, cur);
      if (total < best_total) {
        best_total = total;
        best = cur;
      }
      return;
    }
    for (std::size_t r = 0; r < cost.rows(); ++r) {
      if (used[r]) continue;
      used[r] = 1;
      cur[c] = r;
      rec(c + 1);
      used[r] = 0;
    }
  };
  rec(0);
  Assignment out;
  out.row_of_col = best;
  out.total_cost = cols == 0 ? 0.0 : best_total;
  return out;
}

// ---------------------------------------------------------------------------
// Query matching

struct MatchResult {
  std::size_t num_queries = 0;
  std::vector<std::size_t> sigma1;                 // gt -> query, total
  std::vector<std::optional<std::size_t>> sigma2;  // gt -> query, possibly partial
  std::vector<std::size_t> unmatched;              // ascending query indices

  std::size_t round1_size() const { return sigma1.size(); }
  std::size_t round2_size() const {
    return static_cast<std::size_t>(
        std::count_if(sigma2.begin(), sigma2.end(), [](const auto& q) { return q.has_value(); }));
  }
};

/// Throws ContractError naming the first violated invariant.
inline void check_match_invariants(const MatchResult& m, std::size_t num_gt, bool two_round) {
  const std::size_t n = m.num_queries;
  if (m.sigma1.size() != num_gt) throw ContractError("sigma1 is not total over ground truths");
  if (m.sigma2.size() != num_gt) throw ContractError("sigma2 has the wrong domain");
  const std::size_t expect2 = two_round ? std::min(num_gt, n - num_gt) : 0;
  if (m.round2_size() != expect2) throw ContractError("sigma2 has the wrong size");
  std::vector<int> owner(n, 0);
  auto claim = [&](std::size_t q) {
    if (q >= n) throw ContractError("match refers to a query out of range");
    if (owner[q]++) throw ContractError("query used twice across sigma1/sigma2/unmatched");
  };
  for (auto q : m.sigma1) claim(q);
  for (const auto& q : m.sigma2)
    if (q) claim(*q);
  for (auto q : m.unmatched) claim(q);
  for (std::size_t q = 0; q < n; ++q) {
    if (!owner[q]) throw ContractError("query " + std::to_string(q) + " left unassigned");
  }
}

namespace detail {

inline std::vector<std::size_t> unused_queries(std::size_t n, const MatchResult& m) {
  std::vector<char> used(n, 0);
  for (auto q : m.sigma1) used[q] = 1;
  for (const auto& q : m.sigma2)
    if (q) used[*q] = 1;
  std::vector<std::size_t> out;
  for (std::size_t q = 0; q < n; ++q)
    if (!used[q]) out.push_back(q);
  return out;
}

}  // namespace detail

/// Standard one-to-one matching on the combined score.
inline MatchResult one_round_match(const CostComponents& comp) {
  const std::size_t n = comp.num_queries();
  const std::size_t ngt = comp.num_gt();
  if (n < ngt) throw ContractError("fewer queries than ground truths");
  MatchResult m;
  m.num_queries = n;
  m.sigma1 = hungarian(comp.combined()).row_of_col;
  m.sigma2.assign(ngt, std::nullopt);
  m.unmatched = detail::unused_queries(n, m);
  return m;
}

/// Round two re-matches the leftover queries on the stored cross-entropy
/// costs only. When fewer queries than ground truths remain, every leftover
/// query gets its optimal ground truth and the rest of sigma2 stays empty.
inline MatchResult second_round(MatchResult m, const CostMatrix& ce) {
  const std::size_t ngt = m.sigma1.size();
  const std::vector<std::size_t> rest = detail::unused_queries(m.num_queries, m);
  if (ngt == 0 || rest.empty()) return m;
  const CostMatrix sub = ce.select_rows(rest);
  if (rest.size() >= ngt) {
    const Assignment a = hungarian(sub);
    for (std::size_t i = 0; i < ngt; ++i) m.sigma2[i] = rest[a.row_of_col[i]];
  } else {
    const Assignment a = hungarian(sub.transposed());
    for (std::size_t k = 0; k < rest.size(); ++k) m.sigma2[a.row_of_col[k]] = rest[k];
  }
  m.unmatched = detail::unused_queries(m.num_queries, m);
  return m;
}

inline MatchResult two_round_match(const CostComponents& comp) {
  return second_round(one_round_match(comp), comp.ce);
}

/// Dispatch on the configured number of rounds (1 or 2).
inline MatchResult match_queries(const CostComponents& comp, int rounds) {
  if (rounds == 1) return one_round_match(comp);
  if (rounds == 2) return two_round_match(comp);
  throw ContractError("matching rounds must be 1 or 2, got " + std::to_string(rounds));
}

}  // namespace themask
