#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "canopy/assignment.hpp"
#include "canopy/raster.hpp"

namespace canopy {

inline constexpr double kDefaultMatchDistance = 6.0;  // meters

struct Match {
  std::size_t pred;
  std::size_t gt;
  double distance;
};

struct MatchResult {
  std::vector<Match> matches;
  std::vector<std::size_t> unmatched_pred;  // false positives
  std::vector<std::size_t> unmatched_gt;    // false negatives
  double max_dist = kDefaultMatchDistance;

  std::size_t tp() const { return matches.size(); }
  std::size_t fp() const { return unmatched_pred.size(); }
  std::size_t fn() const { return unmatched_gt.size(); }
  double total_distance() const {
    double s = 0.0;
    for (const auto& m : matches) s += m.distance;
    return s;
  }
};

enum class MatchPolicy {
  // Largest number of pairs within the gate, then least total distance.
  MaxCardinality,
  // Unconstrained minimum-weight matching, then drop pairs beyond the gate.
  PostFilter,
};

// Optimal one-to-one matching of predictions to ground truth. Both sets
// must be in the same metric frame; `scale` converts their coordinates to
// meters (pixel size for pixel-frame points, 1 for geographic).
inline MatchResult match_points(const std::vector<Point>& pred, const std::vector<Point>& gt,
                                double max_dist = kDefaultMatchDistance, double scale = 1.0,
                                MatchPolicy policy = MatchPolicy::MaxCardinality) {
  MatchResult r;
  r.max_dist = max_dist;
  const std::size_t np = pred.size(), ng = gt.size();
  if (np == 0 || ng == 0) {
    for (std::size_t i = 0; i < np; ++i) r.unmatched_pred.push_back(i);
    for (std::size_t j = 0; j < ng; ++j) r.unmatched_gt.push_back(j);
    return r;
  }
  // Rows are the smaller side.
  const bool pred_rows = np <= ng;
  const std::size_t rows = pred_rows ? np : ng, cols = pred_rows ? ng : np;
  std::vector<std::vector<double>> dist(rows, std::vector<double>(cols));
  std::vector<std::vector<char>> valid(rows, std::vector<char>(cols));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      const Point& a = pred_rows ? pred[i] : pred[j];
      const Point& b = pred_rows ? gt[j] : gt[i];
      const double d = std::hypot(a.x - b.x, a.y - b.y) * scale;
      dist[i][j] = d;
      valid[i][j] = d <= max_dist;
    }

  std::vector<std::vector<double>> cost = dist;
  if (policy == MatchPolicy::MaxCardinality) {
    // A forbidden pair costs more than any complete set of allowed pairs,
    // so the optimum first maximizes allowed pairs, then minimizes distance.
    const double forbidden = (static_cast<double>(rows) + 1.0) * (max_dist + 1.0);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j)
        if (!valid[i][j]) cost[i][j] = forbidden;
  }
  const auto assign = solve_assignment(cost);

  std::vector<char> pred_used(np, 0), gt_used(ng, 0);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto j = static_cast<std::size_t>(assign[i]);
    if (!valid[i][j]) continue;
    const std::size_t pi = pred_rows ? i : j, gi = pred_rows ? j : i;
    r.matches.push_back({pi, gi, dist[i][j]});
    pred_used[pi] = gt_used[gi] = 1;
  }
  std::sort(r.matches.begin(), r.matches.end(), [](const Match& a, const Match& b) { return a.pred < b.pred; });
  for (std::size_t i = 0; i < np; ++i)
    if (!pred_used[i]) r.unmatched_pred.push_back(i);
  for (std::size_t j = 0; j < ng; ++j)
    if (!gt_used[j]) r.unmatched_gt.push_back(j);
  return r;
}

inline MatchResult match_points(const PointSet& pred, const PointSet& gt, double max_dist = kDefaultMatchDistance,
                                double scale = 1.0, MatchPolicy policy = MatchPolicy::MaxCardinality) {
  return match_points(pred.points, gt.points, max_dist, scale, policy);
}

struct Counts {
  std::size_t tp = 0, fp = 0, fn = 0;
  Counts& operator+=(const Counts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
};

inline Counts counts_of(const MatchResult& m) { return {m.tp(), m.fp(), m.fn()}; }

struct PRF {
  double precision = 0.0, recall = 0.0, f_score = 0.0;
};

// Ratios default to 0 when their denominator is 0.
inline PRF compute_prf(const Counts& c) {
  PRF r;
  const double tp = static_cast<double>(c.tp);
  if (c.tp + c.fp > 0) r.precision = tp / static_cast<double>(c.tp + c.fp);
  if (c.tp + c.fn > 0) r.recall = tp / static_cast<double>(c.tp + c.fn);
  if (r.precision + r.recall > 0.0) r.f_score = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

inline PRF compute_prf(const MatchResult& m) { return compute_prf(counts_of(m)); }

// Root mean squared matched distance; NaN when there are no matches.
inline double compute_rmse(const MatchResult& m) {
  if (m.matches.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (const auto& x : m.matches) s += x.distance * x.distance;
  return std::sqrt(s / static_cast<double>(m.matches.size()));
}

struct PrPoint {
  double threshold, precision, recall;
};

// Precision/recall at every distinct confidence (descending), pooled over
// images. At each threshold the predictions at or above it are matched
// afresh per image and the counts summed.
inline std::vector<PrPoint> pr_curve(const std::vector<PointSet>& preds, const std::vector<PointSet>& gts,
                                     double max_dist, double scale = 1.0) {
  if (preds.size() != gts.size()) throw InvalidArgument("prediction and ground-truth image counts differ");
  std::vector<double> levels;
  for (const auto& p : preds) {
    if (p.confidence.size() != p.size()) {
      throw InvalidArgument("average precision needs a confidence for every prediction");
    }
    levels.insert(levels.end(), p.confidence.begin(), p.confidence.end());
  }
  std::sort(levels.begin(), levels.end(), std::greater<>());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  std::vector<PrPoint> curve;
  for (double t : levels) {
    Counts c;
    for (std::size_t k = 0; k < preds.size(); ++k) {
      std::vector<Point> kept;
      for (std::size_t i = 0; i < preds[k].size(); ++i)
        if (preds[k].confidence[i] >= t) kept.push_back(preds[k].points[i]);
      c += counts_of(match_points(kept, gts[k].points, max_dist, scale));
    }
    const auto prf = compute_prf(c);
    curve.push_back({t, prf.precision, prf.recall});
  }
  return curve;
}

// AP = sum_n (R_n - R_{n-1}) P_n with R_0 = 0. Defined as 0 when there is
// no ground truth.
inline double compute_ap(const std::vector<PointSet>& preds, const std::vector<PointSet>& gts,
                         double max_dist = kDefaultMatchDistance, double scale = 1.0) {
  std::size_t n_gt = 0;
  for (const auto& g : gts) n_gt += g.size();
  if (n_gt == 0) return 0.0;
  double ap = 0.0, prev_recall = 0.0;
  for (const auto& pt : pr_curve(preds, gts, max_dist, scale)) {
    ap += (pt.recall - prev_recall) * pt.precision;
    prev_recall = pt.recall;
  }
  return ap;
}

inline double compute_ap(const PointSet& pred, const PointSet& gt, double max_dist = kDefaultMatchDistance,
                         double scale = 1.0) {
  return compute_ap(std::vector<PointSet>{pred}, std::vector<PointSet>{gt}, max_dist, scale);
}

struct MetricsReport {
  Counts counts;
  PRF prf;
  double rmse_m = std::numeric_limits<double>::quiet_NaN();
  double ap = 0.0;
};

// Pooled metrics over images: counts summed, RMSE over all matches, AP
// from the pooled sweep (0 when predictions carry no confidence).
inline MetricsReport evaluate_pooled(const std::vector<PointSet>& preds, const std::vector<PointSet>& gts,
                                     double max_dist = kDefaultMatchDistance, double scale = 1.0) {
  if (preds.size() != gts.size()) throw InvalidArgument("prediction and ground-truth image counts differ");
  MetricsReport rep;
  MatchResult all;
  bool have_conf = true;
  for (std::size_t k = 0; k < preds.size(); ++k) {
    const auto m = match_points(preds[k], gts[k], max_dist, scale);
    rep.counts += counts_of(m);
    all.matches.insert(all.matches.end(), m.matches.begin(), m.matches.end());
    if (preds[k].size() > 0 && !preds[k].has_confidence()) have_conf = false;
  }
  rep.prf = compute_prf(rep.counts);
  rep.rmse_m = compute_rmse(all);
  rep.ap = have_conf ? compute_ap(preds, gts, max_dist, scale) : 0.0;
  return rep;
}

}  // namespace canopy

