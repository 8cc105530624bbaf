#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <utility>
#include <vector>

#include "bllm/det_metrics.hpp"
#include "bllm/matrix.hpp"
#include "bllm/rng.hpp"

// Brute-force references for assignment and AP.
namespace det_oracles {

using Pairs = std::vector<std::pair<std::size_t, std::size_t>>;

struct Exhaustive {
  Pairs pairs;
  double total = 0.0;
};

// Every one-to-one assignment of min(n, m) pairs; the lexicographically
// smallest row-sorted pair list among the minimum-cost ones.
inline Exhaustive exhaustive_assignment(const bllm::Matrix& c) {
  const std::size_t n = c.rows(), m = c.cols(), k = std::min(n, m);
  std::vector<std::pair<Pairs, double>> all;
  Pairs cur;
  std::vector<char> used(m, 0);
  std::function<void(std::size_t, double)> rec = [&](std::size_t row, double acc) {
    if (cur.size() == k) {
      all.emplace_back(cur, acc);
      return;
    }
    if (row == n) return;
    for (std::size_t j = 0; j < m; ++j) {
      if (used[j]) continue;
      used[j] = 1;
      cur.emplace_back(row, j);
      rec(row + 1, acc + c(row, j));
      cur.pop_back();
      used[j] = 0;
    }
    if (n - row - 1 >= k - cur.size()) rec(row + 1, acc);
  };
  rec(0, 0.0);
  double best = all.front().second;
  double max_abs = 0.0;
  for (double v : c.data()) max_abs = std::max(max_abs, std::abs(v));
  for (const auto& a : all) best = std::min(best, a.second);
  const double tol = 1e-12 * max_abs * static_cast<double>(k);
  Exhaustive out{{}, 0.0};
  bool found = false;
  for (const auto& a : all) {
    if (a.second > best + tol) continue;
    if (!found || a.first < out.pairs) {
      out.pairs = a.first;
      found = true;
    }
  }
  for (const auto& [r, j] : out.pairs) out.total += c(r, j);
  return out;
}

inline bllm::Matrix random_costs(bllm::Rng& rng) {
  const std::size_t n = 1 + rng.below(6), m = 1 + rng.below(6);
  bllm::Matrix c(n, m);
  const bool integer = rng.below(3) == 0;
  for (double& v : c.data()) v = integer ? static_cast<double>(rng.below(4)) : rng.uniform(0.0, 10.0);
  return c;
}

// Greedy TP rule applied from scratch to the predictions at or above t.
inline std::pair<std::size_t, std::size_t> tp_fp_at(const std::vector<bllm::Detection>& preds,
                                                    const std::vector<bllm::Detection>& gts, int cls, double t) {
  std::vector<const bllm::Detection*> kept;
  for (const auto& p : preds)
    if (p.box.cls == cls && *p.box.score >= t) kept.push_back(&p);
  std::sort(kept.begin(), kept.end(), [](auto* a, auto* b) { return *a->box.score > *b->box.score; });
  std::vector<char> taken(gts.size(), 0);
  std::size_t tp = 0, fp = 0;
  for (const auto* p : kept) {
    double best = -1.0;
    std::size_t at = 0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].box.cls != cls || gts[g].image_id != p->image_id) continue;
      const double v = bllm::iou(p->box, gts[g].box);
      if (v > best) {
        best = v;
        at = g;
      }
    }
    if (best >= 0.5) {
      taken[at] = 1;
      ++tp;
    } else {
      ++fp;
    }
  }
  return {tp, fp};
}

// Sweeps every prediction score as a threshold, then integrates the precision
// envelope over recall. Percent mean over classes with ground truth.
inline double exhaustive_map50(const std::vector<bllm::Detection>& preds, const std::vector<bllm::Detection>& gts) {
  std::map<int, std::size_t> n_gt;
  for (const auto& g : gts) n_gt[g.box.cls] += 1;
  double sum = 0.0;
  for (const auto& [cls, n] : n_gt) {
    std::vector<std::pair<double, double>> pr;  // (recall, precision)
    for (const auto& p : preds) {
      if (p.box.cls != cls) continue;
      const auto [tp, fp] = tp_fp_at(preds, gts, cls, *p.box.score);
      pr.emplace_back(static_cast<double>(tp) / static_cast<double>(n),
                      static_cast<double>(tp) / static_cast<double>(tp + fp));
    }
    std::set<double> recalls;
    for (const auto& [r, p] : pr) recalls.insert(r);
    double ap = 0.0, prev = 0.0;
    for (double r : recalls) {
      double env = 0.0;
      for (const auto& [r2, p2] : pr)
        if (r2 >= r) env = std::max(env, p2);
      ap += (r - prev) * env;
      prev = r;
    }
    sum += ap;
  }
  return 100.0 * sum / static_cast<double>(n_gt.size());
}

struct DetInstance {
  std::vector<bllm::Detection> preds;
  std::vector<bllm::Detection> gts;
};

inline bllm::Box random_box(bllm::Rng& rng, int cls) {
  const double x = rng.uniform(0.0, 8.0), y = rng.uniform(0.0, 8.0);
  return bllm::Box{x, y, x + rng.uniform(1.0, 4.0), y + rng.uniform(1.0, 4.0), cls, std::nullopt};
}

// Up to 5 scored predictions and 1..3 ground-truth boxes over two images and
// two classes; predictions are either jittered copies of a GT or random.
inline DetInstance random_instance(bllm::Rng& rng) {
  DetInstance d;
  const std::size_t n_gt = 1 + rng.below(3), n_pred = rng.below(6);
  for (std::size_t i = 0; i < n_gt; ++i) {
    d.gts.push_back({rng.below(2) == 0 ? "a" : "b", random_box(rng, static_cast<int>(rng.below(2)))});
  }
  for (std::size_t i = 0; i < n_pred; ++i) {
    bllm::Detection p;
    if (rng.below(3) != 0) {
      p = d.gts[rng.below(d.gts.size())];
      const double jx = rng.uniform(-0.8, 0.8), jy = rng.uniform(-0.8, 0.8);
      p.box.x1 += jx;
      p.box.x2 += jx;
      p.box.y1 += jy;
      p.box.y2 += jy;
      if (rng.below(5) == 0) p.box.cls = 1 - p.box.cls;
    } else {
      p = {rng.below(2) == 0 ? "a" : "b", random_box(rng, static_cast<int>(rng.below(2)))};
    }
    p.box.score = rng.uniform(0.01, 1.0);
    d.preds.push_back(p);
  }
  return d;
}

}  // namespace det_oracles
