#include "bllm/det_metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "bllm/error.hpp"

namespace bllm {
namespace {

using nlohmann::json;

double intersection(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return w > 0.0 && h > 0.0 ? w * h : 0.0;
}

// Shortest-augmenting-path assignment with potentials; requires rows <= cols.
// Returns the column of each row.
std::vector<std::size_t> solve_rows(const Matrix& a) {
  const std::size_t n = a.rows();
  const std::size_t m = a.cols();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
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
      for (std::size_t j = 0; j <= m; ++j) {
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
    } while (j0 != 0);
  }
  std::vector<std::size_t> col(n, 0);
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] != 0) col[p[j] - 1] = j - 1;
  }
  return col;
}

using Pairs = std::vector<std::pair<std::size_t, std::size_t>>;

// Optimal min(|rows|, |cols|) pairs on the sub-matrix, in original indices.
Pairs solve_sub(const Matrix& c, const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols) {
  Pairs out;
  if (rows.empty() || cols.empty()) return out;
  const bool transpose = rows.size() > cols.size();
  const auto& r = transpose ? cols : rows;
  const auto& k = transpose ? rows : cols;
  Matrix sub(r.size(), k.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    for (std::size_t j = 0; j < k.size(); ++j) sub(i, j) = transpose ? c(k[j], r[i]) : c(r[i], k[j]);
  }
  const auto col = solve_rows(sub);
  for (std::size_t i = 0; i < r.size(); ++i) {
    out.emplace_back(transpose ? k[col[i]] : r[i], transpose ? r[i] : k[col[i]]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

double pair_cost(const Matrix& c, const Pairs& pairs) {
  double s = 0.0;
  for (const auto& [r, k] : pairs) s += c(r, k);
  return s;
}

struct Matched {
  double score = 0.0;
  bool tp = false;
};

// TP/FP flags per class in descending score order (stable on ties).
std::map<int, std::vector<Matched>> greedy_match(std::span<const Detection> preds, std::span<const Detection> gts,
                                                 double iou_thresh, double score_thresh,
                                                 std::map<int, std::size_t>& gt_count) {
  std::map<std::pair<std::string, int>, std::vector<std::size_t>> gt_index;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    gt_index[{gts[i].image_id, gts[i].box.cls}].push_back(i);
    gt_count[gts[i].box.cls] += 1;
  }
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].box.score.value_or(0.0) >= score_thresh) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return preds[a].box.score.value_or(0.0) > preds[b].box.score.value_or(0.0);
  });
  std::vector<char> taken(gts.size(), 0);
  std::map<int, std::vector<Matched>> out;
  for (std::size_t idx : order) {
    const Detection& d = preds[idx];
    double best = -1.0;
    std::size_t best_gt = 0;
    if (auto it = gt_index.find({d.image_id, d.box.cls}); it != gt_index.end()) {
      for (std::size_t g : it->second) {
        if (taken[g]) continue;
        const double v = iou(d.box, gts[g].box);
        if (v > best) {
          best = v;
          best_gt = g;
        }
      }
    }
    const bool tp = best >= iou_thresh;
    if (tp) taken[best_gt] = 1;
    out[d.box.cls].push_back({d.box.score.value_or(0.0), tp});
  }
  return out;
}

void finish(PrfCounts& c) {
  c.precision = c.tp + c.fp == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  c.recall = c.tp + c.fn == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  c.f1 = f1_score(c.precision, c.recall);
}

double interpolated_ap(const std::vector<Matched>& flags, std::size_t n_gt) {
  if (n_gt == 0) return 0.0;
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < flags.size(); ++k) {
    tp += flags[k].tp ? 1 : 0;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t k = 0; k < precision.size(); ++k) {
    ap += (recall[k] - prev_recall) * precision[k];
    prev_recall = recall[k];
  }
  return ap;
}

json counts_json(const PrfCounts& c) {
  return {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}};
}

}  // namespace

void Box::validate() const {
  if (!(x1 < x2) || !(y1 < y2)) throw ValidationError("bbox", "requires x1 < x2 and y1 < y2");
  if (score && !(*score >= 0.0 && *score <= 1.0)) throw ValidationError("score", "must lie in [0, 1]");
}

double iou(const Box& a, const Box& b) {
  const double inter = intersection(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double giou(const Box& a, const Box& b) {
  const double inter = intersection(a, b);
  const double uni = a.area() + b.area() - inter;
  const double enclosing = (std::max(a.x2, b.x2) - std::min(a.x1, b.x1)) * (std::max(a.y2, b.y2) - std::min(a.y1, b.y1));
  return inter / uni - (enclosing - uni) / enclosing;
}

void CostWeights::validate() const {
  if (cls < 0.0 || l1 < 0.0 || giou < 0.0) throw ValidationError("cost_weights", "weights must be nonnegative");
  if (cls == 0.0 && l1 == 0.0 && giou == 0.0) throw ValidationError("cost_weights", "weights must not all be zero");
}

double focal_term(double p, const FocalParams& f) {
  const double q = std::clamp(p, 1e-12, 1.0);
  return -f.alpha * std::pow(1.0 - q, f.gamma) * std::log(q);
}

Box normalize_box(const Box& b, double width, double height) {
  Box out = b;
  out.x1 /= width;
  out.x2 /= width;
  out.y1 /= height;
  out.y2 /= height;
  return out;
}

double match_cost(const Box& pred, std::span<const double> class_probs, const Box& gt, const CostWeights& w,
                  const FocalParams& f) {
  if (gt.cls < 0 || static_cast<std::size_t>(gt.cls) >= class_probs.size()) {
    throw IndexError("match_cost: class " + std::to_string(gt.cls) + " outside the probability vector");
  }
  const double l1 = std::abs(pred.x1 - gt.x1) + std::abs(pred.y1 - gt.y1) + std::abs(pred.x2 - gt.x2) +
                    std::abs(pred.y2 - gt.y2);
  return w.cls * focal_term(class_probs[static_cast<std::size_t>(gt.cls)], f) + w.l1 * l1 +
         w.giou * (1.0 - giou(pred, gt));
}

Assignment hungarian(const Matrix& costs) {
  Assignment out;
  const std::size_t n = costs.rows();
  const std::size_t m = costs.cols();
  if (n == 0 || m == 0) return out;
  if (!costs.all_finite()) throw NumericError("hungarian: costs must be finite");

  std::vector<std::size_t> all_rows(n), all_cols(m);
  std::iota(all_rows.begin(), all_rows.end(), 0);
  std::iota(all_cols.begin(), all_cols.end(), 0);
  Pairs current = solve_sub(costs, all_rows, all_cols);
  const double optimum = pair_cost(costs, current);
  double max_abs = 0.0;
  for (double v : costs.data()) max_abs = std::max(max_abs, std::abs(v));
  const double tol = 1e-12 * max_abs * static_cast<double>(current.size());

  // Lexicographic refinement: the earliest pair that still admits an optimal
  // completion is fixed first.
  const std::size_t k = current.size();
  Pairs fixed;
  std::vector<char> col_used(m, 0);
  std::size_t next_row = 0;
  for (std::size_t s = 0; s < k; ++s) {
    const auto target = current[s];
    const std::size_t needed = k - s - 1;
    bool replaced = false;
    for (std::size_t r = next_row; r <= target.first && !replaced; ++r) {
      for (std::size_t c = 0; c < m && !replaced; ++c) {
        if (col_used[c]) continue;
        if (std::pair(r, c) >= target) break;
        std::vector<std::size_t> rows, cols;
        for (std::size_t i = r + 1; i < n; ++i) rows.push_back(i);
        for (std::size_t j = 0; j < m; ++j) {
          if (!col_used[j] && j != c) cols.push_back(j);
        }
        if (std::min(rows.size(), cols.size()) != needed) continue;
        Pairs rest = solve_sub(costs, rows, cols);
        const double total = pair_cost(costs, fixed) + costs(r, c) + pair_cost(costs, rest);
        if (total <= optimum + tol) {
          Pairs next = fixed;
          next.emplace_back(r, c);
          next.insert(next.end(), rest.begin(), rest.end());
          current = std::move(next);
          replaced = true;
        }
      }
    }
    fixed.push_back(current[s]);
    col_used[current[s].second] = 1;
    next_row = current[s].first + 1;
  }
  out.pairs = std::move(fixed);
  out.total = pair_cost(costs, out.pairs);
  return out;
}

double f1_score(double precision, double recall) {
  return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

DetReport pr_f1(std::span<const Detection> preds, std::span<const Detection> gts, double iou_thresh,
                double score_thresh) {
  std::map<int, std::size_t> gt_count;
  const auto flags = greedy_match(preds, gts, iou_thresh, score_thresh, gt_count);
  DetReport report;
  for (const auto& [cls, n] : gt_count) report.per_class[cls].fn = n;
  for (const auto& [cls, list] : flags) {
    PrfCounts& c = report.per_class[cls];
    for (const auto& f : list) {
      if (f.tp) {
        c.tp += 1;
        c.fn -= 1;
      } else {
        c.fp += 1;
      }
    }
  }
  for (auto& [cls, c] : report.per_class) {
    finish(c);
    report.overall.tp += c.tp;
    report.overall.fp += c.fp;
    report.overall.fn += c.fn;
  }
  finish(report.overall);
  return report;
}

double map50(std::span<const Detection> preds, std::span<const Detection> gts) {
  std::map<int, std::size_t> gt_count;
  const auto flags = greedy_match(preds, gts, 0.5, 0.0, gt_count);
  if (gt_count.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& [cls, n] : gt_count) {
    auto it = flags.find(cls);
    sum += it == flags.end() ? 0.0 : interpolated_ap(it->second, n);
  }
  return 100.0 * sum / static_cast<double>(gt_count.size());
}

DetReport evaluate_detections(std::span<const Detection> preds, std::span<const Detection> gts,
                              double score_thresh) {
  DetReport report = pr_f1(preds, gts, 0.5, score_thresh);
  std::map<int, std::size_t> gt_count;
  const auto flags = greedy_match(preds, gts, 0.5, 0.0, gt_count);
  double sum = 0.0;
  for (const auto& [cls, n] : gt_count) {
    auto it = flags.find(cls);
    const double ap = it == flags.end() ? 0.0 : interpolated_ap(it->second, n);
    report.average_precision[cls] = ap;
    sum += ap;
  }
  report.map50 = gt_count.empty() ? 0.0 : 100.0 * sum / static_cast<double>(gt_count.size());
  return report;
}

std::vector<Detection> detections_from_jsonl(std::string_view text, bool predictions) {
  std::vector<Detection> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("detections: ") + e.what(), line_no, 1);
    }
    Detection d;
    try {
      const json& id = j.at("image_id");
      d.image_id = id.is_string() ? id.get<std::string>() : id.dump();
      d.box.cls = j.at("class").get<int>();
      const auto bbox = j.at("bbox").get<std::vector<double>>();
      if (bbox.size() != 4) throw ValidationError("bbox", "expected [x1, y1, x2, y2] on line " + std::to_string(line_no));
      d.box.x1 = bbox[0];
      d.box.y1 = bbox[1];
      d.box.x2 = bbox[2];
      d.box.y2 = bbox[3];
      if (predictions) {
        d.box.score = j.at("score").get<double>();
      } else if (j.contains("score")) {
        throw ValidationError("score", "ground truth must not carry a score (line " + std::to_string(line_no) + ")");
      }
    } catch (const json::exception& e) {
      throw ValidationError("detection", std::string(e.what()) + " (line " + std::to_string(line_no) + ")");
    }
    d.box.validate();
    out.push_back(std::move(d));
  }
  return out;
}

std::string detections_to_jsonl(std::span<const Detection> dets) {
  std::string out;
  for (const auto& d : dets) {
    json j = {{"image_id", d.image_id}, {"class", d.box.cls}, {"bbox", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}}};
    if (d.box.score) j["score"] = *d.box.score;
    out += j.dump() + "\n";
  }
  return out;
}

std::string det_report_to_json(const DetReport& report) {
  json classes = json::object();
  for (const auto& [cls, c] : report.per_class) {
    json entry = counts_json(c);
    auto it = report.average_precision.find(cls);
    entry["ap50"] = it == report.average_precision.end() ? json(nullptr) : json(it->second);
    classes[std::to_string(cls)] = entry;
  }
  json j = {{"overall", counts_json(report.overall)}, {"per_class", classes}, {"map50", report.map50}};
  return j.dump(2) + "\n";
}

}  // namespace bllm
