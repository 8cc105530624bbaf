#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bllm/matrix.hpp"

namespace bllm {

struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;
  int cls = 0;
  std::optional<double> score;  // predictions only

  double area() const { return (x2 - x1) * (y2 - y1); }
  void validate() const;
};

double iou(const Box& a, const Box& b);
double giou(const Box& a, const Box& b);

struct CostWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;

  void validate() const;
};

struct FocalParams {
  double gamma = 2.0;
  double alpha = 0.25;
};

// -alpha (1-p)^gamma ln p, with p clamped away from 0.
double focal_term(double p, const FocalParams& f = {});

// Box coordinates scaled by the image size into [0, 1].
Box normalize_box(const Box& b, double width, double height);

// pred and gt normalized to [0,1]; class_probs indexed by class id.
double match_cost(const Box& pred, std::span<const double> class_probs, const Box& gt,
                  const CostWeights& w = {}, const FocalParams& f = {});

struct Assignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (row, col), row-ascending
  double total = 0.0;
};

// Minimum-cost one-to-one assignment of min(n, m) pairs. Among optimal
// assignments the one choosing the lowest column for the lowest row (then the
// next row, ...) wins.
Assignment hungarian(const Matrix& costs);

struct PrfCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// 2PR/(P+R), or 0 when P+R = 0.
double f1_score(double precision, double recall);

struct Detection {
  std::string image_id;
  Box box;
};

struct DetReport {
  std::map<int, PrfCounts> per_class;
  PrfCounts overall;
  std::map<int, double> average_precision;  // fraction, classes with GT only
  double map50 = 0.0;                       // percent
};

// Greedy descending-score matching per image: a prediction is a TP iff its
// best unmatched same-class GT has IoU >= iou_thresh.
DetReport pr_f1(std::span<const Detection> preds, std::span<const Detection> gts, double iou_thresh = 0.5,
                double score_thresh = 0.0);
// All-point interpolated AP per class; percent mean over classes with GT.
double map50(std::span<const Detection> preds, std::span<const Detection> gts);
DetReport evaluate_detections(std::span<const Detection> preds, std::span<const Detection> gts,
                              double score_thresh = 0.0);

std::vector<Detection> detections_from_jsonl(std::string_view text, bool predictions);
std::string detections_to_jsonl(std::span<const Detection> dets);
std::string det_report_to_json(const DetReport& report);

}  // namespace bllm
