#include "partmix/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <unordered_map>

#include "partmix/error.hpp"

namespace partmix {

double iou(const Rect& a, const Rect& b) {
  if (!(a.w > 0 && a.h > 0 && b.w > 0 && b.h > 0)) throw DomainError("iou: box with zero area");
  const double iw = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
  const double ih = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

void sort_by_score(std::vector<ScoredBox>& dets) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const ScoredBox& a, const ScoredBox& b) { return a.score > b.score; });
}

std::vector<MatchLabel> match_detections(std::span<const ScoredBox> dets,
                                         std::span<const GroundTruth> gt, double iou_thresh) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < gt.size(); ++i) index.emplace(gt[i].image_id, i);
  std::vector<std::vector<char>> used(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) used[i].assign(gt[i].boxes.size(), 0);

  std::vector<MatchLabel> out;
  out.reserve(dets.size());
  for (const auto& d : dets) {
    const auto it = index.find(d.image_id);
    if (it == index.end()) {
      out.push_back(MatchLabel::fp);
      continue;
    }
    const auto& boxes = gt[it->second].boxes;
    int best = -1;
    double best_iou = iou_thresh;
    bool on_difficult = false;
    for (std::size_t j = 0; j < boxes.size(); ++j) {
      const double o = iou(d.bbox, boxes[j].box);
      if (boxes[j].difficult) {
        on_difficult = on_difficult || o >= iou_thresh;
        continue;
      }
      if (!used[it->second][j] && o >= best_iou && (best < 0 || o > best_iou)) {
        best = static_cast<int>(j);
        best_iou = o;
      }
    }
    if (best >= 0) {
      used[it->second][best] = 1;
      out.push_back(MatchLabel::tp);
    } else {
      out.push_back(on_difficult ? MatchLabel::ignored : MatchLabel::fp);
    }
  }
  return out;
}

int count_positives(std::span<const GroundTruth> gt) {
  int n = 0;
  for (const auto& g : gt)
    for (const auto& b : g.boxes) n += !b.difficult;
  return n;
}

std::vector<std::pair<double, double>> pr_curve(std::span<const MatchLabel> labels, int n_pos) {
  if (n_pos < 1) throw DomainError("pr_curve: no positives, precision/recall undefined");
  std::vector<std::pair<double, double>> pr;
  int tp = 0, seen = 0;
  for (auto l : labels) {
    if (l == MatchLabel::ignored) continue;
    ++seen;
    tp += l == MatchLabel::tp;
    pr.emplace_back(static_cast<double>(tp) / n_pos, static_cast<double>(tp) / seen);
  }
  return pr;
}

double average_precision(std::span<const MatchLabel> labels, int n_pos, bool eleven_point) {
  if (n_pos < 1) throw DomainError("average_precision: n_pos = 0, AP undefined");
  auto pr = pr_curve(labels, n_pos);
  // Monotone envelope from the right.
  for (std::size_t i = pr.size(); i-- > 1;) pr[i - 1].second = std::max(pr[i - 1].second, pr[i].second);
  if (eleven_point) {
    double ap = 0.0;
    for (int t = 0; t <= 10; ++t) {
      const double r = t / 10.0;
      double p = 0.0;
      for (const auto& [rec, prec] : pr)
        if (rec >= r - 1e-12) {
          p = prec;  // envelope: first point at or past r is the max
          break;
        }
      ap += p / 11.0;
    }
    return ap;
  }
  double ap = 0.0, prev_recall = 0.0;
  for (const auto& [rec, prec] : pr) {
    ap += (rec - prev_recall) * prec;
    prev_recall = rec;
  }
  return ap;
}

std::string pr_curve_csv(std::span<const MatchLabel> labels, int n_pos) {
  std::string out = "recall,precision\n";
  char buf[64];
  for (const auto& [r, p] : pr_curve(labels, n_pos)) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g\n", r, p);
    out += buf;
  }
  return out;
}

int zero_one_error(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size())
    throw SizeError("zero_one_error: " + std::to_string(predictions.size()) + " predictions vs " +
                    std::to_string(labels.size()) + " labels");
  int n = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) n += predictions[i] != labels[i];
  return n;
}

double evaluate_ap(std::vector<ScoredBox> dets, std::span<const GroundTruth> gt, double iou_thresh,
                   bool eleven_point) {
  sort_by_score(dets);
  const auto labels = match_detections(dets, gt, iou_thresh);
  return average_precision(labels, count_positives(gt), eleven_point);
}

}  // namespace partmix
