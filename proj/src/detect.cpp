#include "partmix/detect.hpp"

#include <algorithm>

#include "json.hpp"
#include "partmix/eval.hpp"
#include "partmix/kernels.hpp"

namespace partmix {

namespace {

bool fits(const FeatureGrid& g, int h, int w) { return g.rows() >= h && g.cols() >= w; }

bool star_fits(const StarModel& m, const FeatureGrid& g) {
  if (!fits(g, m.root.height, m.root.width)) return false;
  for (const auto& p : m.parts)
    if (!fits(g, p.filter.height, p.filter.width)) return false;
  return true;
}

Rect clip(Rect r, int width, int height) {
  if (width <= 0 || height <= 0) return r;
  const double x0 = std::clamp(r.x, 0.0, double(width)), y0 = std::clamp(r.y, 0.0, double(height));
  const double x1 = std::clamp(r.x + r.w, 0.0, double(width));
  const double y1 = std::clamp(r.y + r.h, 0.0, double(height));
  return {x0, y0, x1 - x0, y1 - y0};
}

}  // namespace

Rect cell_window_to_pixels(const FeatureGrid& grid, Cell origin, int h, int w, int image_width,
                           int image_height) {
  const double f = grid.cell_size() / grid.scale();
  return clip({(origin.x + 1) * f, (origin.y + 1) * f, w * f, h * f}, image_width, image_height);
}

FeaturePyramid single_level(FeatureGrid grid) {
  FeaturePyramid p;
  p.levels.push_back(std::move(grid));
  return p;
}

std::vector<Detection> detect(const StarModel& model, const FeaturePyramid& pyramid, double threshold) {
  std::vector<Detection> out;
  for (std::size_t lv = 0; lv < pyramid.levels.size(); ++lv) {
    const FeatureGrid& g = pyramid.levels[lv];
    if (!star_fits(model, g)) continue;
    const PartScoreMap map = score_model(model, g);
    for (int y = 0; y < map.rows; ++y)
      for (int x = 0; x < map.cols; ++x) {
        const double raw = map.at(y, x);
        if (raw == kNegInf) continue;
        const double s = model.platt ? (*model.platt)(raw + model.bias) : raw + model.bias;
        if (!(s > threshold)) continue;
        Detection d;
        d.score = s;
        d.level = static_cast<int>(lv);
        d.root = {x, y};
        d.bbox = cell_window_to_pixels(g, d.root, model.root.height, model.root.width,
                                       pyramid.image_width, pyramid.image_height);
        const int m = map.exemplar_at(y, x);
        d.component = model.variant == ModelVariant::dpm ? 0 : std::max(m, 0);
        d.placement = map.placement_at(y, x);
        const Placement& z = *d.placement;
        if (model.variant != ModelVariant::epm) {
          const AnchorSet anchors =
              model.variant == ModelVariant::dpm ? model.dpm_anchors() : model.exemplars[m];
          std::vector<Cell> def;
          for (std::size_t j = 1; j < z.size(); ++j) def.push_back(z[j] - z[0] - anchors[j - 1]);
          d.deformations = std::move(def);
        }
        for (std::size_t j = 1; j < z.size(); ++j) {
          const Filter& f = model.parts[j - 1].filter;
          d.part_boxes.push_back(cell_window_to_pixels(g, z[j], f.height, f.width,
                                                       pyramid.image_width, pyramid.image_height));
        }
        out.push_back(std::move(d));
      }
  }
  return out;
}

std::vector<Detection> detect(const MixtureModel& model, const FeaturePyramid& pyramid,
                              double threshold) {
  std::vector<Detection> out;
  for (std::size_t lv = 0; lv < pyramid.levels.size(); ++lv) {
    const FeatureGrid& g = pyramid.levels[lv];
    const std::size_t first = out.size();
    for (std::size_t k = 0; k < model.templates.size(); ++k) {
      const Template& t = model.templates[k];
      if (!fits(g, t.filter.height, t.filter.width)) continue;
      const Map2D resp = kernels::correlate(g, t.filter);
      for (int y = 0; y < resp.rows; ++y)
        for (int x = 0; x < resp.cols; ++x) {
          const double s = t.calibrate(resp.at(y, x) + t.bias);
          if (!(s > threshold)) continue;
          Detection d;
          d.score = s;
          d.level = static_cast<int>(lv);
          d.root = {x, y};
          d.component = static_cast<int>(k);
          d.bbox = cell_window_to_pixels(g, d.root, t.filter.height, t.filter.width,
                                         pyramid.image_width, pyramid.image_height);
          out.push_back(std::move(d));
        }
    }
    std::stable_sort(out.begin() + static_cast<std::ptrdiff_t>(first), out.end(),
                     [](const Detection& a, const Detection& b) {
                       return std::tie(a.root.y, a.root.x, a.component) <
                              std::tie(b.root.y, b.root.x, b.component);
                     });
  }
  return out;
}

std::vector<Detection> nms(std::vector<Detection> dets, double overlap_thresh) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (auto& d : dets) {
    bool keep = true;
    for (const auto& k : kept)
      if (iou(d.bbox, k.bbox) > overlap_thresh) {
        keep = false;
        break;
      }
    if (keep) kept.push_back(std::move(d));
  }
  return kept;
}

std::string to_json_line(const Detection& d, const std::string& image_id, const std::string& model_ref) {
  nlohmann::json j;
  j["image_id"] = image_id;
  j["bbox"] = {d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h};
  j["score"] = d.score;
  j["model_ref"] = model_ref;
  j["exemplar"] = d.component;
  j["level"] = d.level;
  if (d.deformations) {
    auto& def = j["deformations"] = nlohmann::json::array();
    for (const Cell& c : *d.deformations) def.push_back({c.x, c.y});
  } else {
    j["deformations"] = nullptr;
  }
  return j.dump();
}

std::string to_json_lines(const std::vector<Detection>& dets, const std::string& image_id,
                          const std::string& model_ref) {
  std::string out;
  for (const auto& d : dets) out += to_json_line(d, image_id, model_ref) + "\n";
  return out;
}

}  // namespace partmix
