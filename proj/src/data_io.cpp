#include "partmix/data_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "partmix/error.hpp"

namespace partmix {

using nlohmann::json;

namespace {

double digits9(double v) {
  if (!std::isfinite(v)) return v;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::strtod(buf, nullptr);
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int k = 0; k < 4; ++k) v |= std::uint32_t(static_cast<unsigned char>(in[at + k])) << (8 * k);
  return v;
}

// --- model JSON -----------------------------------------------------------

json filter_json(const Filter& f) {
  json w = json::array();
  for (double v : f.weights) w.push_back(digits9(v));
  return {{"rows", f.height}, {"cols", f.width}, {"dim", f.dim}, {"weights", std::move(w)}};
}

Filter filter_from(const json& j) {
  Filter f(j.at("rows").get<int>(), j.at("cols").get<int>(), j.at("dim").get<int>());
  const auto& w = j.at("weights");
  if (w.size() != f.size())
    throw ParseError("model: filter has " + std::to_string(w.size()) + " weights, expected " +
                     std::to_string(f.size()));
  for (std::size_t k = 0; k < f.size(); ++k) f.weights[k] = w[k].get<double>();
  return f;
}

json platt_json(const std::optional<PlattParams>& p) {
  if (!p) return nullptr;
  return {{"a", digits9(p->a)}, {"b", digits9(p->b)}};
}

std::optional<PlattParams> platt_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return PlattParams{j.at("a").get<double>(), j.at("b").get<double>()};
}

json cell_json(Cell c) { return json::array({c.x, c.y}); }
Cell cell_from(const json& j) { return {j.at(0).get<int>(), j.at(1).get<int>()}; }

const char* kModelTypes = "mixture, dpm, epm, edpm";

}  // namespace

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint32_t crc32_of(const std::string& bytes) {
  uLong c = crc32(0L, Z_NULL, 0);
  c = crc32(c, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(c);
}

Image read_image(const fs::path& path) {
  const std::string data = read_file(path);
  std::size_t pos = 0;
  auto fail = [&](const std::string& why) { return ParseError(path.string() + ": " + why); };
  // Header tokens, skipping whitespace and comments.
  auto token = [&]() {
    while (pos < data.size()) {
      if (data[pos] == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(data[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < data.size() && !std::isspace(static_cast<unsigned char>(data[pos]))) ++pos;
    if (start == pos) throw fail("truncated header");
    return data.substr(start, pos - start);
  };
  auto number = [&]() {
    const std::string t = token();
    try {
      return std::stoi(t);
    } catch (const std::exception&) {
      throw fail("bad header field '" + t + "'");
    }
  };
  const std::string magic = token();
  if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6")
    throw fail("unsupported format " + magic + " (expected P2, P3, P5 or P6)");
  const int w = number(), h = number(), maxval = number();
  if (w < 1 || h < 1) throw fail("non-positive size");
  if (maxval < 1 || maxval > 255) throw fail("only 8-bit images are supported");
  const bool color = magic == "P3" || magic == "P6";
  const bool binary = magic == "P5" || magic == "P6";
  const std::size_t n = std::size_t(w) * h * (color ? 3 : 1);
  std::vector<float> raw(n);
  if (binary) {
    ++pos;  // single whitespace byte after maxval
    if (data.size() < pos + n) throw fail("truncated pixel data");
    for (std::size_t k = 0; k < n; ++k) raw[k] = static_cast<unsigned char>(data[pos + k]);
  } else {
    for (std::size_t k = 0; k < n; ++k) raw[k] = static_cast<float>(number());
  }
  const float scale = 255.0f / maxval;
  Image img(w, h);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = color ? scale * (0.299f * raw[3 * i] + 0.587f * raw[3 * i + 1] + 0.114f * raw[3 * i + 2])
                          : scale * raw[i];
  return img;
}

void write_pgm(const fs::path& path, const Image& image) {
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  for (float v : image.pixels)
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 255.0f)))));
  write_file_atomic(path, out);
}

std::string encode_feature_grid(const FeatureGrid& grid) {
  std::string out;
  put_u32(out, grid.rows());
  put_u32(out, grid.cols());
  put_u32(out, grid.dim());
  put_u32(out, grid.cell_size());
  for (float v : grid.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

FeatureGrid decode_feature_grid(const std::string& bytes) {
  if (bytes.size() < 16) throw ParseError("feature grid: truncated header");
  const std::uint32_t rows = get_u32(bytes, 0), cols = get_u32(bytes, 4), dim = get_u32(bytes, 8);
  const std::uint32_t cs = get_u32(bytes, 12);
  const std::size_t n = std::size_t(rows) * cols * dim;
  if (bytes.size() != 16 + 4 * n)
    throw ParseError("feature grid: expected " + std::to_string(16 + 4 * n) + " bytes, got " +
                     std::to_string(bytes.size()));
  FeatureGrid g(static_cast<int>(rows), static_cast<int>(cols), static_cast<int>(dim), static_cast<int>(cs));
  auto values = g.values();
  for (std::size_t k = 0; k < n; ++k) values[k] = std::bit_cast<float>(get_u32(bytes, 16 + 4 * k));
  return g;
}

void write_feature_grid(const fs::path& path, const FeatureGrid& grid) {
  write_file_atomic(path, encode_feature_grid(grid));
}

FeatureGrid read_feature_grid(const fs::path& path) {
  try {
    return decode_feature_grid(read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::string model_to_json(const AnyModel& model, const ModelMetadata& meta) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["metadata"] = {{"K", meta.K}, {"N", meta.N}, {"C", digits9(meta.C)}, {"seed", meta.seed}};
  if (const auto* mix = std::get_if<MixtureModel>(&model)) {
    j["type"] = "mixture";
    j["D"] = mix->templates.empty() ? 0 : mix->templates.front().filter.dim;
    json ts = json::array();
    for (const auto& t : mix->templates)
      ts.push_back({{"filter", filter_json(t.filter)},
                    {"bias", digits9(t.bias)},
                    {"platt", platt_json(t.platt)},
                    {"mixture_id", t.mixture_id}});
    j["templates"] = std::move(ts);
  } else {
    const auto& star = std::get<StarModel>(model);
    j["type"] = to_string(star.variant);
    j["D"] = star.root.dim;
    j["root"] = filter_json(star.root);
    json filters = json::array(), anchors = json::array(), betas = json::array();
    for (const auto& p : star.parts) {
      filters.push_back(filter_json(p.filter));
      anchors.push_back(cell_json(p.anchor));
      betas.push_back({digits9(p.spring.bx), digits9(p.spring.by)});
    }
    j["parts"] = {{"filters", std::move(filters)}, {"anchors", std::move(anchors)}, {"betas", std::move(betas)}};
    json ex = json::array();
    for (const auto& set : star.exemplars) {
      json s = json::array();
      for (Cell c : set) s.push_back(cell_json(c));
      ex.push_back(std::move(s));
    }
    j["exemplars"] = std::move(ex);
    j["bias"] = digits9(star.bias);
    j["platt"] = platt_json(star.platt);
  }
  return j.dump(1) + "\n";
}

SavedModel model_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("model: ") + e.what());
  }
  try {
    const int version = j.at("schema_version").get<int>();
    if (version != kSchemaVersion)
      throw ParseError("model: schema_version " + std::to_string(version) + " not supported (this build reads " +
                       std::to_string(kSchemaVersion) + ")");
    SavedModel out;
    const auto& m = j.at("metadata");
    out.metadata = {m.at("K").get<int>(), m.at("N").get<int>(), m.at("C").get<double>(),
                    m.at("seed").get<std::uint64_t>()};
    const std::string type = j.at("type").get<std::string>();
    if (type == "mixture") {
      MixtureModel mix;
      for (const auto& t : j.at("templates"))
        mix.templates.push_back({filter_from(t.at("filter")), t.at("bias").get<double>(),
                                 platt_from(t.at("platt")), t.at("mixture_id").get<int>()});
      out.model = std::move(mix);
      return out;
    }
    StarModel star;
    if (type == "dpm") star.variant = ModelVariant::dpm;
    else if (type == "epm") star.variant = ModelVariant::epm;
    else if (type == "edpm") star.variant = ModelVariant::edpm;
    else throw ParseError("model: unknown type '" + type + "' (supported: " + kModelTypes + ")");
    star.root = filter_from(j.at("root"));
    const auto& parts = j.at("parts");
    const auto& filters = parts.at("filters");
    const auto& anchors = parts.at("anchors");
    const auto& betas = parts.at("betas");
    if (anchors.size() != filters.size() || betas.size() != filters.size())
      throw ParseError("model: parts arrays differ in length");
    for (std::size_t k = 0; k < filters.size(); ++k)
      star.parts.push_back({filter_from(filters[k]), cell_from(anchors[k]),
                            Spring{betas[k].at(0).get<double>(), betas[k].at(1).get<double>()}});
    for (const auto& s : j.at("exemplars")) {
      AnchorSet set;
      for (const auto& c : s) set.push_back(cell_from(c));
      star.exemplars.push_back(std::move(set));
    }
    star.bias = j.at("bias").get<double>();
    star.platt = platt_from(j.at("platt"));
    out.model = std::move(star);
    return out;
  } catch (const json::exception& e) {
    throw ParseError(std::string("model: ") + e.what());
  }
}

void save_model(const fs::path& path, const AnyModel& model, const ModelMetadata& meta) {
  write_file_atomic(path, model_to_json(model, meta));
}

SavedModel load_model(const fs::path& path) {
  try {
    return model_from_json(read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::string ground_truth_to_json(const std::vector<GroundTruth>& gt) {
  json arr = json::array();
  for (const auto& g : gt) {
    json boxes = json::array();
    for (const auto& b : g.boxes)
      boxes.push_back({{"bbox", {b.box.x, b.box.y, b.box.w, b.box.h}}, {"difficult", b.difficult}});
    arr.push_back({{"image_id", g.image_id}, {"boxes", std::move(boxes)}});
  }
  return arr.dump(1) + "\n";
}

std::vector<GroundTruth> ground_truth_from_json(const std::string& text) {
  try {
    std::vector<GroundTruth> out;
    for (const auto& g : json::parse(text)) {
      GroundTruth t{g.at("image_id").get<std::string>(), {}};
      for (const auto& b : g.at("boxes")) {
        const auto& r = b.at("bbox");
        t.boxes.push_back({{r.at(0).get<double>(), r.at(1).get<double>(), r.at(2).get<double>(),
                            r.at(3).get<double>()},
                           b.value("difficult", false)});
      }
      out.push_back(std::move(t));
    }
    return out;
  } catch (const json::exception& e) {
    throw ParseError(std::string("annotations: ") + e.what());
  }
}

std::string objects_to_json(const SynthDataset& ds) {
  json arr = json::array();
  for (const auto& o : ds.objects) {
    json z = json::array();
    for (Cell c : o.placement) z.push_back(cell_json(c));
    arr.push_back({{"image_id", ds.ids[o.image]},
                   {"placement", std::move(z)},
                   {"subcategory", o.subcategory},
                   {"shape", o.shape}});
  }
  return arr.dump(1) + "\n";
}

std::string manifest_to_json(const DatasetManifest& m) {
  json entries = json::array();
  for (const auto& e : m.entries)
    entries.push_back({{"id", e.id},
                       {"path", e.path},
                       {"width", e.width},
                       {"height", e.height},
                       {"split", e.split},
                       {"crc32", e.crc32}});
  json j{{"schema_version", kSchemaVersion},
         {"annotations", m.annotation_path},
         {"annotations_crc32", m.annotation_crc32},
         {"images", std::move(entries)}};
  return j.dump(1) + "\n";
}

DatasetManifest manifest_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    const int version = j.at("schema_version").get<int>();
    if (version != kSchemaVersion)
      throw ParseError("manifest: schema_version " + std::to_string(version) + " not supported");
    DatasetManifest m;
    m.annotation_path = j.at("annotations").get<std::string>();
    m.annotation_crc32 = j.at("annotations_crc32").get<std::uint32_t>();
    for (const auto& e : j.at("images"))
      m.entries.push_back({e.at("id").get<std::string>(), e.at("path").get<std::string>(),
                           e.at("width").get<int>(), e.at("height").get<int>(),
                           e.at("split").get<std::string>(), e.at("crc32").get<std::uint32_t>()});
    return m;
  } catch (const json::exception& e) {
    throw ParseError(std::string("manifest: ") + e.what());
  }
}

bool Dataset::is_grid(std::size_t i) const {
  return fs::path(manifest.entries.at(i).path).extension() == ".fgrid";
}

Image Dataset::image(std::size_t i) const { return read_image(root / manifest.entries.at(i).path); }

FeatureGrid Dataset::grid(std::size_t i) const {
  return read_feature_grid(root / manifest.entries.at(i).path);
}

Dataset load_dataset(const fs::path& manifest_path) {
  Dataset ds;
  ds.root = manifest_path.parent_path();
  ds.manifest = manifest_from_json(read_file(manifest_path));
  std::vector<std::string> problems;
  std::set<std::string> ids;
  for (const auto& e : ds.manifest.entries) {
    if (!ids.insert(e.id).second) problems.push_back("duplicate image id '" + e.id + "'");
    const fs::path p = ds.root / e.path;
    if (!fs::exists(p)) {
      problems.push_back("missing file " + p.string() + " (id '" + e.id + "')");
      continue;
    }
    if (crc32_of(read_file(p)) != e.crc32) problems.push_back("checksum mismatch for " + p.string());
  }
  if (!ds.manifest.annotation_path.empty()) {
    const fs::path ap = ds.root / ds.manifest.annotation_path;
    if (!fs::exists(ap)) {
      problems.push_back("missing annotation file " + ap.string());
    } else {
      const std::string text = read_file(ap);
      if (crc32_of(text) != ds.manifest.annotation_crc32)
        problems.push_back("checksum mismatch for " + ap.string());
      ds.ground_truth = ground_truth_from_json(text);
    }
  }
  std::map<std::string, const ManifestEntry*> by_id;
  for (const auto& e : ds.manifest.entries) by_id.emplace(e.id, &e);
  for (auto& g : ds.ground_truth) {
    const auto it = by_id.find(g.image_id);
    if (it == by_id.end()) {
      problems.push_back("annotation references unknown image id '" + g.image_id + "'");
      continue;
    }
    const bool grid = fs::path(it->second->path).extension() == ".fgrid";
    for (auto& b : g.boxes) {
      if (!grid) {
        const double W = it->second->width, H = it->second->height;
        const double x0 = std::clamp(b.box.x, 0.0, W), y0 = std::clamp(b.box.y, 0.0, H);
        const double x1 = std::clamp(b.box.x + b.box.w, 0.0, W), y1 = std::clamp(b.box.y + b.box.h, 0.0, H);
        b.box = {x0, y0, x1 - x0, y1 - y0};
      }
      if (!(b.box.w > 0 && b.box.h > 0))
        problems.push_back("degenerate box in image '" + g.image_id + "'");
    }
  }
  if (!problems.empty()) {
    std::string msg = "load_dataset " + manifest_path.string() + ":";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ValidationError(msg);
  }
  return ds;
}

fs::path write_synth_dataset(const fs::path& dir, const SynthDataset& ds, const std::string& split,
                             bool raster) {
  DatasetManifest m;
  for (std::size_t i = 0; i < ds.ids.size(); ++i) {
    ManifestEntry e;
    e.id = ds.ids[i];
    e.split = split;
    std::string bytes;
    if (raster) {
      e.path = "images/" + ds.ids[i] + ".pgm";
      write_pgm(dir / e.path, ds.images[i]);
      bytes = read_file(dir / e.path);
      e.width = ds.images[i].width;
      e.height = ds.images[i].height;
    } else {
      e.path = "grids/" + ds.ids[i] + ".fgrid";
      bytes = encode_feature_grid(ds.grids[i]);
      write_file_atomic(dir / e.path, bytes);
      e.width = ds.grids[i].cols();
      e.height = ds.grids[i].rows();
    }
    e.crc32 = crc32_of(bytes);
    m.entries.push_back(std::move(e));
  }
  const std::string gt = ground_truth_to_json(ds.gt);
  write_file_atomic(dir / "gt.json", gt);
  write_file_atomic(dir / "placements.json", objects_to_json(ds));
  m.annotation_path = "gt.json";
  m.annotation_crc32 = crc32_of(gt);
  const fs::path mp = dir / "manifest.json";
  write_file_atomic(mp, manifest_to_json(m));
  return mp;
}

}  // namespace partmix
