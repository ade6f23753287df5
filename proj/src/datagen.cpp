#include "vglab/datagen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "vglab/rng.hpp"

namespace vg {

namespace {

const std::array<std::string, 8> kColors = {"red",    "green",  "blue", "yellow",
                                            "purple", "orange", "cyan", "pink"};
const std::array<std::array<double, 3>, 8> kColorRgb = {{
    {0.90, 0.10, 0.10},
    {0.10, 0.80, 0.10},
    {0.10, 0.20, 0.90},
    {0.95, 0.90, 0.10},
    {0.60, 0.10, 0.80},
    {0.95, 0.55, 0.10},
    {0.10, 0.85, 0.90},
    {0.95, 0.50, 0.70},
}};
const std::array<std::string, 3> kShapes = {"square", "circle", "triangle"};
const std::array<std::string, 3> kShapesPlural = {"squares", "circles", "triangles"};
const std::array<std::string, 4> kRelations = {"left", "right", "above", "below"};

constexpr double kBackground = 0.5;
constexpr double kRelationMargin = 0.05;

int color_index(const std::string& c) {
  for (std::size_t i = 0; i < kColors.size(); ++i)
    if (kColors[i] == c) return static_cast<int>(i);
  throw std::invalid_argument("datagen: unknown color " + c);
}

std::string singular(const std::string& plural) {
  for (std::size_t i = 0; i < kShapesPlural.size(); ++i)
    if (kShapesPlural[i] == plural) return kShapes[i];
  return "";
}

bool relation_holds(const ShapeSpec& a, const ShapeSpec& b, const std::string& rel) {
  if (rel == "left") return a.cx <= b.cx - kRelationMargin;
  if (rel == "right") return a.cx >= b.cx + kRelationMargin;
  if (rel == "above") return a.cy <= b.cy - kRelationMargin;
  if (rel == "below") return a.cy >= b.cy + kRelationMargin;
  return false;
}

bool same_combo(const ShapeSpec& a, const std::string& color, const std::string& shape) {
  return a.color == color && a.shape == shape;
}

std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream ss(s);
  std::string w;
  while (ss >> w) out.push_back(w);
  return out;
}

double box_overlap(const ShapeSpec& a, const ShapeSpec& b) {
  return iou(a.box().to_xyxy(), b.box().to_xyxy());
}

// scene placement; shapes stay inside the canvas and mostly apart
std::vector<ShapeSpec> place_shapes(Rng& rng, const std::vector<std::pair<int, int>>& combos) {
  std::vector<ShapeSpec> shapes;
  for (auto [ci, si] : combos) {
    ShapeSpec s;
    s.color = kColors[ci];
    s.shape = kShapes[si];
    bool placed = false;
    for (int attempt = 0; attempt < 60 && !placed; ++attempt) {
      const double ext = rng.uniform(0.09, 0.16);
      s.hx = ext;
      s.hy = ext;
      s.cx = rng.uniform(0.03 + ext, 0.97 - ext);
      s.cy = rng.uniform(0.03 + ext, 0.97 - ext);
      placed = true;
      for (const ShapeSpec& other : shapes)
        if (box_overlap(s, other) > 0.05) placed = false;
    }
    if (!placed) return {};  // caller resamples the scene
    shapes.push_back(s);
  }
  return shapes;
}

std::pair<int, int> random_combo(Rng& rng) {
  return {rng.uniform_int(0, static_cast<int>(kColors.size()) - 1),
          rng.uniform_int(0, static_cast<int>(kShapes.size()) - 1)};
}

std::vector<std::pair<int, int>> distinct_combos(Rng& rng, int n) {
  std::vector<std::pair<int, int>> combos;
  while (static_cast<int>(combos.size()) < n) {
    auto c = random_combo(rng);
    if (std::find(combos.begin(), combos.end(), c) == combos.end()) combos.push_back(c);
  }
  return combos;
}

// single-target sample with a uniquely-identifying "color shape" expression
bool make_simple(Rng& rng, int n_shapes, GroundingSample& out) {
  auto combos = distinct_combos(rng, n_shapes);
  auto shapes = place_shapes(rng, combos);
  if (shapes.empty()) return false;
  const int t = rng.uniform_int(0, n_shapes - 1);
  out.shapes = std::move(shapes);
  out.expression = out.shapes[t].color + " " + out.shapes[t].shape;
  out.targets = {out.shapes[t].box()};
  out.no_target = false;
  return true;
}

// two objects of the same combo, disambiguated by a relation to a unique
// reference object
bool make_relational(Rng& rng, int n_shapes, GroundingSample& out) {
  if (n_shapes < 3) n_shapes = 3;
  auto target_combo = random_combo(rng);
  std::vector<std::pair<int, int>> combos = {target_combo, target_combo};
  for (auto c : distinct_combos(rng, n_shapes - 2)) {
    if (c == target_combo) return false;
    combos.push_back(c);
  }
  auto shapes = place_shapes(rng, combos);
  if (shapes.empty()) return false;
  // reference: any later object (unique combo by construction)
  const int ref = rng.uniform_int(2, n_shapes - 1);
  const std::string rel = kRelations[rng.uniform_int(0, 3)];
  int match = -1;
  for (int i = 0; i < 2; ++i) {
    if (relation_holds(shapes[i], shapes[ref], rel)) {
      if (match >= 0) return false;  // ambiguous
      match = i;
    }
  }
  if (match < 0) return false;
  out.shapes = std::move(shapes);
  out.expression = out.shapes[match].color + " " + out.shapes[match].shape + " " + rel + " of " +
                   out.shapes[ref].color + " " + out.shapes[ref].shape;
  out.targets = {out.shapes[match].box()};
  out.no_target = false;
  return true;
}

// "all <color> <shape plural>" with 2..3 instances
bool make_multi(Rng& rng, int max_shapes, GroundingSample& out) {
  auto target_combo = random_combo(rng);
  const int n_targets = rng.uniform_int(2, 3);
  const int n_extra = rng.uniform_int(0, std::max(0, max_shapes - n_targets));
  std::vector<std::pair<int, int>> combos(n_targets, target_combo);
  for (auto c : distinct_combos(rng, n_extra))
    if (c != target_combo) combos.push_back(c);
  auto shapes = place_shapes(rng, combos);
  if (shapes.empty()) return false;
  out.shapes = std::move(shapes);
  out.expression =
      "all " + kColors[target_combo.first] + " " + kShapesPlural[target_combo.second];
  out.targets.clear();
  for (const ShapeSpec& s : out.shapes)
    if (same_combo(s, kColors[target_combo.first], kShapes[target_combo.second]))
      out.targets.push_back(s.box());
  out.no_target = false;
  return true;
}

// expression referring to a combo absent from the scene
bool make_none(Rng& rng, int n_shapes, GroundingSample& out) {
  auto combos = distinct_combos(rng, n_shapes);
  auto shapes = place_shapes(rng, combos);
  if (shapes.empty()) return false;
  for (int attempt = 0; attempt < 40; ++attempt) {
    auto c = random_combo(rng);
    if (std::find(combos.begin(), combos.end(), c) == combos.end()) {
      out.shapes = std::move(shapes);
      out.expression = kColors[c.first] + " " + kShapes[c.second];
      out.targets.clear();
      out.no_target = true;
      return true;
    }
  }
  return false;
}

void self_check(const GroundingSample& s) {
  const std::vector<int> hits = resolve_expression(s.shapes, s.expression);
  std::vector<BoxCxCyWh> expect;
  for (int i : hits) expect.push_back(s.shapes[i].box());
  if (expect.size() != s.targets.size())
    throw std::logic_error("datagen: expression does not resolve to the stored targets");
  for (std::size_t i = 0; i < expect.size(); ++i)
    if (l1_box(expect[i], s.targets[i]) > 1e-12)
      throw std::logic_error("datagen: resolver/target box mismatch");
}

}  // namespace

Vocab::Vocab(std::vector<std::string> words) : words_(std::move(words)) {}

const Vocab& Vocab::builtin() {
  static const Vocab v = [] {
    std::vector<std::string> w = {"<pad>", "<unk>"};
    for (const auto& c : kColors) w.push_back(c);
    for (const auto& s : kShapes) w.push_back(s);
    for (const auto& s : kShapesPlural) w.push_back(s);
    for (const auto& r : kRelations) w.push_back(r);
    w.push_back("of");
    w.push_back("all");
    return Vocab(std::move(w));
  }();
  return v;
}

int Vocab::id(const std::string& word) const {
  for (std::size_t i = 0; i < words_.size(); ++i)
    if (words_[i] == word) return static_cast<int>(i);
  return kUnk;
}

const std::string& Vocab::word(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("vocab: id out of range");
  return words_[id];
}

std::vector<int> tokenize(const std::string& expression, const Vocab& vocab, int max_len) {
  std::vector<int> ids;
  for (const std::string& w : split_words(expression)) {
    if (static_cast<int>(ids.size()) >= max_len) break;
    ids.push_back(vocab.id(w));
  }
  return ids;
}

bool is_relational(const std::string& expression) {
  for (const std::string& w : split_words(expression))
    for (const auto& r : kRelations)
      if (w == r) return true;
  return false;
}

std::vector<int> resolve_expression(const std::vector<ShapeSpec>& shapes,
                                    const std::string& expression) {
  const std::vector<std::string> words = split_words(expression);
  std::vector<int> out;
  if (words.empty()) return out;
  if (words[0] == "all" && words.size() == 3) {
    const std::string shape = singular(words[2]);
    for (std::size_t i = 0; i < shapes.size(); ++i)
      if (same_combo(shapes[i], words[1], shape)) out.push_back(static_cast<int>(i));
    return out;
  }
  if (words.size() == 2) {
    for (std::size_t i = 0; i < shapes.size(); ++i)
      if (same_combo(shapes[i], words[0], words[1])) out.push_back(static_cast<int>(i));
    return out;
  }
  if (words.size() == 6 && words[3] == "of") {
    // <color> <shape> <rel> of <color> <shape>
    std::vector<int> refs;
    for (std::size_t i = 0; i < shapes.size(); ++i)
      if (same_combo(shapes[i], words[4], words[5])) refs.push_back(static_cast<int>(i));
    if (refs.size() != 1) return out;
    for (std::size_t i = 0; i < shapes.size(); ++i)
      if (same_combo(shapes[i], words[0], words[1]) &&
          relation_holds(shapes[i], shapes[refs[0]], words[2]))
        out.push_back(static_cast<int>(i));
    return out;
  }
  return out;
}

std::vector<GroundingSample> generate_colorshapes(std::uint64_t seed, int n_samples,
                                                  const DatasetOptions& opts,
                                                  long long id_offset) {
  if (n_samples < 1) throw std::invalid_argument("generate_colorshapes: n_samples must be >= 1");
  if (opts.task != "REC" && opts.task != "GREC")
    throw std::invalid_argument("generate_colorshapes: task must be REC or GREC");
  std::vector<GroundingSample> out;
  out.reserve(n_samples);
  for (int i = 0; i < n_samples; ++i) {
    const long long id = id_offset + i;
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(id)));
    GroundingSample s;
    s.id = id;
    bool ok = false;
    for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
      const int n_shapes = rng.uniform_int(opts.min_shapes, opts.max_shapes);
      if (opts.task == "REC") {
        if (rng.uniform() < opts.relation_frac)
          ok = make_relational(rng, n_shapes, s);
        else
          ok = make_simple(rng, n_shapes, s);
      } else {
        const double r = rng.uniform();
        if (r < opts.none_frac)
          ok = make_none(rng, n_shapes, s);
        else if (r < opts.none_frac + opts.multi_frac)
          ok = make_multi(rng, opts.max_shapes, s);
        else
          ok = make_simple(rng, n_shapes, s);
      }
    }
    if (!ok)
      throw std::runtime_error("generate_colorshapes: could not satisfy template for sample " +
                               std::to_string(id));
    if (!s.no_target) self_check(s);
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
Tensor<T> render(const GroundingSample& sample, int image_size) {
  const int s = image_size;
  Tensor<T> img = Tensor<T>::full({3, s, s}, static_cast<T>(kBackground));
  for (const ShapeSpec& sh : sample.shapes) {
    const auto& rgb = kColorRgb[color_index(sh.color)];
    for (int py = 0; py < s; ++py) {
      const double y = (py + 0.5) / s;
      for (int px = 0; px < s; ++px) {
        const double x = (px + 0.5) / s;
        bool inside = false;
        if (sh.shape == "square") {
          inside = std::fabs(x - sh.cx) <= sh.hx && std::fabs(y - sh.cy) <= sh.hy;
        } else if (sh.shape == "circle") {
          const double dx = (x - sh.cx) / sh.hx, dy = (y - sh.cy) / sh.hy;
          inside = dx * dx + dy * dy <= 1.0;
        } else if (sh.shape == "triangle") {
          const double t = (y - (sh.cy - sh.hy)) / (2 * sh.hy);
          inside = t >= 0.0 && t <= 1.0 && std::fabs(x - sh.cx) <= sh.hx * t;
        }
        if (inside) {
          for (int c = 0; c < 3; ++c)
            (*img.data)[(static_cast<std::size_t>(c) * s + py) * s + px] =
                static_cast<T>(rgb[c]);
        }
      }
    }
  }
  return img;
}

template Tensor<float> render<float>(const GroundingSample&, int);
template Tensor<double> render<double>(const GroundingSample&, int);

void save_pixels(const std::string& path, const Tensor<float>& image) {
  if (image.rank() != 3 || image.shape[0] != 3)
    throw std::invalid_argument("save_pixels: expected [3 x S x S] image");
  const int s = image.shape[1];
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_pixels: cannot write " + path);
  for (int py = 0; py < s; ++py)
    for (int px = 0; px < s; ++px)
      for (int c = 0; c < 3; ++c) {
        const float v = (*image.data)[(static_cast<std::size_t>(c) * s + py) * s + px];
        const int b = std::clamp(static_cast<int>(std::lround(v * 255.0f)), 0, 255);
        f.put(static_cast<char>(b));
      }
  if (!f) throw std::runtime_error("save_pixels: write failed for " + path);
}

Tensor<float> load_pixels(const std::string& path, int image_size) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_pixels: cannot open " + path);
  const int s = image_size;
  Tensor<float> img = Tensor<float>::zeros({3, s, s});
  for (int py = 0; py < s; ++py)
    for (int px = 0; px < s; ++px)
      for (int c = 0; c < 3; ++c) {
        const int b = f.get();
        if (b == EOF) throw std::runtime_error("load_pixels: file truncated: " + path);
        (*img.data)[(static_cast<std::size_t>(c) * s + py) * s + px] =
            static_cast<float>(b) / 255.0f;
      }
  return img;
}

void save_jsonl(const std::vector<GroundingSample>& samples, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_jsonl: cannot write " + path);
  for (const GroundingSample& s : samples) {
    nlohmann::json j;
    j["id"] = s.id;
    nlohmann::json shapes = nlohmann::json::array();
    for (const ShapeSpec& sh : s.shapes)
      shapes.push_back({{"shape", sh.shape},
                        {"color", sh.color},
                        {"cx", sh.cx},
                        {"cy", sh.cy},
                        {"hx", sh.hx},
                        {"hy", sh.hy}});
    j["shapes"] = std::move(shapes);
    j["expression"] = s.expression;
    if (!s.targets.empty()) {
      nlohmann::json boxes = nlohmann::json::array();
      for (const BoxCxCyWh& b : s.targets) boxes.push_back({b.cx, b.cy, b.w, b.h});
      j["boxes"] = std::move(boxes);
    }
    j["no_target"] = s.no_target;
    if (!s.pixels_file.empty()) j["pixels_file"] = s.pixels_file;
    f << j.dump() << "\n";
  }
  if (!f) throw std::runtime_error("save_jsonl: write failed for " + path);
}

std::vector<GroundingSample> load_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_jsonl: cannot open " + path);
  std::vector<GroundingSample> out;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("load_jsonl: parse error at line " + std::to_string(line_no) +
                               ": " + e.what());
    }
    try {
      GroundingSample s;
      s.id = j.value("id", static_cast<long long>(out.size()));
      if (j.contains("shapes")) {
        for (const auto& sh : j["shapes"]) {
          ShapeSpec spec;
          spec.shape = sh.at("shape").get<std::string>();
          spec.color = sh.at("color").get<std::string>();
          spec.cx = sh.at("cx").get<double>();
          spec.cy = sh.at("cy").get<double>();
          spec.hx = sh.at("hx").get<double>();
          spec.hy = sh.at("hy").get<double>();
          s.shapes.push_back(std::move(spec));
        }
      }
      s.expression = j.at("expression").get<std::string>();
      s.no_target = j.value("no_target", false);
      if (j.contains("boxes")) {
        for (const auto& b : j["boxes"]) {
          if (!b.is_array() || b.size() != 4)
            throw std::runtime_error("box must be a 4-element array");
          s.targets.push_back({b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                               b[3].get<double>()});
        }
      }
      if (j.contains("pixels_file")) s.pixels_file = j["pixels_file"].get<std::string>();
      if (s.no_target != s.targets.empty())
        throw std::runtime_error("no_target flag inconsistent with boxes");
      if (s.expression.empty()) throw std::runtime_error("empty expression");
      for (const BoxCxCyWh& b : s.targets) {
        const BoxXyXy c = b.to_xyxy();
        if (b.w < 0 || b.h < 0 || c.x1 < -1e-9 || c.y1 < -1e-9 || c.x2 > 1 + 1e-9 ||
            c.y2 > 1 + 1e-9)
          throw std::runtime_error("box outside the unit square");
      }
      out.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw std::runtime_error("load_jsonl: invalid sample at line " + std::to_string(line_no) +
                               ": " + e.what());
    }
  }
  return out;
}

}  // namespace vg
