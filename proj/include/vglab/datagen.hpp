#pragma once

// Synthetic "ColorShapes" referring expressions: scenes of colored squares,
// circles and triangles with template expressions over color, shape and
// spatial relations. Single-target mode emits exactly one target; the
// generalized mode mixes single-, multi- ("all red squares") and no-target
// samples. Generation is deterministic per sample id.

#include <cstdint>
#include <string>
#include <vector>

#include "vglab/box.hpp"
#include "vglab/tensor.hpp"

namespace vg {

struct ShapeSpec {
  std::string shape;  // square | circle | triangle
  std::string color;  // one of the 8 palette names
  double cx = 0, cy = 0;
  double hx = 0, hy = 0;  // half extents

  BoxCxCyWh box() const { return {cx, cy, 2 * hx, 2 * hy}; }
};

struct GroundingSample {
  long long id = 0;
  std::vector<ShapeSpec> shapes;
  std::string expression;     // space-separated words
  std::vector<BoxCxCyWh> targets;
  bool no_target = false;
  std::string pixels_file;    // optional sidecar raw-pixel reference
};

// fixed template vocabulary; PAD is id 0, UNK id 1
class Vocab {
 public:
  static const Vocab& builtin();
  int id(const std::string& word) const;  // UNK fallback
  const std::string& word(int id) const;
  int size() const { return static_cast<int>(words_.size()); }
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  const std::vector<std::string>& words() const { return words_; }

 private:
  explicit Vocab(std::vector<std::string> words);
  std::vector<std::string> words_;
};

std::vector<int> tokenize(const std::string& expression, const Vocab& vocab, int max_len = 20);

struct DatasetOptions {
  std::string task = "REC";      // REC | GREC
  double relation_frac = 0.5;    // REC: fraction of spatial-relation samples
  double multi_frac = 0.2;       // GREC: multi-target fraction
  double none_frac = 0.15;       // GREC: no-target fraction
  int min_shapes = 2;
  int max_shapes = 5;
};

std::vector<GroundingSample> generate_colorshapes(std::uint64_t seed, int n_samples,
                                                  const DatasetOptions& opts,
                                                  long long id_offset = 0);

// indices of objects the expression refers to, under the template grammar
std::vector<int> resolve_expression(const std::vector<ShapeSpec>& shapes,
                                    const std::string& expression);

bool is_relational(const std::string& expression);

// rasterize onto a neutral gray background; [3 x S x S], values in [0,1]
template <typename T>
Tensor<T> render(const GroundingSample& sample, int image_size);

// sidecar raw pixels: 8-bit RGB, row-major, interleaved channels
void save_pixels(const std::string& path, const Tensor<float>& image);
Tensor<float> load_pixels(const std::string& path, int image_size);

void save_jsonl(const std::vector<GroundingSample>& samples, const std::string& path);
std::vector<GroundingSample> load_jsonl(const std::string& path);

}  // namespace vg
