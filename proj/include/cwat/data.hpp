#pragma once

// Synthetic glyph scenes, dataset storage, and composition statistics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cwat/box.hpp"
#include "cwat/error.hpp"
#include "cwat/image_io.hpp"
#include "cwat/text.hpp"

namespace cwat {

/// Ground-truth boxes with class labels in 1..C for one image.
struct Annotation {
  std::vector<Box> boxes;
  std::vector<int> class_ids;

  std::size_t size() const { return boxes.size(); }
  bool empty() const { return boxes.empty(); }

  void validate(double image_size, int num_classes) const {
    if (boxes.size() != class_ids.size()) {
      fail(ErrorCategory::data, "annotation has mismatched box and label counts");
    }
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      const Box& b = boxes[i];
      if (!b.valid() || b.xmin < 0 || b.ymin < 0 || b.xmax > image_size || b.ymax > image_size) {
        fail(ErrorCategory::data, "annotation box " + std::to_string(i) + " is empty or outside the image");
      }
      if (class_ids[i] < 1 || class_ids[i] > num_classes) {
        fail(ErrorCategory::data, "annotation class " + std::to_string(class_ids[i]) + " out of range");
      }
    }
  }

  friend bool operator==(const Annotation&, const Annotation&) = default;
};

enum class Glyph { square, disc, triangle, ring, cross, diamond };
inline constexpr std::size_t kGlyphCount = 6;

inline const char* glyph_name(Glyph g) {
  static constexpr std::array names{"square", "disc", "triangle", "ring", "cross", "diamond"};
  return names[static_cast<std::size_t>(g)];
}

/// Coverage test in the unit cell, u and v in [0, 1].
inline bool glyph_covers(Glyph g, double u, double v) {
  const double du = u - 0.5;
  const double dv = v - 0.5;
  const double r2 = du * du + dv * dv;
  switch (g) {
    case Glyph::square: return true;
    case Glyph::disc: return r2 <= 0.25;
    case Glyph::triangle: return std::abs(du) <= 0.5 * v;
    case Glyph::ring: return r2 <= 0.25 && r2 >= 0.09;
    case Glyph::cross: return std::abs(du) <= 0.17 || std::abs(dv) <= 0.17;
    case Glyph::diamond: return std::abs(du) + std::abs(dv) <= 0.5;
  }
  return false;
}

struct SceneSpec {
  int num_classes = 3;
  std::size_t image_size = 64;
  std::size_t channels = 3;
  int min_objects = 1;
  int max_objects = 4;
  /// Relative class frequencies; empty means uniform.
  std::vector<double> class_weights;
  /// Fixed per-image object count per class; overrides the sampled counts.
  std::vector<int> composition;
  int min_size = 10;
  int max_size = 26;
  double noise = 8.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 1 || static_cast<std::size_t>(num_classes) > kGlyphCount) {
      fail(ErrorCategory::config, "num_classes must be in 1.." + std::to_string(kGlyphCount));
    }
    if (channels != 1 && channels != 3) fail(ErrorCategory::config, "channels must be 1 or 3");
    if (min_objects < 0 || max_objects < min_objects) {
      fail(ErrorCategory::config, "objects per image range is invalid");
    }
    if (min_size < 2 || max_size < min_size || static_cast<std::size_t>(max_size) > image_size) {
      fail(ErrorCategory::config, "object size range is invalid for the image size");
    }
    if (!class_weights.empty()) {
      if (class_weights.size() != static_cast<std::size_t>(num_classes)) {
        fail(ErrorCategory::config, "class_weights needs one entry per class");
      }
      for (double w : class_weights)
        if (!(w >= 0)) fail(ErrorCategory::config, "class weights must be nonnegative");
    }
    if (!composition.empty() && composition.size() != static_cast<std::size_t>(num_classes)) {
      fail(ErrorCategory::config, "composition needs one count per class");
    }
    if (noise < 0) fail(ErrorCategory::config, "noise must be nonnegative");
  }

  text::KeyValues echo() const {
    text::KeyValues kv;
    kv["scene.num_classes"] = std::to_string(num_classes);
    kv["scene.image_size"] = std::to_string(image_size);
    kv["scene.channels"] = std::to_string(channels);
    kv["scene.min_objects"] = std::to_string(min_objects);
    kv["scene.max_objects"] = std::to_string(max_objects);
    kv["scene.class_weights"] = text::join_doubles(class_weights);
    std::string comp;
    for (std::size_t i = 0; i < composition.size(); ++i) comp += (i ? "," : "") + std::to_string(composition[i]);
    kv["scene.composition"] = comp;
    kv["scene.min_size"] = std::to_string(min_size);
    kv["scene.max_size"] = std::to_string(max_size);
    kv["scene.noise"] = text::format_double(noise);
    kv["seed"] = std::to_string(seed);
    return kv;
  }
};

struct Sample {
  ImageTensor image;
  Annotation truth;
};

struct GeneratedScene {
  ImageTensor image;
  Annotation truth;
  int dropped = 0;  // objects that could not be placed
};

/// Deterministic in (spec.seed, index) and independent of other indices.
inline GeneratedScene generate_scene(const SceneSpec& spec, std::uint64_t index) {
  spec.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x5ce4eu};
  std::mt19937_64 rng(seq);
  auto uniform_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

  std::vector<int> classes;
  if (!spec.composition.empty()) {
    for (int c = 0; c < spec.num_classes; ++c)
      for (int k = 0; k < spec.composition[static_cast<std::size_t>(c)]; ++k) classes.push_back(c + 1);
    std::shuffle(classes.begin(), classes.end(), rng);
  } else {
    std::vector<double> weights = spec.class_weights;
    if (weights.empty()) weights.assign(static_cast<std::size_t>(spec.num_classes), 1.0);
    std::discrete_distribution<int> pick(weights.begin(), weights.end());
    const int count = uniform_int(spec.min_objects, spec.max_objects);
    for (int k = 0; k < count; ++k) classes.push_back(pick(rng) + 1);
  }

  const std::size_t n = spec.image_size;
  GeneratedScene scene;
  scene.image = ImageTensor(n, n, spec.channels);
  std::vector<double> background(spec.channels);
  for (double& b : background) b = uniform(10.0, 70.0);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x)
      for (std::size_t c = 0; c < spec.channels; ++c) scene.image.at(y, x, c) = background[c];

  std::vector<Box> cells;
  for (int cls : classes) {
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      const int size = uniform_int(spec.min_size, spec.max_size);
      const int x0 = uniform_int(0, static_cast<int>(n) - size);
      const int y0 = uniform_int(0, static_cast<int>(n) - size);
      const Box cell{double(x0), double(y0), double(x0 + size), double(y0 + size)};
      const Box margin{cell.xmin - 1, cell.ymin - 1, cell.xmax + 1, cell.ymax + 1};
      const bool overlaps = std::any_of(cells.begin(), cells.end(), [&](const Box& o) {
        return margin.xmin < o.xmax && o.xmin < margin.xmax && margin.ymin < o.ymax && o.ymin < margin.ymax;
      });
      if (overlaps) continue;

      std::vector<double> color(spec.channels);
      for (double& v : color) v = uniform(150.0, 255.0);
      const Glyph glyph = static_cast<Glyph>(cls - 1);
      int xmin = x0 + size, ymin = y0 + size, xmax = x0 - 1, ymax = y0 - 1;
      for (int v = 0; v < size; ++v) {
        for (int u = 0; u < size; ++u) {
          if (!glyph_covers(glyph, (u + 0.5) / size, (v + 0.5) / size)) continue;
          for (std::size_t c = 0; c < spec.channels; ++c)
            scene.image.at(static_cast<std::size_t>(y0 + v), static_cast<std::size_t>(x0 + u), c) = color[c];
          xmin = std::min(xmin, x0 + u);
          xmax = std::max(xmax, x0 + u);
          ymin = std::min(ymin, y0 + v);
          ymax = std::max(ymax, y0 + v);
        }
      }
      cells.push_back(cell);
      scene.truth.boxes.push_back({double(xmin), double(ymin), double(xmax + 1), double(ymax + 1)});
      scene.truth.class_ids.push_back(cls);
      placed = true;
    }
    if (!placed) ++scene.dropped;
  }

  std::normal_distribution<double> noise(0.0, spec.noise);
  for (double& p : scene.image.pixels) {
    const double v = spec.noise > 0 ? p + noise(rng) : p;
    p = std::clamp(std::round(v), 0.0, 255.0);
  }
  return scene;
}

struct Dataset {
  std::vector<Sample> samples;
  /// Manifest records (scene echo, seed, count, mean).
  text::KeyValues manifest;
  std::vector<double> mean;
  int num_classes = 0;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

inline std::vector<double> channel_mean(const std::vector<Sample>& samples) {
  if (samples.empty()) return {};
  const std::size_t c = samples.front().image.channels;
  std::vector<double> sum(c, 0.0);
  std::size_t count = 0;
  for (const Sample& s : samples) {
    for (std::size_t i = 0; i < s.image.pixels.size(); ++i) sum[i % c] += s.image.pixels[i];
    count += s.image.height * s.image.width;
  }
  for (double& v : sum) v /= static_cast<double>(count);
  return sum;
}

/// Stamps every image with the whole-dataset channel mean.
inline void apply_mean_shift(Dataset& data, const std::vector<double>& mean) {
  data.mean = mean;
  data.manifest["mean"] = text::join_doubles(mean);
  for (Sample& s : data.samples) s.image.mean_shift = mean;
}

/// Scenes first .. first + count - 1 of `spec`.
inline Dataset generate_dataset(const SceneSpec& spec, std::size_t count, std::ostream* log = nullptr,
                                std::uint64_t first = 0) {
  spec.validate();
  Dataset data;
  data.num_classes = spec.num_classes;
  data.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    GeneratedScene scene = generate_scene(spec, first + i);
    if (scene.dropped && log) {
      *log << "scene " << first + i << ": dropped " << scene.dropped << " unplaceable object(s)\n";
    }
    data.samples.push_back({std::move(scene.image), std::move(scene.truth)});
  }
  data.manifest = spec.echo();
  data.manifest["format"] = "cwat-dataset-1";
  data.manifest["count"] = std::to_string(count);
  data.manifest["first_index"] = std::to_string(first);
  data.manifest["num_classes"] = std::to_string(spec.num_classes);
  apply_mean_shift(data, channel_mean(data.samples));
  return data;
}

struct DatasetStats {
  std::map<std::size_t, std::size_t> objects_per_image;
  std::map<std::size_t, std::size_t> classes_per_image;
};

inline DatasetStats dataset_stats(const std::vector<Sample>& samples) {
  DatasetStats stats;
  for (const Sample& s : samples) {
    ++stats.objects_per_image[s.truth.size()];
    const std::set<int> distinct(s.truth.class_ids.begin(), s.truth.class_ids.end());
    ++stats.classes_per_image[distinct.size()];
  }
  return stats;
}

inline void write_histogram_csv(const std::string& path, const std::map<std::size_t, std::size_t>& hist) {
  std::ofstream out(path);
  if (!out) fail(ErrorCategory::io, "cannot write " + path);
  out << "bucket,count\n";
  for (const auto& [bucket, count] : hist) out << bucket << "," << count << "\n";
}

namespace detail {

inline std::string stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06zu", i);
  return buf;
}

}  // namespace detail

/// Layout: images/NNNNNN.png, labels/NNNNNN.txt ("class_id xmin ymin xmax ymax"
/// per line), manifest.txt.
inline void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sample& s = data.samples[i];
    write_png((dir / "images" / (detail::stem(i) + ".png")).string(), s.image);
    const std::string label_path = (dir / "labels" / (detail::stem(i) + ".txt")).string();
    std::ofstream out(label_path);
    if (!out) fail(ErrorCategory::io, "cannot write " + label_path);
    for (std::size_t k = 0; k < s.truth.size(); ++k) {
      const Box& b = s.truth.boxes[k];
      out << s.truth.class_ids[k] << " " << text::format_double(b.xmin) << " " << text::format_double(b.ymin)
          << " " << text::format_double(b.xmax) << " " << text::format_double(b.ymax) << "\n";
    }
  }
  text::KeyValues manifest = data.manifest;
  manifest["format"] = "cwat-dataset-1";
  manifest["count"] = std::to_string(data.size());
  manifest["num_classes"] = std::to_string(data.num_classes);
  manifest["mean"] = text::join_doubles(data.mean);
  text::write_key_values((dir / "manifest.txt").string(), manifest);
}

inline Annotation read_labels(const std::string& path, double image_size, int num_classes) {
  std::ifstream in(path);
  if (!in) fail(ErrorCategory::io, "missing annotation file " + path);
  Annotation truth;
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    if (text::trim(line).empty()) continue;
    auto where = [&] { return path + ":" + std::to_string(lineno) + ": "; };
    std::istringstream fields(line);
    std::vector<std::string> tok;
    for (std::string t; fields >> t;) tok.push_back(t);
    if (tok.size() != 5) fail(ErrorCategory::data, where() + "expected 'class_id xmin ymin xmax ymax'");
    const auto cls = text::try_parse_int(tok[0]);
    std::array<double, 4> v{};
    for (std::size_t k = 0; k < 4; ++k) {
      const auto d = text::try_parse_double(tok[k + 1]);
      if (!d || !std::isfinite(*d)) fail(ErrorCategory::data, where() + "bad coordinate '" + tok[k + 1] + "'");
      v[k] = *d;
    }
    if (!cls || *cls < 1 || (num_classes > 0 && *cls > num_classes)) {
      fail(ErrorCategory::data, where() + "bad class id '" + tok[0] + "'");
    }
    const Box b{v[0], v[1], v[2], v[3]};
    if (b.xmax <= b.xmin || b.ymax <= b.ymin) fail(ErrorCategory::data, where() + "box has xmax <= xmin or ymax <= ymin");
    if (b.xmin < 0 || b.ymin < 0 || b.xmax > image_size || b.ymax > image_size) {
      fail(ErrorCategory::data, where() + "box outside image bounds");
    }
    truth.boxes.push_back(b);
    truth.class_ids.push_back(static_cast<int>(*cls));
  }
  return truth;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const std::string manifest_path = (dir / "manifest.txt").string();
  if (!fs::exists(manifest_path)) fail(ErrorCategory::io, "missing dataset manifest " + manifest_path);
  Dataset data;
  data.manifest = text::read_key_values(manifest_path);
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = data.manifest.find(key);
    if (it == data.manifest.end()) fail(ErrorCategory::data, manifest_path + ": missing key '" + key + "'");
    return it->second;
  };
  const auto count = text::try_parse_int(get("count"));
  const auto classes = text::try_parse_int(get("num_classes"));
  if (!count || *count < 0 || !classes) fail(ErrorCategory::data, manifest_path + ": bad count or num_classes");
  data.num_classes = static_cast<int>(*classes);
  std::size_t channels = 3;
  if (auto it = data.manifest.find("scene.channels"); it != data.manifest.end()) {
    channels = static_cast<std::size_t>(text::try_parse_int(it->second).value_or(3));
  }
  for (const std::string& m : text::split(get("mean"), ',')) {
    const auto v = text::try_parse_double(m);
    if (!v) fail(ErrorCategory::data, manifest_path + ": bad mean entry '" + m + "'");
    data.mean.push_back(*v);
  }
  for (std::size_t i = 0; i < static_cast<std::size_t>(*count); ++i) {
    Sample s;
    s.image = read_png((dir / "images" / (detail::stem(i) + ".png")).string(), channels);
    s.image.mean_shift = data.mean;
    s.truth = read_labels((dir / "labels" / (detail::stem(i) + ".txt")).string(),
                          static_cast<double>(std::min(s.image.width, s.image.height)), data.num_classes);
    data.samples.push_back(std::move(s));
  }
  return data;
}

}  // namespace cwat
