#include "chanssl/data.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "chanssl/errors.hpp"
#include "chanssl/rng.hpp"

namespace chanssl {

namespace {

double quantize(double v) { return std::round(v * 100.0) / 100.0; }
// The volatile store keeps GCC's -O3 vectorizer from eliding the rounding.
double to_f32(double v) {
  volatile float f = static_cast<float>(v);
  return static_cast<double>(f);
}

struct Footprint {
  double x, y, radius;
};

bool overlaps(const std::vector<Footprint>& placed, const Footprint& f, double margin) {
  return std::any_of(placed.begin(), placed.end(), [&](const Footprint& p) {
    return std::hypot(p.x - f.x, p.y - f.y) < p.radius + f.radius + margin;
  });
}

// Points on the sensor-facing faces and the top, kept strictly inside.
void sample_surface(Rng& rng, const Box3D& b, int n, double intensity_mean,
                    double intensity_sigma, PointCloud& out) {
  const double c = std::cos(b.r);
  const double s = std::sin(b.r);
  const double hl = 0.5 * b.l, hw = 0.5 * b.w, hh = 0.5 * b.h;
  // Sensor at the origin, expressed in the box frame.
  const double sx = c * (-b.cx) + s * (-b.cy);
  const double sy = -s * (-b.cx) + c * (-b.cy);

  struct Face {
    int axis;     // 0: x, 1: y, 2: top
    double sign;  // outward normal direction
    double area;
  };
  std::vector<Face> faces;
  if (sx > hl) faces.push_back({0, 1.0, b.w * b.h});
  if (sx < -hl) faces.push_back({0, -1.0, b.w * b.h});
  if (sy > hw) faces.push_back({1, 1.0, b.l * b.h});
  if (sy < -hw) faces.push_back({1, -1.0, b.l * b.h});
  faces.push_back({2, 1.0, b.l * b.w});
  double total = 0.0;
  for (const Face& f : faces) total += f.area;

  constexpr double kInset = 0.96;
  for (int added = 0, tries = 0; added < n && tries < 20 * n; ++tries) {
    double pick = rng.uniform() * total;
    std::size_t fi = 0;
    while (fi + 1 < faces.size() && pick >= faces[fi].area) pick -= faces[fi++].area;
    const Face& f = faces[fi];
    double lx = rng.uniform(-kInset, kInset) * hl;
    double ly = rng.uniform(-kInset, kInset) * hw;
    double lz = rng.uniform(-kInset, kInset) * hh;
    const double depth = std::clamp(std::abs(rng.normal(0.0, 0.01)), 0.0, 0.03);
    if (f.axis == 0) lx = f.sign * (kInset * hl - depth * hl);
    if (f.axis == 1) ly = f.sign * (kInset * hw - depth * hw);
    if (f.axis == 2) lz = kInset * hh - depth * hh;
    Point p;
    p.x = to_f32(b.cx + c * lx - s * ly);
    p.y = to_f32(b.cy + s * lx + c * ly);
    p.z = to_f32(b.cz + lz);
    p.intensity = to_f32(std::clamp(rng.normal(intensity_mean, intensity_sigma), 0.0, 1.0));
    if (point_in_box(b, p.x, p.y, p.z)) {
      out.push_back(p);
      ++added;
    }
  }
}

int points_for(const SynthConfig& cfg, const Box3D& b) {
  const double range = std::max(1.0, std::hypot(b.cx, b.cy));
  const double falloff = std::clamp((10.0 / range) * (10.0 / range), 0.05, 4.0);
  const double area = b.l * b.w + 0.5 * (b.l + b.w) * b.h * 2.0;
  const int n = static_cast<int>(std::lround(cfg.surface_density * area * falloff));
  return std::clamp(n, cfg.min_pts, cfg.max_pts);
}

Box3D place_box(Rng& rng, const SynthConfig& cfg, double w, double h, double l,
                std::vector<Footprint>& placed, bool& ok) {
  ok = false;
  Box3D b;
  for (int attempt = 0; attempt < 50; ++attempt) {
    const double range = rng.uniform(cfg.object_range_min, cfg.object_range_max);
    const double az = rng.uniform(-kPi, kPi);
    b = {quantize(range * std::cos(az)), quantize(range * std::sin(az)), quantize(0.5 * h),
         quantize(w), quantize(h), quantize(l), normalize_angle(quantize(rng.uniform(-kPi, kPi)))};
    b.r = quantize(b.r);
    const Footprint f{b.cx, b.cy, 0.5 * std::hypot(b.l, b.w)};
    if (!overlaps(placed, f, 1.0)) {
      placed.push_back(f);
      ok = true;
      return b;
    }
  }
  return b;
}

}  // namespace

Scene synth_scene(std::uint64_t seed, const SynthConfig& cfg, std::string id) {
  Rng rng(seed);
  Scene scene;
  scene.id = std::move(id);

  // Ground: range density ~ 1/r (uniform in r), so it thins out with distance.
  for (int i = 0; i < cfg.n_ground; ++i) {
    const double r = rng.uniform(2.0, cfg.ground_range);
    const double az = rng.uniform(-kPi, kPi);
    Point p;
    p.x = to_f32(r * std::cos(az));
    p.y = to_f32(r * std::sin(az));
    p.z = to_f32(rng.normal(0.0, cfg.ground_sigma));
    p.intensity = to_f32(std::clamp(rng.normal(0.1, 0.05), 0.0, 1.0));
    scene.cloud.push_back(p);
  }

  std::vector<Footprint> placed;
  for (int k = 0; k < kNumClasses; ++k) {
    const ClassPrior& prior = cfg.priors[k];
    const int count = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_per_class) + 1));
    for (int j = 0; j < count; ++j) {
      const double sigma = std::log1p(cfg.size_jitter) / 2.0;
      auto jitter = [&] {
        return std::exp(std::clamp(rng.normal(0.0, sigma), -std::log1p(cfg.size_jitter),
                                   std::log1p(cfg.size_jitter)));
      };
      const double w = prior.w * jitter();
      const double h = prior.h * jitter();
      const double l = prior.l * jitter();
      bool ok = false;
      const Box3D b = place_box(rng, cfg, w, h, l, placed, ok);
      if (!ok) continue;
      sample_surface(rng, b, points_for(cfg, b), prior.intensity, 0.08, scene.cloud);
      scene.gt_boxes.push_back(b);
      scene.gt_classes.push_back(kForegroundClasses[k]);
    }
  }

  const int n_clutter = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_clutter) + 1));
  for (int j = 0; j < n_clutter; ++j) {
    const double w = rng.uniform(0.3, 3.0);
    const double l = rng.uniform(0.3, 3.0);
    const double h = rng.uniform(0.4, 2.5);
    const double intensity = rng.uniform(0.05, 0.95);
    bool ok = false;
    const Box3D b = place_box(rng, cfg, w, h, l, placed, ok);
    if (!ok) continue;
    sample_surface(rng, b, points_for(cfg, b), intensity, 0.08, scene.cloud);
  }
  return scene;
}

// Labels ------------------------------------------------------------------------

std::string write_kitti_label(const Scene& scene) {
  std::string out;
  char line[256];
  for (std::size_t i = 0; i < scene.gt_boxes.size(); ++i) {
    const Box3D& b = scene.gt_boxes[i];
    const std::string_view name = class_name(scene.gt_classes[i]);
    std::snprintf(line, sizeof(line),
                  "%.*s 0.00 0 -1.00 -1.00 -1.00 -1.00 -1.00 %.2f %.2f %.2f %.2f %.2f %.2f %.2f\n",
                  static_cast<int>(name.size()), name.data(), b.h, b.w, b.l, b.cx, b.cy, b.cz, b.r);
    out += line;
  }
  return out;
}

std::vector<KittiObject> parse_kitti_label(std::string_view text) {
  std::vector<KittiObject> objects;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;

    std::vector<std::string_view> fields;
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
      std::size_t j = i;
      while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
      if (j > i) fields.push_back(line.substr(i, j - i));
      i = j;
    }
    if (fields.size() != 15)
      throw ParseError(line_no, "expected 15 fields, got " + std::to_string(fields.size()));

    KittiObject obj;
    if (fields[0] == "DontCare") {
      obj.dont_care = true;
    } else if (auto cls = class_from_name(fields[0])) {
      obj.cls = *cls;
    } else {
      throw ParseError(line_no, "unknown class '" + std::string(fields[0]) + "'");
    }
    std::array<double, 14> v{};
    for (std::size_t k = 1; k < 15; ++k) {
      const std::string_view f = fields[k];
      const auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v[k - 1]);
      if (ec != std::errc() || ptr != f.data() + f.size())
        throw ParseError(line_no, "field " + std::to_string(k + 1) + " is not numeric: '" +
                                      std::string(f) + "'");
    }
    obj.box = {v[10], v[11], v[12], v[8], v[7], v[9], v[13]};
    if (!obj.dont_care && !obj.box.valid())
      throw ParseError(line_no, "box dimensions must be positive");
    objects.push_back(obj);
  }
  return objects;
}

// Binary clouds ---------------------------------------------------------------------

std::string encode_bin_cloud(std::span<const Point> cloud) {
  std::string out;
  out.reserve(cloud.size() * 16);
  auto put = [&](double v) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  };
  for (const Point& p : cloud) {
    put(p.x);
    put(p.y);
    put(p.z);
    put(p.intensity);
  }
  return out;
}

PointCloud decode_bin_cloud(std::string_view bytes) {
  if (bytes.size() % 16 != 0)
    throw IoError("truncated point record at byte offset " +
                  std::to_string(bytes.size() - bytes.size() % 16));
  PointCloud cloud;
  cloud.reserve(bytes.size() / 16);
  auto get = [&](std::size_t off) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off + i])) << (8 * i);
    return static_cast<double>(std::bit_cast<float>(bits));
  };
  for (std::size_t off = 0; off < bytes.size(); off += 16)
    cloud.push_back({get(off), get(off + 4), get(off + 8), get(off + 12)});
  return cloud;
}

void write_bin_cloud(const std::filesystem::path& path, std::span<const Point> cloud) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  const std::string bytes = encode_bin_cloud(cloud);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

PointCloud read_bin_cloud(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_bin_cloud(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// Splits -------------------------------------------------------------------------

Split split_sample(std::size_t n_frames, const SplitSpec& spec) {
  if (!(spec.fraction > 0.0 && spec.fraction <= 1.0))
    throw std::invalid_argument("split fraction must be in (0, 1]");
  const auto floor_count =
      static_cast<std::size_t>(std::floor(spec.fraction * static_cast<double>(n_frames) + 1e-9));
  const std::size_t n_labeled = std::min(n_frames, std::max<std::size_t>(1, floor_count));

  std::vector<std::size_t> ids(n_frames);
  for (std::size_t i = 0; i < n_frames; ++i) ids[i] = i;
  Rng rng(mix_seed(spec.seed, 0x5b117));
  for (std::size_t i = 0; i < n_labeled; ++i) {
    const std::size_t j = i + rng.below(n_frames - i);
    std::swap(ids[i], ids[j]);
  }
  Split split;
  split.labeled.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_labeled));
  split.unlabeled.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_labeled), ids.end());
  std::sort(split.labeled.begin(), split.labeled.end());
  std::sort(split.unlabeled.begin(), split.unlabeled.end());
  return split;
}

// Dataset directory -------------------------------------------------------------------

std::string scene_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06zu", index);
  return buf;
}

void write_scene(const std::filesystem::path& root, const Scene& scene) {
  write_bin_cloud(root / "points" / (scene.id + ".bin"), scene.cloud);
  const std::filesystem::path label = root / "labels" / (scene.id + ".txt");
  std::ofstream f(label, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + label.string());
  f << write_kitti_label(scene);
}

Scene read_scene(const std::filesystem::path& root, const std::string& id) {
  Scene scene;
  scene.id = id;
  scene.cloud = read_bin_cloud(root / "points" / (id + ".bin"));
  const std::filesystem::path label = root / "labels" / (id + ".txt");
  std::ifstream f(label, std::ios::binary);
  if (!f) throw IoError("cannot read " + label.string());
  const std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    for (const KittiObject& o : parse_kitti_label(text)) {
      if (o.dont_care) continue;
      scene.gt_boxes.push_back(o.box);
      scene.gt_classes.push_back(o.cls);
    }
  } catch (const ParseError& e) {
    throw IoError(label.string() + ": " + e.what());
  }
  return scene;
}

void write_split_file(const std::filesystem::path& root, const std::string& name,
                      std::span<const std::string> ids) {
  const std::filesystem::path path = root / "splits" / (name + ".txt");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  for (const std::string& id : ids) f << id << '\n';
}

std::vector<std::string> read_split_file(const std::filesystem::path& root, const std::string& name) {
  const std::filesystem::path path = root / "splits" / (name + ".txt");
  std::ifstream f(path);
  if (!f) throw IoError("cannot read split " + path.string());
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) ids.push_back(line);
  }
  return ids;
}

}  // namespace chanssl
