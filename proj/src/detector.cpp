#include "chanssl/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "chanssl/errors.hpp"

namespace chanssl {

// Grids -----------------------------------------------------------------------

std::span<const VoxelGrid::Cell> VoxelGrid::column(int ix, int iy) const {
  if (ix < 0 || iy < 0 || ix >= nx || iy >= ny || column_start.empty()) return {};
  const std::size_t col = static_cast<std::size_t>(iy) * nx + ix;
  return std::span<const Cell>(cells).subspan(column_start[col],
                                              column_start[col + 1] - column_start[col]);
}

int VoxelGrid::count_at(int ix, int iy, int iz) const {
  for (const Cell& c : column(ix, iy))
    if (c.iz == iz) return c.count;
  return 0;
}

namespace {

VoxelGrid voxelize_impl(std::span<const Point> pc, const std::array<double, 3>& origin,
                        double voxel_size, int nx, int ny, int nz) {
  if (!(voxel_size > 0.0)) throw std::invalid_argument("voxelize: voxel_size must be > 0");
  VoxelGrid grid;
  grid.origin = origin;
  grid.voxel_size = voxel_size;
  grid.nx = nx;
  grid.ny = ny;
  grid.nz = nz;
  grid.column_start.assign(static_cast<std::size_t>(nx) * ny + 1, 0);

  struct Entry {
    std::uint64_t key;
    double z, intensity;
  };
  std::vector<Entry> entries;
  entries.reserve(pc.size());
  for (const Point& p : pc) {
    const double fx = std::floor((p.x - origin[0]) / voxel_size);
    const double fy = std::floor((p.y - origin[1]) / voxel_size);
    const double fz = std::floor((p.z - origin[2]) / voxel_size);
    if (!(fx >= 0 && fy >= 0 && fz >= 0 && fx < nx && fy < ny && fz < nz)) continue;
    const auto ix = static_cast<std::uint64_t>(fx);
    const auto iy = static_cast<std::uint64_t>(fy);
    const auto iz = static_cast<std::uint64_t>(fz);
    entries.push_back({(iy * nx + ix) * nz + iz, p.z, p.intensity});
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const Entry& a, const Entry& b) { return a.key < b.key; });

  for (std::size_t i = 0; i < entries.size();) {
    std::size_t j = i;
    double sum_z = 0.0, sum_i = 0.0;
    while (j < entries.size() && entries[j].key == entries[i].key) {
      sum_z += entries[j].z;
      sum_i += entries[j].intensity;
      ++j;
    }
    const std::uint64_t key = entries[i].key;
    const int count = static_cast<int>(j - i);
    VoxelGrid::Cell cell;
    cell.iz = static_cast<int>(key % nz);
    const std::uint64_t col = key / nz;
    cell.ix = static_cast<int>(col % nx);
    cell.iy = static_cast<int>(col / nx);
    cell.count = count;
    cell.mean_z = sum_z / count;
    cell.mean_intensity = sum_i / count;
    grid.cells.push_back(cell);
    ++grid.column_start[col + 1];
    i = j;
  }
  std::partial_sum(grid.column_start.begin(), grid.column_start.end(), grid.column_start.begin());
  return grid;
}

int cells_for(double extent, double voxel_size) {
  return static_cast<int>(std::lround(extent / voxel_size));
}

}  // namespace

VoxelGrid voxelize(std::span<const Point> pc, const DetectorConfig& cfg) {
  return voxelize_impl(pc, {-cfg.range, -cfg.range, cfg.z_min}, cfg.voxel_size,
                       cells_for(2.0 * cfg.range, cfg.voxel_size),
                       cells_for(2.0 * cfg.range, cfg.voxel_size),
                       cells_for(cfg.z_max - cfg.z_min, cfg.voxel_size));
}

VoxelGrid voxelize(std::span<const Point> pc, const std::array<double, 3>& origin,
                   double voxel_size, int nx, int ny, int nz) {
  return voxelize_impl(pc, origin, voxel_size, nx, ny, nz);
}

BevGrid to_bev(const VoxelGrid& grid) {
  BevGrid bev;
  bev.origin_x = grid.origin[0];
  bev.origin_y = grid.origin[1];
  bev.cell_size = grid.voxel_size;
  bev.nx = grid.nx;
  bev.ny = grid.ny;
  bev.features.assign(static_cast<std::size_t>(grid.nx) * grid.ny, BevGrid::Feature{0, 0, 0});
  if (grid.nz == 0) return bev;
  for (std::size_t col = 0; col + 1 < grid.column_start.size(); ++col) {
    const std::uint32_t begin = grid.column_start[col];
    const std::uint32_t end = grid.column_start[col + 1];
    if (begin == end) continue;
    BevGrid::Feature f{0.0, static_cast<double>(end - begin) / grid.nz,
                       -std::numeric_limits<double>::infinity()};
    for (std::uint32_t k = begin; k < end; ++k) {
      f[0] = std::max(f[0], static_cast<double>(grid.cells[k].count));
      f[2] = std::max(f[2], grid.cells[k].mean_z);
    }
    bev.features[col] = f;
  }
  return bev;
}

BevGrid::Feature BevGrid::sample(double x, double y) const {
  auto snap = [](double v) {
    const double r = std::round(v);
    return std::abs(v - r) < 1e-9 ? r : v;
  };
  const double fx = snap((x - origin_x) / cell_size - 0.5);
  const double fy = snap((y - origin_y) / cell_size - 0.5);
  const double x0 = std::floor(fx);
  const double y0 = std::floor(fy);
  const double tx = fx - x0;
  const double ty = fy - y0;
  Feature out{0.0, 0.0, 0.0};
  if (x0 < -1 || y0 < -1 || x0 >= nx || y0 >= ny) return out;
  const int ix = static_cast<int>(x0);
  const int iy = static_cast<int>(y0);
  const std::array<std::array<int, 2>, 4> nb{{{ix, iy}, {ix + 1, iy}, {ix, iy + 1}, {ix + 1, iy + 1}}};
  const std::array<double, 4> wt{(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty};
  for (std::size_t k = 0; k < 4; ++k) {
    if (wt[k] == 0.0) continue;
    const int cx = nb[k][0];
    const int cy = nb[k][1];
    if (cx < 0 || cy < 0 || cx >= nx || cy >= ny) continue;
    const Feature& f = at(cx, cy);
    for (int c = 0; c < kChannels; ++c) out[c] += wt[k] * f[c];
  }
  return out;
}

BevGrid bev_align(std::span<const BevGrid> grids, std::span<const Transform> transforms) {
  if (grids.empty() || grids.size() != transforms.size())
    throw std::invalid_argument("bev_align: need one transform per grid");
  BevGrid fused = grids.front();
  const Transform to_first = invert(transforms.front());
  for (std::size_t i = 1; i < grids.size(); ++i) {
    const BevGrid& g = grids[i];
    const Transform m = compose(transforms[i], to_first);
    if (m.is_identity() && g.nx == fused.nx && g.ny == fused.ny) {
      for (std::size_t k = 0; k < fused.features.size(); ++k)
        for (int c = 0; c < BevGrid::kChannels; ++c)
          fused.features[k][c] = std::max(fused.features[k][c], g.features[k][c]);
      continue;
    }
    const double cs = std::cos(m.theta) * m.s;
    const double sn = std::sin(m.theta) * m.s;
    const double fy = m.flip_y ? -1.0 : 1.0;
    for (int iy = 0; iy < fused.ny; ++iy) {
      const double y = fy * fused.center_y(iy);
      for (int ix = 0; ix < fused.nx; ++ix) {
        const double x = fused.center_x(ix);
        const BevGrid::Feature f = g.sample(cs * x - sn * y, sn * x + cs * y);
        BevGrid::Feature& out = fused.at(ix, iy);
        for (int c = 0; c < BevGrid::kChannels; ++c) out[c] = std::max(out[c], f[c]);
      }
    }
  }
  return fused;
}

// Features ------------------------------------------------------------------------

RoiFeature empty_roi_feature() {
  RoiFeature f{};
  f[kFeatureDim - 1] = 1.0;
  return f;
}

namespace {

struct Pca2 {
  double mean_x = 0, mean_y = 0;
  double angle = 0;  // major axis
};

Pca2 weighted_pca(std::span<const std::array<double, 3>> pts) {  // x, y, weight
  Pca2 out;
  double wsum = 0;
  for (const auto& p : pts) {
    out.mean_x += p[2] * p[0];
    out.mean_y += p[2] * p[1];
    wsum += p[2];
  }
  if (wsum <= 0) return out;
  out.mean_x /= wsum;
  out.mean_y /= wsum;
  double cxx = 0, cyy = 0, cxy = 0;
  for (const auto& p : pts) {
    const double dx = p[0] - out.mean_x;
    const double dy = p[1] - out.mean_y;
    cxx += p[2] * dx * dx;
    cyy += p[2] * dy * dy;
    cxy += p[2] * dx * dy;
  }
  out.angle = 0.5 * std::atan2(2.0 * cxy, cxx - cyy);
  return out;
}

struct Spans {
  double major_lo, major_hi, minor_lo, minor_hi;
};

Spans project(std::span<const std::array<double, 3>> pts, double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  Spans sp{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
           std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const auto& p : pts) {
    const double u = c * p[0] + s * p[1];
    const double v = -s * p[0] + c * p[1];
    sp.major_lo = std::min(sp.major_lo, u);
    sp.major_hi = std::max(sp.major_hi, u);
    sp.minor_lo = std::min(sp.minor_lo, v);
    sp.minor_hi = std::max(sp.minor_hi, v);
  }
  return sp;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double dot(std::span<const double, kFeatureDim> w, const RoiFeature& phi) {
  double s = 0.0;
  for (int j = 0; j < kFeatureDim; ++j) s += w[j] * phi[j];
  return s;
}

}  // namespace

RoiFeature roi_features(const Box3D& proposal, const VoxelGrid& grid, const Transform& t,
                        const DetectorConfig& cfg) {
  const Box3D b = apply_box(t, proposal);
  Box3D be = b;
  be.w *= cfg.roi_enlarge;
  be.l *= cfg.roi_enlarge;
  be.h *= cfg.roi_enlarge;
  if (grid.nx == 0 || grid.cells.empty()) return empty_roi_feature();

  double min_x = std::numeric_limits<double>::infinity(), min_y = min_x;
  double max_x = -min_x, max_y = -min_x;
  for (const auto& c : bev_corners(be)) {
    min_x = std::min(min_x, c[0]);
    min_y = std::min(min_y, c[1]);
    max_x = std::max(max_x, c[0]);
    max_y = std::max(max_y, c[1]);
  }
  const double vs = grid.voxel_size;
  const int ix0 = std::max(0, static_cast<int>(std::floor((min_x - grid.origin[0]) / vs)));
  const int iy0 = std::max(0, static_cast<int>(std::floor((min_y - grid.origin[1]) / vs)));
  const int ix1 = std::min(grid.nx - 1, static_cast<int>(std::floor((max_x - grid.origin[0]) / vs)));
  const int iy1 = std::min(grid.ny - 1, static_cast<int>(std::floor((max_y - grid.origin[1]) / vs)));

  double n = 0, sum_z = 0, sum_zz = 0, sum_i = 0;
  double z_lo = std::numeric_limits<double>::infinity(), z_hi = -z_lo;
  int columns = 0;
  std::vector<std::array<double, 3>> xyw;
  for (int iy = iy0; iy <= iy1; ++iy) {
    for (int ix = ix0; ix <= ix1; ++ix) {
      bool any = false;
      const double x = grid.center_x(ix);
      const double y = grid.center_y(iy);
      for (const VoxelGrid::Cell& c : grid.column(ix, iy)) {
        if (!point_in_box(be, x, y, c.mean_z)) continue;
        any = true;
        const double w = c.count;
        n += w;
        sum_z += w * c.mean_z;
        sum_zz += w * c.mean_z * c.mean_z;
        sum_i += w * c.mean_intensity;
        z_lo = std::min(z_lo, c.mean_z);
        z_hi = std::max(z_hi, c.mean_z);
        xyw.push_back({x, y, w});
      }
      columns += any ? 1 : 0;
    }
  }
  if (n <= 0) return empty_roi_feature();

  const Pca2 pca = weighted_pca(xyw);
  const Spans sp = project(xyw, pca.angle);
  double major = sp.major_hi - sp.major_lo + vs;
  double minor = sp.minor_hi - sp.minor_lo + vs;
  if (minor > major) std::swap(major, minor);
  const double area = be.w * be.l;
  const double mean_z = sum_z / n;

  RoiFeature f{};
  f[0] = std::log1p(n);
  f[1] = std::min(1.0, columns / std::max(1.0, area / (vs * vs)));
  f[2] = mean_z;
  f[3] = std::sqrt(std::max(0.0, sum_zz / n - mean_z * mean_z));
  f[4] = major;
  f[5] = minor;
  f[6] = z_hi - z_lo;
  f[7] = sum_i / n;
  f[8] = std::hypot(b.cx, b.cy) / 100.0;
  f[9] = std::min(5.0, major / std::max(minor, vs));
  f[10] = n / area / 100.0;
  f[11] = 1.0;
  return f;
}

// Params ------------------------------------------------------------------------

std::span<const double, kFeatureDim> DetectorParams::cls_row(int k) const {
  return std::span<const double, kFeatureDim>(values.data() + k * kFeatureDim, kFeatureDim);
}
std::span<double, kFeatureDim> DetectorParams::cls_row(int k) {
  return std::span<double, kFeatureDim>(values.data() + k * kFeatureDim, kFeatureDim);
}
std::span<const double, kFeatureDim> DetectorParams::obj_row(int cls) const {
  return std::span<const double, kFeatureDim>(values.data() + kClsSize + (cls - 1) * kFeatureDim,
                                              kFeatureDim);
}
std::span<double, kFeatureDim> DetectorParams::obj_row(int cls) {
  return std::span<double, kFeatureDim>(values.data() + kClsSize + (cls - 1) * kFeatureDim,
                                        kFeatureDim);
}
std::span<const double, kFeatureDim> DetectorParams::reg_row(int cls, int k) const {
  const std::size_t off = kClsSize + kObjSize + ((cls - 1) * kResidualDim + k) * kFeatureDim;
  return std::span<const double, kFeatureDim>(values.data() + off, kFeatureDim);
}
std::span<double, kFeatureDim> DetectorParams::reg_row(int cls, int k) {
  const std::size_t off = kClsSize + kObjSize + ((cls - 1) * kResidualDim + k) * kFeatureDim;
  return std::span<double, kFeatureDim>(values.data() + off, kFeatureDim);
}

bool DetectorParams::finite() const {
  return std::isfinite(learning_rate) &&
         std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

std::array<double, kNumClasses + 1> classify(const DetectorParams& params, const RoiFeature& phi) {
  std::array<double, kNumClasses + 1> z{};
  for (int k = 0; k <= kNumClasses; ++k) z[k] = dot(params.cls_row(k), phi);
  const double zmax = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - zmax);
    sum += v;
  }
  for (double& v : z) v /= sum;
  return z;
}

Residual regress(const DetectorParams& params, int cls, const RoiFeature& phi) {
  Residual r{};
  for (int k = 0; k < kResidualDim; ++k) r[k] = dot(params.reg_row(cls, k), phi);
  return r;
}

double objectness(const DetectorParams& params, int cls, const RoiFeature& phi) {
  return sigmoid(dot(params.obj_row(cls), phi));
}

namespace {

int top_foreground(const std::array<double, kNumClasses + 1>& scores) {
  int best = 1;
  for (int k = 2; k <= kNumClasses; ++k)
    if (scores[k] > scores[best]) best = k;
  return best;
}

int argmax_all(const std::array<double, kNumClasses + 1>& scores) {
  return static_cast<int>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

}  // namespace

ObjectClass Proposal::top_class() const { return static_cast<ObjectClass>(top_foreground(class_scores)); }
double Proposal::top_score() const { return class_scores[top_foreground(class_scores)]; }
ObjectClass Detection::top_class() const { return static_cast<ObjectClass>(top_foreground(class_scores)); }
double Detection::p_hat() const { return class_scores[top_foreground(class_scores)]; }

// Proposals -----------------------------------------------------------------------

std::vector<Proposal> propose(const BevGrid& fused, const VoxelGrid& channel1,
                              const DetectorParams& params, const DetectorConfig& cfg) {
  const int nx = fused.nx;
  const int ny = fused.ny;
  std::vector<char> visited(static_cast<std::size_t>(nx) * ny, 0);
  auto occupied = [&](int ix, int iy) { return fused.at(ix, iy)[0] >= cfg.min_occ; };

  std::vector<Proposal> proposals;
  std::vector<ScoredBox> scored;
  std::vector<std::array<int, 2>> stack;
  std::vector<std::array<int, 2>> members;
  for (int sy = 0; sy < ny; ++sy) {
    for (int sx = 0; sx < nx; ++sx) {
      const std::size_t sidx = static_cast<std::size_t>(sy) * nx + sx;
      if (visited[sidx] || !occupied(sx, sy)) continue;
      members.clear();
      stack.assign(1, {sx, sy});
      visited[sidx] = 1;
      while (!stack.empty()) {
        const auto [cx, cy] = stack.back();
        stack.pop_back();
        members.push_back({cx, cy});
        for (int dy = -cfg.link_radius; dy <= cfg.link_radius; ++dy) {
          for (int dx = -cfg.link_radius; dx <= cfg.link_radius; ++dx) {
            const int x = cx + dx;
            const int y = cy + dy;
            if (x < 0 || y < 0 || x >= nx || y >= ny) continue;
            const std::size_t idx = static_cast<std::size_t>(y) * nx + x;
            if (visited[idx] || !occupied(x, y)) continue;
            visited[idx] = 1;
            stack.push_back({x, y});
          }
        }
      }
      if (static_cast<int>(members.size()) < cfg.min_cells) continue;

      std::vector<std::array<double, 3>> pts;
      pts.reserve(members.size());
      double top = -std::numeric_limits<double>::infinity();
      for (const auto& [mx, my] : members) {
        pts.push_back({fused.center_x(mx), fused.center_y(my), 1.0});
        top = std::max(top, fused.at(mx, my)[2]);
      }
      const Pca2 pca = weighted_pca(pts);
      const Spans sp = project(pts, pca.angle);
      const double c = std::cos(pca.angle);
      const double s = std::sin(pca.angle);
      const double cell_half = 0.5 * fused.cell_size * (std::abs(c) + std::abs(s));
      const double mid_u = 0.5 * (sp.major_lo + sp.major_hi);
      const double mid_v = 0.5 * (sp.minor_lo + sp.minor_hi);

      Box3D box;
      box.l = sp.major_hi - sp.major_lo + 2.0 * cell_half + cfg.padding;
      box.w = sp.minor_hi - sp.minor_lo + 2.0 * cell_half + cfg.padding;
      box.cx = c * mid_u - s * mid_v;
      box.cy = s * mid_u + c * mid_v;
      box.h = std::max(top - cfg.z_min, cfg.voxel_size);
      box.cz = cfg.z_min + 0.5 * box.h;
      box.r = normalize_angle(pca.angle);

      Proposal p;
      p.box = box;
      p.feature = roi_features(box, channel1, Transform::identity(), cfg);
      p.class_scores = classify(params, p.feature);
      scored.push_back({box, 1.0 - p.class_scores[0]});
      proposals.push_back(p);
    }
  }
  std::vector<Proposal> kept;
  for (std::size_t i : nms(scored, cfg.proposal_nms_iou)) kept.push_back(proposals[i]);
  return kept;
}

// Forward / refine ----------------------------------------------------------------

ForwardPass forward(const ChannelSet& channels, const DetectorParams& params,
                    const DetectorConfig& cfg) {
  ForwardPass pass;
  pass.transforms = channels.transforms;
  const std::size_t n_ch = channels.size();
  std::vector<BevGrid> bevs;
  pass.grids.reserve(n_ch);
  bevs.reserve(n_ch);
  for (const PointCloud& pc : channels.scenes) {
    pass.grids.push_back(voxelize(pc, cfg));
    bevs.push_back(to_bev(pass.grids.back()));
  }
  const BevGrid fused = bev_align(bevs, pass.transforms);
  pass.proposals = propose(fused, pass.grids.front(), params, cfg);

  const Transform to_first = invert(pass.transforms.front());
  std::vector<Transform> maps(n_ch, Transform::identity());
  for (std::size_t i = 1; i < n_ch; ++i) maps[i] = compose(pass.transforms[i], to_first);

  for (const Proposal& p : pass.proposals) {
    std::vector<RoiFeature> feats;
    std::vector<Box3D> anchors;
    for (std::size_t i = 0; i < n_ch; ++i) {
      anchors.push_back(apply_box(maps[i], p.box));
      feats.push_back(i == 0 ? p.feature : roi_features(p.box, pass.grids[i], maps[i], cfg));
    }
    pass.features.push_back(std::move(feats));
    pass.anchors.push_back(std::move(anchors));
  }
  return pass;
}

std::vector<Detection> refine(const ForwardPass& pass, const DetectorParams& params) {
  std::vector<Detection> out;
  out.reserve(pass.proposals.size());
  std::vector<Transform> back;
  for (const Transform& t : pass.transforms) back.push_back(invert(t));
  for (std::size_t p = 0; p < pass.proposals.size(); ++p) {
    const Proposal& prop = pass.proposals[p];
    const int cls = top_foreground(prop.class_scores);
    Detection det;
    det.class_scores = prop.class_scores;
    double obj_sum = 0.0;
    for (std::size_t i = 0; i < pass.transforms.size(); ++i) {
      const RoiFeature& phi = pass.features[p][i];
      const Box3D box = decode_residual(regress(params, cls, phi), pass.anchors[p][i]);
      det.per_channel_boxes.push_back(apply_box(back[i], box));
      const double o = objectness(params, cls, phi);
      det.per_channel_objectness.push_back(o);
      obj_sum += o;
    }
    det.box = average_boxes(det.per_channel_boxes);
    det.objectness = obj_sum / static_cast<double>(pass.transforms.size());
    out.push_back(std::move(det));
  }
  return out;
}

std::vector<Detection> refine(std::span<const Proposal> proposals, std::span<const VoxelGrid> grids,
                              std::span<const Transform> transforms, const DetectorParams& params,
                              const DetectorConfig& cfg) {
  if (grids.size() != transforms.size() || grids.empty())
    throw std::invalid_argument("refine: need one transform per grid");
  ForwardPass pass;
  pass.transforms.assign(transforms.begin(), transforms.end());
  pass.proposals.assign(proposals.begin(), proposals.end());
  const Transform to_first = invert(transforms.front());
  for (const Proposal& p : proposals) {
    std::vector<RoiFeature> feats;
    std::vector<Box3D> anchors;
    for (std::size_t i = 0; i < transforms.size(); ++i) {
      const Transform m = i == 0 ? Transform::identity() : compose(transforms[i], to_first);
      anchors.push_back(apply_box(m, p.box));
      feats.push_back(roi_features(p.box, grids[i], m, cfg));
    }
    pass.features.push_back(std::move(feats));
    pass.anchors.push_back(std::move(anchors));
  }
  return refine(pass, params);
}

std::vector<Detection> detect(std::span<const Point> pc, const ChannelPolicy& policy,
                              const DetectorParams& params, const DetectorConfig& cfg,
                              std::uint64_t seed) {
  if (pc.empty()) return {};
  const ChannelSet channels = make_channels(pc, policy, seed);
  std::vector<Detection> dets = refine(forward(channels, params, cfg), params);
  std::vector<ScoredBox> scored;
  scored.reserve(dets.size());
  for (const Detection& d : dets) scored.push_back({d.box, d.confidence()});
  std::vector<Detection> kept;
  for (std::size_t i : nms(scored, cfg.final_nms_iou)) kept.push_back(std::move(dets[i]));
  return kept;
}

// Training ------------------------------------------------------------------------

std::vector<TrainSample> build_train_samples(const ForwardPass& pass, const TargetSet& targets,
                                             const DetectorConfig& cfg,
                                             bool head_requires_class_match) {
  const std::size_t n_ch = pass.transforms.size();
  const std::vector<Box3D> first = apply_boxes(pass.transforms.front(), targets.boxes);
  std::vector<TrainSample> samples;
  for (std::size_t p = 0; p < pass.proposals.size(); ++p) {
    const Box3D& anchor = pass.proposals[p].box;
    double best = 0.0;
    std::size_t best_idx = 0;
    for (std::size_t t = 0; t < first.size(); ++t) {
      const double iou = iou_bev(anchor, first[t]);
      if (iou > best) {
        best = iou;
        best_idx = t;
      }
    }
    TrainSample s;
    s.cls_feature = pass.proposals[p].feature;
    s.channel_features = pass.features[p];
    s.channel_anchors = pass.anchors[p];
    s.head_requires_class_match = head_requires_class_match;
    if (best >= cfg.fg_iou) {
      s.weight = targets.weights.empty() ? 1.0 : targets.weights[best_idx];
      if (s.weight <= 0.0) continue;
      s.label = class_index(targets.classes[best_idx]);
      for (std::size_t i = 0; i < n_ch; ++i) {
        const Box3D tb = apply_box(pass.transforms[i], targets.boxes[best_idx]);
        s.channel_targets.push_back(align_yaw_to(tb, s.channel_anchors[i].r));
      }
    } else if (best < cfg.bg_iou) {
      s.label = 0;
      s.weight = 1.0;
    } else {
      continue;
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

void prepare_objectness_targets(const DetectorParams& params, std::span<TrainSample> batch) {
  for (TrainSample& s : batch) {
    const std::size_t n_ch = s.channel_features.size();
    s.objectness_targets.assign(n_ch, 0.0);
    if (s.label == 0) continue;
    for (std::size_t i = 0; i < n_ch; ++i) {
      const Box3D pred = decode_residual(regress(params, s.label, s.channel_features[i]),
                                         s.channel_anchors[i]);
      s.objectness_targets[i] = iou_3d(pred, s.channel_targets[i]);
    }
  }
}

namespace {

Losses accumulate(const DetectorParams& params, std::span<const TrainSample> batch,
                  std::vector<double>* grad) {
  Losses losses;
  if (grad) grad->assign(DetectorParams::kTotalSize, 0.0);
  if (batch.empty()) return losses;
  const double inv_n = 1.0 / static_cast<double>(batch.size());

  for (const TrainSample& s : batch) {
    if (s.weight == 0.0) continue;
    const double w = s.weight * inv_n;

    const auto probs = classify(params, s.cls_feature);
    losses.cls += -w * std::log(std::max(probs[s.label], 1e-300));
    if (grad) {
      for (int k = 0; k <= kNumClasses; ++k) {
        const double g = w * (probs[k] - (k == s.label ? 1.0 : 0.0));
        double* row = grad->data() + k * kFeatureDim;
        for (int j = 0; j < kFeatureDim; ++j) row[j] += g * s.cls_feature[j];
      }
    }

    if (s.head_requires_class_match && argmax_all(probs) != s.label) continue;
    const std::size_t n_ch = s.channel_features.size();
    if (n_ch == 0) continue;
    const double wc = w / static_cast<double>(n_ch);
    const int obj_cls = s.label > 0 ? s.label : top_foreground(probs);

    for (std::size_t i = 0; i < n_ch; ++i) {
      const RoiFeature& phi = s.channel_features[i];

      const double target = s.objectness_targets.empty() ? 0.0 : s.objectness_targets[i];
      const double o = objectness(params, obj_cls, phi);
      losses.obj += wc * (o - target) * (o - target);
      if (grad) {
        const double g = wc * 2.0 * (o - target) * o * (1.0 - o);
        double* row = grad->data() + DetectorParams::kClsSize + (obj_cls - 1) * kFeatureDim;
        for (int j = 0; j < kFeatureDim; ++j) row[j] += g * phi[j];
      }

      if (s.label == 0) continue;
      const Residual pred = regress(params, s.label, phi);
      const Residual tgt = encode_residual(s.channel_targets[i], s.channel_anchors[i]);
      for (int k = 0; k < kResidualDim; ++k) {
        const double d = pred[k] - tgt[k];
        const double ad = std::abs(d);
        losses.reg += wc * (ad < 1.0 ? 0.5 * d * d : ad - 0.5);
        if (grad) {
          const double g = wc * (ad < 1.0 ? d : (d > 0 ? 1.0 : -1.0));
          double* row = grad->data() + DetectorParams::kClsSize + DetectorParams::kObjSize +
                        ((s.label - 1) * kResidualDim + k) * kFeatureDim;
          for (int j = 0; j < kFeatureDim; ++j) row[j] += g * phi[j];
        }
      }
    }
  }
  return losses;
}

}  // namespace

Losses compute_losses(const DetectorParams& params, std::span<const TrainSample> batch) {
  return accumulate(params, batch, nullptr);
}

Losses loss_and_gradient(const DetectorParams& params, std::span<const TrainSample> batch,
                         std::vector<double>& grad) {
  return accumulate(params, batch, &grad);
}

namespace {

void check_weights(std::span<const TrainSample> batch) {
  for (const TrainSample& s : batch)
    if (!(s.weight >= 0.0 && s.weight <= 1.0))
      throw std::invalid_argument("train_step: sample weight outside [0, 1]");
}

}  // namespace

Losses train_step(DetectorParams& params, std::span<TrainSample> batch) {
  return train_step(params, batch, {}).labeled;
}

JointLosses train_step(DetectorParams& params, std::span<TrainSample> labeled,
                       std::span<TrainSample> unlabeled) {
  check_weights(labeled);
  check_weights(unlabeled);
  prepare_objectness_targets(params, labeled);
  prepare_objectness_targets(params, unlabeled);
  std::vector<double> grad, grad_u;
  JointLosses losses;
  losses.labeled = loss_and_gradient(params, labeled, grad);
  losses.unlabeled = loss_and_gradient(params, unlabeled, grad_u);
  if (!std::isfinite(losses.labeled.total() + losses.unlabeled.total()))
    throw NonFiniteLossError("train_step: non-finite loss");
  for (std::size_t k = 0; k < grad.size(); ++k)
    params.values[k] -= params.learning_rate * (grad[k] + grad_u[k]);
  return losses;
}

}  // namespace chanssl
