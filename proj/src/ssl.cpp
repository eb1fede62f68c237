#include "chanssl/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "chanssl/errors.hpp"
#include "chanssl/parallel.hpp"
#include "chanssl/rng.hpp"

namespace chanssl {

namespace {

// Stream ids for mix_seed.
constexpr std::uint64_t kScheduleStream = 0x5c4ed;
constexpr std::uint64_t kStudentStream = 0x57d;
constexpr std::uint64_t kLabeledStream = 0x1ab;
constexpr std::uint64_t kShuffleStream = 0x5f1e;
constexpr std::uint64_t kPretrainStream = 0x9e7;

double median_sorted(const std::vector<double>& v) {
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Losses& operator+=(Losses& a, const Losses& b) {
  a.cls += b.cls;
  a.reg += b.reg;
  a.obj += b.obj;
  return a;
}

Losses mean_of(const Losses& sum, std::size_t n) {
  if (n == 0) return {};
  const double k = 1.0 / static_cast<double>(n);
  return {sum.cls * k, sum.reg * k, sum.obj * k};
}

TargetSet gt_targets(const Scene& scene) {
  return {scene.gt_boxes, scene.gt_classes, std::vector<double>(scene.gt_boxes.size(), 1.0)};
}

std::vector<TrainSample> make_batch(const DetectorParams& params, std::span<const Point> cloud,
                                    const TargetSet& targets, const ChannelPolicy& policy,
                                    const DetectorConfig& cfg, std::uint64_t seed,
                                    bool class_match) {
  if (cloud.empty()) return {};
  const ChannelSet channels = make_channels(cloud, policy, seed);
  const ForwardPass pass = forward(channels, params, cfg);
  return build_train_samples(pass, targets, cfg, class_match);
}

JointLosses joint_step(DetectorParams& params, std::vector<TrainSample>& labeled,
                       std::vector<TrainSample>& unlabeled, const std::string& scene_ids) {
  try {
    return train_step(params, labeled, unlabeled);
  } catch (const NonFiniteLossError& e) {
    throw NonFiniteLossError("scene " + scene_ids + ": " + e.what());
  }
}

// Teacher output for one unlabeled scene.
struct TeacherView {
  std::vector<PseudoBox> boxes;
  std::uint64_t channel_evals = 0;
  std::uint64_t pairing_evals = 0;
};

TeacherView teacher_view(const Scene& scene, const DetectorParams& teacher, const SslConfig& cfg) {
  TeacherView view;
  const std::vector<Detection> dets =
      detect(scene.cloud, cfg.teacher_policy, teacher, cfg.detector, 0);
  IouCounter channel_counter;
  for (const Detection& d : dets) view.boxes.push_back(make_pseudo_box(d, &channel_counter));
  view.channel_evals = channel_counter.value();

  // Pairing comparator on the same detections: channel-1 boxes vs channel-2 boxes.
  if (cfg.teacher_policy.n_channels >= 2) {
    std::vector<Box3D> first, second;
    for (const Detection& d : dets) {
      first.push_back(d.per_channel_boxes[0]);
      second.push_back(d.per_channel_boxes[1]);
    }
    IouCounter pairing_counter;
    hssda_iou_consistency(first, second, &pairing_counter);
    view.pairing_evals = pairing_counter.value();
  }
  return view;
}

}  // namespace

std::string_view level_name(Level level) {
  switch (level) {
    case Level::High: return "high";
    case Level::Ambiguous: return "ambiguous";
    case Level::Low: return "low";
  }
  return "unknown";
}

bool DualThresholds::valid() const {
  for (int c = 0; c < kNumCriteria; ++c) {
    if (!(low[c] >= 0.0 && low[c] <= high[c] && high[c] <= 1.0)) return false;
  }
  return true;
}

double channel_iou_consistency(std::span<const Box3D> channel_boxes, IouCounter* counter) {
  const std::size_t n = channel_boxes.size();
  if (n < 2) return 1.0;
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      sum += iou_3d(channel_boxes[i], channel_boxes[j]);
      ++pairs;
    }
  }
  if (counter) counter->add(pairs);
  return sum / static_cast<double>(pairs);
}

double channel_iou_consistency(const Detection& det, IouCounter* counter) {
  return channel_iou_consistency(det.per_channel_boxes, counter);
}

std::vector<double> hssda_iou_consistency(std::span<const Box3D> a, std::span<const Box3D> b,
                                          IouCounter* counter) {
  std::vector<double> scores(a.size(), 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (const Box3D& other : b) scores[i] = std::max(scores[i], iou_3d(a[i], other));
  }
  if (counter) counter->add(static_cast<std::uint64_t>(a.size()) * b.size());
  return scores;
}

Clusters1D kmeans3_1d(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("kmeans3_1d: empty input");
  std::vector<double> x(values.begin(), values.end());
  std::sort(x.begin(), x.end());
  const std::size_t n = x.size();

  Clusters1D out;
  std::size_t distinct = 1;
  for (std::size_t i = 1; i < n; ++i) distinct += x[i] != x[i - 1] ? 1 : 0;
  if (distinct < 3) {
    const double m = median_sorted(x);
    out.centers = {m, m, m};
    out.sizes = {n, 0, 0};
    out.degenerate = true;
    for (double v : x) out.sse += (v - m) * (v - m);
    return out;
  }

  std::vector<double> s1(n + 1, 0.0), s2(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    s1[i + 1] = s1[i] + x[i];
    s2[i + 1] = s2[i] + x[i] * x[i];
  }
  // SSE of x[i, j).
  auto cost = [&](std::size_t i, std::size_t j) {
    const double sum = s1[j] - s1[i];
    return std::max(0.0, (s2[j] - s2[i]) - sum * sum / static_cast<double>(j - i));
  };

  double best = std::numeric_limits<double>::infinity();
  std::size_t best_a = 1, best_b = 2;
  for (std::size_t a = 1; a + 1 < n; ++a) {
    const double head = cost(0, a);
    for (std::size_t b = a + 1; b < n; ++b) {
      const double total = head + cost(a, b) + cost(b, n);
      if (total < best) {
        best = total;
        best_a = a;
        best_b = b;
      }
    }
  }

  const std::array<std::size_t, 4> cuts{0, best_a, best_b, n};
  for (int k = 0; k < 3; ++k) {
    const std::size_t lo = cuts[k], hi = cuts[k + 1];
    out.sizes[k] = hi - lo;
    out.centers[k] = (s1[hi] - s1[lo]) / static_cast<double>(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) out.sse += (x[i] - out.centers[k]) * (x[i] - out.centers[k]);
  }
  return out;
}

DualThresholds fit_dual_thresholds(std::span<const PseudoBox> boxes) {
  if (boxes.empty()) throw std::invalid_argument("fit_dual_thresholds: no boxes");
  DualThresholds thr;
  for (int c = 0; c < kNumCriteria; ++c) {
    std::vector<double> v;
    v.reserve(boxes.size());
    for (const PseudoBox& b : boxes) v.push_back(b.scores()[c]);
    const Clusters1D k = kmeans3_1d(v);
    thr.degenerate[c] = k.degenerate;
    thr.low[c] = 0.5 * (k.centers[0] + k.centers[1]);
    thr.high[c] = 0.5 * (k.centers[1] + k.centers[2]);
  }
  return thr;
}

std::optional<DualThresholds> fit_dual_thresholds_confident(std::span<const PseudoBox> boxes,
                                                            double min_confidence) {
  std::vector<PseudoBox> confident;
  for (const PseudoBox& b : boxes)
    if (b.p_hat * b.o_hat >= min_confidence) confident.push_back(b);
  if (confident.size() < 3) return std::nullopt;
  return fit_dual_thresholds(confident);
}

Level assign_level(const std::array<double, kNumCriteria>& scores, const DualThresholds& thr) {
  bool all_high = true;
  for (int c = 0; c < kNumCriteria; ++c) {
    if (scores[c] < thr.low[c]) return Level::Low;
    all_high = all_high && scores[c] >= thr.high[c];
  }
  return all_high ? Level::High : Level::Ambiguous;
}

double level_weight(Level level, double p_hat, double o_hat) {
  switch (level) {
    case Level::High: return 1.0;
    case Level::Ambiguous: return p_hat * o_hat;
    case Level::Low: return 0.0;
  }
  return 0.0;
}

std::vector<PseudoBox> stratify(std::vector<PseudoBox> boxes, const DualThresholds& thr) {
  if (!thr.valid()) throw std::invalid_argument("stratify: invalid thresholds");
  for (PseudoBox& b : boxes) {
    b.level = assign_level(b.scores(), thr);
    b.weight = level_weight(b.level, b.p_hat, b.o_hat);
  }
  return boxes;
}

PointCloud remove_low_level_points(std::span<const Point> cloud, std::span<const Box3D> low_boxes) {
  PointCloud out;
  out.reserve(cloud.size());
  for (const Point& p : cloud) {
    const bool inside = std::any_of(low_boxes.begin(), low_boxes.end(),
                                    [&](const Box3D& b) { return point_in_box(b, p.x, p.y, p.z); });
    if (!inside) out.push_back(p);
  }
  return out;
}

PseudoBox make_pseudo_box(const Detection& det, IouCounter* counter) {
  PseudoBox pb;
  pb.box = det.box;
  pb.cls = det.top_class();
  pb.p_hat = std::clamp(det.p_hat(), 0.0, 1.0);
  pb.o_hat = std::clamp(det.objectness, 0.0, 1.0);
  pb.iou_cons = std::clamp(channel_iou_consistency(det, counter), 0.0, 1.0);
  return pb;
}

void ema_update(EmaTeacher& teacher, const DetectorParams& student) {
  if (teacher.params.values.size() != student.values.size())
    throw ModelCompatibilityError("ema_update: teacher and student shapes differ");
  const double m = teacher.momentum;
  for (std::size_t i = 0; i < student.values.size(); ++i)
    teacher.params.values[i] = m * teacher.params.values[i] + (1.0 - m) * student.values[i];
}

SslState init_ssl_state(const DetectorParams& pretrained, double momentum) {
  SslState state;
  state.student = pretrained;
  state.teacher.params = pretrained;
  state.teacher.momentum = momentum;
  return state;
}

std::vector<EvalBox> to_eval_boxes(std::span<const Detection> dets) {
  std::vector<EvalBox> out;
  out.reserve(dets.size());
  for (const Detection& d : dets) out.push_back({d.box, d.top_class(), d.confidence()});
  return out;
}

EvalResult evaluate_detector(const DetectorParams& params, std::span<const Scene> scenes,
                             const ChannelPolicy& policy, const DetectorConfig& det_cfg,
                             const EvalConfig& eval_cfg, int threads) {
  std::vector<std::vector<EvalBox>> dets(scenes.size());
  parallel_for(scenes.size(), threads, [&](std::size_t i) {
    dets[i] = to_eval_boxes(detect(scenes[i].cloud, policy, params, det_cfg, 0));
  });
  return evaluate(dets, scenes, eval_cfg);
}

Losses supervised_epoch(DetectorParams& params, std::span<const Scene> scenes,
                        const ChannelPolicy& policy, const DetectorConfig& det_cfg,
                        std::uint64_t seed, int epoch) {
  const std::uint64_t epoch_seed = mix_seed(mix_seed(seed, kPretrainStream), epoch);
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(epoch_seed);
  rng.shuffle(order.begin(), order.end());

  Losses sum;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const Scene& s = scenes[order[k]];
    std::vector<TrainSample> batch =
        make_batch(params, s.cloud, gt_targets(s), policy, det_cfg, mix_seed(epoch_seed, k + 1), false);
    std::vector<TrainSample> none;
    sum += joint_step(params, batch, none, s.id).labeled;
  }
  return mean_of(sum, order.size());
}

std::vector<Losses> pretrain(DetectorParams& params, std::span<const Scene> scenes,
                             const ChannelPolicy& policy, const DetectorConfig& det_cfg,
                             const PretrainConfig& cfg, std::uint64_t seed) {
  std::vector<Losses> history;
  for (int e = 0; e < cfg.epochs; ++e) {
    params.learning_rate =
        cfg.learning_rate * 0.5 * (1.0 + std::cos(kPi * e / static_cast<double>(cfg.epochs)));
    history.push_back(supervised_epoch(params, scenes, policy, det_cfg, seed, e));
  }
  params.learning_rate = cfg.learning_rate;
  return history;
}

EpochMetrics ssl_epoch(SslState& state, std::span<const Scene> labeled,
                       std::span<const Scene> unlabeled, std::span<const Scene> validation,
                       const SslConfig& cfg) {
  EpochMetrics m;
  m.epoch = state.epoch + 1;
  const std::uint64_t epoch_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(state.epoch));

  // Teacher inference with the epoch-start parameters; read-only, so scenes
  // run in parallel into fixed slots.
  std::vector<TeacherView> views(unlabeled.size());
  parallel_for(unlabeled.size(), cfg.threads, [&](std::size_t i) {
    views[i] = teacher_view(unlabeled[i], state.teacher.params, cfg);
  });
  for (const TeacherView& v : views) {
    m.channel_iou_evals += v.channel_evals;
    m.pairing_iou_evals += v.pairing_evals;
  }

  const bool due = cfg.threshold_period > 0 && state.epoch % cfg.threshold_period == 0;
  if (!unlabeled.empty() && (due || !state.thresholds)) {
    std::vector<PseudoBox> all;
    for (const TeacherView& v : views) all.insert(all.end(), v.boxes.begin(), v.boxes.end());
    if (auto fitted = fit_dual_thresholds_confident(all, cfg.confident_min)) {
      state.thresholds = *fitted;
      m.thresholds_refit = true;
    }
  }
  const DualThresholds thresholds = state.thresholds.value_or(DualThresholds{
      {0.3, 0.3, 0.3}, {0.7, 0.7, 0.7}, {false, false, false}});
  m.thresholds = thresholds;

  // Every student step sums a labeled and an unlabeled batch. An epoch is one
  // pass over the unlabeled scenes; labeled scenes are cycled in reshuffled
  // passes. Without unlabeled scenes it is one supervised pass.
  const std::size_t n_steps = unlabeled.empty() ? labeled.size() : unlabeled.size();
  std::vector<std::size_t> unlabeled_order(unlabeled.size());
  std::iota(unlabeled_order.begin(), unlabeled_order.end(), std::size_t{0});
  Rng(mix_seed(epoch_seed, kScheduleStream)).shuffle(unlabeled_order.begin(), unlabeled_order.end());
  std::vector<std::size_t> labeled_order;
  const std::uint64_t labeled_seed = mix_seed(epoch_seed, kLabeledStream);

  const std::uint64_t student_seed = mix_seed(epoch_seed, kStudentStream);
  Losses unlabeled_sum, labeled_sum;
  for (std::size_t k = 0; k < n_steps; ++k) {
    std::vector<TrainSample> labeled_batch, unlabeled_batch;
    std::string ids;
    if (!labeled.empty()) {
      const std::size_t cycle = k / labeled.size();
      if (k % labeled.size() == 0) {
        labeled_order.resize(labeled.size());
        std::iota(labeled_order.begin(), labeled_order.end(), std::size_t{0});
        Rng(mix_seed(labeled_seed, cycle)).shuffle(labeled_order.begin(), labeled_order.end());
      }
      const Scene& s = labeled[labeled_order[k % labeled.size()]];
      labeled_batch = make_batch(state.student, s.cloud, gt_targets(s), cfg.student_policy,
                                 cfg.detector, mix_seed(student_seed, 2 * k), false);
      ids = s.id;
      ++m.labeled_steps;
    }
    if (!unlabeled.empty()) {
      const std::size_t u = unlabeled_order[k];
      const Scene& s = unlabeled[u];
      const std::vector<PseudoBox> boxes = stratify(views[u].boxes, thresholds);

      std::vector<PseudoBoxRecord> records;
      std::vector<Box3D> low;
      Scene target_scene;
      target_scene.id = s.id;
      std::vector<double> weights;
      for (const PseudoBox& b : boxes) {
        records.push_back({b.box, b.cls, b.level != Level::Low});
        switch (b.level) {
          case Level::High: ++m.n_high; break;
          case Level::Ambiguous: ++m.n_ambiguous; break;
          case Level::Low: ++m.n_low; break;
        }
        if (b.level == Level::Low) {
          low.push_back(b.box);
        } else {
          target_scene.gt_boxes.push_back(b.box);
          target_scene.gt_classes.push_back(b.cls);
          weights.push_back(b.weight);
        }
      }
      const PseudoQuality q = pseudo_quality(records, s.gt_boxes, s.gt_classes, cfg.eval);
      m.incorrect_prefilter += q.incorrect_prefilter;
      m.incorrect_postfilter += q.incorrect_postfilter;

      target_scene.cloud = remove_low_level_points(s.cloud, low);
      if (cfg.shuffle) {
        target_scene = shuffle_augment(target_scene, cfg.shuffle_grid,
                                       mix_seed(mix_seed(epoch_seed, kShuffleStream), k));
      }
      const TargetSet targets{target_scene.gt_boxes, target_scene.gt_classes, weights};
      unlabeled_batch = make_batch(state.student, target_scene.cloud, targets, cfg.student_policy,
                                   cfg.detector, mix_seed(student_seed, 2 * k + 1), true);
      ids = ids.empty() ? s.id : ids + "+" + s.id;
      ++m.unlabeled_steps;
    }
    const JointLosses l = joint_step(state.student, labeled_batch, unlabeled_batch, ids);
    labeled_sum += l.labeled;
    unlabeled_sum += l.unlabeled;
    ema_update(state.teacher, state.student);
  }
  m.unlabeled = mean_of(unlabeled_sum, m.unlabeled_steps);
  m.labeled = mean_of(labeled_sum, m.labeled_steps);

  if (!validation.empty()) {
    const EvalResult r = evaluate_detector(state.student, validation, cfg.eval_policy,
                                           cfg.detector, cfg.eval, cfg.threads);
    m.val_map = r.map.value_or(std::numeric_limits<double>::quiet_NaN());
  } else {
    m.val_map = std::numeric_limits<double>::quiet_NaN();
  }
  ++state.epoch;
  return m;
}

}  // namespace chanssl
