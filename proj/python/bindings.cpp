#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "chanssl/augment.hpp"
#include "chanssl/commands.hpp"
#include "chanssl/config.hpp"
#include "chanssl/data.hpp"
#include "chanssl/detector.hpp"
#include "chanssl/errors.hpp"
#include "chanssl/eval.hpp"
#include "chanssl/geom.hpp"
#include "chanssl/ssl.hpp"

namespace py = pybind11;
using namespace chanssl;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

PointCloud cloud_from_array(const Array& a) {
  if (a.ndim() != 2 || a.shape(1) != 4) throw std::invalid_argument("cloud must have shape (N, 4)");
  auto r = a.unchecked<2>();
  PointCloud pc(static_cast<std::size_t>(a.shape(0)));
  for (py::ssize_t i = 0; i < a.shape(0); ++i) pc[i] = {r(i, 0), r(i, 1), r(i, 2), r(i, 3)};
  return pc;
}

Array cloud_to_array(const PointCloud& pc) {
  Array a({static_cast<py::ssize_t>(pc.size()), py::ssize_t{4}});
  auto w = a.mutable_unchecked<2>();
  for (std::size_t i = 0; i < pc.size(); ++i) {
    w(i, 0) = pc[i].x;
    w(i, 1) = pc[i].y;
    w(i, 2) = pc[i].z;
    w(i, 3) = pc[i].intensity;
  }
  return a;
}

py::dict scene_to_dict(const Scene& s) {
  py::dict d;
  d["id"] = s.id;
  d["cloud"] = cloud_to_array(s.cloud);
  d["boxes"] = s.gt_boxes;
  std::vector<std::string> classes;
  for (ObjectClass c : s.gt_classes) classes.emplace_back(class_name(c));
  d["classes"] = classes;
  return d;
}

py::dict detection_to_dict(const Detection& det) {
  py::dict d;
  d["box"] = det.box;
  d["class"] = std::string(class_name(det.top_class()));
  d["p_hat"] = det.p_hat();
  d["objectness"] = det.objectness;
  d["confidence"] = det.confidence();
  d["channel_boxes"] = det.per_channel_boxes;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Channel-augmented teacher-student 3D detection (C++ core)";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<ModelCompatibilityError>(m, "ModelCompatibilityError", PyExc_ValueError);

  py::class_<Box3D>(m, "Box3D")
      .def(py::init<>())
      .def(py::init([](double cx, double cy, double cz, double w, double h, double l, double r) {
             return Box3D{cx, cy, cz, w, h, l, r};
           }),
           py::arg("cx"), py::arg("cy"), py::arg("cz"), py::arg("w"), py::arg("h"), py::arg("l"), py::arg("r"))
      .def_readwrite("cx", &Box3D::cx)
      .def_readwrite("cy", &Box3D::cy)
      .def_readwrite("cz", &Box3D::cz)
      .def_readwrite("w", &Box3D::w)
      .def_readwrite("h", &Box3D::h)
      .def_readwrite("l", &Box3D::l)
      .def_readwrite("r", &Box3D::r)
      .def("to_tuple", [](const Box3D& b) { return py::make_tuple(b.cx, b.cy, b.cz, b.w, b.h, b.l, b.r); })
      .def(py::self == py::self)
      .def("__repr__", [](const Box3D& b) {
        std::ostringstream o;
        o << "Box3D(" << b.cx << ", " << b.cy << ", " << b.cz << ", " << b.w << ", " << b.h << ", " << b.l << ", "
          << b.r << ")";
        return o.str();
      });

  py::class_<Transform>(m, "Transform")
      .def(py::init([](bool flip_y, double theta, double s) { return Transform{flip_y, theta, s}; }),
           py::arg("flip_y") = false, py::arg("theta") = 0.0, py::arg("s") = 1.0)
      .def_readwrite("flip_y", &Transform::flip_y)
      .def_readwrite("theta", &Transform::theta)
      .def_readwrite("s", &Transform::s)
      .def(py::self == py::self);

  // Geometry
  m.def("iou_bev", &iou_bev);
  m.def("iou_3d", &iou_3d);
  m.def("apply_box", &apply_box);
  m.def("apply_points", [](const Transform& t, const Array& cloud) {
    return cloud_to_array(apply_points(t, cloud_from_array(cloud)));
  });
  m.def("invert", &invert);
  m.def("compose", &compose, py::arg("second"), py::arg("first"));
  m.def("encode_residual", &encode_residual, py::arg("target"), py::arg("anchor"));
  m.def("decode_residual", &decode_residual, py::arg("delta"), py::arg("anchor"));
  m.def("point_in_box", &point_in_box);
  m.def(
      "nms",
      [](const std::vector<Box3D>& boxes, const std::vector<double>& scores, double iou) {
        if (boxes.size() != scores.size()) throw std::invalid_argument("boxes and scores differ in length");
        std::vector<ScoredBox> s;
        for (std::size_t i = 0; i < boxes.size(); ++i) s.push_back({boxes[i], scores[i]});
        return nms(s, iou);
      },
      py::arg("boxes"), py::arg("scores"), py::arg("iou_thresh"));

  // Consistency and thresholds
  m.def("channel_iou_consistency", [](const std::vector<Box3D>& boxes) {
    return channel_iou_consistency(std::span<const Box3D>(boxes));
  });
  m.def("hssda_iou_consistency", [](const std::vector<Box3D>& a, const std::vector<Box3D>& b) {
    IouCounter counter;
    auto scores = hssda_iou_consistency(a, b, &counter);
    return py::make_tuple(scores, counter.value());
  });
  m.def("kmeans3_1d", [](const std::vector<double>& values) {
    const Clusters1D c = kmeans3_1d(values);
    py::dict d;
    d["centers"] = c.centers;
    d["sizes"] = c.sizes;
    d["sse"] = c.sse;
    d["degenerate"] = c.degenerate;
    return d;
  });
  m.def(
      "dual_thresholds",
      [](const std::vector<double>& values) {
        const Clusters1D c = kmeans3_1d(values);
        return py::make_tuple(0.5 * (c.centers[0] + c.centers[1]), 0.5 * (c.centers[1] + c.centers[2]));
      },
      "Boundaries (tau_low, tau_high) of one criterion.");
  m.def(
      "stratify",
      [](double p_hat, double o_hat, double iou_cons, const std::array<double, 3>& low,
         const std::array<double, 3>& high) {
        DualThresholds thr;
        thr.low = low;
        thr.high = high;
        const Level level = assign_level({p_hat, o_hat, iou_cons}, thr);
        return py::make_tuple(std::string(level_name(level)), level_weight(level, p_hat, o_hat));
      },
      py::arg("p_hat"), py::arg("o_hat"), py::arg("iou_cons"), py::arg("low"), py::arg("high"));

  // Evaluation
  m.def("ap_recall_grid", &ap_recall_grid, py::arg("tp"), py::arg("n_gt"), py::arg("recall_positions") = 40);

  // Data
  m.def(
      "synth_scene", [](std::uint64_t seed, const std::string& id) { return scene_to_dict(synth_scene(seed, {}, id)); },
      py::arg("seed"), py::arg("id") = "");
  m.def("encode_bin_cloud", [](const Array& cloud) {
    return py::bytes(encode_bin_cloud(cloud_from_array(cloud)));
  });
  m.def("decode_bin_cloud", [](const py::bytes& b) { return cloud_to_array(decode_bin_cloud(std::string(b))); });
  m.def("parse_kitti_label", [](const std::string& text) {
    py::list out;
    for (const KittiObject& o : parse_kitti_label(text)) {
      out.append(py::make_tuple(o.dont_care ? std::string("DontCare") : std::string(class_name(o.cls)), o.box));
    }
    return out;
  });
  m.def("split_sample", [](std::size_t n, double fraction, std::uint64_t seed) {
    const Split s = split_sample(n, {fraction, seed});
    return py::make_tuple(s.labeled, s.unlabeled);
  });

  // Detector
  py::class_<DetectorParams>(m, "DetectorParams")
      .def(py::init<>())
      .def_readwrite("values", &DetectorParams::values)
      .def_readwrite("learning_rate", &DetectorParams::learning_rate)
      .def_property_readonly_static("size", [](py::object) { return DetectorParams::kTotalSize; });
  m.def("save_params", &save_params);
  m.def("load_params", &load_params);
  m.def(
      "detect",
      [](const Array& cloud, const DetectorParams& params) {
        const std::vector<Detection> dets =
            detect(cloud_from_array(cloud), ChannelPolicy::weak_default(), params, DetectorConfig{}, 0);
        py::list out;
        for (const Detection& d : dets) out.append(detection_to_dict(d));
        return out;
      },
      py::arg("cloud"), py::arg("params"), "Weak 3-channel detection with default settings.");

  // Commands
  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_static("parse", [](const std::string& text) { return parse_config(text); })
      .def("text", [](const RunConfig& c) { return to_config_text(c); })
      .def_readwrite("seed", &RunConfig::seed)
      .def_readwrite("data_root", &RunConfig::data_root)
      .def_readwrite("out_dir", &RunConfig::out_dir)
      .def_readwrite("params", &RunConfig::params)
      .def_readwrite("threads", &RunConfig::threads);

  auto run = [](auto fn) {
    return [fn](const RunConfig& cfg) {
      std::ostringstream log;
      fn(cfg, log);
      return log.str();
    };
  };
  m.def("gen_data", run([](const RunConfig& c, std::ostream& o) { cmd_gen_data(c, o); }));
  m.def("pretrain", run([](const RunConfig& c, std::ostream& o) { cmd_pretrain(c, o); }));
  m.def("ssl_train", run([](const RunConfig& c, std::ostream& o) { cmd_ssl_train(c, o); }));
  m.def("evaluate", [](const RunConfig& cfg, const std::string& detector) {
    const EvalMode mode = detector == "oracle" ? EvalMode::Oracle
                          : detector == "empty" ? EvalMode::Empty
                                                : EvalMode::Model;
    std::ostringstream log;
    const EvalResult r = cmd_eval(cfg, mode, log);
    py::dict d;
    for (const ClassAp& c : r.per_class) d[py::str(std::string(class_name(c.cls)))] = c.ap;
    d["mAP"] = r.map;
    return d;
  }, py::arg("config"), py::arg("detector") = "model");
  m.def(
      "report",
      [](const std::filesystem::path& run_dir, bool svg) {
        std::ostringstream log;
        cmd_report({run_dir, svg}, log);
        return log.str();
      },
      py::arg("run_dir"), py::arg("svg") = true);
}
