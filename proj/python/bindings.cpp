#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>

#include "pcqa/checkpoint.hpp"
#include "pcqa/config.hpp"
#include "pcqa/error.hpp"
#include "pcqa/eval.hpp"
#include "pcqa/features.hpp"
#include "pcqa/gradcheck.hpp"
#include "pcqa/metrics.hpp"
#include "pcqa/nn.hpp"
#include "pcqa/pc_io.hpp"
#include "pcqa/sampling.hpp"
#include "pcqa/scoring.hpp"
#include "pcqa/spectral.hpp"
#include "pcqa/training.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace pcqa;

namespace {

using Points = py::array_t<double, py::array::c_style | py::array::forcecast>;
using Colors = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

PointCloud to_cloud(const Points& points, const Colors& colors) {
  if (points.ndim() != 2 || points.shape(1) != 3) throw UsageError("points must have shape (n, 3)");
  if (colors.ndim() != 2 || colors.shape(1) != 3 || colors.shape(0) != points.shape(0))
    throw UsageError("colors must have shape (n, 3) matching points");
  PointCloud c;
  const auto n = static_cast<std::size_t>(points.shape(0));
  c.points.resize(n);
  c.colors.resize(n);
  const double* p = points.data();
  const std::uint8_t* q = colors.data();
  for (std::size_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) {
      c.points[i][a] = p[i * 3 + a];
      c.colors[i][a] = q[i * 3 + a];
    }
  return c;
}

py::array_t<double> points_array(const std::vector<Vec3>& pts) {
  py::array_t<double> out({static_cast<py::ssize_t>(pts.size()), py::ssize_t{3}});
  auto m = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (int a = 0; a < 3; ++a) m(i, a) = pts[i][a];
  return out;
}

py::array_t<std::uint8_t> colors_array(const std::vector<Rgb>& cols) {
  py::array_t<std::uint8_t> out({static_cast<py::ssize_t>(cols.size()), py::ssize_t{3}});
  auto m = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < cols.size(); ++i)
    for (int a = 0; a < 3; ++a) m(i, a) = cols[i][a];
  return out;
}

std::vector<double> as_vector(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  return {a.data(), a.data() + a.size()};
}

RunConfig make_config(const std::optional<std::string>& sidecar, const std::map<std::string, std::string>& overrides) {
  RunConfig c;
  if (sidecar && fs::exists(*sidecar)) c.merge_file(*sidecar);
  for (const auto& [k, v] : overrides) c.set(k, v);
  c.finalize();
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Point cloud quality assessment core";

  static py::exception<Error> base(m, "Error");
  static py::exception<UsageError> usage(m, "UsageError", base.ptr());
  static py::exception<DataError> data(m, "DataError", base.ptr());
  static py::exception<NumericError> numeric(m, "NumericError", base.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const UsageError& e) {
      usage(e.what());
    } catch (const DataError& e) {
      data(e.what());
    } catch (const NumericError& e) {
      numeric(e.what());
    }
  });

  // point clouds
  m.def(
      "load_ply",
      [](const std::string& path) {
        const auto c = load_ply(path);
        return py::make_tuple(points_array(c.points), colors_array(c.colors));
      },
      py::arg("path"), "Read a PLY file; returns (points float64 (n,3), colors uint8 (n,3)).");
  m.def(
      "write_ply",
      [](const std::string& path, const Points& points, const Colors& colors, bool ascii) {
        write_ply(to_cloud(points, colors), path, ascii ? PlyEncoding::kAscii : PlyEncoding::kBinaryLittleEndian);
      },
      py::arg("path"), py::arg("points"), py::arg("colors"), py::arg("ascii") = false);
  m.def(
      "normalize_unit_sphere",
      [](const Points& points) {
        Colors zeros({points.shape(0), py::ssize_t{3}});
        std::fill(zeros.mutable_data(), zeros.mutable_data() + zeros.size(), 0);
        return points_array(normalize_unit_sphere(to_cloud(points, zeros)).points);
      },
      py::arg("points"));

  // sampling
  m.def(
      "farthest_point_sample",
      [](const Points& points, std::size_t count, std::uint64_t seed) {
        Colors zeros({points.shape(0), py::ssize_t{3}});
        std::fill(zeros.mutable_data(), zeros.mutable_data() + zeros.size(), 0);
        return farthest_point_sample(to_cloud(points, zeros), count, seed);
      },
      py::arg("points"), py::arg("count"), py::arg("seed") = 0);
  m.def(
      "knn_patch",
      [](const Points& points, std::size_t center, std::size_t k) {
        Colors zeros({points.shape(0), py::ssize_t{3}});
        std::fill(zeros.mutable_data(), zeros.mutable_data() + zeros.size(), 0);
        return knn_patch(to_cloud(points, zeros), center, k).indices;
      },
      py::arg("points"), py::arg("center"), py::arg("k"));

  // spectral
  m.def(
      "fft",
      [](const py::array_t<std::complex<double>, py::array::c_style | py::array::forcecast>& x) {
        return spectral::fft(std::span<const spectral::Complex>(x.data(), static_cast<std::size_t>(x.size())));
      },
      py::arg("signal"), "Unnormalized forward transform; radix-2 for power-of-two lengths.");
  m.def(
      "fftshift", [](const std::vector<double>& x) { return spectral::fftshift(x); }, py::arg("values"));

  // features
  m.def(
      "extract_features",
      [](const Points& points, const Colors& colors, std::size_t patches, std::size_t points_per_patch,
         std::uint64_t seed, const std::string& ablation) {
        const SamplingConfig s{patches, points_per_patch, seed};
        s.validate();
        std::vector<FeatureTensor> feats;
        {
          py::gil_scoped_release release;
          feats = cloud_features(to_cloud(points, colors), s, parse_ablation(ablation));
        }
        const auto g = static_cast<py::ssize_t>(s.grid());
        py::array_t<double> out({static_cast<py::ssize_t>(feats.size()), py::ssize_t{9}, g, g});
        double* dst = out.mutable_data();
        for (const auto& f : feats) dst = std::copy(f.data.begin(), f.data.end(), dst);
        return out;
      },
      py::arg("points"), py::arg("colors"), py::arg("patches") = 100, py::arg("points_per_patch") = 1024,
      py::arg("seed") = 0, py::arg("ablation") = "full", "Per-patch feature tensors, shape (P, 9, G, G).");

  // metrics and protocol
  m.def(
      "plcc", [](const std::vector<double>& x, const std::vector<double>& y) { return eval::plcc(x, y); },
      py::arg("x"), py::arg("y"));
  m.def(
      "srocc", [](const std::vector<double>& x, const std::vector<double>& y) { return eval::srocc(x, y); },
      py::arg("x"), py::arg("y"));
  m.def(
      "rmse", [](const std::vector<double>& x, const std::vector<double>& y) { return eval::rmse(x, y); },
      py::arg("x"), py::arg("y"));
  m.def("smooth_l1", &train::smooth_l1, py::arg("mos"), py::arg("q"));
  m.def(
      "make_splits",
      [](const std::vector<std::string>& ref_ids, double train_fraction, std::size_t repeats, std::uint64_t seed) {
        DatasetManifest man;
        for (std::size_t i = 0; i < ref_ids.size(); ++i)
          man.entries.push_back({"item" + std::to_string(i), 0.0, ref_ids[i]});
        py::list out;
        for (const auto& s : eval::make_splits(man, train_fraction, repeats, seed))
          out.append(py::dict(py::arg("train_refs") = s.train_refs, py::arg("test_refs") = s.test_refs));
        return out;
      },
      py::arg("ref_ids"), py::arg("train_fraction") = 0.8, py::arg("repeats") = 5, py::arg("seed") = 0,
      "Reference-disjoint splits; one entry per repeat.");

  // model
  m.def(
      "census",
      [](const std::map<std::string, std::string>& overrides) {
        const auto c = make_config(std::nullopt, overrides);
        return nn::Model<float>(c.model, c.model_seed).parameter_count();
      },
      py::arg("overrides") = std::map<std::string, std::string>{},
      "Learnable parameter count for a configuration given as dotted-key overrides.");
  m.def(
      "predict",
      [](const std::string& checkpoint, const Points& points, const Colors& colors,
         const std::map<std::string, std::string>& overrides) {
        const auto cfg = make_config(checkpoint + ".ini", overrides);
        if (!fs::exists(checkpoint)) throw DataError("checkpoint '" + checkpoint + "' not found");
        const auto cloud = to_cloud(points, colors);
        CloudScore score;
        {
          py::gil_scoped_release release;
          nn::Model<float> model(cfg.model, cfg.model_seed);
          model.load_state(ad::load_checkpoint(checkpoint));
          score = predict_cloud(model, cloud, cfg.sampling, cfg.train.ablation);
        }
        return py::make_tuple(score.quality, score.patch_scores);
      },
      py::arg("checkpoint"), py::arg("points"), py::arg("colors"),
      py::arg("overrides") = std::map<std::string, std::string>{},
      "Score a cloud; returns (Q_f, patch scores). The checkpoint's .ini sidecar supplies the config.");
  m.def(
      "init_checkpoint",
      [](const std::string& path, const std::map<std::string, std::string>& overrides) {
        const auto cfg = make_config(std::nullopt, overrides);
        const nn::Model<float> model(cfg.model, cfg.model_seed);
        ad::save_checkpoint(model.state(), path);
        std::ofstream(path + ".ini") << cfg.to_ini(false);
        return model.parameter_count();
      },
      py::arg("path"), py::arg("overrides") = std::map<std::string, std::string>{},
      "Write a freshly initialized checkpoint and its config sidecar; returns the parameter count.");
  m.def(
      "gradcheck",
      [](std::uint64_t seed, bool model) {
        gradcheck::Options o;
        o.seed = seed;
        o.model = model;
        py::list out;
        for (const auto& r : gradcheck::run_suite(o))
          out.append(py::dict(py::arg("name") = r.name, py::arg("max_error") = r.max_error,
                              py::arg("tolerance") = r.tolerance, py::arg("passed") = r.passed()));
        return out;
      },
      py::arg("seed") = 0, py::arg("model") = true);
}
