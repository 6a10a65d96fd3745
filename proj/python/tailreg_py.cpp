#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "tailreg/dataset.hpp"
#include "tailreg/digest.hpp"
#include "tailreg/errors.hpp"
#include "tailreg/evaluation.hpp"
#include "tailreg/experiment.hpp"
#include "tailreg/geometry.hpp"
#include "tailreg/heads.hpp"
#include "tailreg/plots.hpp"
#include "tailreg/training.hpp"

namespace py = pybind11;
using namespace tailreg;

namespace {

Eigen::MatrixXd split_features(const SyntheticDataset& ds, Split s) {
  const auto& inst = ds.split(s).instances;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(inst.size()), ds.feature_dim());
  for (std::size_t i = 0; i < inst.size(); ++i)
    for (int j = 0; j < ds.feature_dim(); ++j) out(static_cast<Eigen::Index>(i), j) = inst[i].feature[j];
  return out;
}

Eigen::MatrixXd split_targets(const SyntheticDataset& ds, Split s) {
  const auto& inst = ds.split(s).instances;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(inst.size()), 4);
  for (std::size_t i = 0; i < inst.size(); ++i) {
    const auto d = inst[i].target_delta.as_array();
    for (int j = 0; j < 4; ++j) out(static_cast<Eigen::Index>(i), j) = d[j];
  }
  return out;
}

std::vector<int> split_labels(const SyntheticDataset& ds, Split s) {
  std::vector<int> out;
  for (const auto& i : ds.split(s).instances) out.push_back(i.class_id);
  return out;
}

py::dict group_ap_dict(const EvalReport& r) {
  py::dict d;
  for (const auto& [g, v] : r.group_ap) d[py::str(std::string(to_string(g)))] = py::cast(v);
  return d;
}

}  // namespace

PYBIND11_MODULE(_tailreg, m) {
  m.doc() = "Regression-bias lab for long-tailed detection";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);

  py::enum_<Split>(m, "Split").value("TRAIN", Split::Train).value("VAL", Split::Val);
  py::enum_<Group>(m, "Group")
      .value("RARE", Group::Rare)
      .value("COMMON", Group::Common)
      .value("FREQUENT", Group::Frequent);
  py::enum_<TrainMode>(m, "TrainMode")
      .value("JOINT", TrainMode::Joint)
      .value("REGRESSION_ONLY_GT", TrainMode::RegressionOnlyGt);
  py::enum_<Protocol>(m, "Protocol")
      .value("PREDICTED", Protocol::Predicted)
      .value("GT_ORACLE", Protocol::GtOracle);

  // geometry
  py::class_<Box>(m, "Box")
      .def(py::init<double, double, double, double>(), py::arg("x1"), py::arg("y1"), py::arg("x2"), py::arg("y2"))
      .def_readwrite("x1", &Box::x1)
      .def_readwrite("y1", &Box::y1)
      .def_readwrite("x2", &Box::x2)
      .def_readwrite("y2", &Box::y2)
      .def_property_readonly("width", &Box::width)
      .def_property_readonly("height", &Box::height)
      .def_property_readonly("area", &Box::area)
      .def("valid", &Box::valid)
      .def("__iter__", [](const Box& b) { return py::iter(py::make_tuple(b.x1, b.y1, b.x2, b.y2)); })
      .def("__repr__", [](const Box& b) {
        return "Box(" + format_double(b.x1) + ", " + format_double(b.y1) + ", " + format_double(b.x2) +
               ", " + format_double(b.y2) + ")";
      });

  py::class_<Delta>(m, "Delta")
      .def(py::init<double, double, double, double>(), py::arg("dx"), py::arg("dy"), py::arg("dw"), py::arg("dh"))
      .def_readwrite("dx", &Delta::dx)
      .def_readwrite("dy", &Delta::dy)
      .def_readwrite("dw", &Delta::dw)
      .def_readwrite("dh", &Delta::dh)
      .def("__iter__", [](const Delta& d) { return py::iter(py::make_tuple(d.dx, d.dy, d.dw, d.dh)); });

  m.def("iou", &iou, py::arg("a"), py::arg("b"));
  m.def("encode_delta", &encode_delta, py::arg("proposal"), py::arg("target"));
  m.def(
      "decode_delta",
      [](const Box& p, const Delta& d, double clamp, std::optional<std::pair<double, double>> extent) {
        std::optional<ImageExtent> e;
        if (extent) e = ImageExtent{extent->first, extent->second};
        return decode_delta(p, d, clamp, e);
      },
      py::arg("proposal"), py::arg("delta"), py::arg("clamp") = kDefaultDeltaClamp,
      py::arg("image_extent") = py::none());
  m.def(
      "nms",
      [](const std::vector<std::pair<Box, double>>& boxes, double threshold) {
        std::vector<ScoredBox> sb;
        for (const auto& [b, s] : boxes) sb.push_back({b, s});
        return nms(sb, threshold);
      },
      py::arg("boxes"), py::arg("threshold"), "Indices kept by greedy NMS, highest score first.");

  // dataset
  py::class_<DatasetConfig>(m, "DatasetConfig")
      .def(py::init<>())
      .def_readwrite("num_classes", &DatasetConfig::num_classes)
      .def_readwrite("train_images", &DatasetConfig::train_images)
      .def_readwrite("val_images", &DatasetConfig::val_images)
      .def_readwrite("min_val_images", &DatasetConfig::min_val_images)
      .def_readwrite("frequency_exponent", &DatasetConfig::frequency_exponent)
      .def_readwrite("head_images", &DatasetConfig::head_images)
      .def_readwrite("scale_means", &DatasetConfig::scale_means)
      .def_readwrite("scale_min", &DatasetConfig::scale_min)
      .def_readwrite("scale_max", &DatasetConfig::scale_max)
      .def_readwrite("scale_shift_rare", &DatasetConfig::scale_shift_rare)
      .def_readwrite("feature_dim", &DatasetConfig::feature_dim)
      .def_readwrite("shared_map_weight", &DatasetConfig::shared_map_weight)
      .def_readwrite("noise_sigma", &DatasetConfig::noise_sigma)
      .def_readwrite("proposal_jitter_sigma", &DatasetConfig::proposal_jitter_sigma)
      .def_readwrite("class_code_sigma", &DatasetConfig::class_code_sigma)
      .def_readwrite("extra_instance_prob", &DatasetConfig::extra_instance_prob)
      .def_readwrite("image_width", &DatasetConfig::image_width)
      .def_readwrite("image_height", &DatasetConfig::image_height)
      .def_readwrite("seed", &DatasetConfig::seed)
      .def("validate", &DatasetConfig::validate);

  m.def("dataset_preset", &dataset_preset, py::arg("name"));

  py::class_<SyntheticDataset>(m, "SyntheticDataset")
      .def_readonly("config", &SyntheticDataset::config)
      .def_property_readonly("num_classes", &SyntheticDataset::num_classes)
      .def_property_readonly("feature_dim", &SyntheticDataset::feature_dim)
      .def("num_images", [](const SyntheticDataset& ds, Split s) { return ds.split(s).num_images; })
      .def("num_instances", [](const SyntheticDataset& ds, Split s) { return ds.split(s).instances.size(); })
      .def("features", &split_features, py::arg("split"), "Instance features as an (N, d) array.")
      .def("targets", &split_targets, py::arg("split"), "Target deltas as an (N, 4) array.")
      .def("labels", &split_labels, py::arg("split"))
      .def("serialize", &serialize)
      .def("digest", [](const SyntheticDataset& ds) { return sha256_hex(serialize(ds)); });

  m.def("generate", &generate, py::arg("config"));
  m.def("save_dataset", &save_dataset, py::arg("dataset"), py::arg("path"));
  m.def("load_dataset", &load_dataset, py::arg("path"));
  m.def("image_counts", &image_counts, py::arg("dataset"), py::arg("split") = Split::Train);

  py::class_<FrequencyPartition>(m, "FrequencyPartition")
      .def_readonly("group", &FrequencyPartition::group)
      .def_readonly("image_counts", &FrequencyPartition::image_counts)
      .def("members", &FrequencyPartition::members, py::arg("group"));
  m.def(
      "partition_by_frequency",
      [](const SyntheticDataset& ds, int rare_max, int common_max, Split s) {
        return partition_by_frequency(ds, FrequencyThresholds{rare_max, common_max}, s);
      },
      py::arg("dataset"), py::arg("rare_max") = 10, py::arg("common_max") = 100, py::arg("split") = Split::Train);

  // heads
  py::class_<HeadSpec>(m, "HeadSpec")
      .def_static("parse", &HeadSpec::parse, py::arg("text"))
      .def("__str__", &HeadSpec::to_string)
      .def("__eq__", [](const HeadSpec& a, const HeadSpec& b) { return a == b; })
      .def_readonly("alpha", &HeadSpec::alpha);

  py::class_<HeadBank>(m, "HeadBank")
      .def_property_readonly("spec", [](const HeadBank& b) { return b.spec; })
      .def_readonly("num_classes", &HeadBank::num_classes)
      .def_readonly("feature_dim", &HeadBank::feature_dim)
      .def_readonly("class_to_head", &HeadBank::class_to_head)
      .def_readonly("digest", &HeadBank::digest)
      .def_property_readonly("head_count", &HeadBank::head_count)
      .def("effective_weight",
           [](const HeadBank& b, int c) {
             const auto h = b.effective_weight(c);
             return py::make_tuple(h.weight, Eigen::VectorXd(h.bias));
           }, py::arg("class_id"), "(W, b) of the affine map the class regresses with.")
      .def("predict",
           [](const HeadBank& b, int c, const std::vector<double>& f) { return b.predict(c, f); },
           py::arg("class_id"), py::arg("feature"))
      .def("serialize", &serialize_bank);
  m.def("deserialize_bank", &deserialize_bank, py::arg("text"));

  py::class_<LinearClassifier>(m, "LinearClassifier")
      .def_readonly("weight", &LinearClassifier::weight)
      .def_readonly("bias", &LinearClassifier::bias)
      .def("classify", [](const LinearClassifier& c, const std::vector<double>& f) { return c.classify(f); },
           py::arg("feature"));

  // training
  m.def("smooth_l1", &smooth_l1, py::arg("residual"), py::arg("beta") = 1.0);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("warmup_steps", &TrainConfig::warmup_steps)
      .def_readwrite("momentum", &TrainConfig::momentum)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("mode", &TrainConfig::mode)
      .def_readwrite("lambda_cls", &TrainConfig::lambda_cls)
      .def_readwrite("lambda_reg", &TrainConfig::lambda_reg)
      .def_readwrite("init_sigma", &TrainConfig::init_sigma)
      .def("validate", &TrainConfig::validate);

  py::class_<TrainLedger>(m, "TrainLedger")
      .def_readonly("epochs", &TrainLedger::epochs)
      .def_readonly("epoch_cls_loss", &TrainLedger::epoch_cls_loss)
      .def_readonly("weights_digest", &TrainLedger::weights_digest)
      .def("final_losses", &TrainLedger::final_losses, py::arg("split"), py::arg("num_classes"))
      .def("final_mean_loss", &TrainLedger::final_mean_loss, py::arg("split"))
      .def("csv", &ledger_csv);

  py::class_<TrainResult>(m, "TrainResult")
      .def_readonly("bank", &TrainResult::bank)
      .def_readonly("classifier", &TrainResult::classifier)
      .def_readonly("ledger", &TrainResult::ledger);

  m.def(
      "train",
      [](const SyntheticDataset& ds, const std::string& head, const TrainConfig& cfg) {
        py::gil_scoped_release release;
        return train(ds, HeadSpec::parse(head), cfg);
      },
      py::arg("dataset"), py::arg("head"), py::arg("config") = TrainConfig{});
  m.def("bias_ratio", &bias_ratio, py::arg("ledger"), py::arg("partition"));

  // evaluation
  py::class_<EvalConfig>(m, "EvalConfig")
      .def(py::init<>())
      .def_readwrite("iou_thresholds", &EvalConfig::iou_thresholds)
      .def_readwrite("score_threshold", &EvalConfig::score_threshold)
      .def_readwrite("nms_threshold", &EvalConfig::nms_threshold)
      .def_readwrite("max_detections_per_image", &EvalConfig::max_detections_per_image)
      .def_readwrite("oracle_gt_class", &EvalConfig::oracle_gt_class)
      .def_readwrite("delta_clamp", &EvalConfig::delta_clamp);

  py::class_<EvalReport>(m, "EvalReport")
      .def_readonly("oracle", &EvalReport::oracle)
      .def_readonly("ap", &EvalReport::ap)
      .def_property_readonly("group_ap", &group_ap_dict)
      .def_readonly("ap_per_threshold", &EvalReport::ap_per_threshold)
      .def_readonly("ap_per_class", &EvalReport::ap_per_class)
      .def_readonly("excluded_classes", &EvalReport::excluded_classes)
      .def_readonly("bias_ratio", &EvalReport::bias_ratio)
      .def_readonly("num_detections", &EvalReport::num_detections)
      .def_readonly("num_gt", &EvalReport::num_gt)
      .def_readonly("classification_accuracy", &EvalReport::classification_accuracy)
      .def("json", &report_json);

  m.def(
      "evaluate",
      [](const TrainResult& model, const SyntheticDataset& ds, const EvalConfig& cfg) {
        py::gil_scoped_release release;
        const auto part = partition_by_frequency(ds);
        return report(model.bank, model.classifier, ds, cfg, part, bias_ratio(model.ledger, part));
      },
      py::arg("model"), py::arg("dataset"), py::arg("config") = EvalConfig{},
      "Evaluate on the val split with the default frequency partition.");

  // experiments
  py::class_<ExperimentSpec>(m, "ExperimentSpec")
      .def(py::init<>())
      .def_readwrite("name", &ExperimentSpec::name)
      .def_readwrite("dataset_preset", &ExperimentSpec::dataset_preset)
      .def_readwrite("dataset", &ExperimentSpec::dataset)
      .def_readwrite("seeds", &ExperimentSpec::seeds)
      .def_readwrite("protocols", &ExperimentSpec::protocols)
      .def_readwrite("train", &ExperimentSpec::train)
      .def_readwrite("eval", &ExperimentSpec::eval)
      .def_readwrite("out_dir", &ExperimentSpec::out_dir)
      .def_property(
          "variants",
          [](const ExperimentSpec& s) {
            std::vector<std::string> out;
            for (const auto& v : s.variants) out.push_back(v.to_string());
            return out;
          },
          [](ExperimentSpec& s, const std::vector<std::string>& vs) {
            s.variants.clear();
            for (const auto& v : vs) s.variants.push_back(HeadSpec::parse(v));
          });
  m.def("experiment_preset", &experiment_preset, py::arg("name"));

  py::class_<SweepResult>(m, "SweepResult")
      .def_readonly("trained", &SweepResult::trained)
      .def_readonly("skipped", &SweepResult::skipped)
      .def("cells_csv", &cells_csv)
      .def("summary_csv", &summary_csv)
      .def("table_csv", &table_csv)
      .def("digest", &result_digest);
  m.def(
      "run_experiment",
      [](const ExperimentSpec& spec) {
        py::gil_scoped_release release;
        return run_experiment(spec);
      },
      py::arg("spec"));
  m.def("load_experiment", &load_experiment, py::arg("dir"));
  m.def("emit_plots", &emit_plots, py::arg("result"), py::arg("dir"));
  m.def(
      "verify",
      [](const std::filesystem::path& dir) { return verify(dir).problems; },
      py::arg("dir"), "Problems found when re-hashing artifacts; empty when all verify.");
}
