#include "tailreg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>
#include "tailreg/digest.hpp"
#include "tailreg/errors.hpp"

namespace tailreg {

namespace {

using json = nlohmann::json;

constexpr int kRecallPoints = 101;

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
std::optional<double> optional_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace

std::vector<double> EvalConfig::default_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back((50 + 5 * i) / 100.0);
  return t;
}

void EvalConfig::validate() const {
  if (iou_thresholds.empty()) throw ConfigError("iou_thresholds", "must not be empty");
  for (std::size_t i = 0; i < iou_thresholds.size(); ++i) {
    const double t = iou_thresholds[i];
    if (!(t > 0.0 && t < 1.0)) throw ConfigError("iou_thresholds", "each must lie in (0, 1)");
    if (i > 0 && !(t > iou_thresholds[i - 1]))
      throw ConfigError("iou_thresholds", "must be sorted ascending");
  }
  if (!(nms_threshold > 0.0 && nms_threshold < 1.0))
    throw ConfigError("nms_threshold", "must lie in (0, 1)");
  if (max_detections_per_image < 1) throw ConfigError("max_detections_per_image", "must be >= 1");
  if (!std::isfinite(score_threshold)) throw ConfigError("score_threshold", "must be finite");
  if (!(delta_clamp > 0.0)) throw ConfigError("delta_clamp", "must be > 0");
}

std::vector<GroundTruth> ground_truth(const SyntheticDataset& ds, Split split) {
  std::vector<GroundTruth> out;
  for (const auto& inst : ds.split(split).instances)
    out.push_back({inst.image_id, inst.class_id, inst.gt_box});
  return out;
}

std::vector<Detection> run_inference(const HeadBank& bank, const LinearClassifier& classifier,
                                     const SyntheticDataset& ds, Split split,
                                     const EvalConfig& cfg) {
  cfg.validate();
  if (!bank.digest) throw ContractError("run_inference: head bank is untrained (no digest)");
  if (bank.num_classes != ds.num_classes() || bank.feature_dim != ds.feature_dim())
    throw ContractError("run_inference: bank does not match dataset dimensions");
  if (!cfg.oracle_gt_class && (classifier.num_classes() != ds.num_classes() ||
                               classifier.weight.cols() != ds.feature_dim()))
    throw ContractError("run_inference: classifier does not match dataset dimensions");
  const auto& data = ds.split(split);
  if (data.instances.empty()) throw ContractError("run_inference: split is empty");
  const ImageExtent extent = ds.image_extent();

  std::vector<std::vector<Detection>> per_image(static_cast<std::size_t>(data.num_images));
  for (const auto& inst : data.instances) {
    auto emit = [&](int c, double score) {
      const Delta d = bank.predict(c, inst.feature);
      per_image[inst.image_id].push_back(
          {inst.image_id, c, score, decode_delta(inst.proposal_box, d, cfg.delta_clamp, extent)});
    };
    if (cfg.oracle_gt_class) {
      if (1.0 >= cfg.score_threshold) emit(inst.class_id, 1.0);
      continue;
    }
    const auto probs = softmax(classifier.classify(inst.feature));
    for (int c = 0; c < static_cast<int>(probs.size()); ++c)
      if (probs[c] >= cfg.score_threshold) emit(c, probs[c]);
  }

  std::vector<Detection> out;
  for (auto& cands : per_image) {
    std::vector<Detection> kept;
    std::vector<int> classes;
    for (const auto& d : cands) classes.push_back(d.class_id);
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    for (const int c : classes) {
      std::vector<std::size_t> idx;
      std::vector<ScoredBox> boxes;
      for (std::size_t i = 0; i < cands.size(); ++i) {
        if (cands[i].class_id != c) continue;
        idx.push_back(i);
        boxes.push_back({cands[i].box, cands[i].score});
      }
      for (const std::size_t k : nms(boxes, cfg.nms_threshold)) kept.push_back(cands[idx[k]]);
    }
    std::stable_sort(kept.begin(), kept.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    if (static_cast<int>(kept.size()) > cfg.max_detections_per_image)
      kept.resize(static_cast<std::size_t>(cfg.max_detections_per_image));
    out.insert(out.end(), kept.begin(), kept.end());
  }
  return out;
}

std::vector<std::optional<double>> average_precision(std::span<const Detection> detections,
                                                     std::span<const GroundTruth> gt,
                                                     int num_classes, double iou_threshold) {
  const auto C = static_cast<std::size_t>(num_classes);
  // Per class: GT indices grouped by image.
  std::vector<std::map<int, std::vector<std::size_t>>> gt_by_image(C);
  std::vector<int> gt_count(C, 0);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i].class_id < 0 || gt[i].class_id >= num_classes)
      throw ContractError("average_precision: GT class out of range");
    gt_by_image[gt[i].class_id][gt[i].image_id].push_back(i);
    ++gt_count[gt[i].class_id];
  }
  std::vector<std::vector<std::size_t>> dets_by_class(C);
  for (std::size_t i = 0; i < detections.size(); ++i) {
    const int c = detections[i].class_id;
    if (c < 0 || c >= num_classes) throw ContractError("average_precision: class out of range");
    dets_by_class[c].push_back(i);
  }

  std::vector<std::optional<double>> ap(C);
  std::vector<bool> matched(gt.size(), false);
  for (std::size_t c = 0; c < C; ++c) {
    if (gt_count[c] == 0) continue;
    auto& order = dets_by_class[c];
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return detections[a].score > detections[b].score;
    });
    std::vector<double> precision;
    std::vector<double> recall;
    int tp = 0;
    int seen = 0;
    for (const std::size_t di : order) {
      const auto& det = detections[di];
      ++seen;
      const auto it = gt_by_image[c].find(det.image_id);
      if (it != gt_by_image[c].end()) {
        double best = iou_threshold;
        std::optional<std::size_t> best_gt;
        for (const std::size_t gi : it->second) {
          if (matched[gi]) continue;
          const double o = iou(det.box, gt[gi].box);
          if (o >= best && (!best_gt || o > best)) {
            best = o;
            best_gt = gi;
          }
        }
        if (best_gt) {
          matched[*best_gt] = true;
          ++tp;
        }
      }
      precision.push_back(static_cast<double>(tp) / seen);
      recall.push_back(static_cast<double>(tp) / gt_count[c]);
    }
    // Monotone envelope from the right.
    for (std::size_t i = precision.size(); i-- > 1;)
      precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double sum = 0.0;
    for (int k = 0; k < kRecallPoints; ++k) {
      const double r = k / 100.0;
      const auto pos = std::lower_bound(recall.begin(), recall.end(), r);
      if (pos != recall.end()) sum += precision[static_cast<std::size_t>(pos - recall.begin())];
    }
    ap[c] = sum / kRecallPoints;
  }
  return ap;
}

EvalReport report_from_detections(std::span<const Detection> detections,
                                  const SyntheticDataset& ds, const EvalConfig& cfg,
                                  const FrequencyPartition& partition,
                                  double classification_accuracy,
                                  std::optional<double> bias_ratio) {
  cfg.validate();
  const int C = ds.num_classes();
  if (partition.num_classes() != C) throw ContractError("report: partition size != C");
  const auto gt = ground_truth(ds, Split::Val);

  EvalReport r;
  r.oracle = cfg.oracle_gt_class;
  r.iou_thresholds = cfg.iou_thresholds;
  r.bias_ratio = bias_ratio;
  r.num_detections = static_cast<int>(detections.size());
  r.num_gt = static_cast<int>(gt.size());
  r.classification_accuracy = classification_accuracy;

  std::vector<std::vector<std::optional<double>>> per_threshold;
  for (const double t : cfg.iou_thresholds)
    per_threshold.push_back(average_precision(detections, gt, C, t));

  r.ap_per_class.assign(static_cast<std::size_t>(C), std::nullopt);
  for (int c = 0; c < C; ++c) {
    if (!per_threshold.front()[c]) {
      r.excluded_classes.push_back(c);
      continue;
    }
    double s = 0.0;
    for (const auto& row : per_threshold) s += *row[c];
    r.ap_per_class[c] = s / static_cast<double>(per_threshold.size());
  }
  for (const auto& row : per_threshold) {
    double s = 0.0;
    int n = 0;
    for (const auto& v : row)
      if (v) {
        s += *v;
        ++n;
      }
    r.ap_per_threshold.push_back(n > 0 ? s / n : 0.0);
  }
  auto class_mean = [&](const std::vector<int>& classes) -> std::optional<double> {
    double s = 0.0;
    int n = 0;
    for (const int c : classes)
      if (r.ap_per_class[c]) {
        s += *r.ap_per_class[c];
        ++n;
      }
    if (n == 0) return std::nullopt;
    return s / n;
  };
  std::vector<int> all(static_cast<std::size_t>(C));
  std::iota(all.begin(), all.end(), 0);
  r.ap = class_mean(all).value_or(0.0);
  for (const Group g : {Group::Rare, Group::Common, Group::Frequent})
    r.group_ap[g] = class_mean(partition.members(g));
  return r;
}

EvalReport report(const HeadBank& bank, const LinearClassifier& classifier,
                  const SyntheticDataset& ds, const EvalConfig& cfg,
                  const FrequencyPartition& partition, std::optional<double> bias_ratio) {
  const auto dets = run_inference(bank, classifier, ds, Split::Val, cfg);
  double accuracy = 1.0;
  if (!cfg.oracle_gt_class) {
    int correct = 0;
    for (const auto& inst : ds.val.instances) {
      const auto s = classifier.classify(inst.feature);
      const auto best = std::max_element(s.begin(), s.end()) - s.begin();
      if (best == inst.class_id) ++correct;
    }
    accuracy = static_cast<double>(correct) / static_cast<double>(ds.val.instances.size());
  }
  return report_from_detections(dets, ds, cfg, partition, accuracy, bias_ratio);
}

std::string detections_text(std::span<const Detection> detections) {
  std::ostringstream out;
  for (const auto& d : detections) {
    out << d.image_id << ' ' << d.class_id << ' ' << format_double(d.score) << ' '
        << format_double(d.box.x1) << ' ' << format_double(d.box.y1) << ' '
        << format_double(d.box.x2) << ' ' << format_double(d.box.y2) << '\n';
  }
  return out.str();
}

std::vector<Detection> parse_detections(std::string_view text) {
  std::vector<Detection> out;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    Detection d;
    std::string score, x1, y1, x2, y2;
    if (!(row >> d.image_id >> d.class_id >> score >> x1 >> y1 >> x2 >> y2))
      throw DataError("detections: malformed line '" + line + "'");
    d.score = parse_double(score);
    d.box = {parse_double(x1), parse_double(y1), parse_double(x2), parse_double(y2)};
    out.push_back(d);
  }
  return out;
}

std::string report_json(const EvalReport& r) {
  json groups = json::object();
  for (const auto& [g, v] : r.group_ap) groups[std::string(to_string(g))] = optional_json(v);
  json per_class = json::array();
  for (const auto& v : r.ap_per_class) per_class.push_back(optional_json(v));
  json j{{"oracle", r.oracle},
         {"AP", r.ap},
         {"group_AP", groups},
         {"iou_thresholds", r.iou_thresholds},
         {"AP_per_threshold", r.ap_per_threshold},
         {"AP_per_class", per_class},
         {"excluded_classes", r.excluded_classes},
         {"bias_ratio", optional_json(r.bias_ratio)},
         {"num_detections", r.num_detections},
         {"num_gt", r.num_gt},
         {"classification_accuracy", r.classification_accuracy}};
  return j.dump(2) + "\n";
}

EvalReport parse_report_json(std::string_view text) {
  EvalReport r;
  try {
    const json j = json::parse(text);
    r.oracle = j.at("oracle").get<bool>();
    r.ap = j.at("AP").get<double>();
    for (const auto& [k, v] : j.at("group_AP").items()) r.group_ap[group_from_string(k)] = optional_from(v);
    r.iou_thresholds = j.at("iou_thresholds").get<std::vector<double>>();
    r.ap_per_threshold = j.at("AP_per_threshold").get<std::vector<double>>();
    for (const auto& v : j.at("AP_per_class")) r.ap_per_class.push_back(optional_from(v));
    r.excluded_classes = j.at("excluded_classes").get<std::vector<int>>();
    r.bias_ratio = optional_from(j.at("bias_ratio"));
    r.num_detections = j.at("num_detections").get<int>();
    r.num_gt = j.at("num_gt").get<int>();
    r.classification_accuracy = j.at("classification_accuracy").get<double>();
  } catch (const json::exception& e) {
    throw DataError(std::string("report: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("report: ") + e.what());
  }
  return r;
}

std::string report_csv_header() { return "variant,AP,APr,APc,APf\n"; }

std::string report_csv_row(std::string_view variant, const EvalReport& r) {
  auto cell = [](const std::optional<double>& v) {
    return v ? format_double(100.0 * *v) : std::string();
  };
  std::ostringstream out;
  out << variant << ',' << format_double(100.0 * r.ap) << ',' << cell(r.group_ap.at(Group::Rare))
      << ',' << cell(r.group_ap.at(Group::Common)) << ',' << cell(r.group_ap.at(Group::Frequent))
      << '\n';
  return out.str();
}

}  // namespace tailreg
