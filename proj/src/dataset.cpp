#include "tailreg/dataset.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include "tailreg/digest.hpp"
#include "tailreg/errors.hpp"
#include "tailreg/random.hpp"

namespace tailreg {

namespace {

using json = nlohmann::json;

constexpr int kFormatVersion = 1;
constexpr const char* kFormatName = "tailreg.dataset";

// Sub-stream tags of the dataset seed.
constexpr std::uint64_t kStructureStream = 1;
constexpr std::uint64_t kAssignStream = 2;
constexpr std::uint64_t kTrainStream = 3;
constexpr std::uint64_t kValStream = 4;

// Box shape noise and placement.
constexpr double kSideLogSigma = 0.2;
constexpr double kAspectLogSigma = 0.25;
constexpr double kMaxPlacementIoU = 0.3;
constexpr int kPlacementTries = 200;

/// Per-class generative parameters, drawn once per dataset.
struct ClassModel {
  Eigen::MatrixXd map;  // d x 4
  Eigen::VectorXd code;  // d, orthogonal to col(M_0)
};

std::vector<ClassModel> draw_class_models(const DatasetConfig& cfg,
                                          const std::vector<double>& scale_means, Rng& rng) {
  const int d = cfg.feature_dim;
  auto gaussian = [&](int rows, int cols) {
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) m(r, c) = rng.normal();
    return m;
  };
  const Eigen::MatrixXd shared = gaussian(d, 4);
  // Private maps vary smoothly with log-scale (endpoints A, B) plus a
  // class-specific residual, so classes of similar size regress alike.
  const Eigen::MatrixXd small_end = gaussian(d, 4);
  const Eigen::MatrixXd large_end = gaussian(d, 4);

  Eigen::HouseholderQR<Eigen::MatrixXd> qr(shared);
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(d, 4);

  const double log_lo = std::log(cfg.scale_min);
  const double log_span = std::log(cfg.scale_max) - log_lo;
  const double w = cfg.shared_map_weight;

  std::vector<ClassModel> models(static_cast<std::size_t>(cfg.num_classes));
  for (int c = 0; c < cfg.num_classes; ++c) {
    double s = log_span > 0.0 ? (std::log(scale_means[c]) - log_lo) / log_span : 0.5;
    s = std::clamp(s, 0.0, 1.0);
    const Eigen::MatrixXd residual = gaussian(d, 4);
    const double norm = std::sqrt((1.0 - s) * (1.0 - s) + s * s + 1.0);
    const Eigen::MatrixXd priv = ((1.0 - s) * small_end + s * large_end + residual) / norm;
    models[c].map = w * shared + (1.0 - w) * priv;

    Eigen::VectorXd g(d);
    for (int i = 0; i < d; ++i) g(i) = rng.normal(0.0, cfg.class_code_sigma);
    models[c].code = g - q * (q.transpose() * g);
  }
  return models;
}

std::vector<int> class_image_targets(const DatasetConfig& cfg, Split split) {
  std::vector<int> out(static_cast<std::size_t>(cfg.num_classes));
  for (int r = 0; r < cfg.num_classes; ++r) {
    const double expected = cfg.head_images * std::pow(r + 1.0, -cfg.frequency_exponent);
    int train = static_cast<int>(std::lround(expected));
    train = std::clamp(train, 1, cfg.train_images);
    if (split == Split::Train) {
      out[r] = train;
    } else {
      const double scaled =
          static_cast<double>(train) * cfg.val_images / static_cast<double>(cfg.train_images);
      out[r] = std::clamp(static_cast<int>(std::lround(scaled)), cfg.min_val_images, cfg.val_images);
    }
  }
  return out;
}

/// For each image, the ascending list of classes it contains.
std::vector<std::vector<int>> assign_classes(const std::vector<int>& targets, int num_images,
                                             Rng& rng) {
  std::vector<std::vector<int>> per_image(static_cast<std::size_t>(num_images));
  std::vector<int> pool(static_cast<std::size_t>(num_images));
  for (std::size_t c = 0; c < targets.size(); ++c) {
    for (int i = 0; i < num_images; ++i) pool[i] = i;
    // Partial Fisher-Yates: the first targets[c] slots become a uniform sample.
    for (int k = 0; k < targets[c]; ++k) {
      const auto j = k + static_cast<int>(rng.below(static_cast<std::uint64_t>(num_images - k)));
      std::swap(pool[k], pool[j]);
      per_image[pool[k]].push_back(static_cast<int>(c));
    }
  }
  for (auto& v : per_image) std::sort(v.begin(), v.end());
  return per_image;
}

SplitData generate_split(const DatasetConfig& cfg, Split split,
                         const std::vector<double>& scale_means,
                         const std::vector<ClassModel>& models, Rng& assign_rng, Rng& rng) {
  const int num_images = split == Split::Train ? cfg.train_images : cfg.val_images;
  const auto per_image = assign_classes(class_image_targets(cfg, split), num_images, assign_rng);
  const int d = cfg.feature_dim;
  const double shift_den = std::max(1, cfg.num_classes - 1);

  SplitData out;
  out.num_images = num_images;
  for (int image = 0; image < num_images; ++image) {
    std::vector<Box> placed;
    for (const int c : per_image[image]) {
      const int copies = 1 + (rng.uniform() < cfg.extra_instance_prob ? 1 : 0);
      double mean_side = scale_means[c];
      if (split == Split::Val) mean_side += cfg.scale_shift_rare * c / shift_den;
      for (int k = 0; k < copies; ++k) {
        const double side = mean_side * std::exp(rng.normal(0.0, kSideLogSigma));
        const double aspect = std::exp(rng.normal(0.0, kAspectLogSigma));
        const double w = std::min(side * std::sqrt(aspect), 0.9 * cfg.image_width);
        const double h = std::min(side / std::sqrt(aspect), 0.9 * cfg.image_height);
        Box gt;
        for (int attempt = 0; attempt < kPlacementTries; ++attempt) {
          const double cx = rng.uniform(0.5 * w, cfg.image_width - 0.5 * w);
          const double cy = rng.uniform(0.5 * h, cfg.image_height - 0.5 * h);
          gt = Box::from_center(cx, cy, w, h);
          const bool clear = std::none_of(placed.begin(), placed.end(), [&](const Box& other) {
            return iou(gt, other) > kMaxPlacementIoU;
          });
          if (clear) break;
        }
        placed.push_back(gt);

        const double sj = cfg.proposal_jitter_sigma;
        Box proposal = gt;
        if (sj > 0.0) {
          const double jx = rng.normal(0.0, sj);
          const double jy = rng.normal(0.0, sj);
          const double jw = rng.normal(0.0, sj);
          const double jh = rng.normal(0.0, sj);
          proposal = Box::from_center(gt.cx() + w * jx, gt.cy() + h * jy, w * std::exp(jw),
                                      h * std::exp(jh));
        }
        Instance inst;
        inst.image_id = image;
        inst.class_id = c;
        inst.gt_box = gt;
        inst.proposal_box = proposal;
        inst.target_delta = encode_delta(proposal, gt);
        const auto t = inst.target_delta.as_array();
        const Eigen::Vector4d tv(t[0], t[1], t[2], t[3]);
        const Eigen::VectorXd f = models[c].map * tv + models[c].code;
        inst.feature.resize(static_cast<std::size_t>(d));
        for (int i = 0; i < d; ++i) {
          const double eps = cfg.noise_sigma > 0.0 ? rng.normal(0.0, cfg.noise_sigma) : 0.0;
          inst.feature[i] = f(i) + eps;
        }
        out.instances.push_back(std::move(inst));
      }
    }
  }
  return out;
}

json config_to_json(const DatasetConfig& c) {
  return json{{"num_classes", c.num_classes},
              {"train_images", c.train_images},
              {"val_images", c.val_images},
              {"min_val_images", c.min_val_images},
              {"frequency_exponent", c.frequency_exponent},
              {"head_images", c.head_images},
              {"scale_means", c.scale_means},
              {"scale_min", c.scale_min},
              {"scale_max", c.scale_max},
              {"scale_shift_rare", c.scale_shift_rare},
              {"feature_dim", c.feature_dim},
              {"shared_map_weight", c.shared_map_weight},
              {"noise_sigma", c.noise_sigma},
              {"proposal_jitter_sigma", c.proposal_jitter_sigma},
              {"class_code_sigma", c.class_code_sigma},
              {"extra_instance_prob", c.extra_instance_prob},
              {"image_width", c.image_width},
              {"image_height", c.image_height},
              {"seed", c.seed}};
}

DatasetConfig config_from_json(const json& j) {
  DatasetConfig c;
  c.num_classes = j.at("num_classes").get<int>();
  c.train_images = j.at("train_images").get<int>();
  c.val_images = j.at("val_images").get<int>();
  c.min_val_images = j.at("min_val_images").get<int>();
  c.frequency_exponent = j.at("frequency_exponent").get<double>();
  c.head_images = j.at("head_images").get<double>();
  c.scale_means = j.at("scale_means").get<std::vector<double>>();
  c.scale_min = j.at("scale_min").get<double>();
  c.scale_max = j.at("scale_max").get<double>();
  c.scale_shift_rare = j.at("scale_shift_rare").get<double>();
  c.feature_dim = j.at("feature_dim").get<int>();
  c.shared_map_weight = j.at("shared_map_weight").get<double>();
  c.noise_sigma = j.at("noise_sigma").get<double>();
  c.proposal_jitter_sigma = j.at("proposal_jitter_sigma").get<double>();
  c.class_code_sigma = j.at("class_code_sigma").get<double>();
  c.extra_instance_prob = j.at("extra_instance_prob").get<double>();
  c.image_width = j.at("image_width").get<double>();
  c.image_height = j.at("image_height").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

json box_json(const Box& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }
Box box_from(const json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(),
          j.at(3).get<double>()};
}

void append_records(std::string& body, Split split, const SplitData& data) {
  for (const auto& inst : data.instances) {
    const auto t = inst.target_delta.as_array();
    json rec{{"split", to_string(split)},
             {"image", inst.image_id},
             {"class", inst.class_id},
             {"gt", box_json(inst.gt_box)},
             {"proposal", box_json(inst.proposal_box)},
             {"delta", json::array({t[0], t[1], t[2], t[3]})},
             {"feature", inst.feature}};
    body += rec.dump();
    body += '\n';
  }
}

}  // namespace

std::string_view to_string(Split s) { return s == Split::Train ? "train" : "val"; }

void DatasetConfig::validate() const {
  if (num_classes < 3) throw ConfigError("num_classes", "must be >= 3");
  if (train_images < 1) throw ConfigError("train_images", "must be positive");
  if (val_images < 1) throw ConfigError("val_images", "must be positive");
  if (min_val_images < 1 || min_val_images > val_images)
    throw ConfigError("min_val_images", "must lie in [1, val_images]");
  if (!(frequency_exponent > 0.0) || !std::isfinite(frequency_exponent))
    throw ConfigError("frequency_exponent", "must be a positive finite number");
  if (!(head_images >= 1.0) || !std::isfinite(head_images))
    throw ConfigError("head_images", "must be >= 1");
  if (!scale_means.empty()) {
    if (static_cast<int>(scale_means.size()) != num_classes)
      throw ConfigError("scale_means", "must have num_classes entries");
    for (double s : scale_means)
      if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("scale_means", "all must be > 0");
  }
  if (!(scale_min > 0.0) || !(scale_max >= scale_min))
    throw ConfigError("scale_min", "need 0 < scale_min <= scale_max");
  if (!(scale_shift_rare >= 0.0)) throw ConfigError("scale_shift_rare", "must be >= 0");
  if (feature_dim < 4) throw ConfigError("feature_dim", "must be >= 4");
  if (!(shared_map_weight >= 0.0 && shared_map_weight <= 1.0))
    throw ConfigError("shared_map_weight", "must lie in [0, 1]");
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma", "must be >= 0");
  if (!(proposal_jitter_sigma >= 0.0))
    throw ConfigError("proposal_jitter_sigma", "must be >= 0");
  if (!(class_code_sigma >= 0.0)) throw ConfigError("class_code_sigma", "must be >= 0");
  if (!(extra_instance_prob >= 0.0 && extra_instance_prob <= 1.0))
    throw ConfigError("extra_instance_prob", "must lie in [0, 1]");
  if (!(image_width > 0.0) || !(image_height > 0.0))
    throw ConfigError("image_width", "image extent must be positive");
}

DatasetConfig dataset_preset(std::string_view name) {
  DatasetConfig c;
  if (name == "lt60") return c;
  if (name == "lt60-clean") {
    c.noise_sigma = 0.0;
    c.proposal_jitter_sigma = 0.0;
    return c;
  }
  if (name == "tiny") {
    c.num_classes = 6;
    c.train_images = 120;
    c.val_images = 40;
    c.head_images = 150.0;
    c.frequency_exponent = 2.0;
    c.feature_dim = 8;
    return c;
  }
  throw ConfigError("preset", "unknown dataset preset '" + std::string(name) + "'");
}

SyntheticDataset generate(const DatasetConfig& config) {
  config.validate();
  SyntheticDataset ds;
  ds.config = config;

  Rng structure(derive_seed(config.seed, kStructureStream));
  std::vector<double> scales = config.scale_means;
  if (scales.empty()) {
    const double lo = std::log(config.scale_min);
    const double hi = std::log(config.scale_max);
    for (int c = 0; c < config.num_classes; ++c) scales.push_back(std::exp(structure.uniform(lo, hi)));
  }
  const auto models = draw_class_models(config, scales, structure);

  Rng assign(derive_seed(config.seed, kAssignStream));
  Rng train_rng(derive_seed(config.seed, kTrainStream));
  Rng val_rng(derive_seed(config.seed, kValStream));
  ds.train = generate_split(config, Split::Train, scales, models, assign, train_rng);
  ds.val = generate_split(config, Split::Val, scales, models, assign, val_rng);
  return ds;
}

std::string serialize(const SyntheticDataset& ds) {
  std::string body;
  append_records(body, Split::Train, ds.train);
  append_records(body, Split::Val, ds.val);
  json header{{"format", kFormatName},
              {"version", kFormatVersion},
              {"config", config_to_json(ds.config)},
              {"train_images", ds.train.num_images},
              {"val_images", ds.val.num_images},
              {"train_instances", ds.train.instances.size()},
              {"val_instances", ds.val.instances.size()},
              {"digest", sha256_hex(body)}};
  return header.dump() + "\n" + body;
}

SyntheticDataset deserialize(std::string_view text) {
  const auto nl = text.find('\n');
  if (nl == std::string_view::npos) throw DataError("dataset: missing header record");
  SyntheticDataset ds;
  std::size_t expected_train = 0;
  std::size_t expected_val = 0;
  try {
    const json header = json::parse(text.substr(0, nl));
    if (header.at("format").get<std::string>() != kFormatName)
      throw DataError("dataset: unexpected format tag");
    if (header.at("version").get<int>() != kFormatVersion)
      throw DataError("dataset: unsupported version " + header.at("version").dump());
    const std::string_view body = text.substr(nl + 1);
    if (sha256_hex(body) != header.at("digest").get<std::string>())
      throw DataError("dataset: body digest mismatch");
    ds.config = config_from_json(header.at("config"));
    ds.train.num_images = header.at("train_images").get<int>();
    ds.val.num_images = header.at("val_images").get<int>();
    expected_train = header.at("train_instances").get<std::size_t>();
    expected_val = header.at("val_instances").get<std::size_t>();

    std::size_t pos = 0;
    while (pos < body.size()) {
      auto end = body.find('\n', pos);
      if (end == std::string_view::npos) end = body.size();
      const auto line = body.substr(pos, end - pos);
      pos = end + 1;
      if (line.empty()) continue;
      const json rec = json::parse(line);
      Instance inst;
      inst.image_id = rec.at("image").get<int>();
      inst.class_id = rec.at("class").get<int>();
      inst.gt_box = box_from(rec.at("gt"));
      inst.proposal_box = box_from(rec.at("proposal"));
      const auto& dl = rec.at("delta");
      inst.target_delta = {dl.at(0).get<double>(), dl.at(1).get<double>(),
                           dl.at(2).get<double>(), dl.at(3).get<double>()};
      inst.feature = rec.at("feature").get<std::vector<double>>();
      auto& dst = rec.at("split").get<std::string>() == "train" ? ds.train : ds.val;
      dst.instances.push_back(std::move(inst));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("dataset: malformed record: ") + e.what());
  }
  if (ds.train.instances.size() != expected_train || ds.val.instances.size() != expected_val)
    throw DataError("dataset: instance count does not match header");
  for (const auto* split : {&ds.train, &ds.val}) {
    for (const auto& inst : split->instances) {
      if (inst.class_id < 0 || inst.class_id >= ds.config.num_classes)
        throw DataError("dataset: class id out of range");
      if (static_cast<int>(inst.feature.size()) != ds.config.feature_dim)
        throw DataError("dataset: feature length mismatch");
      if (!inst.target_delta.finite()) throw DataError("dataset: non-finite target delta");
    }
  }
  return ds;
}

void save_dataset(const SyntheticDataset& ds, const std::filesystem::path& path) {
  write_text_file(path, serialize(ds));
}

SyntheticDataset load_dataset(const std::filesystem::path& path) {
  return deserialize(read_text_file(path));
}

std::string_view to_string(Group g) {
  switch (g) {
    case Group::Rare: return "rare";
    case Group::Common: return "common";
    case Group::Frequent: return "frequent";
  }
  return "?";
}

Group group_from_string(std::string_view s) {
  if (s == "rare" || s == "r") return Group::Rare;
  if (s == "common" || s == "c") return Group::Common;
  if (s == "frequent" || s == "f") return Group::Frequent;
  throw ConfigError("group", "unknown frequency group '" + std::string(s) + "'");
}

std::vector<int> FrequencyPartition::members(Group g) const {
  std::vector<int> out;
  for (int c = 0; c < num_classes(); ++c)
    if (group[c] == g) out.push_back(c);
  return out;
}

std::vector<int> image_counts(const SyntheticDataset& ds, Split split) {
  std::vector<std::set<int>> images(static_cast<std::size_t>(ds.num_classes()));
  for (const auto& inst : ds.split(split).instances) images[inst.class_id].insert(inst.image_id);
  std::vector<int> out;
  out.reserve(images.size());
  for (const auto& s : images) out.push_back(static_cast<int>(s.size()));
  return out;
}

FrequencyPartition partition_by_counts(const std::vector<int>& counts,
                                       const FrequencyThresholds& thresholds) {
  if (thresholds.rare_max < 0 || thresholds.common_max < thresholds.rare_max)
    throw ConfigError("thresholds", "need 0 <= rare_max <= common_max");
  FrequencyPartition p;
  p.thresholds = thresholds;
  p.image_counts = counts;
  for (const int n : counts) {
    if (n <= thresholds.rare_max) p.group.push_back(Group::Rare);
    else if (n <= thresholds.common_max) p.group.push_back(Group::Common);
    else p.group.push_back(Group::Frequent);
  }
  return p;
}

FrequencyPartition partition_by_frequency(const SyntheticDataset& ds,
                                          const FrequencyThresholds& thresholds, Split split) {
  if (ds.train.instances.empty()) throw ContractError("partition_by_frequency: empty dataset");
  return partition_by_counts(image_counts(ds, split), thresholds);
}

std::vector<ClassScaleRow> class_scale_report(const SyntheticDataset& ds) {
  const auto C = static_cast<std::size_t>(ds.num_classes());
  std::vector<double> sum[2] = {std::vector<double>(C, 0.0), std::vector<double>(C, 0.0)};
  std::vector<int> n[2] = {std::vector<int>(C, 0), std::vector<int>(C, 0)};
  for (int s = 0; s < 2; ++s) {
    for (const auto& inst : ds.split(s == 0 ? Split::Train : Split::Val).instances) {
      sum[s][inst.class_id] += std::sqrt(inst.gt_box.area());
      ++n[s][inst.class_id];
    }
  }
  std::vector<ClassScaleRow> rows(C);
  for (std::size_t c = 0; c < C; ++c) {
    rows[c].class_id = static_cast<int>(c);
    if (n[0][c] > 0) rows[c].train_mean = sum[0][c] / n[0][c];
    if (n[1][c] > 0) rows[c].val_mean = sum[1][c] / n[1][c];
    if (rows[c].train_mean && rows[c].val_mean)
      rows[c].delta = -(*rows[c].train_mean - *rows[c].val_mean);
  }
  return rows;
}

ClassStats class_stats(const SyntheticDataset& ds, Split split) {
  const auto C = static_cast<std::size_t>(ds.num_classes());
  ClassStats st{std::vector<int>(C, 0), std::vector<double>(C, 0.0)};
  for (const auto& inst : ds.split(split).instances) {
    ++st.instance_count[inst.class_id];
    st.mean_scale[inst.class_id] += std::sqrt(inst.gt_box.area());
  }
  for (std::size_t c = 0; c < C; ++c)
    if (st.instance_count[c] > 0) st.mean_scale[c] /= st.instance_count[c];
  return st;
}

}  // namespace tailreg
