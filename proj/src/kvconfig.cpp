#include "tailreg/kvconfig.hpp"

#include <charconv>
#include <functional>
#include <sstream>

#include "tailreg/digest.hpp"
#include "tailreg/errors.hpp"

namespace tailreg {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double to_real(const std::string& key, const std::string& v) {
  try {
    return parse_double(v);
  } catch (const DataError&) {
    throw ConfigError(key, "expected a number, got '" + v + "'");
  }
}

long long to_integer(const std::string& key, const std::string& v) {
  long long out = 0;
  auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || end != v.data() + v.size())
    throw ConfigError(key, "expected an integer, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key, "expected true/false, got '" + v + "'");
}

std::vector<double> to_reals(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::string cell;
  std::istringstream in(v);
  while (std::getline(in, cell, ',')) {
    cell = trim(cell);
    if (!cell.empty()) out.push_back(to_real(key, cell));
  }
  return out;
}

std::string join_reals(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += format_double(v[i]);
  }
  return out;
}

using Handler = std::function<void(const std::string& key, const std::string& value)>;

void apply_section(const KeyValueConfig& kv, std::string_view prefix,
                   const std::map<std::string, Handler, std::less<>>& handlers) {
  for (const auto& [key, value] : kv.values()) {
    if (key.rfind(prefix, 0) != 0) continue;
    const auto name = key.substr(prefix.size());
    const auto it = handlers.find(name);
    if (it == handlers.end()) throw ConfigError(key, "unknown configuration key");
    it->second(key, value);
  }
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(std::string_view text) {
  KeyValueConfig kv;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno), "expected 'key = value'");
    const auto key = trim(std::string_view(body).substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno), "empty key");
    kv.values_[key] = trim(std::string_view(body).substr(eq + 1));
  }
  const auto version = kv.get("version");
  if (!version) throw ConfigError("version", "missing version line");
  if (to_integer("version", *version) != kVersion)
    throw ConfigError("version", "unsupported config version " + *version);
  return kv;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  return parse(read_text_file(path));
}

std::optional<std::string> KeyValueConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

void KeyValueConfig::set(const std::string& key, std::string value) {
  values_[key] = std::move(value);
}

std::string KeyValueConfig::dump() const {
  std::ostringstream out;
  out << "version = " << kVersion << '\n';
  for (const auto& [k, v] : values_)
    if (k != "version") out << k << " = " << v << '\n';
  return out.str();
}

void apply_dataset_keys(const KeyValueConfig& kv, DatasetConfig& c) {
  // A preset replaces the whole config before individual overrides apply.
  if (const auto preset = kv.get("dataset.preset")) {
    const auto seed = c.seed;
    c = dataset_preset(*preset);
    c.seed = seed;
  }
  const std::map<std::string, Handler, std::less<>> h{
      {"preset", [](auto&, auto&) {}},
      {"num_classes", [&](auto& k, auto& v) { c.num_classes = static_cast<int>(to_integer(k, v)); }},
      {"train_images", [&](auto& k, auto& v) { c.train_images = static_cast<int>(to_integer(k, v)); }},
      {"val_images", [&](auto& k, auto& v) { c.val_images = static_cast<int>(to_integer(k, v)); }},
      {"min_val_images", [&](auto& k, auto& v) { c.min_val_images = static_cast<int>(to_integer(k, v)); }},
      {"frequency_exponent", [&](auto& k, auto& v) { c.frequency_exponent = to_real(k, v); }},
      {"head_images", [&](auto& k, auto& v) { c.head_images = to_real(k, v); }},
      {"scale_means", [&](auto& k, auto& v) { c.scale_means = to_reals(k, v); }},
      {"scale_min", [&](auto& k, auto& v) { c.scale_min = to_real(k, v); }},
      {"scale_max", [&](auto& k, auto& v) { c.scale_max = to_real(k, v); }},
      {"scale_shift_rare", [&](auto& k, auto& v) { c.scale_shift_rare = to_real(k, v); }},
      {"feature_dim", [&](auto& k, auto& v) { c.feature_dim = static_cast<int>(to_integer(k, v)); }},
      {"shared_map_weight", [&](auto& k, auto& v) { c.shared_map_weight = to_real(k, v); }},
      {"noise_sigma", [&](auto& k, auto& v) { c.noise_sigma = to_real(k, v); }},
      {"proposal_jitter_sigma", [&](auto& k, auto& v) { c.proposal_jitter_sigma = to_real(k, v); }},
      {"class_code_sigma", [&](auto& k, auto& v) { c.class_code_sigma = to_real(k, v); }},
      {"extra_instance_prob", [&](auto& k, auto& v) { c.extra_instance_prob = to_real(k, v); }},
      {"image_width", [&](auto& k, auto& v) { c.image_width = to_real(k, v); }},
      {"image_height", [&](auto& k, auto& v) { c.image_height = to_real(k, v); }},
      {"seed", [&](auto& k, auto& v) { c.seed = static_cast<std::uint64_t>(to_integer(k, v)); }},
  };
  apply_section(kv, "dataset.", h);
}

void apply_train_keys(const KeyValueConfig& kv, TrainConfig& c) {
  const std::map<std::string, Handler, std::less<>> h{
      {"epochs", [&](auto& k, auto& v) { c.epochs = static_cast<int>(to_integer(k, v)); }},
      {"batch_size", [&](auto& k, auto& v) { c.batch_size = static_cast<int>(to_integer(k, v)); }},
      {"learning_rate", [&](auto& k, auto& v) { c.learning_rate = to_real(k, v); }},
      {"warmup_steps", [&](auto& k, auto& v) { c.warmup_steps = static_cast<int>(to_integer(k, v)); }},
      {"momentum", [&](auto& k, auto& v) { c.momentum = to_real(k, v); }},
      {"seed", [&](auto& k, auto& v) { c.seed = static_cast<std::uint64_t>(to_integer(k, v)); }},
      {"mode", [&](auto&, auto& v) { c.mode = train_mode_from_string(v); }},
      {"lambda_cls", [&](auto& k, auto& v) { c.lambda_cls = to_real(k, v); }},
      {"lambda_reg", [&](auto& k, auto& v) { c.lambda_reg = to_real(k, v); }},
      {"smooth_l1_beta", [&](auto& k, auto& v) { c.smooth_l1_beta = to_real(k, v); }},
      {"init_sigma", [&](auto& k, auto& v) { c.init_sigma = to_real(k, v); }},
      {"rare_max", [&](auto& k, auto& v) { c.thresholds.rare_max = static_cast<int>(to_integer(k, v)); }},
      {"common_max", [&](auto& k, auto& v) { c.thresholds.common_max = static_cast<int>(to_integer(k, v)); }},
  };
  apply_section(kv, "train.", h);
}

void apply_eval_keys(const KeyValueConfig& kv, EvalConfig& c) {
  const std::map<std::string, Handler, std::less<>> h{
      {"iou_thresholds", [&](auto& k, auto& v) { c.iou_thresholds = to_reals(k, v); }},
      {"score_threshold", [&](auto& k, auto& v) { c.score_threshold = to_real(k, v); }},
      {"nms_threshold", [&](auto& k, auto& v) { c.nms_threshold = to_real(k, v); }},
      {"max_detections_per_image",
       [&](auto& k, auto& v) { c.max_detections_per_image = static_cast<int>(to_integer(k, v)); }},
      {"oracle_gt_class", [&](auto& k, auto& v) { c.oracle_gt_class = to_bool(k, v); }},
      {"delta_clamp", [&](auto& k, auto& v) { c.delta_clamp = to_real(k, v); }},
  };
  apply_section(kv, "eval.", h);
}

void echo_dataset(const DatasetConfig& c, KeyValueConfig& kv) {
  kv.set("dataset.num_classes", std::to_string(c.num_classes));
  kv.set("dataset.train_images", std::to_string(c.train_images));
  kv.set("dataset.val_images", std::to_string(c.val_images));
  kv.set("dataset.min_val_images", std::to_string(c.min_val_images));
  kv.set("dataset.frequency_exponent", format_double(c.frequency_exponent));
  kv.set("dataset.head_images", format_double(c.head_images));
  kv.set("dataset.scale_means", join_reals(c.scale_means));
  kv.set("dataset.scale_min", format_double(c.scale_min));
  kv.set("dataset.scale_max", format_double(c.scale_max));
  kv.set("dataset.scale_shift_rare", format_double(c.scale_shift_rare));
  kv.set("dataset.feature_dim", std::to_string(c.feature_dim));
  kv.set("dataset.shared_map_weight", format_double(c.shared_map_weight));
  kv.set("dataset.noise_sigma", format_double(c.noise_sigma));
  kv.set("dataset.proposal_jitter_sigma", format_double(c.proposal_jitter_sigma));
  kv.set("dataset.class_code_sigma", format_double(c.class_code_sigma));
  kv.set("dataset.extra_instance_prob", format_double(c.extra_instance_prob));
  kv.set("dataset.image_width", format_double(c.image_width));
  kv.set("dataset.image_height", format_double(c.image_height));
  kv.set("dataset.seed", std::to_string(c.seed));
}

void echo_train(const TrainConfig& c, KeyValueConfig& kv) {
  kv.set("train.epochs", std::to_string(c.epochs));
  kv.set("train.batch_size", std::to_string(c.batch_size));
  kv.set("train.learning_rate", format_double(c.learning_rate));
  kv.set("train.warmup_steps", std::to_string(c.warmup_steps));
  kv.set("train.momentum", format_double(c.momentum));
  kv.set("train.seed", std::to_string(c.seed));
  kv.set("train.mode", std::string(to_string(c.mode)));
  kv.set("train.lambda_cls", format_double(c.lambda_cls));
  kv.set("train.lambda_reg", format_double(c.lambda_reg));
  kv.set("train.smooth_l1_beta", format_double(c.smooth_l1_beta));
  kv.set("train.init_sigma", format_double(c.init_sigma));
  kv.set("train.rare_max", std::to_string(c.thresholds.rare_max));
  kv.set("train.common_max", std::to_string(c.thresholds.common_max));
}

void echo_eval(const EvalConfig& c, KeyValueConfig& kv) {
  kv.set("eval.iou_thresholds", join_reals(c.iou_thresholds));
  kv.set("eval.score_threshold", format_double(c.score_threshold));
  kv.set("eval.nms_threshold", format_double(c.nms_threshold));
  kv.set("eval.max_detections_per_image", std::to_string(c.max_detections_per_image));
  kv.set("eval.oracle_gt_class", c.oracle_gt_class ? "true" : "false");
  kv.set("eval.delta_clamp", format_double(c.delta_clamp));
}

}  // namespace tailreg
