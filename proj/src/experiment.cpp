#include "tailreg/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <nlohmann/json.hpp>
#include <ostream>
#include <sstream>

#include "tailreg/digest.hpp"
#include "tailreg/errors.hpp"

namespace tailreg {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::vector<std::string> split_list(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (const char ch : text) {
    if (ch == ' ' || ch == '\t' || ch == ',') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// Variant lists use whitespace only: merge:r,c carries a comma.
std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

std::uint64_t parse_seed(const std::string& s) {
  std::uint64_t v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size())
    throw ConfigError("sweep.seeds", "not a seed: '" + s + "'");
  return v;
}

std::string report_name(Protocol p) {
  return p == Protocol::Predicted ? "report.json" : "report_gt.json";
}

std::string detections_name(Protocol p) {
  return p == Protocol::Predicted ? "detections.txt" : "detections_gt.txt";
}

fs::path cell_dir(const fs::path& out, const std::string& variant, std::uint64_t seed) {
  return out / variant / std::to_string(seed);
}

fs::path dataset_path(const fs::path& out, std::uint64_t seed) {
  return out / "dataset" / std::to_string(seed) / "dataset.jsonl";
}

DatasetConfig seeded_dataset(const ExperimentSpec& spec, std::uint64_t seed) {
  DatasetConfig c = spec.dataset;
  c.seed = seed;
  return c;
}

TrainConfig seeded_train(const ExperimentSpec& spec, std::uint64_t seed) {
  TrainConfig c = spec.train;
  c.seed = seed;
  return c;
}

std::string join_protocols(const std::vector<Protocol>& ps) {
  std::string out;
  for (const auto p : ps) {
    if (!out.empty()) out += ' ';
    out += to_string(p);
  }
  return out;
}

std::string cell_config_text(const ExperimentSpec& spec, const std::string& variant,
                             std::uint64_t seed, const std::string& dataset_digest) {
  KeyValueConfig kv;
  kv.set("cell.variant", variant);
  kv.set("cell.seed", std::to_string(seed));
  kv.set("cell.dataset_digest", dataset_digest);
  kv.set("cell.protocols", join_protocols(spec.protocols));
  echo_dataset(seeded_dataset(spec, seed), kv);
  echo_train(seeded_train(spec, seed), kv);
  echo_eval(spec.eval, kv);
  return kv.dump();
}

SyntheticDataset obtain_dataset(const fs::path& path, const DatasetConfig& cfg, bool& reused) {
  reused = false;
  if (fs::exists(path)) {
    try {
      auto ds = load_dataset(path);
      if (ds.config == cfg) {
        reused = true;
        return ds;
      }
    } catch (const DataError&) {
    }
  }
  auto ds = generate(cfg);
  save_dataset(ds, path);
  write_text_file(path.parent_path() / "manifest.json",
                  Manifest::build(path.parent_path(), {"dataset.jsonl"}).json());
  return ds;
}

bool cell_complete(const fs::path& dir, const std::string& expected_config,
                   const std::vector<Protocol>& protocols) {
  const auto mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) return false;
  try {
    const auto m = Manifest::parse(read_text_file(mpath));
    if (!m.check(dir).empty()) return false;
    for (const auto p : protocols)
      if (!m.files.count(report_name(p))) return false;
    return read_text_file(dir / "config.txt") == expected_config;
  } catch (const std::exception&) {
    return false;
  }
}

CellResult load_cell(const fs::path& dir, const std::string& variant, std::uint64_t seed,
                     const std::vector<Protocol>& protocols) {
  CellResult cell;
  cell.variant = variant;
  cell.seed = seed;
  cell.dir = dir;
  const auto ledger_text = read_text_file(dir / "ledger.csv");
  cell.ledger = parse_ledger_csv(ledger_text);
  cell.ledger_digest = sha256_hex(ledger_text);
  const auto bank = deserialize_bank(read_text_file(dir / "bank.txt"));
  cell.weights_digest = bank.digest.value_or("");
  cell.ledger.weights_digest = cell.weights_digest;
  for (const auto p : protocols) {
    cell.reports[p] = parse_report_json(read_text_file(dir / report_name(p)));
    cell.bias_ratio = cell.reports[p].bias_ratio;
  }
  return cell;
}

void aggregate(SweepResult& r) {
  r.summaries.clear();
  for (const auto& v : r.spec.variants) {
    const auto name = v.to_string();
    for (const auto p : r.spec.protocols) {
      VariantSummary s;
      s.variant = name;
      s.protocol = p;
      for (const auto metric : kSummaryMetrics) {
        std::vector<double> values;
        for (const auto& c : r.cells)
          if (c.variant == name)
            if (const auto m = metric_value(c, p, metric)) values.push_back(*m);
        s.metrics[std::string(metric)] = summarize(values);
      }
      r.summaries.push_back(std::move(s));
    }
  }
}

std::string opt_cell(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

}  // namespace

std::string_view to_string(Protocol p) {
  return p == Protocol::Predicted ? "predicted" : "gt";
}

Protocol protocol_from_string(std::string_view s) {
  if (s == "predicted") return Protocol::Predicted;
  if (s == "gt" || s == "oracle") return Protocol::GtOracle;
  throw ConfigError("sweep.protocols", "unknown protocol '" + std::string(s) + "'");
}

void ExperimentSpec::validate() const {
  if (seeds.empty()) throw ConfigError("sweep.seeds", "need at least one seed");
  if (variants.empty()) throw ConfigError("sweep.variants", "need at least one head variant");
  if (protocols.empty()) throw ConfigError("sweep.protocols", "need at least one protocol");
  auto sorted = seeds;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw ConfigError("sweep.seeds", "duplicate seed");
  std::vector<std::string> names;
  for (const auto& v : variants) names.push_back(v.to_string());
  std::sort(names.begin(), names.end());
  if (std::adjacent_find(names.begin(), names.end()) != names.end())
    throw ConfigError("sweep.variants", "duplicate variant");
  dataset.validate();
  train.validate();
  eval.validate();
  for (const auto& v : variants)
    if (v.kind == HeadKind::Clustered && v.cluster.k > dataset.num_classes)
      throw ConfigError("sweep.variants", "cluster K exceeds num_classes in '" + v.to_string() + "'");
}

ExperimentSpec experiment_preset(std::string_view name) {
  ExperimentSpec s;
  s.name = std::string(name);
  auto set = [&](std::initializer_list<const char*> vs) {
    for (const char* v : vs) s.variants.push_back(HeadSpec::parse(v));
  };
  if (name == "table1") {
    set({"specific", "agnostic"});
    s.protocols = {Protocol::Predicted, Protocol::GtOracle};
  } else if (name == "table3a") {
    set({"cab:0", "cab:0.2", "cab:0.5", "cab:0.8", "cab:1"});
  } else if (name == "table3b") {
    set({"specific", "cluster:5:num", "cluster:5:scale", "cluster:10:num", "cluster:10:scale"});
  } else if (name == "table3c") {
    set({"specific", "merge:r", "merge:c", "merge:rc", "merge:rcf"});
  } else {
    throw ConfigError("sweep.preset", "unknown experiment preset '" + std::string(name) + "'");
  }
  return s;
}

std::vector<std::string> experiment_preset_names() {
  return {"table1", "table3a", "table3b", "table3c"};
}

ExperimentSpec experiment_from_config(const KeyValueConfig& kv) {
  ExperimentSpec s;
  if (const auto p = kv.get("sweep.preset")) s = experiment_preset(*p);
  const std::vector<std::string> known{"sweep.preset", "sweep.name",      "sweep.seeds",
                                       "sweep.variants", "sweep.protocols"};
  for (const auto& [k, v] : kv.values())
    if (k.rfind("sweep.", 0) == 0 && std::find(known.begin(), known.end(), k) == known.end())
      throw ConfigError(k, "unknown configuration key");
  if (const auto v = kv.get("sweep.name")) s.name = *v;
  if (const auto v = kv.get("sweep.seeds")) {
    s.seeds.clear();
    for (const auto& t : split_list(*v)) s.seeds.push_back(parse_seed(t));
  }
  if (const auto v = kv.get("sweep.variants")) {
    s.variants.clear();
    for (const auto& t : split_words(*v)) s.variants.push_back(HeadSpec::parse(t));
  }
  if (const auto v = kv.get("sweep.protocols")) {
    s.protocols.clear();
    for (const auto& t : split_list(*v)) s.protocols.push_back(protocol_from_string(t));
  }
  if (const auto v = kv.get("dataset.preset")) s.dataset_preset = *v;
  s.dataset = dataset_preset(s.dataset_preset);
  apply_dataset_keys(kv, s.dataset);
  apply_train_keys(kv, s.train);
  apply_eval_keys(kv, s.eval);
  return s;
}

KeyValueConfig echo_experiment(const ExperimentSpec& spec) {
  KeyValueConfig kv;
  kv.set("sweep.name", spec.name);
  std::string seeds;
  for (const auto s : spec.seeds) seeds += (seeds.empty() ? "" : " ") + std::to_string(s);
  kv.set("sweep.seeds", seeds);
  std::string variants;
  for (const auto& v : spec.variants) variants += (variants.empty() ? "" : " ") + v.to_string();
  kv.set("sweep.variants", variants);
  kv.set("sweep.protocols", join_protocols(spec.protocols));
  kv.set("dataset.preset", spec.dataset_preset);
  echo_dataset(spec.dataset, kv);
  echo_train(spec.train, kv);
  echo_eval(spec.eval, kv);
  kv.erase("dataset.seed");
  kv.erase("train.seed");
  return kv;
}

MetricSummary summarize(const std::vector<double>& values) {
  MetricSummary s;
  s.n = static_cast<int>(values.size());
  if (s.n == 0) return s;
  double sum = 0.0;
  for (const double v : values) sum += v;
  s.mean = sum / s.n;
  if (s.n > 1) {
    double ss = 0.0;
    for (const double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / (s.n - 1));
  }
  return s;
}

std::optional<double> metric_value(const CellResult& cell, Protocol p, std::string_view metric) {
  if (metric == "bias_ratio") return cell.bias_ratio;
  const auto it = cell.reports.find(p);
  if (it == cell.reports.end()) return std::nullopt;
  const auto& r = it->second;
  if (metric == "AP") return r.ap;
  const auto group = [&](Group g) -> std::optional<double> {
    const auto git = r.group_ap.find(g);
    return git == r.group_ap.end() ? std::nullopt : git->second;
  };
  if (metric == "APr") return group(Group::Rare);
  if (metric == "APc") return group(Group::Common);
  if (metric == "APf") return group(Group::Frequent);
  throw ContractError("unknown metric '" + std::string(metric) + "'");
}

const CellResult& SweepResult::cell(std::string_view variant, std::uint64_t seed) const {
  for (const auto& c : cells)
    if (c.variant == variant && c.seed == seed) return c;
  throw ContractError("no cell " + std::string(variant) + "/" + std::to_string(seed));
}

const VariantSummary& SweepResult::summary(std::string_view variant, Protocol p) const {
  for (const auto& s : summaries)
    if (s.variant == variant && s.protocol == p) return s;
  throw ContractError("no summary for " + std::string(variant) + " (" + std::string(to_string(p)) + ")");
}

Manifest Manifest::build(const fs::path& dir, const std::vector<std::string>& names) {
  Manifest m;
  for (const auto& n : names) m.files[n] = sha256_file(dir / n);
  return m;
}

std::string Manifest::json() const {
  nlohmann::json j{{"format", "tailreg.manifest"}, {"version", 1}, {"files", files}};
  return j.dump(2) + "\n";
}

Manifest Manifest::parse(std::string_view text) {
  Manifest m;
  try {
    const auto j = json::parse(text);
    if (j.at("format") != "tailreg.manifest" || j.at("version") != 1)
      throw DataError("manifest: unsupported format");
    m.files = j.at("files").get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  return m;
}

std::vector<std::string> Manifest::check(const fs::path& dir) const {
  std::vector<std::string> problems;
  for (const auto& [name, digest] : files) {
    const auto path = dir / name;
    if (!fs::exists(path)) {
      problems.push_back(path.string() + ": missing");
      continue;
    }
    if (sha256_file(path) != digest) problems.push_back(path.string() + ": digest mismatch");
  }
  return problems;
}

void save_model(const TrainResult& model, const fs::path& dir) {
  write_text_file(dir / "bank.txt", serialize_bank(model.bank));
  write_text_file(dir / "classifier.txt", serialize_classifier(model.classifier));
  write_text_file(dir / "ledger.csv", ledger_csv(model.ledger));
}

TrainResult load_model(const fs::path& dir) {
  auto bank = deserialize_bank(read_text_file(dir / "bank.txt"));
  auto clf = deserialize_classifier(read_text_file(dir / "classifier.txt"));
  auto ledger = parse_ledger_csv(read_text_file(dir / "ledger.csv"));
  ledger.weights_digest = bank.digest.value_or("");
  return {std::move(bank), std::move(clf), std::move(ledger)};
}

SweepResult run_experiment(const ExperimentSpec& spec, std::ostream* log) {
  spec.validate();
  if (spec.out_dir.empty()) throw ConfigError("out", "output directory not set");
  SweepResult result;
  result.spec = spec;

  const auto config_text = echo_experiment(spec).dump();
  write_text_file(spec.out_dir / "config.txt", config_text);

  for (const auto seed : spec.seeds) {
    const auto dpath = dataset_path(spec.out_dir, seed);
    bool reused = false;
    const auto ds = obtain_dataset(dpath, seeded_dataset(spec, seed), reused);
    if (log) *log << (reused ? "reuse" : "generate") << " dataset seed " << seed << '\n';
    const auto dataset_digest = sha256_file(dpath);
    const auto partition = partition_by_frequency(ds, spec.train.thresholds);

    for (const auto& variant : spec.variants) {
      const auto name = variant.to_string();
      const auto dir = cell_dir(spec.out_dir, name, seed);
      const auto expected = cell_config_text(spec, name, seed, dataset_digest);
      if (cell_complete(dir, expected, spec.protocols)) {
        auto cell = load_cell(dir, name, seed, spec.protocols);
        cell.skipped = true;
        result.cells.push_back(std::move(cell));
        ++result.skipped;
        if (log) *log << "skip " << name << " seed " << seed << '\n';
        continue;
      }
      if (log) *log << "train " << name << " seed " << seed << '\n';
      fs::remove(dir / "manifest.json");
      const auto model = train(ds, variant, seeded_train(spec, seed));
      save_model(model, dir);

      CellResult cell;
      cell.variant = name;
      cell.seed = seed;
      cell.dir = dir;
      cell.ledger = model.ledger;
      cell.ledger_digest = sha256_hex(ledger_csv(model.ledger));
      cell.weights_digest = model.bank.digest.value_or("");
      cell.bias_ratio = bias_ratio(model.ledger, partition);

      std::vector<std::string> files{"config.txt", "bank.txt", "classifier.txt", "ledger.csv"};
      for (const auto p : spec.protocols) {
        EvalConfig ec = spec.eval;
        ec.oracle_gt_class = p == Protocol::GtOracle;
        const auto dets = run_inference(model.bank, model.classifier, ds, Split::Val, ec);
        auto full = report(model.bank, model.classifier, ds, ec, partition, cell.bias_ratio);
        write_text_file(dir / detections_name(p), detections_text(dets));
        write_text_file(dir / report_name(p), report_json(full));
        files.push_back(detections_name(p));
        files.push_back(report_name(p));
        // Reload so fresh and resumed cells carry identical values.
        cell.reports[p] = parse_report_json(report_json(full));
      }
      write_text_file(dir / "config.txt", expected);
      write_text_file(dir / "manifest.json", Manifest::build(dir, files).json());
      result.cells.push_back(std::move(cell));
      ++result.trained;
    }
  }
  aggregate(result);
  write_text_file(spec.out_dir / "cells.csv", cells_csv(result));
  write_text_file(spec.out_dir / "summary.csv", summary_csv(result));
  write_text_file(spec.out_dir / "table.csv", table_csv(result));
  write_text_file(spec.out_dir / "manifest.json",
                  Manifest::build(spec.out_dir, {"config.txt", "cells.csv", "summary.csv", "table.csv"})
                      .json());
  return result;
}

SweepResult load_experiment(const fs::path& dir) {
  auto spec = experiment_from_config(KeyValueConfig::load(dir / "config.txt"));
  spec.out_dir = dir;
  SweepResult result;
  result.spec = spec;
  for (const auto seed : spec.seeds)
    for (const auto& v : spec.variants) {
      const auto cdir = cell_dir(dir, v.to_string(), seed);
      if (!fs::exists(cdir / "manifest.json"))
        throw DataError("incomplete sweep: no results in " + cdir.string());
      auto cell = load_cell(cdir, v.to_string(), seed, spec.protocols);
      cell.skipped = true;
      result.cells.push_back(std::move(cell));
    }
  aggregate(result);
  return result;
}

std::string cells_csv(const SweepResult& r) {
  std::ostringstream out;
  out << "variant,protocol,seed,AP,APr,APc,APf,bias_ratio,ledger_digest,weights_digest\n";
  for (const auto& c : r.cells)
    for (const auto p : r.spec.protocols) {
      out << c.variant << ',' << to_string(p) << ',' << c.seed;
      for (const auto metric : kSummaryMetrics) out << ',' << opt_cell(metric_value(c, p, metric));
      out << ',' << c.ledger_digest << ',' << c.weights_digest << '\n';
    }
  return out.str();
}

std::string summary_csv(const SweepResult& r) {
  std::ostringstream out;
  out << "variant,protocol,n";
  for (const auto metric : kSummaryMetrics) out << ',' << metric << "_mean," << metric << "_std";
  out << '\n';
  for (const auto& s : r.summaries) {
    out << s.variant << ',' << to_string(s.protocol) << ',' << s.metrics.at("AP").n;
    for (const auto metric : kSummaryMetrics) {
      const auto& m = s.metrics.find(metric)->second;
      if (m.n == 0)
        out << ",,";
      else
        out << ',' << format_double(m.mean) << ',' << format_double(m.stddev);
    }
    out << '\n';
  }
  return out.str();
}

std::string table_csv(const SweepResult& r) {
  std::string out = report_csv_header();
  for (const auto& s : r.summaries) {
    EvalReport mean;
    auto get = [&](std::string_view metric) -> std::optional<double> {
      const auto& m = s.metrics.find(metric)->second;
      if (m.n == 0) return std::nullopt;
      return m.mean;
    };
    mean.ap = get("AP").value_or(0.0);
    mean.group_ap[Group::Rare] = get("APr");
    mean.group_ap[Group::Common] = get("APc");
    mean.group_ap[Group::Frequent] = get("APf");
    const auto label = s.protocol == Protocol::GtOracle ? s.variant + "+gt" : s.variant;
    out += report_csv_row(label, mean);
  }
  return out;
}

std::string result_digest(const SweepResult& r) {
  return sha256_hex(cells_csv(r) + summary_csv(r));
}

VerifyReport verify(const fs::path& dir) {
  VerifyReport rep;
  if (!fs::is_directory(dir)) {
    rep.problems.push_back(dir.string() + ": not a directory");
    return rep;
  }
  std::vector<fs::path> paths;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) {
    const auto name = p.filename().string();
    if (name == "manifest.json") {
      ++rep.manifests;
      try {
        const auto m = Manifest::parse(read_text_file(p));
        rep.files += static_cast<int>(m.files.size());
        for (auto& problem : m.check(p.parent_path())) rep.problems.push_back(std::move(problem));
      } catch (const std::exception& e) {
        rep.problems.push_back(p.string() + ": " + e.what());
      }
    } else if (p.extension() == ".jsonl") {
      ++rep.datasets;
      try {
        (void)load_dataset(p);
      } catch (const std::exception& e) {
        rep.problems.push_back(p.string() + ": " + e.what());
      }
    }
  }
  return rep;
}

}  // namespace tailreg
