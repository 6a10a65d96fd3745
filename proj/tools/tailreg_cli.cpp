#include <CLI11.hpp>
#include <cstdio>
#include <iostream>

#include "tailreg/dataset.hpp"
#include "tailreg/digest.hpp"
#include "tailreg/errors.hpp"
#include "tailreg/evaluation.hpp"
#include "tailreg/experiment.hpp"
#include "tailreg/kvconfig.hpp"
#include "tailreg/plots.hpp"
#include "tailreg/training.hpp"

namespace fs = std::filesystem;
using namespace tailreg;

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

// File values first, then command-line overrides, as one key-value set.
KeyValueConfig layered(const std::string& file, const std::map<std::string, std::string>& flags) {
  KeyValueConfig kv = file.empty() ? KeyValueConfig::parse("version = 1\n") : KeyValueConfig::load(file);
  for (const auto& [k, v] : flags)
    if (!v.empty()) kv.set(k, v);
  return kv;
}

std::string fmt_opt(const std::optional<double>& v, double scale = 1.0) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", scale * *v);
  return buf;
}

struct GenArgs {
  std::string preset = "lt60";
  std::string seed;
  std::string config;
  std::string out;
};

int cmd_gen(const GenArgs& a) {
  const auto kv = layered(a.config, {{"dataset.preset", a.preset}, {"dataset.seed", a.seed}});
  DatasetConfig cfg = dataset_preset(kv.get("dataset.preset").value_or("lt60"));
  apply_dataset_keys(kv, cfg);
  const auto ds = generate(cfg);
  save_dataset(ds, a.out);
  const auto part = partition_by_frequency(ds);
  std::cout << "wrote " << a.out << ": " << ds.train.instances.size() << " train / "
            << ds.val.instances.size() << " val instances, groups r/c/f = "
            << part.members(Group::Rare).size() << '/' << part.members(Group::Common).size() << '/'
            << part.members(Group::Frequent).size() << "\nsha256 " << sha256_file(a.out) << '\n';
  return 0;
}

struct TrainArgs {
  std::string dataset;
  std::string head;
  std::string config;
  std::string out;
  std::string seed;
  std::string epochs;
  std::string mode;
};

int cmd_train(const TrainArgs& a) {
  const auto kv = layered(a.config, {{"train.seed", a.seed}, {"train.epochs", a.epochs}, {"train.mode", a.mode}});
  TrainConfig cfg;
  apply_train_keys(kv, cfg);
  const auto spec = HeadSpec::parse(a.head);
  const auto ds = load_dataset(a.dataset);
  const auto model = train(ds, spec, cfg);
  const fs::path dir = a.out;
  save_model(model, dir);
  KeyValueConfig echo;
  echo.set("cell.variant", spec.to_string());
  echo.set("cell.dataset_digest", sha256_file(a.dataset));
  echo_train(cfg, echo);
  write_text_file(dir / "config.txt", echo.dump());
  write_text_file(dir / "manifest.json",
                  Manifest::build(dir, {"config.txt", "bank.txt", "classifier.txt", "ledger.csv"}).json());
  const auto part = partition_by_frequency(ds, cfg.thresholds);
  std::cout << spec.to_string() << ": " << model.bank.head_count() << " heads, final loss train "
            << fmt_opt(model.ledger.final_mean_loss(Split::Train)) << " val "
            << fmt_opt(model.ledger.final_mean_loss(Split::Val)) << ", bias_ratio "
            << fmt_opt(bias_ratio(model.ledger, part)) << "\nweights " << model.ledger.weights_digest
            << '\n';
  return 0;
}

struct EvalArgs {
  std::string dataset;
  std::string model;
  std::string config;
  std::string out;
  bool oracle = false;
};

int cmd_eval(const EvalArgs& a) {
  const auto kv = layered(a.config, {{"eval.oracle_gt_class", a.oracle ? "true" : ""}});
  EvalConfig cfg;
  apply_eval_keys(kv, cfg);
  TrainConfig tcfg;
  apply_train_keys(kv, tcfg);
  const auto ds = load_dataset(a.dataset);
  const auto model = load_model(a.model);
  const auto part = partition_by_frequency(ds, tcfg.thresholds);
  const auto br = bias_ratio(model.ledger, part);
  const auto dets = run_inference(model.bank, model.classifier, ds, Split::Val, cfg);
  const auto rep = report(model.bank, model.classifier, ds, cfg, part, br);
  const fs::path dir = a.out;
  write_text_file(dir / "detections.txt", detections_text(dets));
  write_text_file(dir / "report.json", report_json(rep));
  write_text_file(dir / "report.csv", report_csv_header() + report_csv_row(model.bank.spec.to_string(), rep));
  KeyValueConfig echo;
  echo_eval(cfg, echo);
  write_text_file(dir / "config.txt", echo.dump());
  write_text_file(dir / "manifest.json",
                  Manifest::build(dir, {"config.txt", "detections.txt", "report.json", "report.csv"}).json());
  std::cout << model.bank.spec.to_string() << (cfg.oracle_gt_class ? " (GT labels)" : "")
            << ": AP " << fmt_opt(rep.ap, 100) << "  APr " << fmt_opt(rep.group_ap.at(Group::Rare), 100)
            << "  APc " << fmt_opt(rep.group_ap.at(Group::Common), 100) << "  APf "
            << fmt_opt(rep.group_ap.at(Group::Frequent), 100) << "  detections " << rep.num_detections
            << '\n';
  return 0;
}

struct SweepArgs {
  std::string preset;
  std::string config;
  std::string out;
  std::string seeds;
  std::string variants;
  std::string protocols;
  std::string epochs;
  std::string dataset_preset;
  bool plots = false;
};

int cmd_sweep(const SweepArgs& a) {
  const auto kv = layered(a.config, {{"sweep.preset", a.preset},
                                     {"sweep.seeds", a.seeds},
                                     {"sweep.variants", a.variants},
                                     {"sweep.protocols", a.protocols},
                                     {"train.epochs", a.epochs},
                                     {"dataset.preset", a.dataset_preset}});
  auto spec = experiment_from_config(kv);
  spec.out_dir = a.out;
  const auto result = run_experiment(spec, &std::cout);
  std::cout << "trained " << result.trained << ", skipped " << result.skipped << '\n'
            << read_text_file(spec.out_dir / "table.csv");
  if (a.plots)
    for (const auto& p : emit_plots(result, spec.out_dir / "plots")) std::cout << "wrote " << p.string() << '\n';
  std::cout << "result " << result_digest(result) << '\n';
  return 0;
}

int cmd_plot(const std::string& sweep_dir, std::string out) {
  const auto result = load_experiment(sweep_dir);
  if (out.empty()) out = (fs::path(sweep_dir) / "plots").string();
  for (const auto& p : emit_plots(result, out)) std::cout << "wrote " << p.string() << '\n';
  return 0;
}

int cmd_verify(const std::string& dir) {
  const auto rep = verify(dir);
  for (const auto& p : rep.problems) std::cout << "FAIL " << p << '\n';
  std::cout << rep.manifests << " manifests, " << rep.files << " files, " << rep.datasets
            << " datasets checked: " << (rep.ok() ? "ok" : "problems found") << '\n';
  return rep.ok() ? 0 : kRuntimeError;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Regression-bias lab for long-tailed detection"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic long-tailed dataset");
  g->add_option("--preset", gen.preset, "Dataset preset (lt60, lt60-clean, tiny)");
  g->add_option("--seed", gen.seed, "Generator seed");
  g->add_option("--config", gen.config, "Key-value config file")->check(CLI::ExistingFile);
  g->add_option("--out", gen.out, "Output dataset file")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train one head variant");
  t->add_option("--dataset", tr.dataset, "Dataset file")->required()->check(CLI::ExistingFile);
  t->add_option("--head", tr.head, "specific | agnostic | cab:A | cluster:K:num|scale | merge:GROUPS")->required();
  t->add_option("--config", tr.config, "Key-value config file")->check(CLI::ExistingFile);
  t->add_option("--out", tr.out, "Output model directory")->required();
  t->add_option("--seed", tr.seed, "Training seed");
  t->add_option("--epochs", tr.epochs, "Epoch count");
  t->add_option("--mode", tr.mode, "joint | regression_only_gt");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a trained model on the val split");
  e->add_option("--dataset", ev.dataset, "Dataset file")->required()->check(CLI::ExistingFile);
  e->add_option("--model", ev.model, "Model directory written by train")->required()->check(CLI::ExistingDirectory);
  e->add_option("--config", ev.config, "Key-value config file")->check(CLI::ExistingFile);
  e->add_option("--out", ev.out, "Output directory")->required();
  e->add_flag("--oracle", ev.oracle, "Replace predicted labels by ground truth");

  SweepArgs sw;
  auto* s = app.add_subcommand("sweep", "Run a variant x seed experiment");
  s->add_option("--preset", sw.preset, "table1 | table3a | table3b | table3c");
  s->add_option("--config", sw.config, "Key-value config file")->check(CLI::ExistingFile);
  s->add_option("--out", sw.out, "Output directory")->required();
  s->add_option("--seeds", sw.seeds, "Seed list, e.g. \"1 2 3\"");
  s->add_option("--variants", sw.variants, "Whitespace-separated head variants");
  s->add_option("--protocols", sw.protocols, "predicted and/or gt");
  s->add_option("--epochs", sw.epochs, "Epoch count");
  s->add_option("--dataset-preset", sw.dataset_preset, "Dataset preset");
  s->add_flag("--plots", sw.plots, "Also write plots under OUT/plots");

  std::string plot_dir, plot_out;
  auto* p = app.add_subcommand("plot", "Write loss-curve, per-class and AP-by-IoU plots for a sweep");
  p->add_option("--sweep", plot_dir, "Sweep output directory")->required()->check(CLI::ExistingDirectory);
  p->add_option("--out", plot_out, "Plot directory (default SWEEP/plots)");

  std::string verify_dir;
  auto* v = app.add_subcommand("verify", "Re-hash every artifact under a directory");
  v->add_option("dir", verify_dir, "Directory to audit")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*s) return cmd_sweep(sw);
    if (*p) return cmd_plot(plot_dir, plot_out);
    if (*v) return cmd_verify(verify_dir);
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kUsageError;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kRuntimeError;
  }
  return kUsageError;
}
