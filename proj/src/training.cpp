#include "tailreg/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "tailreg/digest.hpp"
#include "tailreg/errors.hpp"
#include "tailreg/random.hpp"

namespace tailreg {

namespace {

constexpr std::uint64_t kInitStream = 11;
constexpr std::uint64_t kShuffleStream = 12;

Eigen::Vector4d to_vec(const Delta& d) { return {d.dx, d.dy, d.dw, d.dh}; }

void check_batch(const HeadBank& bank, std::span<const RegressionSample> batch) {
  if (batch.empty()) throw ContractError("regression batch is empty");
  for (const auto& s : batch) {
    if (s.class_id < 0 || s.class_id >= bank.num_classes)
      throw ContractError("regression batch: class id out of range");
    if (static_cast<int>(s.feature.size()) != bank.feature_dim)
      throw ContractError("regression batch: feature length mismatch");
  }
}

Delta residual(const HeadBank& bank, const RegressionSample& s) {
  const Delta p = bank.predict(s.class_id, s.feature);
  return {p.dx - s.target.dx, p.dy - s.target.dy, p.dw - s.target.dw, p.dh - s.target.dh};
}

struct Velocity {
  BankGradient bank;
  Eigen::MatrixXd cls_weight;
  Eigen::VectorXd cls_bias;
};

void apply_update(AffineHead& param, AffineHead& vel, const AffineHead& grad, double momentum,
                  double lr) {
  vel.weight = momentum * vel.weight + grad.weight;
  vel.bias = momentum * vel.bias + grad.bias;
  param.weight -= lr * vel.weight;
  param.bias -= lr * vel.bias;
}

std::vector<RegressionSample> samples_of(const SplitData& split) {
  std::vector<RegressionSample> out;
  out.reserve(split.instances.size());
  for (const auto& inst : split.instances)
    out.push_back({inst.class_id, inst.feature, inst.target_delta});
  return out;
}

/// Per-class mean loss over a split, appended to the ledger.
double record_epoch(TrainLedger& ledger, int epoch, Split split, const HeadBank& bank,
                    std::span<const RegressionSample> samples, const FrequencyPartition& part,
                    double beta) {
  const int C = bank.num_classes;
  std::vector<double> sum(static_cast<std::size_t>(C), 0.0);
  std::vector<int> n(static_cast<std::size_t>(C), 0);
  double total = 0.0;
  for (const auto& s : samples) {
    const double l = smooth_l1(residual(bank, s), beta);
    sum[s.class_id] += l;
    ++n[s.class_id];
    total += l;
  }
  for (int c = 0; c < C; ++c) {
    if (n[c] == 0) continue;
    ledger.entries.push_back({epoch, c, part.group[c], sum[c] / n[c], n[c], split});
  }
  return samples.empty() ? 0.0 : total / static_cast<double>(samples.size());
}

}  // namespace

std::string_view to_string(TrainMode m) {
  return m == TrainMode::Joint ? "joint" : "regression_only_gt";
}

TrainMode train_mode_from_string(std::string_view s) {
  if (s == "joint") return TrainMode::Joint;
  if (s == "regression_only_gt" || s == "oracle") return TrainMode::RegressionOnlyGt;
  throw ConfigError("mode", "unknown training mode '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs", "must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("learning_rate", "must be > 0");
  if (warmup_steps < 0) throw ConfigError("warmup_steps", "must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum", "must lie in [0, 1)");
  if (!(lambda_cls > 0.0)) throw ConfigError("lambda_cls", "must be > 0");
  if (!(lambda_reg > 0.0)) throw ConfigError("lambda_reg", "must be > 0");
  if (!(smooth_l1_beta > 0.0)) throw ConfigError("smooth_l1_beta", "must be > 0");
  if (!(init_sigma >= 0.0)) throw ConfigError("init_sigma", "must be >= 0");
}

double smooth_l1(const Delta& residual, double beta) {
  double total = 0.0;
  for (const double x : residual.as_array()) {
    const double a = std::abs(x);
    total += a < beta ? 0.5 * x * x / beta : a - 0.5 * beta;
  }
  return total;
}

Delta smooth_l1_grad(const Delta& residual, double beta) {
  std::array<double, 4> g{};
  const auto r = residual.as_array();
  for (int i = 0; i < 4; ++i) {
    g[i] = std::abs(r[i]) < beta ? r[i] / beta : (r[i] > 0.0 ? 1.0 : -1.0);
  }
  return Delta::from_array(g);
}

BankGradient BankGradient::zeros_like(const HeadBank& bank) {
  BankGradient g;
  g.heads.assign(bank.heads.size(), AffineHead::zeros(bank.feature_dim));
  if (bank.agnostic) g.agnostic = AffineHead::zeros(bank.feature_dim);
  return g;
}

double regression_loss(const HeadBank& bank, std::span<const RegressionSample> batch,
                       double beta) {
  check_batch(bank, batch);
  double total = 0.0;
  for (const auto& s : batch) total += smooth_l1(residual(bank, s), beta);
  return total / static_cast<double>(batch.size());
}

BankGradient grad_head(const HeadBank& bank, std::span<const RegressionSample> batch,
                       double beta) {
  check_batch(bank, batch);
  BankGradient grad = BankGradient::zeros_like(bank);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const bool cab = bank.spec.kind == HeadKind::Cab;
  const double a = bank.spec.alpha;
  for (const auto& s : batch) {
    const Eigen::Vector4d g = to_vec(smooth_l1_grad(residual(bank, s), beta)) * inv_n;
    const Eigen::Map<const Eigen::VectorXd> f(s.feature.data(), bank.feature_dim);
    const Eigen::MatrixXd gw = g * f.transpose();
    AffineHead& own = grad.heads[bank.class_to_head[s.class_id]];
    if (cab) {
      grad.agnostic->weight += a * gw;
      grad.agnostic->bias += a * g;
      own.weight += (1.0 - a) * gw;
      own.bias += (1.0 - a) * g;
    } else {
      own.weight += gw;
      own.bias += g;
    }
  }
  return grad;
}

std::vector<std::optional<double>> TrainLedger::final_losses(Split split, int num_classes) const {
  std::vector<std::optional<double>> out(static_cast<std::size_t>(num_classes));
  for (const auto& e : entries)
    if (e.epoch == epochs && e.split == split && e.class_id < num_classes)
      out[e.class_id] = e.mean_reg_loss;
  return out;
}

double TrainLedger::final_mean_loss(Split split) const {
  double total = 0.0;
  long n = 0;
  for (const auto& e : entries) {
    if (e.epoch != epochs || e.split != split) continue;
    total += e.mean_reg_loss * e.n_samples;
    n += e.n_samples;
  }
  return n > 0 ? total / static_cast<double>(n) : 0.0;
}

std::vector<GroupCurvePoint> group_curves(const TrainLedger& ledger) {
  std::map<std::tuple<int, int, int>, std::pair<double, int>> acc;
  for (const auto& e : ledger.entries) {
    auto& [sum, n] = acc[{e.epoch, static_cast<int>(e.split), static_cast<int>(e.group)}];
    sum += e.mean_reg_loss * e.n_samples;
    n += e.n_samples;
  }
  std::vector<GroupCurvePoint> out;
  for (const auto& [key, v] : acc) {
    const auto [epoch, split, group] = key;
    out.push_back({epoch, static_cast<Split>(split), static_cast<Group>(group),
                   v.first / v.second, v.second});
  }
  return out;
}

std::string ledger_csv(const TrainLedger& ledger) {
  std::ostringstream out;
  out << "epoch,class_id,group,mean_reg_loss,n_samples,split\n";
  for (const auto& e : ledger.entries) {
    out << e.epoch << ',' << e.class_id << ',' << to_string(e.group) << ','
        << format_double(e.mean_reg_loss) << ',' << e.n_samples << ',' << to_string(e.split)
        << '\n';
  }
  return out.str();
}

TrainLedger parse_ledger_csv(std::string_view csv) {
  TrainLedger ledger;
  std::istringstream in{std::string(csv)};
  std::string line;
  if (!std::getline(in, line) || line != "epoch,class_id,group,mean_reg_loss,n_samples,split")
    throw DataError("ledger: unexpected CSV header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (cells.size() != 6) throw DataError("ledger: malformed row '" + line + "'");
    LedgerEntry e;
    try {
      e.epoch = std::stoi(cells[0]);
      e.class_id = std::stoi(cells[1]);
      e.n_samples = std::stoi(cells[4]);
    } catch (const std::exception&) {
      throw DataError("ledger: malformed row '" + line + "'");
    }
    try {
      e.group = group_from_string(cells[2]);
    } catch (const ConfigError& err) {
      throw DataError(err.what());
    }
    e.mean_reg_loss = parse_double(cells[3]);
    if (cells[5] == "train") e.split = Split::Train;
    else if (cells[5] == "val") e.split = Split::Val;
    else throw DataError("ledger: unknown split '" + cells[5] + "'");
    ledger.epochs = std::max(ledger.epochs, e.epoch);
    ledger.entries.push_back(e);
  }
  return ledger;
}

TrainResult train(const SyntheticDataset& ds, const HeadSpec& spec, const TrainConfig& config) {
  config.validate();
  if (ds.train.instances.empty() || ds.val.instances.empty())
    throw ContractError("train: dataset needs non-empty train and val splits");
  const int C = ds.num_classes();
  const int d = ds.feature_dim();
  const auto partition = partition_by_frequency(ds, config.thresholds);
  const auto stats = class_stats(ds);

  Rng init(derive_seed(config.seed, kInitStream));
  LinearClassifier clf = LinearClassifier::zeros(C, d);
  for (int r = 0; r < C; ++r)
    for (int c = 0; c < d; ++c) clf.weight(r, c) = init.normal(0.0, config.init_sigma);
  HeadBank bank = init_bank(spec, head_mapping(spec, stats, partition), C, d, init, config.init_sigma);

  Velocity vel{BankGradient::zeros_like(bank), Eigen::MatrixXd::Zero(C, d), Eigen::VectorXd::Zero(C)};
  const auto train_samples = samples_of(ds.train);
  const auto val_samples = samples_of(ds.val);
  const bool joint = config.mode == TrainMode::Joint;

  Rng shuffle(derive_seed(config.seed, kShuffleStream));
  std::vector<std::size_t> order(train_samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<RegressionSample> batch;
  batch.reserve(static_cast<std::size_t>(config.batch_size));

  TrainLedger ledger;
  ledger.epochs = config.epochs;
  long step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle.shuffle(order);
    double cls_total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(train_samples[order[i]]);

      const double lr = config.warmup_steps > 0
                            ? config.learning_rate *
                                  std::min(1.0, static_cast<double>(step + 1) / config.warmup_steps)
                            : config.learning_rate;
      BankGradient g = grad_head(bank, batch, config.smooth_l1_beta);
      for (std::size_t h = 0; h < bank.heads.size(); ++h) {
        g.heads[h].weight *= config.lambda_reg;
        g.heads[h].bias *= config.lambda_reg;
        apply_update(bank.heads[h], vel.bank.heads[h], g.heads[h], config.momentum, lr);
      }
      if (bank.agnostic) {
        g.agnostic->weight *= config.lambda_reg;
        g.agnostic->bias *= config.lambda_reg;
        apply_update(*bank.agnostic, *vel.bank.agnostic, *g.agnostic, config.momentum, lr);
      }

      if (joint) {
        Eigen::MatrixXd gw = Eigen::MatrixXd::Zero(C, d);
        Eigen::VectorXd gb = Eigen::VectorXd::Zero(C);
        const double inv_n = 1.0 / static_cast<double>(batch.size());
        for (const auto& s : batch) {
          auto p = softmax(clf.classify(s.feature));
          cls_total -= std::log(std::max(p[s.class_id], 1e-300));
          p[s.class_id] -= 1.0;
          const Eigen::Map<const Eigen::VectorXd> pv(p.data(), C);
          const Eigen::Map<const Eigen::VectorXd> f(s.feature.data(), d);
          gw += (config.lambda_cls * inv_n) * pv * f.transpose();
          gb += (config.lambda_cls * inv_n) * pv;
        }
        vel.cls_weight = config.momentum * vel.cls_weight + gw;
        vel.cls_bias = config.momentum * vel.cls_bias + gb;
        clf.weight -= lr * vel.cls_weight;
        clf.bias -= lr * vel.cls_bias;
      }
      ++step;
    }
    const double train_mean = record_epoch(ledger, epoch, Split::Train, bank, train_samples,
                                           partition, config.smooth_l1_beta);
    record_epoch(ledger, epoch, Split::Val, bank, val_samples, partition, config.smooth_l1_beta);
    ledger.epoch_cls_loss.push_back(joint ? cls_total / static_cast<double>(train_samples.size())
                                          : 0.0);
    if (!std::isfinite(train_mean) || !std::isfinite(ledger.epoch_cls_loss.back()))
      throw DataError("training diverged: non-finite mean loss at epoch " + std::to_string(epoch));
  }

  bank.digest = weights_digest(bank);
  ledger.weights_digest = *bank.digest;
  return {std::move(bank), std::move(clf), std::move(ledger)};
}

std::optional<double> bias_ratio(const TrainLedger& ledger, const FrequencyPartition& partition) {
  if (ledger.epochs < 1) throw ContractError("bias_ratio: ledger has no epochs");
  const auto losses = ledger.final_losses(Split::Val, partition.num_classes());
  auto group_mean = [&](Group g) -> std::optional<double> {
    double sum = 0.0;
    int n = 0;
    for (const int c : partition.members(g)) {
      if (!losses[c]) continue;
      sum += *losses[c];
      ++n;
    }
    if (n == 0) return std::nullopt;
    return sum / n;
  };
  const auto rare = group_mean(Group::Rare);
  const auto frequent = group_mean(Group::Frequent);
  if (!rare || !frequent || *frequent <= 0.0) return std::nullopt;
  return *rare / *frequent;
}

}  // namespace tailreg
