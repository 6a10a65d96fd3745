#include "tailreg/heads.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "tailreg/digest.hpp"
#include "tailreg/errors.hpp"
#include "tailreg/random.hpp"

namespace tailreg {

namespace {

constexpr const char* kBankMagic = "tailreg.headbank";
constexpr const char* kClassifierMagic = "tailreg.classifier";
constexpr int kBankVersion = 1;

std::vector<std::string_view> split_on(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    const auto next = s.find(sep, pos);
    out.push_back(s.substr(pos, next == std::string_view::npos ? s.size() - pos : next - pos));
    if (next == std::string_view::npos) break;
    pos = next + 1;
  }
  return out;
}

int parse_int(std::string_view s, const std::string& field) {
  int v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size())
    throw ConfigError(field, "not an integer: '" + std::string(s) + "'");
  return v;
}

[[noreturn]] void bad_token(std::string_view text) {
  throw ConfigError("head", "cannot parse head variant '" + std::string(text) + "'");
}

void write_head(std::ostringstream& out, const AffineHead& h) {
  out << "w";
  for (Eigen::Index r = 0; r < h.weight.rows(); ++r)
    for (Eigen::Index c = 0; c < h.weight.cols(); ++c) out << ' ' << format_double(h.weight(r, c));
  out << "\nb";
  for (int r = 0; r < 4; ++r) out << ' ' << format_double(h.bias(r));
  out << '\n';
}

/// Whitespace tokenizer over a line-oriented text record.
class TokenReader {
 public:
  explicit TokenReader(std::string_view text) : in_(std::string(text)) {}

  std::string word() {
    std::string w;
    if (!(in_ >> w)) throw DataError("unexpected end of record");
    return w;
  }
  void expect(std::string_view w) {
    const auto got = word();
    if (got != w) throw DataError("expected '" + std::string(w) + "', got '" + got + "'");
  }
  int integer() {
    const auto w = word();
    try {
      return parse_int(w, "record");
    } catch (const ConfigError&) {
      throw DataError("expected integer, got '" + w + "'");
    }
  }
  double real() { return parse_double(word()); }

 private:
  std::istringstream in_;
};

AffineHead read_head(TokenReader& in, int d) {
  AffineHead h = AffineHead::zeros(d);
  in.expect("w");
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < d; ++c) h.weight(r, c) = in.real();
  in.expect("b");
  for (int r = 0; r < 4; ++r) h.bias(r) = in.real();
  return h;
}

std::string bank_body(const HeadBank& bank) {
  std::ostringstream out;
  out << kBankMagic << ' ' << kBankVersion << '\n'
      << "variant " << bank.spec.to_string() << '\n'
      << "classes " << bank.num_classes << '\n'
      << "dim " << bank.feature_dim << '\n'
      << "heads " << bank.head_count() << '\n'
      << "map";
  for (const int h : bank.class_to_head) out << ' ' << h;
  out << '\n';
  for (int h = 0; h < bank.head_count(); ++h) {
    out << "head " << h << '\n';
    write_head(out, bank.heads[h]);
  }
  if (bank.agnostic) {
    out << "agnostic\n";
    write_head(out, *bank.agnostic);
  }
  return out.str();
}

}  // namespace

HeadSpec HeadSpec::parse(std::string_view text) {
  const auto parts = split_on(text, ':');
  HeadSpec s;
  const auto kind = parts[0];
  if (kind == "specific" && parts.size() == 1) {
    s.kind = HeadKind::Specific;
  } else if (kind == "agnostic" && parts.size() == 1) {
    s.kind = HeadKind::Agnostic;
  } else if (kind == "cab" && parts.size() == 2) {
    s.kind = HeadKind::Cab;
    try {
      s.alpha = parse_double(parts[1]);
    } catch (const DataError&) {
      bad_token(text);
    }
    if (!(s.alpha >= 0.0 && s.alpha <= 1.0))
      throw ConfigError("head", "cab alpha must lie in [0, 1] in '" + std::string(text) + "'");
  } else if (kind == "cluster" && parts.size() == 3) {
    s.kind = HeadKind::Clustered;
    s.cluster.k = parse_int(parts[1], "head");
    if (s.cluster.k < 1) throw ConfigError("head", "cluster K must be >= 1");
    if (parts[2] == "num" || parts[2] == "instance_count") s.cluster.key = SortKey::InstanceCount;
    else if (parts[2] == "scale" || parts[2] == "mean_scale") s.cluster.key = SortKey::MeanScale;
    else bad_token(text);
  } else if (kind == "merge" && parts.size() == 2) {
    s.kind = HeadKind::Merged;
    std::set<Group> groups;
    for (const char ch : parts[1]) {
      if (ch == ',') continue;
      try {
        groups.insert(group_from_string(std::string_view(&ch, 1)));
      } catch (const ConfigError&) {
        bad_token(text);
      }
    }
    if (groups.empty()) bad_token(text);
    s.merge.assign(groups.begin(), groups.end());
  } else {
    bad_token(text);
  }
  return s;
}

std::string HeadSpec::to_string() const {
  switch (kind) {
    case HeadKind::Specific: return "specific";
    case HeadKind::Agnostic: return "agnostic";
    case HeadKind::Cab: return "cab:" + format_double(alpha);
    case HeadKind::Clustered:
      return "cluster:" + std::to_string(cluster.k) +
             (cluster.key == SortKey::InstanceCount ? ":num" : ":scale");
    case HeadKind::Merged: {
      std::string out = "merge:";
      for (const Group g : merge) out += tailreg::to_string(g).front();
      return out;
    }
  }
  return "?";
}

AffineHead AffineHead::zeros(int feature_dim) {
  return {Eigen::MatrixXd::Zero(4, feature_dim), Eigen::Vector4d::Zero()};
}

Delta AffineHead::apply(std::span<const double> feature) const {
  if (static_cast<Eigen::Index>(feature.size()) != weight.cols())
    throw ContractError("regression head: feature length " + std::to_string(feature.size()) +
                        " != " + std::to_string(weight.cols()));
  const Eigen::Map<const Eigen::VectorXd> f(feature.data(), static_cast<Eigen::Index>(feature.size()));
  const Eigen::Vector4d r = weight * f + bias;
  return {r(0), r(1), r(2), r(3)};
}

AffineHead HeadBank::effective_weight(int class_id) const {
  if (class_id < 0 || class_id >= num_classes)
    throw ContractError("class id " + std::to_string(class_id) + " out of range");
  const AffineHead& own = heads[class_to_head[class_id]];
  if (spec.kind != HeadKind::Cab) return own;
  const double a = spec.alpha;
  return {a * agnostic->weight + (1.0 - a) * own.weight, a * agnostic->bias + (1.0 - a) * own.bias};
}

Delta HeadBank::predict(int class_id, std::span<const double> feature) const {
  if (static_cast<int>(feature.size()) != feature_dim)
    throw ContractError("predict: feature length " + std::to_string(feature.size()) +
                        " != " + std::to_string(feature_dim));
  return effective_weight(class_id).apply(feature);
}

void HeadBank::check_invariants() const {
  if (static_cast<int>(class_to_head.size()) != num_classes)
    throw ContractError("head bank: mapping does not cover every class");
  std::vector<bool> used(heads.size(), false);
  for (const int h : class_to_head) {
    if (h < 0 || h >= head_count()) throw ContractError("head bank: mapping out of range");
    used[h] = true;
  }
  if (std::find(used.begin(), used.end(), false) != used.end())
    throw ContractError("head bank: mapping is not surjective");
  for (const auto& h : heads)
    if (h.weight.rows() != 4 || h.weight.cols() != feature_dim)
      throw ContractError("head bank: weight shape mismatch");
  switch (spec.kind) {
    case HeadKind::Specific:
    case HeadKind::Cab:
      for (int c = 0; c < num_classes; ++c)
        if (class_to_head[c] != c) throw ContractError("head bank: expected identity mapping");
      if ((spec.kind == HeadKind::Cab) != agnostic.has_value())
        throw ContractError("head bank: shared branch present iff cab");
      break;
    case HeadKind::Agnostic:
      if (head_count() != 1) throw ContractError("head bank: agnostic needs exactly one head");
      break;
    case HeadKind::Clustered:
    case HeadKind::Merged:
      break;
  }
}

std::vector<int> cluster_heads(const ClassStats& stats, const ClusterConfig& cfg) {
  const int C = static_cast<int>(stats.instance_count.size());
  if (static_cast<int>(stats.mean_scale.size()) != C)
    throw ContractError("cluster_heads: stats cover different class sets");
  if (cfg.k < 1) throw ConfigError("k", "must be >= 1");
  if (cfg.k > C) throw ConfigError("k", "K = " + std::to_string(cfg.k) + " exceeds C = " + std::to_string(C));

  std::vector<int> order(static_cast<std::size_t>(C));
  std::iota(order.begin(), order.end(), 0);
  auto key = [&](int c) {
    return cfg.key == SortKey::InstanceCount ? static_cast<double>(stats.instance_count[c])
                                             : stats.mean_scale[c];
  };
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return key(a) > key(b); });

  std::vector<int> mapping(static_cast<std::size_t>(C));
  const int base = C / cfg.k;
  const int extra = C % cfg.k;
  std::size_t pos = 0;
  for (int g = 0; g < cfg.k; ++g) {
    const int size = base + (g < extra ? 1 : 0);
    for (int i = 0; i < size; ++i) mapping[order[pos++]] = g;
  }
  return mapping;
}

std::vector<int> merge_heads(const FrequencyPartition& partition, std::span<const Group> groups) {
  std::vector<int> mapping(static_cast<std::size_t>(partition.num_classes()));
  int next = 0;
  int merged_head = -1;
  for (int c = 0; c < partition.num_classes(); ++c) {
    const bool merged =
        std::find(groups.begin(), groups.end(), partition.group[c]) != groups.end();
    if (!merged) {
      mapping[c] = next++;
    } else {
      if (merged_head < 0) merged_head = next++;
      mapping[c] = merged_head;
    }
  }
  return mapping;
}

std::vector<int> head_mapping(const HeadSpec& spec, const ClassStats& stats,
                              const FrequencyPartition& partition) {
  const int C = partition.num_classes();
  switch (spec.kind) {
    case HeadKind::Specific:
    case HeadKind::Cab: {
      std::vector<int> m(static_cast<std::size_t>(C));
      std::iota(m.begin(), m.end(), 0);
      return m;
    }
    case HeadKind::Agnostic: return std::vector<int>(static_cast<std::size_t>(C), 0);
    case HeadKind::Clustered: return cluster_heads(stats, spec.cluster);
    case HeadKind::Merged: return merge_heads(partition, spec.merge);
  }
  return {};
}

HeadBank init_bank(const HeadSpec& spec, std::vector<int> class_to_head, int num_classes,
                   int feature_dim, Rng& init, double init_sigma) {
  auto draw = [&] {
    AffineHead h = AffineHead::zeros(feature_dim);
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < feature_dim; ++c) h.weight(r, c) = init.normal(0.0, init_sigma);
    return h;
  };
  std::vector<AffineHead> slots;
  slots.reserve(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) slots.push_back(draw());
  AffineHead shared_slot = draw();

  HeadBank bank;
  bank.spec = spec;
  bank.num_classes = num_classes;
  bank.feature_dim = feature_dim;
  bank.class_to_head = std::move(class_to_head);
  if (static_cast<int>(bank.class_to_head.size()) != num_classes)
    throw ContractError("init_bank: mapping size != num_classes");
  const int H = bank.class_to_head.empty()
                    ? 0
                    : *std::max_element(bank.class_to_head.begin(), bank.class_to_head.end()) + 1;
  std::vector<int> lowest(static_cast<std::size_t>(H), -1);
  std::vector<int> members(static_cast<std::size_t>(H), 0);
  for (int c = 0; c < num_classes; ++c) {
    const int h = bank.class_to_head[c];
    if (lowest[h] < 0) lowest[h] = c;
    ++members[h];
  }
  for (int h = 0; h < H; ++h) {
    if (lowest[h] < 0) throw ContractError("init_bank: mapping is not surjective");
    bank.heads.push_back(members[h] == num_classes ? shared_slot : slots[lowest[h]]);
  }
  if (spec.kind == HeadKind::Cab) bank.agnostic = shared_slot;
  bank.check_invariants();
  return bank;
}

std::string weights_digest(const HeadBank& bank) { return sha256_hex(bank_body(bank)); }

std::string serialize_bank(const HeadBank& bank) {
  return bank_body(bank) + "digest " + (bank.digest ? *bank.digest : std::string("-")) + "\n";
}

HeadBank deserialize_bank(std::string_view text) {
  TokenReader in(text);
  in.expect(kBankMagic);
  if (in.integer() != kBankVersion) throw DataError("head bank: unsupported version");
  HeadBank bank;
  in.expect("variant");
  try {
    bank.spec = HeadSpec::parse(in.word());
  } catch (const ConfigError& e) {
    throw DataError(std::string("head bank: ") + e.what());
  }
  in.expect("classes");
  bank.num_classes = in.integer();
  in.expect("dim");
  bank.feature_dim = in.integer();
  in.expect("heads");
  const int H = in.integer();
  if (bank.num_classes < 1 || bank.feature_dim < 1 || H < 1 || H > bank.num_classes)
    throw DataError("head bank: bad dimensions");
  in.expect("map");
  for (int c = 0; c < bank.num_classes; ++c) bank.class_to_head.push_back(in.integer());
  for (int h = 0; h < H; ++h) {
    in.expect("head");
    if (in.integer() != h) throw DataError("head bank: heads out of order");
    bank.heads.push_back(read_head(in, bank.feature_dim));
  }
  auto tag = in.word();
  if (tag == "agnostic") {
    bank.agnostic = read_head(in, bank.feature_dim);
    tag = in.word();
  }
  if (tag != "digest") throw DataError("head bank: expected digest line");
  const auto digest = in.word();
  try {
    bank.check_invariants();
  } catch (const ContractError& e) {
    throw DataError(e.what());
  }
  if (digest != "-") {
    if (digest != weights_digest(bank)) throw DataError("head bank: weights digest mismatch");
    bank.digest = digest;
  }
  return bank;
}

LinearClassifier LinearClassifier::zeros(int num_classes, int feature_dim) {
  return {Eigen::MatrixXd::Zero(num_classes, feature_dim), Eigen::VectorXd::Zero(num_classes)};
}

std::vector<double> LinearClassifier::classify(std::span<const double> feature) const {
  if (static_cast<Eigen::Index>(feature.size()) != weight.cols())
    throw ContractError("classify: feature length " + std::to_string(feature.size()) +
                        " != " + std::to_string(weight.cols()));
  const Eigen::Map<const Eigen::VectorXd> f(feature.data(), static_cast<Eigen::Index>(feature.size()));
  const Eigen::VectorXd s = weight * f + bias;
  return {s.data(), s.data() + s.size()};
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) return {};
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

std::string serialize_classifier(const LinearClassifier& clf) {
  std::ostringstream out;
  out << kClassifierMagic << ' ' << kBankVersion << '\n'
      << "classes " << clf.weight.rows() << '\n'
      << "dim " << clf.weight.cols() << '\n';
  for (Eigen::Index r = 0; r < clf.weight.rows(); ++r) {
    out << "row " << r << ' ' << format_double(clf.bias(r));
    for (Eigen::Index c = 0; c < clf.weight.cols(); ++c) out << ' ' << format_double(clf.weight(r, c));
    out << '\n';
  }
  return out.str();
}

LinearClassifier deserialize_classifier(std::string_view text) {
  TokenReader in(text);
  in.expect(kClassifierMagic);
  if (in.integer() != kBankVersion) throw DataError("classifier: unsupported version");
  in.expect("classes");
  const int C = in.integer();
  in.expect("dim");
  const int d = in.integer();
  if (C < 1 || d < 1) throw DataError("classifier: bad dimensions");
  auto clf = LinearClassifier::zeros(C, d);
  for (int r = 0; r < C; ++r) {
    in.expect("row");
    if (in.integer() != r) throw DataError("classifier: rows out of order");
    clf.bias(r) = in.real();
    for (int c = 0; c < d; ++c) clf.weight(r, c) = in.real();
  }
  return clf;
}

}  // namespace tailreg
