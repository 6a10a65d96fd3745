#pragma once

#include <Eigen/Dense>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tailreg/dataset.hpp"
#include "tailreg/geometry.hpp"

namespace tailreg {

class Rng;

enum class HeadKind { Specific, Agnostic, Cab, Clustered, Merged };

enum class SortKey { InstanceCount, MeanScale };

struct ClusterConfig {
  int k = 1;
  SortKey key = SortKey::InstanceCount;

  friend bool operator==(const ClusterConfig&, const ClusterConfig&) = default;
};

/// Which regression-head parameterization to train.
///
/// Text form (CLI and sweep files): `specific`, `agnostic`, `cab:ALPHA`,
/// `cluster:K:num|scale`, `merge:GROUPS` where GROUPS is any of r, c, f,
/// optionally comma separated (`merge:rc` == `merge:r,c`).
struct HeadSpec {
  HeadKind kind = HeadKind::Specific;
  double alpha = 0.0;
  ClusterConfig cluster;
  /// Sorted, unique. All listed groups share ONE head.
  std::vector<Group> merge;

  static HeadSpec parse(std::string_view text);
  std::string to_string() const;

  friend bool operator==(const HeadSpec&, const HeadSpec&) = default;
};

/// r = W f + b with W of shape 4 x d.
struct AffineHead {
  Eigen::MatrixXd weight;
  Eigen::Vector4d bias = Eigen::Vector4d::Zero();

  static AffineHead zeros(int feature_dim);
  Delta apply(std::span<const double> feature) const;
};

/// Trained (or initialized) set of regression heads plus the class -> head map.
struct HeadBank {
  HeadSpec spec;
  int num_classes = 0;
  int feature_dim = 0;
  std::vector<AffineHead> heads;
  std::vector<int> class_to_head;
  /// Shared class-agnostic branch W_0; populated only for cab banks.
  std::optional<AffineHead> agnostic;
  /// Weights digest, present once the bank has been trained or loaded.
  std::optional<std::string> digest;

  int head_count() const { return static_cast<int>(heads.size()); }

  /// The affine map class_id regresses with. For cab banks this is
  /// alpha * W_0 + (1 - alpha) * W_i, bias combined the same way.
  AffineHead effective_weight(int class_id) const;

  /// Throws ContractError on a feature-length mismatch or bad class id.
  Delta predict(int class_id, std::span<const double> feature) const;

  /// Throws ContractError when the structural invariants do not hold.
  void check_invariants() const;
};

/// Sort classes by the key (descending, ties by ascending class id) and cut
/// the sequence into K contiguous groups; the first C mod K groups get one
/// extra class. Returns class -> group index.
std::vector<int> cluster_heads(const ClassStats& stats, const ClusterConfig& cfg);

/// Classes in any of `groups` share one head; all others keep a private head.
/// Head ids are numbered by first appearance in class-id order.
std::vector<int> merge_heads(const FrequencyPartition& partition, std::span<const Group> groups);

/// class -> head map for any variant. cab and specific both map identically.
std::vector<int> head_mapping(const HeadSpec& spec, const ClassStats& stats,
                              const FrequencyPartition& partition);

/// Build a bank with Gaussian(0, init_sigma) weights and zero biases.
///
/// The init stream always yields C per-class slots followed by one shared
/// slot, whatever the variant. A head serving every class takes the shared
/// slot; any other head takes the slot of its lowest class id; cab uses the
/// per-class slots for W_i and the shared slot for W_0. This keeps
/// cab(0) == specific and cab(1) == agnostic == merge:rcf at initialization.
HeadBank init_bank(const HeadSpec& spec, std::vector<int> class_to_head, int num_classes,
                   int feature_dim, Rng& init, double init_sigma);

std::string serialize_bank(const HeadBank& bank);
HeadBank deserialize_bank(std::string_view text);
/// SHA-256 over the serialized weights and mapping (digest line excluded).
std::string weights_digest(const HeadBank& bank);

/// Linear softmax classifier over C classes.
struct LinearClassifier {
  Eigen::MatrixXd weight;  // C x d
  Eigen::VectorXd bias;    // C

  static LinearClassifier zeros(int num_classes, int feature_dim);
  int num_classes() const { return static_cast<int>(weight.rows()); }
  /// Raw affine scores (logits); throws ContractError on dimension mismatch.
  std::vector<double> classify(std::span<const double> feature) const;
};

/// Numerically stable softmax.
std::vector<double> softmax(std::span<const double> logits);

std::string serialize_classifier(const LinearClassifier& clf);
LinearClassifier deserialize_classifier(std::string_view text);

}  // namespace tailreg
