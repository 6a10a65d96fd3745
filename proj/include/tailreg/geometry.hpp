#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace tailreg {

/// Axis-aligned box in corner form, image units.
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  double area() const { return width() * height(); }

  /// Finite coordinates with strictly positive extent.
  bool valid() const;

  static Box from_center(double cx, double cy, double w, double h);

  friend bool operator==(const Box&, const Box&) = default;
};

/// Regression offset of a target box relative to a proposal.
struct Delta {
  double dx = 0.0;
  double dy = 0.0;
  double dw = 0.0;
  double dh = 0.0;

  std::array<double, 4> as_array() const { return {dx, dy, dw, dh}; }
  static Delta from_array(const std::array<double, 4>& v) { return {v[0], v[1], v[2], v[3]}; }
  bool finite() const;

  friend bool operator==(const Delta&, const Delta&) = default;
};

/// Image extent used for optional clipping of decoded boxes.
struct ImageExtent {
  double width = 0.0;
  double height = 0.0;
};

inline constexpr double kDefaultDeltaClamp = 4.0;

/// Throws std::domain_error for a degenerate or non-finite box.
void require_valid(const Box& b, const char* what = "box");

double iou(const Box& a, const Box& b);

Delta encode_delta(const Box& proposal, const Box& target);

// dw and dh are clamped to [-clamp, clamp] before exponentiation.
Box decode_delta(const Box& proposal, const Delta& d, double clamp = kDefaultDeltaClamp,
                 std::optional<ImageExtent> clip_to = std::nullopt);

struct ScoredBox {
  Box box;
  double score = 0.0;
};

/// Greedy non-maximum suppression. Candidates are visited by descending score,
/// equal scores by ascending input index; a candidate is dropped iff a kept
/// candidate overlaps it with IoU > iou_threshold. Returns kept indices in
/// visit order.
std::vector<std::size_t> nms(std::span<const ScoredBox> detections, double iou_threshold);

}  // namespace tailreg
