#include "tailreg/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace tailreg {

bool Box::valid() const {
  return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) &&
         x2 > x1 && y2 > y1;
}

Box Box::from_center(double cx, double cy, double w, double h) {
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

bool Delta::finite() const {
  return std::isfinite(dx) && std::isfinite(dy) && std::isfinite(dw) && std::isfinite(dh);
}

void require_valid(const Box& b, const char* what) {
  if (!b.valid()) {
    throw std::domain_error(std::string(what) + " is degenerate or non-finite: (" +
                            std::to_string(b.x1) + ", " + std::to_string(b.y1) + ", " +
                            std::to_string(b.x2) + ", " + std::to_string(b.y2) + ")");
  }
}

double iou(const Box& a, const Box& b) {
  require_valid(a, "iou lhs");
  require_valid(b, "iou rhs");
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  // Summation order is symmetric in (a, b) so iou(a, b) == iou(b, a) bitwise.
  const double uni = (a.area() + b.area()) - inter;
  return inter / uni;
}

Delta encode_delta(const Box& proposal, const Box& target) {
  require_valid(proposal, "proposal");
  require_valid(target, "target");
  const double pw = proposal.width();
  const double ph = proposal.height();
  return {(target.cx() - proposal.cx()) / pw, (target.cy() - proposal.cy()) / ph,
          std::log(target.width() / pw), std::log(target.height() / ph)};
}

Box decode_delta(const Box& proposal, const Delta& d, double clamp,
                 std::optional<ImageExtent> clip_to) {
  require_valid(proposal, "proposal");
  if (!d.finite()) throw std::domain_error("decode_delta: non-finite delta");
  const double pw = proposal.width();
  const double ph = proposal.height();
  const double cx = proposal.cx() + d.dx * pw;
  const double cy = proposal.cy() + d.dy * ph;
  const double w = pw * std::exp(std::clamp(d.dw, -clamp, clamp));
  const double h = ph * std::exp(std::clamp(d.dh, -clamp, clamp));
  Box out = Box::from_center(cx, cy, w, h);
  if (clip_to) {
    out.x1 = std::clamp(out.x1, 0.0, clip_to->width);
    out.x2 = std::clamp(out.x2, 0.0, clip_to->width);
    out.y1 = std::clamp(out.y1, 0.0, clip_to->height);
    out.y2 = std::clamp(out.y2, 0.0, clip_to->height);
    // A box pushed fully outside the image collapses; keep a one-unit sliver
    // so downstream IoU stays defined.
    if (out.x2 <= out.x1) {
      out.x1 = std::min(out.x1, clip_to->width - 1.0);
      out.x2 = out.x1 + 1.0;
    }
    if (out.y2 <= out.y1) {
      out.y1 = std::min(out.y1, clip_to->height - 1.0);
      out.y2 = out.y1 + 1.0;
    }
  }
  return out;
}

std::vector<std::size_t> nms(std::span<const ScoredBox> detections, double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) {
    throw std::invalid_argument("nms: iou_threshold must lie in (0, 1)");
  }
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (const auto& d : detections) {
    if (!std::isfinite(d.score)) throw std::invalid_argument("nms: non-finite score");
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].score > detections[b].score;
  });

  std::vector<std::size_t> kept;
  for (const std::size_t idx : order) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](std::size_t k) {
      return iou(detections[k].box, detections[idx].box) > iou_threshold;
    });
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

}  // namespace tailreg
