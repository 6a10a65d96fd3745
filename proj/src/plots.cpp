#include "tailreg/plots.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <tuple>

#include "tailreg/digest.hpp"
#include "tailreg/errors.hpp"

namespace tailreg {

namespace {

constexpr Group kGroups[] = {Group::Rare, Group::Common, Group::Frequent};

const char* group_color(Group g) {
  switch (g) {
    case Group::Rare: return "#d62728";
    case Group::Common: return "#2ca02c";
    case Group::Frequent: return "#1f77b4";
  }
  return "#000000";
}

std::string opt_cell(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

std::vector<const CellResult*> cells_of(const SweepResult& r, const std::string& variant) {
  std::vector<const CellResult*> out;
  for (const auto& c : r.cells)
    if (c.variant == variant) out.push_back(&c);
  return out;
}

Protocol report_protocol(const SweepResult& r) {
  const auto& ps = r.spec.protocols;
  return std::find(ps.begin(), ps.end(), Protocol::Predicted) != ps.end() ? Protocol::Predicted
                                                                           : ps.front();
}

// Maps data coordinates into a fixed plot box.
struct Frame {
  double width = 640, height = 400, left = 60, right = 20, top = 30, bottom = 50;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;

  double x(double v) const {
    const double span = x1 > x0 ? x1 - x0 : 1.0;
    return left + (v - x0) / span * (width - left - right);
  }
  double y(double v) const {
    const double span = y1 > y0 ? y1 - y0 : 1.0;
    return height - bottom - (v - y0) / span * (height - top - bottom);
  }
};

std::string px(double v) {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(2);
  o << v;
  return o.str();
}

void open_svg(std::ostringstream& out, const Frame& f, const std::string& title,
              const std::string& xlabel, const std::string& ylabel) {
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width << "\" height=\""
      << f.height << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out << "<title>" << title << "</title>\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << px(f.width / 2) << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">"
      << title << "</text>\n";
  out << "<line x1=\"" << px(f.left) << "\" y1=\"" << px(f.height - f.bottom) << "\" x2=\""
      << px(f.width - f.right) << "\" y2=\"" << px(f.height - f.bottom) << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << px(f.left) << "\" y1=\"" << px(f.top) << "\" x2=\"" << px(f.left)
      << "\" y2=\"" << px(f.height - f.bottom) << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << px(f.width / 2) << "\" y=\"" << px(f.height - 12)
      << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
  out << "<text x=\"14\" y=\"" << px(f.height / 2) << "\" transform=\"rotate(-90 14 "
      << px(f.height / 2) << ")\" text-anchor=\"middle\">" << ylabel << "</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = f.y0 + (f.y1 - f.y0) * i / 4.0;
    out << "<text x=\"" << px(f.left - 6) << "\" y=\"" << px(f.y(v) + 4)
        << "\" text-anchor=\"end\">" << px(v) << "</text>\n";
  }
}

}  // namespace

PlotTables plot_tables(const SweepResult& r) {
  if (r.cells.empty() || r.spec.variants.empty())
    throw ContractError("plot_tables: result has no cells");
  PlotTables t;
  std::vector<std::string> names;
  for (const auto& v : r.spec.variants) names.push_back(v.to_string());

  t.before_variant = std::find(names.begin(), names.end(), "specific") != names.end()
                         ? "specific"
                         : names.front();
  double best = std::numeric_limits<double>::infinity();
  for (const auto& v : r.spec.variants)
    if (v.kind == HeadKind::Cab && v.to_string() != t.before_variant &&
        std::abs(v.alpha - 0.5) < best) {
      best = std::abs(v.alpha - 0.5);
      t.after_variant = v.to_string();
    }
  if (t.after_variant.empty()) t.after_variant = names.back();

  for (const auto& name : names) {
    const auto cells = cells_of(r, name);
    std::map<std::tuple<Split, Group, int>, std::pair<double, int>> acc;
    for (const auto* c : cells)
      for (const auto& p : group_curves(c->ledger)) {
        auto& a = acc[{p.split, p.group, p.epoch}];
        a.first += p.mean_reg_loss;
        a.second += 1;
      }
    for (const Split s : {Split::Train, Split::Val})
      for (const Group g : kGroups)
        for (const auto& [key, a] : acc)
          if (std::get<0>(key) == s && std::get<1>(key) == g)
            t.curves.push_back({name, s, g, std::get<2>(key), a.first / a.second});
  }

  const int C = r.spec.dataset.num_classes;
  auto class_means = [&](const std::string& name) {
    std::vector<double> sum(static_cast<std::size_t>(C), 0.0);
    std::vector<int> n(static_cast<std::size_t>(C), 0);
    for (const auto* c : cells_of(r, name)) {
      const auto f = c->ledger.final_losses(Split::Val, C);
      for (int k = 0; k < C; ++k)
        if (f[k]) {
          sum[k] += *f[k];
          ++n[k];
        }
    }
    std::vector<std::optional<double>> out(static_cast<std::size_t>(C));
    for (int k = 0; k < C; ++k)
      if (n[k] > 0) out[k] = sum[k] / n[k];
    return out;
  };
  const auto before = class_means(t.before_variant);
  const auto after = class_means(t.after_variant);
  std::vector<Group> groups(static_cast<std::size_t>(C), Group::Rare);
  for (const auto& e : r.cells.front().ledger.entries) groups[e.class_id] = e.group;
  for (int k = 0; k < C; ++k) t.class_losses.push_back({k, groups[k], before[k], after[k]});
  std::stable_sort(t.class_losses.begin(), t.class_losses.end(),
                   [](const ClassLossRow& a, const ClassLossRow& b) {
                     const double x = a.before.value_or(-1.0), y = b.before.value_or(-1.0);
                     return x > y;
                   });

  const auto proto = report_protocol(r);
  const auto& thr = r.spec.eval.iou_thresholds;
  auto ap_means = [&](const std::string& name) {
    std::vector<double> m(thr.size(), 0.0);
    const auto cells = cells_of(r, name);
    for (const auto* c : cells) {
      const auto& rep = c->reports.at(proto);
      for (std::size_t i = 0; i < thr.size(); ++i) m[i] += rep.ap_per_threshold.at(i);
    }
    for (auto& v : m) v /= static_cast<double>(cells.size());
    return m;
  };
  const auto ab = ap_means(t.before_variant);
  const auto aa = ap_means(t.after_variant);
  for (std::size_t i = 0; i < thr.size(); ++i) t.thresholds.push_back({thr[i], ab[i], aa[i]});
  return t;
}

std::string curves_csv(const PlotTables& t) {
  std::ostringstream out;
  out << "variant,split,group,epoch,mean_reg_loss\n";
  for (const auto& c : t.curves)
    out << c.variant << ',' << to_string(c.split) << ',' << to_string(c.group) << ',' << c.epoch
        << ',' << format_double(c.loss) << '\n';
  return out.str();
}

std::string class_losses_csv(const PlotTables& t) {
  std::ostringstream out;
  out << "rank,class_id,group,before_variant,before,after_variant,after\n";
  int rank = 0;
  for (const auto& c : t.class_losses)
    out << rank++ << ',' << c.class_id << ',' << to_string(c.group) << ',' << t.before_variant
        << ',' << opt_cell(c.before) << ',' << t.after_variant << ',' << opt_cell(c.after) << '\n';
  return out.str();
}

std::string thresholds_csv(const PlotTables& t) {
  std::ostringstream out;
  out << "iou,before_variant,before_AP,after_variant,after_AP,delta\n";
  for (const auto& r : t.thresholds)
    out << format_double(r.iou) << ',' << t.before_variant << ',' << format_double(100.0 * r.before)
        << ',' << t.after_variant << ',' << format_double(100.0 * r.after) << ','
        << format_double(100.0 * r.delta()) << '\n';
  return out.str();
}

std::string curves_svg(const PlotTables& t) {
  std::vector<const CurveRow*> rows;
  for (const auto& c : t.curves)
    if (c.split == Split::Train && (c.variant == t.before_variant || c.variant == t.after_variant))
      rows.push_back(&c);
  Frame f;
  f.x0 = 1;
  f.x1 = 1;
  f.y1 = 0;
  for (const auto* c : rows) {
    f.x1 = std::max<double>(f.x1, c->epoch);
    f.y1 = std::max(f.y1, c->loss);
  }
  std::ostringstream out;
  open_svg(out, f, "Train regression loss by frequency group", "epoch", "mean smooth-L1 loss");
  for (const auto& variant : {t.before_variant, t.after_variant}) {
    const bool dashed = variant != t.before_variant;
    for (const Group g : kGroups) {
      std::string pts;
      for (const auto* c : rows)
        if (c->variant == variant && c->group == g)
          pts += px(f.x(c->epoch)) + "," + px(f.y(c->loss)) + " ";
      if (pts.empty()) continue;
      out << "<polyline fill=\"none\" stroke=\"" << group_color(g) << "\" stroke-width=\"1.5\""
          << (dashed ? " stroke-dasharray=\"5,3\"" : "") << " points=\"" << pts << "\"/>\n";
    }
    if (variant == t.after_variant && t.after_variant == t.before_variant) break;
  }
  for (const auto* c : rows)
    out << "<circle r=\"1.5\" fill=\"" << group_color(c->group) << "\" cx=\"" << px(f.x(c->epoch))
        << "\" cy=\"" << px(f.y(c->loss)) << "\" data-variant=\"" << c->variant
        << "\" data-split=\"" << to_string(c->split) << "\" data-group=\"" << to_string(c->group)
        << "\" data-epoch=\"" << c->epoch << "\" data-value=\"" << format_double(c->loss)
        << "\"/>\n";
  int ly = 40;
  for (const Group g : kGroups) {
    out << "<text x=\"" << px(f.width - 150) << "\" y=\"" << ly << "\" fill=\"" << group_color(g)
        << "\">" << to_string(g) << "</text>\n";
    ly += 14;
  }
  out << "<text x=\"" << px(f.width - 150) << "\" y=\"" << ly << "\">solid " << t.before_variant
      << ", dashed " << t.after_variant << "</text>\n";
  out << "</svg>\n";
  return out.str();
}

std::string class_losses_svg(const PlotTables& t) {
  Frame f;
  f.width = 900;
  f.x0 = 0;
  f.x1 = static_cast<double>(t.class_losses.size());
  f.y1 = 0;
  for (const auto& c : t.class_losses) f.y1 = std::max({f.y1, c.before.value_or(0), c.after.value_or(0)});
  std::ostringstream out;
  open_svg(out, f, "Final val regression loss per class", "classes sorted by " + t.before_variant + " loss",
           "mean smooth-L1 loss");
  const double slot = (f.x(1) - f.x(0));
  int rank = 0;
  for (const auto& c : t.class_losses) {
    const auto bar = [&](const std::optional<double>& v, const char* which, double offset,
                         const char* color) {
      if (!v) return;
      const double x = f.x(rank) + offset * slot;
      out << "<rect x=\"" << px(x) << "\" y=\"" << px(f.y(*v)) << "\" width=\""
          << px(slot * 0.45) << "\" height=\"" << px(f.y(0) - f.y(*v)) << "\" fill=\"" << color
          << "\" data-series=\"" << which << "\" data-class=\"" << c.class_id
          << "\" data-group=\"" << to_string(c.group) << "\" data-value=\""
          << format_double(*v) << "\"/>\n";
    };
    bar(c.before, "before", 0.05, "#7f7f7f");
    bar(c.after, "after", 0.5, "#ff7f0e");
    ++rank;
  }
  out << "<text x=\"" << px(f.width - 220) << "\" y=\"40\" fill=\"#7f7f7f\">" << t.before_variant
      << "</text>\n";
  out << "<text x=\"" << px(f.width - 220) << "\" y=\"54\" fill=\"#ff7f0e\">" << t.after_variant
      << "</text>\n";
  out << "</svg>\n";
  return out.str();
}

std::string thresholds_svg(const PlotTables& t) {
  Frame f;
  f.x0 = 0;
  f.x1 = static_cast<double>(t.thresholds.size());
  f.y0 = 0;
  f.y1 = 0;
  for (const auto& r : t.thresholds) {
    f.y0 = std::min(f.y0, 100.0 * r.delta());
    f.y1 = std::max(f.y1, 100.0 * r.delta());
  }
  if (f.y1 == f.y0) f.y1 = f.y0 + 1.0;
  std::ostringstream out;
  open_svg(out, f, "AP gain of " + t.after_variant + " over " + t.before_variant, "IoU threshold",
           "delta AP (points)");
  const double slot = f.x(1) - f.x(0);
  for (std::size_t i = 0; i < t.thresholds.size(); ++i) {
    const auto& r = t.thresholds[i];
    const double d = 100.0 * r.delta();
    const double top = f.y(std::max(d, 0.0)), base = f.y(std::min(d, 0.0));
    out << "<rect x=\"" << px(f.x(static_cast<double>(i)) + 0.15 * slot) << "\" y=\"" << px(top)
        << "\" width=\"" << px(0.7 * slot) << "\" height=\"" << px(base - top) << "\" fill=\""
        << (d >= 0 ? "#2ca02c" : "#d62728") << "\" data-iou=\"" << format_double(r.iou)
        << "\" data-value=\"" << format_double(d) << "\"/>\n";
    out << "<text x=\"" << px(f.x(static_cast<double>(i)) + 0.5 * slot) << "\" y=\""
        << px(f.height - f.bottom + 14) << "\" text-anchor=\"middle\">"
        << static_cast<int>(std::lround(100.0 * r.iou)) << "</text>\n";
  }
  out << "<line x1=\"" << px(f.left) << "\" y1=\"" << px(f.y(0)) << "\" x2=\""
      << px(f.width - f.right) << "\" y2=\"" << px(f.y(0)) << "\" stroke=\"gray\"/>\n";
  out << "</svg>\n";
  return out.str();
}

std::vector<std::filesystem::path> emit_plots(const SweepResult& result,
                                              const std::filesystem::path& dir) {
  const auto t = plot_tables(result);
  const std::pair<std::string, std::string> files[] = {
      {"group_loss_curves.csv", curves_csv(t)},
      {"group_loss_curves.svg", curves_svg(t)},
      {"class_loss_before_after.csv", class_losses_csv(t)},
      {"class_loss_before_after.svg", class_losses_svg(t)},
      {"ap_by_iou.csv", thresholds_csv(t)},
      {"ap_by_iou.svg", thresholds_svg(t)},
  };
  std::vector<std::filesystem::path> out;
  for (const auto& [name, text] : files) {
    write_text_file(dir / name, text);
    out.push_back(dir / name);
  }
  return out;
}

}  // namespace tailreg
