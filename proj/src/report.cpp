#include "ensforge/report.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "ensforge/errors.hpp"
#include "ensforge/persist.hpp"

namespace ensforge {

namespace {

const char* const kPalette[] = {"#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"};

std::vector<const RunRecord*> sorted_by_method(std::span<const RunRecord> records) {
  std::vector<const RunRecord*> out;
  for (const auto& r : records) out.push_back(&r);
  std::stable_sort(out.begin(), out.end(), [](const RunRecord* a, const RunRecord* b) { return a->method < b->method; });
  return out;
}

}  // namespace

std::string curves_svg(std::span<const RunRecord> records) {
  const double W = 640, H = 420, left = 60, right = 150, top = 20, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;

  double fp_max = 0.0;
  for (const auto& r : records) {
    for (const auto& s : r.sweep) fp_max = std::max(fp_max, s.fp_per_km2);
  }
  if (fp_max <= 0.0) fp_max = 1.0;
  auto x_of = [&](double fp) { return left + fp / fp_max * pw; };
  auto y_of = [&](double recall) { return top + (1.0 - recall) * ph; };

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt_num(W, 0) + "\" height=\"" +
                    fmt_num(H, 0) + "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  svg += "<rect x=\"0\" y=\"0\" width=\"" + fmt_num(W, 0) + "\" height=\"" + fmt_num(H, 0) + "\" fill=\"white\"/>\n";
  svg += "<rect x=\"" + fmt_num(left, 1) + "\" y=\"" + fmt_num(top, 1) + "\" width=\"" + fmt_num(pw, 1) +
         "\" height=\"" + fmt_num(ph, 1) + "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double rv = i / 4.0;
    const double fv = fp_max * i / 4.0;
    svg += "<text x=\"" + fmt_num(left - 6, 1) + "\" y=\"" + fmt_num(y_of(rv) + 4, 1) + "\" text-anchor=\"end\">" +
           fmt_num(rv, 2) + "</text>\n";
    svg += "<text x=\"" + fmt_num(x_of(fv), 1) + "\" y=\"" + fmt_num(top + ph + 16, 1) + "\" text-anchor=\"middle\">" +
           fmt_num(fv, 0) + "</text>\n";
  }
  svg += "<text x=\"" + fmt_num(left + pw / 2, 1) + "\" y=\"" + fmt_num(H - 10, 1) +
         "\" text-anchor=\"middle\">false positives per km2</text>\n";
  svg += "<text x=\"14\" y=\"" + fmt_num(top + ph / 2, 1) + "\" transform=\"rotate(-90 14 " +
         fmt_num(top + ph / 2, 1) + ")\" text-anchor=\"middle\">recall</text>\n";

  const auto sorted = sorted_by_method(records);
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    const RunRecord& r = *sorted[k];
    const char* colour = kPalette[k % std::size(kPalette)];
    std::string pts;
    for (const auto& s : r.sweep) {
      if (!pts.empty()) pts += " ";
      pts += fmt_num(x_of(s.fp_per_km2), 2) + "," + fmt_num(y_of(s.recall), 2);
    }
    svg += "<polyline fill=\"none\" stroke=\"" + std::string(colour) + "\" stroke-width=\"1.5\" points=\"" + pts +
           "\"/>\n";
    for (const auto& op : r.points) {
      svg += "<circle cx=\"" + fmt_num(x_of(op.achieved.fp_per_km2), 2) + "\" cy=\"" +
             fmt_num(y_of(op.achieved.recall), 2) + "\" r=\"3\" fill=\"" + colour + "\"/>\n";
    }
    const double ly = top + 14 + 16 * static_cast<double>(k);
    svg += "<line x1=\"" + fmt_num(left + pw + 12, 1) + "\" y1=\"" + fmt_num(ly - 4, 1) + "\" x2=\"" +
           fmt_num(left + pw + 30, 1) + "\" y2=\"" + fmt_num(ly - 4, 1) + "\" stroke=\"" + colour +
           "\" stroke-width=\"2\"/>\n";
    svg += "<text x=\"" + fmt_num(left + pw + 36, 1) + "\" y=\"" + fmt_num(ly, 1) + "\">" + r.method + "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

std::string summary_text(std::span<const RunRecord> records) {
  const auto rows = comparison_rows(records);
  std::string out = "Comparison at matched operating points\n\n";
  out += comparison_text(rows);
  out += "\ndelta_fp_pct = (fp_base - fp) / fp_base * 100; positive means fewer false positives than the baseline.\n";

  std::vector<std::string> unreachable;
  for (const auto& r : rows) {
    if (!r.reachable) unreachable.push_back(r.method + " @ " + fmt_num(r.target_recall, 2));
  }
  if (!unreachable.empty()) {
    out += "Unreachable recall targets (max-recall threshold reported instead):\n";
    for (const auto& u : unreachable) out += "  " + u + "\n";
  }

  out += "\nPer-method cost\n";
  for (const RunRecord* r : sorted_by_method(records)) {
    out += "  " + r->method + ": " + std::to_string(r->n_predictions) + " forward pass(es) per image, " +
           std::to_string(r->extra_epochs) + " extra training epoch(s)";
    if (r->wall_seconds > 0.0) out += ", evaluated in " + fmt_num(r->wall_seconds, 1) + " s";
    out += "\n";
  }
  return out;
}

std::string cmd_compare_report(const std::filesystem::path& run_dir) {
  const std::vector<RunRecord> records = load_run_records(run_dir);
  if (records.empty()) throw MissingArtifactError("run " + run_dir.string() + " has no evaluation records to report");
  const std::string summary = summary_text(records);
  write_text(run_dir / "report" / "summary.txt", summary);
  write_text(run_dir / "report" / "curves.svg", curves_svg(records));
  return summary;
}

}  // namespace ensforge
