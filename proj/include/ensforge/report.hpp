#pragma once

#include <filesystem>
#include <span>
#include <string>

#include "ensforge/experiment.hpp"

namespace ensforge {

/// Recall vs FP/km2 curves, one polyline per method, as a standalone SVG.
std::string curves_svg(std::span<const RunRecord> records);

/// Aligned comparison table plus per-method notes.
std::string summary_text(std::span<const RunRecord> records);

/// Writes report/summary.txt and report/curves.svg under run_dir and returns
/// the summary. Throws MissingArtifactError when the run holds no records.
std::string cmd_compare_report(const std::filesystem::path& run_dir);

}  // namespace ensforge
