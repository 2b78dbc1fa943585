#pragma once

// Plot-ready CSVs for the collapse diagnostics and the bound diagnostics.

#include <string>
#include <vector>

#include "nrlab/io.hpp"

namespace nrlab::tools {

struct FigureOutput {
  std::vector<std::string> files;
  std::vector<std::string> notes;  // one-line summaries for stdout
};

// minv.csv, sigma.csv, basin.csv under out_dir.
FigureOutput run_fig1(const Config& cfg, const std::string& case_path, const std::string& out_dir);

// great_circle_lambda.csv, great_circle_bound.csv, corollary.csv, bound_scatter.csv.
FigureOutput run_fig2(const Config& cfg, const std::string& case_path, const std::string& out_dir);

}  // namespace nrlab::tools
