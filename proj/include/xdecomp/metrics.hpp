#pragma once

// Image-quality metrics for decomposition results. PSNR uses an explicit
// peak (not the per-image max) so scores are comparable across a dataset;
// identical images score the 300 dB cap. SSIM is the windowed form with an
// 11x11 Gaussian weight (sigma 1.5), evaluated on fully valid windows only,
// with C1 = (0.01*peak)^2 and C2 = (0.03*peak)^2. Both sides of every SSIM
// term go through the same arithmetic, so comparing an image with itself
// yields exactly 1.0.

#include <functional>
#include <string>
#include <vector>

#include "xdecomp/projection.hpp"

namespace xdecomp {

double psnr(const ProjectionImage& a, const ProjectionImage& b, double peak);
double ssim(const ProjectionImage& a, const ProjectionImage& b, double peak);

inline constexpr double kPsnrCapDb = 300.0;

struct MetricPair {
  double psnr = 0.0;
  double ssim = 0.0;
};

struct MetricRow {
  std::string group;  // phantom id, or "overall" for the closing row
  int samples = 0;
  std::vector<MetricPair> components;
  MetricPair reconstruction;   // summed prediction vs. the input projection
  double layer_sum_dev = 0.0;  // mean |sum of components - input| per pixel
};

struct MetricReport {
  int d = 0;
  std::vector<double> component_peaks;  // ground-truth peaks used for scoring
  double reconstruction_peak = 1.0;
  std::vector<MetricRow> rows;  // per group, then "overall"

  const MetricRow& overall() const;
  std::string to_table() const;
  std::string to_json_string() const;
};

// Maps a sample to its predicted component images (one per layer, input
// size). Lets the same evaluation drive a real network, a per-phantom
// checkpoint dispatch, or a test fixture.
using Predictor =
    std::function<std::vector<ProjectionImage>(const DecompositionSample&)>;

MetricReport evaluate(const Predictor& predict,
                      const std::vector<const DecompositionSample*>& samples);

// Convenience: mean |sum of predicted components - input| per pixel.
double layer_sum_deviation(const Predictor& predict,
                           const std::vector<const DecompositionSample*>& samples);

}  // namespace xdecomp
