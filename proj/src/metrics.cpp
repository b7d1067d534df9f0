#include "xdecomp/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "json.hpp"

namespace xdecomp {

namespace {

void require_same_size(const ProjectionImage& a, const ProjectionImage& b,
                       const char* who) {
  if (a.nu != b.nu || a.nv != b.nv)
    throw std::invalid_argument(std::string(who) + ": image size mismatch");
  if (a.data.empty()) throw std::invalid_argument(std::string(who) + ": empty image");
}

// 11x11 Gaussian weights, sigma 1.5, normalized to sum 1.
const std::vector<double>& gaussian11() {
  static const std::vector<double> w = [] {
    constexpr int n = 11;
    constexpr double sigma = 1.5;
    std::vector<double> out(n * n);
    double sum = 0.0;
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        const double dy = y - (n - 1) / 2.0, dx = x - (n - 1) / 2.0;
        const double g = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
        out[std::size_t(y * n + x)] = g;
        sum += g;
      }
    }
    for (double& v : out) v /= sum;
    return out;
  }();
  return w;
}

}  // namespace

double psnr(const ProjectionImage& a, const ProjectionImage& b, double peak) {
  require_same_size(a, b, "psnr");
  if (!(peak > 0.0)) throw std::invalid_argument("psnr: peak must be positive");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = double(a.data[i]) - double(b.data[i]);
    acc += d * d;
  }
  const double mse = acc / double(a.data.size());
  if (mse <= 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(peak * peak / mse));
}

double ssim(const ProjectionImage& a, const ProjectionImage& b, double peak) {
  require_same_size(a, b, "ssim");
  if (!(peak > 0.0)) throw std::invalid_argument("ssim: peak must be positive");
  constexpr int win = 11;
  if (a.nv < win || a.nu < win)
    throw std::invalid_argument("ssim: image smaller than the 11x11 window");
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  const auto& w = gaussian11();

  double acc = 0.0;
  std::int64_t count = 0;
  for (int y = 0; y + win <= a.nv; ++y) {
    for (int x = 0; x + win <= a.nu; ++x) {
      double ma = 0, mb = 0, maa = 0, mbb = 0, mab = 0;
      for (int dy = 0; dy < win; ++dy) {
        const float* ra = &a.data[std::size_t((y + dy) * a.nu + x)];
        const float* rb = &b.data[std::size_t((y + dy) * b.nu + x)];
        const double* rw = &w[std::size_t(dy * win)];
        for (int dx = 0; dx < win; ++dx) {
          const double va = ra[dx], vb = rb[dx], wv = rw[dx];
          ma += wv * va;
          mb += wv * vb;
          maa += wv * va * va;
          mbb += wv * vb * vb;
          mab += wv * va * vb;
        }
      }
      const double sa = maa - ma * ma;
      const double sb = mbb - mb * mb;
      const double sab = mab - ma * mb;
      // Identical inputs make numerator and denominator bitwise equal:
      // 2*m*m rounds the same as m*m + m*m, and sa + sb doubles sab exactly.
      const double num = (2.0 * ma * mb + c1) * (2.0 * sab + c2);
      const double den = (ma * ma + mb * mb + c1) * (sa + sb + c2);
      acc += num / den;
      ++count;
    }
  }
  return acc / double(count);
}

const MetricRow& MetricReport::overall() const {
  if (rows.empty()) throw std::logic_error("empty metric report");
  return rows.back();
}

std::string MetricReport::to_table() const {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-14s %5s", "group", "n");
  out += buf;
  for (int c = 0; c < d; ++c) {
    std::snprintf(buf, sizeof buf, "  %13s", ("layer" + std::to_string(c) + " dB/ss").c_str());
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "  %13s  %9s\n", "recon dB/ss", "|sum-in|");
  out += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-14s %5d", r.group.c_str(), r.samples);
    out += buf;
    for (const auto& mp : r.components) {
      std::snprintf(buf, sizeof buf, "  %6.2f/%.4f", mp.psnr, mp.ssim);
      out += buf;
    }
    std::snprintf(buf, sizeof buf, "  %6.2f/%.4f  %9.3e\n", r.reconstruction.psnr,
                  r.reconstruction.ssim, r.layer_sum_dev);
    out += buf;
  }
  return out;
}

std::string MetricReport::to_json_string() const {
  nlohmann::json j;
  j["d"] = d;
  j["component_peaks"] = component_peaks;
  j["reconstruction_peak"] = reconstruction_peak;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json row{{"group", r.group},
                       {"samples", r.samples},
                       {"layer_sum_dev", r.layer_sum_dev}};
    row["components"] = nlohmann::json::array();
    for (const auto& mp : r.components)
      row["components"].push_back({{"psnr", mp.psnr}, {"ssim", mp.ssim}});
    row["reconstruction"] = {{"psnr", r.reconstruction.psnr},
                             {"ssim", r.reconstruction.ssim}};
    j["rows"].push_back(std::move(row));
  }
  return j.dump(2);
}

namespace {

struct Acc {
  int n = 0;
  std::vector<double> psnr_sum, ssim_sum;
  double rpsnr_sum = 0, rssim_sum = 0;
  double dev_sum = 0;
  std::int64_t pixels = 0;
  explicit Acc(int d) : psnr_sum(std::size_t(d), 0.0), ssim_sum(std::size_t(d), 0.0) {}
};

MetricRow finish_row(const std::string& group, const Acc& a, int d) {
  MetricRow r;
  r.group = group;
  r.samples = a.n;
  for (int c = 0; c < d; ++c)
    r.components.push_back(
        {a.psnr_sum[std::size_t(c)] / a.n, a.ssim_sum[std::size_t(c)] / a.n});
  r.reconstruction = {a.rpsnr_sum / a.n, a.rssim_sum / a.n};
  r.layer_sum_dev = a.dev_sum / double(a.pixels);
  return r;
}

}  // namespace

MetricReport evaluate(const Predictor& predict,
                      const std::vector<const DecompositionSample*>& samples) {
  if (!predict) throw std::invalid_argument("evaluate: null predictor");
  if (samples.empty()) throw std::invalid_argument("evaluate: empty sample set");
  const int d = int(samples[0]->targets.size());
  if (d < 1) throw std::invalid_argument("evaluate: samples have no targets");
  for (const auto* s : samples) {
    if (int(s->targets.size()) != d)
      throw std::invalid_argument("evaluate: inconsistent component count across samples");
    for (const auto& t : s->targets)
      if (t.nu != s->input.nu || t.nv != s->input.nv)
        throw std::invalid_argument("evaluate: target size differs from input in " + s->id());
  }

  MetricReport report;
  report.d = d;
  report.component_peaks.assign(std::size_t(d), 0.0);
  report.reconstruction_peak = 0.0;
  for (const auto* s : samples) {
    for (int c = 0; c < d; ++c)
      for (float v : s->targets[std::size_t(c)].data)
        report.component_peaks[std::size_t(c)] =
            std::max(report.component_peaks[std::size_t(c)], double(v));
    for (float v : s->input.data)
      report.reconstruction_peak = std::max(report.reconstruction_peak, double(v));
  }
  for (double& p : report.component_peaks)
    if (!(p > 0.0)) p = 1.0;
  if (!(report.reconstruction_peak > 0.0)) report.reconstruction_peak = 1.0;

  std::vector<std::pair<std::string, Acc>> groups;
  Acc total(d);
  auto group_acc = [&](const std::string& g) -> Acc& {
    for (auto& [name, acc] : groups)
      if (name == g) return acc;
    groups.emplace_back(g, Acc(d));
    return groups.back().second;
  };

  for (const auto* s : samples) {
    auto preds = predict(*s);
    if (int(preds.size()) != d)
      throw std::runtime_error("predictor returned " + std::to_string(preds.size()) +
                               " components for " + s->id() + ", expected " +
                               std::to_string(d));
    for (const auto& p : preds)
      if (p.nu != s->input.nu || p.nv != s->input.nv)
        throw std::runtime_error("predictor returned wrong image size for " + s->id());

    ProjectionImage recon = s->input;
    recon.label = "reconstruction";
    std::fill(recon.data.begin(), recon.data.end(), 0.0f);
    for (const auto& p : preds)
      for (std::size_t i = 0; i < recon.data.size(); ++i) recon.data[i] += p.data[i];

    Acc& ga = group_acc(s->phantom);
    double dev = 0.0;
    for (std::size_t i = 0; i < recon.data.size(); ++i)
      dev += std::abs(double(recon.data[i]) - double(s->input.data[i]));
    std::vector<MetricPair> comp_scores(static_cast<std::size_t>(d), MetricPair{});
    for (int c = 0; c < d; ++c) {
      comp_scores[std::size_t(c)].psnr =
          psnr(preds[std::size_t(c)], s->targets[std::size_t(c)],
               report.component_peaks[std::size_t(c)]);
      comp_scores[std::size_t(c)].ssim =
          ssim(preds[std::size_t(c)], s->targets[std::size_t(c)],
               report.component_peaks[std::size_t(c)]);
    }
    const double rp = psnr(recon, s->input, report.reconstruction_peak);
    const double rs = ssim(recon, s->input, report.reconstruction_peak);
    for (Acc* a : {&ga, &total}) {
      for (int c = 0; c < d; ++c) {
        a->psnr_sum[std::size_t(c)] += comp_scores[std::size_t(c)].psnr;
        a->ssim_sum[std::size_t(c)] += comp_scores[std::size_t(c)].ssim;
      }
      a->rpsnr_sum += rp;
      a->rssim_sum += rs;
      a->dev_sum += dev;
      a->pixels += std::int64_t(recon.data.size());
      a->n += 1;
    }
  }

  for (const auto& [name, acc] : groups)
    report.rows.push_back(finish_row(name, acc, d));
  report.rows.push_back(finish_row("overall", total, d));
  return report;
}

double layer_sum_deviation(const Predictor& predict,
                           const std::vector<const DecompositionSample*>& samples) {
  if (!predict) throw std::invalid_argument("layer_sum_deviation: null predictor");
  if (samples.empty())
    throw std::invalid_argument("layer_sum_deviation: empty sample set");
  double dev = 0.0;
  std::int64_t pixels = 0;
  for (const auto* s : samples) {
    auto preds = predict(*s);
    std::vector<double> sum(s->input.data.size(), 0.0);
    for (const auto& p : preds) {
      if (p.data.size() != sum.size())
        throw std::runtime_error("layer_sum_deviation: size mismatch for " + s->id());
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += double(p.data[i]);
    }
    for (std::size_t i = 0; i < sum.size(); ++i)
      dev += std::abs(sum[i] - double(s->input.data[i]));
    pixels += std::int64_t(sum.size());
  }
  return dev / double(pixels);
}

}  // namespace xdecomp
