#include "xdecomp/projection.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "json.hpp"
#include "xdecomp/parallel.hpp"

namespace xdecomp {

Mat3 mat3_identity() { return {1, 0, 0, 0, 1, 0, 0, 0, 1}; }

Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += a[std::size_t(i * 3 + k)] * b[std::size_t(k * 3 + j)];
      c[std::size_t(i * 3 + j)] = s;
    }
  return c;
}

Vec3 mat3_apply(const Mat3& m, const Vec3& v) {
  return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
          m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
          m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

Vec3 mat3_apply_transposed(const Mat3& m, const Vec3& v) {
  return {m[0] * v[0] + m[3] * v[1] + m[6] * v[2],
          m[1] * v[0] + m[4] * v[1] + m[7] * v[2],
          m[2] * v[0] + m[5] * v[1] + m[8] * v[2]};
}

void CameraIntrinsics::validate() const {
  if (detector_u < 1 || detector_v < 1)
    throw std::invalid_argument("detector size must be >= 1 pixel");
  if (!(pixel_pitch_mm > 0)) throw std::invalid_argument("pixel pitch must be > 0");
  if (!(sdd_mm > 0) || !(sid_mm > 0))
    throw std::invalid_argument("camera distances must be > 0");
  if (!(sdd_mm > sid_mm))
    throw std::invalid_argument("source-detector distance must exceed source-isocenter");
}

CameraIntrinsics CameraIntrinsics::clinical_256() {
  CameraIntrinsics intr;
  intr.detector_u = intr.detector_v = 256;
  intr.pixel_pitch_mm = 1.25;
  intr.principal_u = intr.principal_v = 128.0;
  return intr;
}

CameraIntrinsics CameraIntrinsics::desk_64() {
  CameraIntrinsics intr;
  intr.detector_u = intr.detector_v = 64;
  intr.pixel_pitch_mm = 5.0;
  intr.principal_u = intr.principal_v = 32.0;
  return intr;
}

void CameraPose::validate() const {
  intrinsics.validate();
  // R^T R = I and det = +1 within 1e-6.
  const Mat3& r = rotation;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += r[std::size_t(k * 3 + i)] * r[std::size_t(k * 3 + j)];
      const double want = i == j ? 1.0 : 0.0;
      if (std::abs(s - want) > 1e-6)
        throw std::invalid_argument("camera rotation is not orthonormal");
    }
  const double det = r[0] * (r[4] * r[8] - r[5] * r[7]) -
                     r[1] * (r[3] * r[8] - r[5] * r[6]) +
                     r[2] * (r[3] * r[7] - r[4] * r[6]);
  if (std::abs(det - 1.0) > 1e-6)
    throw std::invalid_argument("camera rotation must be a proper rotation");
}

namespace {

Mat3 rot_x(double deg) {
  const double a = deg * std::numbers::pi / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  return {1, 0, 0, 0, c, -s, 0, s, c};
}

Mat3 rot_z(double deg) {
  const double a = deg * std::numbers::pi / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  return {c, -s, 0, s, c, 0, 0, 0, 1};
}

}  // namespace

CameraPose pose_from_angles(const CameraIntrinsics& intr, double cranial_deg,
                            double lao_rao_deg) {
  if (!std::isfinite(cranial_deg) || !std::isfinite(lao_rao_deg))
    throw std::invalid_argument("pose angles must be finite");
  intr.validate();
  CameraPose pose;
  pose.intrinsics = intr;
  pose.cranial_deg = cranial_deg;
  pose.lao_rao_deg = lao_rao_deg;
  pose.rotation = mat3_mul(rot_x(cranial_deg), rot_z(lao_rao_deg));
  return pose;
}

std::vector<CameraPose> generate_trajectory(const CameraIntrinsics& intr,
                                            std::array<double, 2> cranial_range_deg,
                                            std::array<double, 2> lao_rao_range_deg,
                                            int n_cranial, int n_lateral) {
  if (n_cranial < 1 || n_lateral < 1)
    throw std::invalid_argument("trajectory counts must be >= 1");
  if (cranial_range_deg[0] > cranial_range_deg[1] ||
      lao_rao_range_deg[0] > lao_rao_range_deg[1])
    throw std::invalid_argument("trajectory range lo must be <= hi");
  auto linspace = [](std::array<double, 2> range, int n, int i) {
    if (n == 1) return range[0];
    return range[0] + (range[1] - range[0]) * double(i) / double(n - 1);
  };
  std::vector<CameraPose> poses;
  poses.reserve(std::size_t(n_cranial) * std::size_t(n_lateral));
  for (int ic = 0; ic < n_cranial; ++ic)
    for (int il = 0; il < n_lateral; ++il)
      poses.push_back(pose_from_angles(intr, linspace(cranial_range_deg, n_cranial, ic),
                                       linspace(lao_rao_range_deg, n_lateral, il)));
  return poses;
}

double default_step_mm(const Volume& v) {
  return 0.5 * std::min({v.spacing[0], v.spacing[1], v.spacing[2]});
}

namespace {

// Slab intersection of a ray with an axis-aligned box; returns false on miss.
bool intersect_aabb(const Vec3& orig, const Vec3& dir, const Vec3& lo, const Vec3& hi,
                    double& t0, double& t1) {
  t0 = 0.0;
  t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (dir[a] == 0.0) {
      if (orig[a] < lo[a] || orig[a] > hi[a]) return false;
      continue;
    }
    double ta = (lo[a] - orig[a]) / dir[a];
    double tb = (hi[a] - orig[a]) / dir[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 >= t1) return false;
  }
  return true;
}

}  // namespace

ProjectionImage render_drr(const Volume& v, const CameraPose& pose, double step_mm) {
  if (!(step_mm > 0)) throw std::invalid_argument("step_mm must be > 0");
  pose.validate();
  const CameraIntrinsics& intr = pose.intrinsics;

  ProjectionImage img;
  img.nu = intr.detector_u;
  img.nv = intr.detector_v;
  img.pose = pose;
  img.data.assign(std::size_t(img.numel()), 0.0f);

  // Source and detector corner in the C-arm frame; the detector plane is
  // perpendicular to the source-isocenter axis on the posterior side.
  const Vec3 source_c{0.0, -intr.sid_mm, 0.0};
  const double det_y = intr.sdd_mm - intr.sid_mm;
  const Vec3 source_w = mat3_apply_transposed(pose.rotation, source_c);
  // Every ray spans at least the full source-detector distance along the
  // beam axis, so a zero-length direction can only come from broken
  // intrinsics; reject before the worker loop.
  if (!(intr.sdd_mm > 0)) throw std::runtime_error("degenerate ray geometry");

  const Vec3 box_lo = v.origin;
  const Vec3 box_hi = v.extent_max();

  parallel_for(img.nv, [&](std::int64_t r0, std::int64_t r1) {
    for (int iv = int(r0); iv < int(r1); ++iv) {
      for (int iu = 0; iu < img.nu; ++iu) {
        const Vec3 det_c{(iu + 0.5 - intr.principal_u) * intr.pixel_pitch_mm, det_y,
                         (iv + 0.5 - intr.principal_v) * intr.pixel_pitch_mm};
        const Vec3 det_w = mat3_apply_transposed(pose.rotation, det_c);
        Vec3 dir{det_w[0] - source_w[0], det_w[1] - source_w[1], det_w[2] - source_w[2]};
        const double len = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
        dir = {dir[0] / len, dir[1] / len, dir[2] / len};

        double t0, t1;
        if (!intersect_aabb(source_w, dir, box_lo, box_hi, t0, t1)) continue;
        const double span = t1 - t0;
        const int n = std::max(1, int(std::ceil(span / step_mm)));
        const double h = span / n;
        double acc = 0.0;
        for (int k = 0; k < n; ++k) {
          const double t = t0 + (k + 0.5) * h;
          const Vec3 p{source_w[0] + t * dir[0], source_w[1] + t * dir[1],
                       source_w[2] + t * dir[2]};
          acc += sample_trilinear(v, p);
        }
        img.at(iu, iv) = float(acc * h);
      }
    }
  });
  return img;
}

std::vector<DecompositionSample> render_dataset(const Volume& v, const ClipPlan& plan,
                                                const std::vector<CameraPose>& poses,
                                                double step_mm,
                                                const std::string& phantom_label) {
  plan.validate(v);
  const std::vector<Volume> subs = clip_volume(v, plan);
  std::vector<DecompositionSample> samples;
  samples.reserve(poses.size());
  for (std::size_t i = 0; i < poses.size(); ++i) {
    DecompositionSample s;
    s.phantom = phantom_label;
    s.view = int(i);
    s.input = render_drr(v, poses[i], step_mm);
    s.input.label = "total";
    s.targets.reserve(subs.size());
    for (std::size_t k = 0; k < subs.size(); ++k) {
      ProjectionImage t = render_drr(subs[k], poses[i], step_mm);
      t.label = "layer" + std::to_string(k);
      s.targets.push_back(std::move(t));
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

namespace {

nlohmann::json intrinsics_to_json(const CameraIntrinsics& intr) {
  return {{"detector", {intr.detector_u, intr.detector_v}},
          {"pixel_pitch_mm", intr.pixel_pitch_mm},
          {"sdd_mm", intr.sdd_mm},
          {"sid_mm", intr.sid_mm},
          {"principal_point", {intr.principal_u, intr.principal_v}}};
}

CameraIntrinsics intrinsics_from_json(const nlohmann::json& j) {
  CameraIntrinsics intr;
  intr.detector_u = j.at("detector").at(0).get<int>();
  intr.detector_v = j.at("detector").at(1).get<int>();
  intr.pixel_pitch_mm = j.at("pixel_pitch_mm").get<double>();
  intr.sdd_mm = j.at("sdd_mm").get<double>();
  intr.sid_mm = j.at("sid_mm").get<double>();
  intr.principal_u = j.at("principal_point").at(0).get<double>();
  intr.principal_v = j.at("principal_point").at(1).get<double>();
  return intr;
}

}  // namespace

std::string pose_to_json_string(const CameraPose& pose) {
  nlohmann::json j{{"cranial_deg", pose.cranial_deg},
                   {"lao_rao_deg", pose.lao_rao_deg},
                   {"intrinsics", intrinsics_to_json(pose.intrinsics)}};
  return j.dump();
}

CameraPose pose_from_json_string(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  // Rebuild the rotation from the angles so a reloaded pose is bit-identical
  // to a freshly constructed one.
  return pose_from_angles(intrinsics_from_json(j.at("intrinsics")),
                          j.at("cranial_deg").get<double>(),
                          j.at("lao_rao_deg").get<double>());
}

void save_pgm16_with_sidecar(const std::filesystem::path& pgm_path,
                             const ProjectionImage& img) {
  float lo = 0.0f, hi = 0.0f;
  if (!img.data.empty()) {
    lo = *std::min_element(img.data.begin(), img.data.end());
    hi = *std::max_element(img.data.begin(), img.data.end());
  }
  const double scale = hi > lo ? 65535.0 / (double(hi) - double(lo)) : 0.0;

  std::ofstream os(pgm_path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + pgm_path.string());
  os << "P5\n" << img.nu << " " << img.nv << "\n65535\n";
  std::vector<unsigned char> row(std::size_t(img.nu) * 2);
  for (int v = 0; v < img.nv; ++v) {
    for (int u = 0; u < img.nu; ++u) {
      const double x = (double(img.at(u, v)) - lo) * scale;
      const auto q = std::uint16_t(std::lround(std::clamp(x, 0.0, 65535.0)));
      row[std::size_t(u) * 2] = (unsigned char)(q >> 8);  // big-endian per PGM
      row[std::size_t(u) * 2 + 1] = (unsigned char)(q & 0xff);
    }
    os.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
  }
  if (!os) throw std::runtime_error("PGM write failed: " + pgm_path.string());

  nlohmann::json side{{"min", lo},
                      {"max", hi},
                      {"label", img.label},
                      {"pose", nlohmann::json::parse(pose_to_json_string(img.pose))}};
  std::filesystem::path sidecar = pgm_path;
  sidecar.replace_extension(".json");
  std::ofstream js(sidecar);
  js << side.dump(2) << "\n";
  if (!js) throw std::runtime_error("sidecar write failed: " + sidecar.string());
}

ProjectionImage resize_bilinear(const ProjectionImage& img, int nu, int nv) {
  if (nu < 1 || nv < 1) throw std::invalid_argument("resize target must be >= 1 pixel");
  ProjectionImage out;
  out.nu = nu;
  out.nv = nv;
  out.pose = img.pose;
  out.label = img.label;
  out.data.assign(std::size_t(out.numel()), 0.0f);
  for (int v = 0; v < nv; ++v) {
    const double gy = nv > 1 ? double(v) * (img.nv - 1) / (nv - 1) : 0.0;
    const int y0 = std::min(int(gy), img.nv - 2 >= 0 ? img.nv - 2 : 0);
    const double fy = gy - y0;
    for (int u = 0; u < nu; ++u) {
      const double gx = nu > 1 ? double(u) * (img.nu - 1) / (nu - 1) : 0.0;
      const int x0 = std::min(int(gx), img.nu - 2 >= 0 ? img.nu - 2 : 0);
      const double fx = gx - x0;
      const int x1 = std::min(x0 + 1, img.nu - 1), y1 = std::min(y0 + 1, img.nv - 1);
      const double a = img.at(x0, y0) * (1 - fx) + img.at(x1, y0) * fx;
      const double b = img.at(x0, y1) * (1 - fx) + img.at(x1, y1) * fx;
      out.at(u, v) = float(a * (1 - fy) + b * fy);
    }
  }
  return out;
}

}  // namespace xdecomp
