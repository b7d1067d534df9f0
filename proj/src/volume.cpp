#include "xdecomp/volume.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "xdecomp/io.hpp"
#include "xdecomp/parallel.hpp"
#include "xdecomp/rng.hpp"

namespace xdecomp {

void Volume::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < 2) throw std::invalid_argument("volume dims must be >= 2 per axis");
    if (!(spacing[a] > 0.0)) throw std::invalid_argument("volume spacing must be > 0");
  }
  if (std::int64_t(data.size()) != numel())
    throw std::invalid_argument("volume data size does not match dims");
  for (float v : data)
    if (!(v >= 0.0f)) throw std::invalid_argument("attenuation values must be >= 0");
}

Volume make_centered_volume(std::array<int, 3> dims, Vec3 spacing) {
  Volume v;
  v.dims = dims;
  v.spacing = spacing;
  v.origin = {-0.5 * dims[0] * spacing[0], -0.5 * dims[1] * spacing[1],
              -0.5 * dims[2] * spacing[2]};
  v.data.assign(std::size_t(v.numel()), 0.0f);
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < 2) throw std::invalid_argument("volume dims must be >= 2 per axis");
    if (!(spacing[a] > 0.0)) throw std::invalid_argument("volume spacing must be > 0");
  }
  return v;
}

void ClipPlan::validate(const Volume& v) const {
  if (axis < 0 || axis > 2) throw std::invalid_argument("clip axis must be 0..2");
  if (boundaries.empty())
    throw std::invalid_argument("clip plan needs at least one boundary (d >= 2)");
  const double lo = v.origin[std::size_t(axis)];
  const double hi = v.extent_max()[std::size_t(axis)];
  double prev = lo;
  for (double b : boundaries) {
    if (!(b > lo && b < hi))
      throw std::invalid_argument("clip boundary outside the volume extent");
    if (!(b > prev))
      throw std::invalid_argument("clip boundaries must be strictly increasing");
    prev = b;
  }
}

void PhantomSpec::validate() const {
  auto positive = [](double x, const char* what) {
    if (!(x > 0.0)) throw std::invalid_argument(std::string("phantom: ") + what +
                                                " must be > 0");
  };
  positive(body.attenuation, "body attenuation");
  for (double r : body.radii) positive(r, "body radius");
  positive(spine.attenuation, "spine attenuation");
  positive(spine.radius, "spine radius");
  if (ribs.count < 0) throw std::invalid_argument("phantom: rib count must be >= 0");
  if (ribs.count > 0) {
    positive(ribs.attenuation, "rib attenuation");
    positive(ribs.minor_radius, "rib minor radius");
  }
  if (vessels.depth < 0)
    throw std::invalid_argument("phantom: vessel depth must be >= 0");
  if (vessels.depth > 0) {
    positive(vessels.attenuation, "vessel attenuation");
    positive(vessels.root_radius, "vessel root radius");
  }
}

PhantomSpec PhantomSpec::sample(std::uint64_t seed) {
  Rng r(seed);
  PhantomSpec s;
  s.seed = seed;
  auto jitter = [&](double v, double frac) { return v * (1.0 + frac * (2.0 * r.uniform() - 1.0)); };

  for (auto& rad : s.body.radii) rad = jitter(rad, 0.10);
  s.body.center = {r.uniform(-5, 5), r.uniform(-4, 4), r.uniform(-5, 5)};
  s.body.attenuation = jitter(s.body.attenuation, 0.12);

  s.spine.center_x = s.body.center[0] + r.uniform(-4, 4);
  s.spine.center_y = s.body.center[1] + jitter(30.0, 0.15);
  s.spine.radius = jitter(s.spine.radius, 0.15);
  s.spine.bump_period = jitter(s.spine.bump_period, 0.2);
  s.spine.attenuation = jitter(s.spine.attenuation, 0.15);

  s.ribs.count = 7 + int(r.below(3));
  s.ribs.minor_radius = jitter(s.ribs.minor_radius, 0.15);
  s.ribs.major_scale = jitter(s.ribs.major_scale, 0.05);
  s.ribs.attenuation = jitter(s.ribs.attenuation, 0.15);

  s.vessels.spread_deg = jitter(s.vessels.spread_deg, 0.2);
  s.vessels.root = {s.body.center[0] + r.uniform(-6, 6), s.body.center[1] - jitter(12.0, 0.3),
                    jitter(68.0, 0.1)};
  s.vessels.segment_length = jitter(s.vessels.segment_length, 0.15);
  s.vessels.attenuation = jitter(s.vessels.attenuation, 0.15);
  return s;
}

namespace {

struct Capsule {
  Vec3 p0, p1;
  double radius;
  Vec3 bb_min, bb_max;
};

double dot(const Vec3& a, const Vec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}
Vec3 sub3(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 add3(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec3 scale3(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }

double dist_sq_to_segment(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = sub3(b, a);
  const Vec3 ap = sub3(p, a);
  const double len_sq = dot(ab, ab);
  double t = len_sq > 0.0 ? dot(ap, ab) / len_sq : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const Vec3 q = add3(a, scale3(ab, t));
  const Vec3 d = sub3(p, q);
  return dot(d, d);
}

// Recursively grows the vessel tree. Randomness comes only from `rng`, which
// is seeded from the spec, so the tree is a pure function of the spec.
void grow_vessels(const PhantomSpec::Vessels& cfg, Rng& rng, const Vec3& p,
                  const Vec3& dir, double radius, double length, int depth,
                  std::vector<Capsule>& out) {
  const Vec3 p1 = add3(p, scale3(dir, length));
  Capsule c{p, p1, radius, {}, {}};
  for (int a = 0; a < 3; ++a) {
    c.bb_min[a] = std::min(p[a], p1[a]) - radius;
    c.bb_max[a] = std::max(p[a], p1[a]) + radius;
  }
  out.push_back(c);
  if (depth <= 0) return;
  // Orthonormal frame around dir for the branch cone.
  const Vec3 ref = std::abs(dir[2]) < 0.9 ? Vec3{0, 0, 1} : Vec3{1, 0, 0};
  Vec3 e1{dir[1] * ref[2] - dir[2] * ref[1], dir[2] * ref[0] - dir[0] * ref[2],
          dir[0] * ref[1] - dir[1] * ref[0]};
  const double n1 = std::sqrt(dot(e1, e1));
  e1 = scale3(e1, 1.0 / n1);
  const Vec3 e2{dir[1] * e1[2] - dir[2] * e1[1], dir[2] * e1[0] - dir[0] * e1[2],
                dir[0] * e1[1] - dir[1] * e1[0]};
  for (int child = 0; child < 2; ++child) {
    const double az = rng.uniform(0, 2.0 * std::numbers::pi);
    const double tilt =
        cfg.spread_deg * std::numbers::pi / 180.0 * (0.6 + 0.8 * rng.uniform());
    Vec3 d = add3(scale3(dir, std::cos(tilt)),
                  scale3(add3(scale3(e1, std::cos(az)), scale3(e2, std::sin(az))),
                         std::sin(tilt)));
    const double dn = std::sqrt(dot(d, d));
    d = scale3(d, 1.0 / dn);
    grow_vessels(cfg, rng, p1, d, radius * cfg.radius_decay,
                 length * cfg.length_decay, depth - 1, out);
  }
}

}  // namespace

Volume make_phantom(const PhantomSpec& spec, std::array<int, 3> dims, Vec3 spacing) {
  spec.validate();
  for (int a = 0; a < 3; ++a)
    if (dims[a] < 16)
      throw std::invalid_argument("phantom dims must be >= 16 per axis");
  Volume vol = make_centered_volume(dims, spacing);

  // Geometry setup is single-threaded; the voxel fill below is a pure
  // function of it, so the result is identical for any worker count.
  std::vector<Capsule> vessels;
  if (spec.vessels.depth > 0) {
    Rng rng(spec.seed);
    Vec3 dir{0.08, -0.10, -1.0};
    const double n = std::sqrt(dot(dir, dir));
    dir = scale3(dir, 1.0 / n);
    grow_vessels(spec.vessels, rng, spec.vessels.root, dir, spec.vessels.root_radius,
                 spec.vessels.segment_length, spec.vessels.depth, vessels);
  }

  struct Rib {
    double z, major_a, major_b;
  };
  std::vector<Rib> rib_rings;
  const auto& B = spec.body;
  for (int k = 0; k < spec.ribs.count; ++k) {
    const double frac = spec.ribs.count > 1
                            ? (2.0 * k / (spec.ribs.count - 1) - 1.0)
                            : 0.0;
    const double z = B.center[2] + frac * spec.ribs.z_span * B.radii[2];
    const double cross = 1.0 - (z - B.center[2]) * (z - B.center[2]) /
                                   (B.radii[2] * B.radii[2]);
    if (cross <= 0.0) continue;
    const double s = std::sqrt(cross) * spec.ribs.major_scale;
    rib_rings.push_back({z, s * B.radii[0], s * B.radii[1]});
  }
  const double front_gap = spec.ribs.front_gap_deg * std::numbers::pi / 180.0;

  const int nx = dims[0], ny = dims[1];
  parallel_for(dims[2], [&](std::int64_t z0, std::int64_t z1) {
    for (int z = int(z0); z < int(z1); ++z) {
      for (int y = 0; y < ny; ++y) {
        for (int x = 0; x < nx; ++x) {
          const Vec3 p = vol.voxel_center(x, y, z);
          const double ex = (p[0] - B.center[0]) / B.radii[0];
          const double ey = (p[1] - B.center[1]) / B.radii[1];
          const double ez = (p[2] - B.center[2]) / B.radii[2];
          if (ex * ex + ey * ey + ez * ez > 1.0) continue;  // outside body
          double mu = B.attenuation;

          const auto& S = spec.spine;
          if (std::abs(p[2]) <= S.z_half_extent) {
            const double r = S.radius * (1.0 + S.bump_amplitude *
                                                   std::cos(2.0 * std::numbers::pi *
                                                            p[2] / S.bump_period));
            const double dx = p[0] - S.center_x, dy = p[1] - S.center_y;
            if (dx * dx + dy * dy <= r * r) mu += S.attenuation;
          }

          for (const Rib& rib : rib_rings) {
            const double dz = p[2] - rib.z;
            if (std::abs(dz) > spec.ribs.minor_radius) continue;
            const double dx = p[0] - B.center[0], dy = p[1] - B.center[1];
            const double rho = std::sqrt(dx * dx / (rib.major_a * rib.major_a) +
                                         dy * dy / (rib.major_b * rib.major_b));
            const double radial_mm = (rho - 1.0) * std::min(rib.major_a, rib.major_b);
            if (radial_mm * radial_mm + dz * dz >
                spec.ribs.minor_radius * spec.ribs.minor_radius)
              continue;
            const double phi = std::atan2(dx, -dy);  // 0 at the anterior midline
            if (std::abs(phi) < 0.5 * front_gap) continue;
            mu += spec.ribs.attenuation;
            break;
          }

          for (const Capsule& c : vessels) {
            if (p[0] < c.bb_min[0] || p[0] > c.bb_max[0] || p[1] < c.bb_min[1] ||
                p[1] > c.bb_max[1] || p[2] < c.bb_min[2] || p[2] > c.bb_max[2])
              continue;
            if (dist_sq_to_segment(p, c.p0, c.p1) <= c.radius * c.radius) {
              mu += spec.vessels.attenuation;
              break;
            }
          }

          vol.at(x, y, z) = float(mu);
        }
      }
    }
  });
  return vol;
}

std::vector<Volume> clip_volume(const Volume& v, const ClipPlan& plan) {
  plan.validate(v);
  const int axis = plan.axis;
  const int n_axis = v.dims[std::size_t(axis)];

  // Slab id depends only on the index along the clip axis.
  std::vector<int> slab_of(static_cast<std::size_t>(n_axis), 0);
  for (int i = 0; i < n_axis; ++i) {
    const double c = v.origin[std::size_t(axis)] + (i + 0.5) * v.spacing[std::size_t(axis)];
    int slab = 0;
    for (double b : plan.boundaries)
      if (b < c) ++slab;  // a center exactly on a boundary stays in the lower slab
    slab_of[std::size_t(i)] = slab;
  }

  std::vector<Volume> out(std::size_t(plan.components()));
  for (auto& sub : out) {
    sub.dims = v.dims;
    sub.spacing = v.spacing;
    sub.origin = v.origin;
    sub.data.assign(std::size_t(v.numel()), 0.0f);
  }
  for (int z = 0; z < v.dims[2]; ++z) {
    for (int y = 0; y < v.dims[1]; ++y) {
      for (int x = 0; x < v.dims[0]; ++x) {
        const int idx_axis = axis == 0 ? x : axis == 1 ? y : z;
        Volume& sub = out[std::size_t(slab_of[std::size_t(idx_axis)])];
        sub.at(x, y, z) = v.at(x, y, z);
      }
    }
  }
  return out;
}

double sample_trilinear(const Volume& v, const Vec3& p) {
  double g[3];
  int i0[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    g[a] = (p[a] - v.origin[a]) / v.spacing[a] - 0.5;
    const int n = v.dims[std::size_t(a)];
    if (g[a] < 0.0 || g[a] > double(n - 1)) return 0.0;  // outside the center hull
    i0[a] = std::min(int(g[a]), n - 2);
    f[a] = g[a] - i0[a];
  }
  const int x0 = i0[0], y0 = i0[1], z0 = i0[2];
  const double fx = f[0], fy = f[1], fz = f[2];
  auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
  const double c00 = lerp(v.at(x0, y0, z0), v.at(x0 + 1, y0, z0), fx);
  const double c10 = lerp(v.at(x0, y0 + 1, z0), v.at(x0 + 1, y0 + 1, z0), fx);
  const double c01 = lerp(v.at(x0, y0, z0 + 1), v.at(x0 + 1, y0, z0 + 1), fx);
  const double c11 = lerp(v.at(x0, y0 + 1, z0 + 1), v.at(x0 + 1, y0 + 1, z0 + 1), fx);
  return lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz);
}

void save_xdv1(const std::filesystem::path& path, const Volume& v) {
  v.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path.string());
  os.write("XDV1\n", 5);
  for (int a = 0; a < 3; ++a) io::write_u32_le(os, std::uint32_t(v.dims[std::size_t(a)]));
  for (int a = 0; a < 3; ++a) io::write_f32_le(os, float(v.spacing[std::size_t(a)]));
  for (int a = 0; a < 3; ++a) io::write_f32_le(os, float(v.origin[std::size_t(a)]));
  io::write_f32_block_le(os, v.data.data(), v.data.size());
  if (!os) throw std::runtime_error("XDV1 write failed: " + path.string());
}

Volume load_xdv1(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  char magic[5];
  is.read(magic, 5);
  if (!is || std::string(magic, 5) != "XDV1\n")
    throw std::runtime_error("not an XDV1 file: " + path.string());
  Volume v;
  for (int a = 0; a < 3; ++a) v.dims[std::size_t(a)] = int(io::read_u32_le(is));
  for (int a = 0; a < 3; ++a) v.spacing[std::size_t(a)] = io::read_f32_le(is);
  for (int a = 0; a < 3; ++a) v.origin[std::size_t(a)] = io::read_f32_le(is);
  if (v.dims[0] < 2 || v.dims[1] < 2 || v.dims[2] < 2 || v.numel() > (std::int64_t(1) << 33))
    throw std::runtime_error("XDV1 header out of range: " + path.string());
  v.data.resize(std::size_t(v.numel()));
  io::read_f32_block_le(is, v.data.data(), v.data.size());
  if (!is) throw std::runtime_error("XDV1 payload truncated: " + path.string());
  return v;
}

}  // namespace xdecomp
