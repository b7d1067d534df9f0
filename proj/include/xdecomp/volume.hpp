#pragma once

// Attenuation volumes and their partitioning. A Volume is a regular voxel
// grid of linear attenuation coefficients (mm^-1) with physical spacing;
// background is exactly zero. clip_volume() splits a volume into slabs along
// one axis, each re-padded to the full grid, so that the slabs sum back to
// the original voxel-for-voxel.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace xdecomp {

using Vec3 = std::array<double, 3>;

struct Volume {
  std::array<int, 3> dims{0, 0, 0};        // voxel counts (nx, ny, nz)
  Vec3 spacing{1.0, 1.0, 1.0};             // mm per voxel
  Vec3 origin{0.0, 0.0, 0.0};              // world position of the grid corner, mm
  std::vector<float> data;                 // x-fastest, attenuation in mm^-1

  std::int64_t numel() const {
    return std::int64_t(dims[0]) * dims[1] * dims[2];
  }
  std::int64_t index(int x, int y, int z) const {
    return (std::int64_t(z) * dims[1] + y) * dims[0] + x;
  }
  float& at(int x, int y, int z) { return data[std::size_t(index(x, y, z))]; }
  float at(int x, int y, int z) const { return data[std::size_t(index(x, y, z))]; }

  // World coordinate of voxel (i,j,k)'s center.
  Vec3 voxel_center(int x, int y, int z) const {
    return {origin[0] + (x + 0.5) * spacing[0],
            origin[1] + (y + 0.5) * spacing[1],
            origin[2] + (z + 0.5) * spacing[2]};
  }
  // Physical extent: origin .. origin + dims*spacing.
  Vec3 extent_max() const {
    return {origin[0] + dims[0] * spacing[0], origin[1] + dims[1] * spacing[1],
            origin[2] + dims[2] * spacing[2]};
  }

  void validate() const;  // dims >= 2 per axis, spacing > 0, data size, values >= 0
};

// Zero-initialized volume centered on the world origin.
Volume make_centered_volume(std::array<int, 3> dims, Vec3 spacing);

// Slab partition along one axis. boundaries are world coordinates (mm),
// strictly increasing and strictly inside the volume extent; they produce
// boundaries.size()+1 sub-volumes.
struct ClipPlan {
  int axis = 1;  // anterior-posterior axis by default
  std::vector<double> boundaries;

  int components() const { return int(boundaries.size()) + 1; }
  void validate(const Volume& v) const;
};

// Procedural thorax-like phantom: soft-tissue ellipsoid body, posterior
// spine column, rib arcs, and an anterior branching vessel tree. All
// geometry is in mm relative to the volume center; attenuations add where
// structures overlap and every structure is confined to the body ellipsoid.
struct PhantomSpec {
  std::uint64_t seed = 1;

  struct Body {
    Vec3 center{0, 0, 0};
    Vec3 radii{80, 55, 88};
    double attenuation = 0.019;
  } body;

  struct Spine {
    double center_x = 0.0;
    double center_y = 30.0;      // toward posterior (+y)
    double radius = 9.0;
    double z_half_extent = 80.0;
    double bump_amplitude = 0.22;  // vertebral banding, fraction of radius
    double bump_period = 24.0;     // mm along z
    double attenuation = 0.030;
  } spine;

  struct Ribs {
    int count = 8;
    double minor_radius = 3.2;
    double major_scale = 0.88;   // rib ring radius relative to body cross-section
    double z_span = 0.78;        // fraction of body z radius covered by the cage
    double front_gap_deg = 40.0; // opening angle around the anterior midline
    double attenuation = 0.030;
  } ribs;

  struct Vessels {
    int depth = 4;               // branching depth; 0 disables the tree
    double root_radius = 5.0;
    double radius_decay = 0.72;
    double segment_length = 30.0;
    double length_decay = 0.85;
    double spread_deg = 34.0;    // mean branch half-angle
    Vec3 root{0, -12, 68};
    double attenuation = 0.014;
  } vessels;

  void validate() const;  // attenuations > 0 (or structure disabled), radii > 0

  // Deterministically jitters the default geometry; used to produce a family
  // of distinct phantoms from integer seeds.
  static PhantomSpec sample(std::uint64_t seed);
};

// Rasterizes the phantom at voxel centers. Deterministic for fixed
// (spec, dims, spacing) regardless of thread count.
Volume make_phantom(const PhantomSpec& spec, std::array<int, 3> dims, Vec3 spacing);

// Splits v into plan.components() sub-volumes with identical grids. Each
// voxel goes to exactly one slab by its center coordinate; a center exactly
// on a boundary goes to the lower-index slab.
std::vector<Volume> clip_volume(const Volume& v, const ClipPlan& plan);

// Trilinear interpolation at world point p; zero outside the voxel-center
// hull. Arithmetic in double on the f32 grid values.
double sample_trilinear(const Volume& v, const Vec3& p);

// XDV1 container: "XDV1\n", u32 nx,ny,nz, f32 sx,sy,sz, f32 ox,oy,oz,
// f32 payload x-fastest; all little-endian.
void save_xdv1(const std::filesystem::path& path, const Volume& v);
Volume load_xdv1(const std::filesystem::path& path);

}  // namespace xdecomp
