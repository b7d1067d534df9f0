#pragma once

// C-arm projection geometry and DRR rendering. World axes: x lateral,
// y anterior(-) to posterior(+), z caudal(-) to cranial(+). The source sits
// on the anterior side at the source-to-isocenter distance; rays are marched
// through the volume with a composite midpoint rule, accumulating the
// absorbance line integral -log(I/I0).

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "xdecomp/volume.hpp"

namespace xdecomp {

using Mat3 = std::array<double, 9>;  // row-major

Mat3 mat3_identity();
Mat3 mat3_mul(const Mat3& a, const Mat3& b);
Vec3 mat3_apply(const Mat3& m, const Vec3& v);
Vec3 mat3_apply_transposed(const Mat3& m, const Vec3& v);

struct CameraIntrinsics {
  int detector_u = 64;
  int detector_v = 64;
  double pixel_pitch_mm = 5.0;
  double sdd_mm = 1200.0;  // source to detector
  double sid_mm = 750.0;   // source to isocenter
  double principal_u = 32.0;  // pixels
  double principal_v = 32.0;

  void validate() const;

  // 256x256 detector matching a clinical C-arm field of view.
  static CameraIntrinsics clinical_256();
  // 64x64 preset that keeps the whole phantom in view at desk scale.
  static CameraIntrinsics desk_64();
};

struct CameraPose {
  CameraIntrinsics intrinsics;
  Mat3 rotation = mat3_identity();  // world -> C-arm
  double cranial_deg = 0.0;
  double lao_rao_deg = 0.0;  // RAO encoded as negative LAO

  void validate() const;  // orthonormal within 1e-6, det +1
};

struct ProjectionImage {
  int nu = 0, nv = 0;
  std::vector<float> data;  // row-major, rows indexed by v
  CameraPose pose;
  std::string label = "total";  // "total" or "layerK"

  std::int64_t numel() const { return std::int64_t(nu) * nv; }
  float& at(int u, int v) { return data[std::size_t(v) * nu + std::size_t(u)]; }
  float at(int u, int v) const { return data[std::size_t(v) * nu + std::size_t(u)]; }
};

// rotation = R_x(cranial) * R_z(lao_rao): cranial tilt about the patient
// lateral axis, LAO/RAO about the longitudinal axis, both about the
// isocenter. (0, 0) is the canonical anterior-posterior view.
CameraPose pose_from_angles(const CameraIntrinsics& intr, double cranial_deg,
                            double lao_rao_deg);

// Cartesian grid of poses, angles linearly spaced inclusive of both
// endpoints, cranial-major order.
std::vector<CameraPose> generate_trajectory(const CameraIntrinsics& intr,
                                            std::array<double, 2> cranial_range_deg,
                                            std::array<double, 2> lao_rao_range_deg,
                                            int n_cranial, int n_lateral);

// Beer-Lambert line integral per detector pixel. Pixels whose ray misses the
// volume bounding box are 0. Deterministic for any thread count.
ProjectionImage render_drr(const Volume& v, const CameraPose& pose, double step_mm);

// One sample per pose: the full-volume projection paired with the
// projections of the clipped sub-volumes.
struct DecompositionSample {
  std::string phantom;  // group id, used for splits and reports
  int view = 0;
  ProjectionImage input;
  std::vector<ProjectionImage> targets;

  std::string id() const { return phantom + ":" + std::to_string(view); }
};

std::vector<DecompositionSample> render_dataset(const Volume& v, const ClipPlan& plan,
                                                const std::vector<CameraPose>& poses,
                                                double step_mm,
                                                const std::string& phantom_label = "phantom");

// Half the smallest voxel spacing; the default marching step.
double default_step_mm(const Volume& v);

// 16-bit PGM preview (P5, maxval 65535) with the linear value mapping and
// pose recorded in a JSON sidecar next to it.
void save_pgm16_with_sidecar(const std::filesystem::path& pgm_path,
                             const ProjectionImage& img);

std::string pose_to_json_string(const CameraPose& pose);
CameraPose pose_from_json_string(const std::string& text);

ProjectionImage resize_bilinear(const ProjectionImage& img, int nu, int nv);

}  // namespace xdecomp
