#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "twinvio/geometry.hpp"

namespace twinvio {

// Triangle mesh in the world (ENU) frame with per-face normals. Faces are
// flat shaded; degenerate triangles are dropped at ingestion.
struct TwinMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;
  std::vector<Vec3> face_normals;  // unit, oriented by file winding
  int degenerate_dropped = 0;

  bool empty() const { return triangles.empty(); }
  double total_area() const;
  Vec3 centroid() const;
};

// Supported file formats: OBJ subset (v/f records) and ascii PLY.
TwinMesh load_mesh(const std::string& path);
void save_mesh_obj(const TwinMesh& mesh, const std::string& path);

// Horizontal crop: keeps triangles with at least one vertex whose (x, y)
// lies within +-half_extent_xy of the center; z is unbounded. Returns
// nullopt when no triangle survives.
struct LocalCrop {
  TwinMesh mesh;
  Vec3 center;
  double half_extent_xy;
};
std::optional<LocalCrop> crop_local(const TwinMesh& mesh, const Vec3& center,
                                    double half_extent_xy = 75.0);

// Area-weighted uniform surface sampling. Point count is Poisson with mean
// density * total_area; deterministic per seed.
struct SurfaceSample {
  Vec3 point;
  Vec3 normal;
  int triangle = -1;
};
std::vector<SurfaceSample> sample_surface(const TwinMesh& mesh, double density,
                                          std::uint64_t seed);

}  // namespace twinvio
