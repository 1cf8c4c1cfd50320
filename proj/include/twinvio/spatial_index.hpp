#pragma once

#include <limits>
#include <optional>
#include <vector>

#include "twinvio/mesh.hpp"

namespace twinvio {

struct ClosestPointResult {
  Vec3 point;
  Vec3 normal;
  double distance = std::numeric_limits<double>::infinity();
  int triangle = -1;
};

struct RayHit {
  double t = std::numeric_limits<double>::infinity();
  int triangle = -1;
  Vec3 normal;
};

// Exact closest point on a triangle (vertex / edge / interior cases).
Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

// Moeller-Trumbore ray/triangle intersection; returns parameter t >= 0.
std::optional<double> ray_triangle(const Vec3& origin, const Vec3& dir, const Vec3& a,
                                   const Vec3& b, const Vec3& c);

// Bounding-volume hierarchy over mesh triangles. Immutable after
// construction; concurrent read-only queries are safe.
class SpatialIndex {
 public:
  explicit SpatialIndex(const TwinMesh& mesh, int leaf_size = 4);

  const TwinMesh& mesh() const { return mesh_; }

  // Exact closest point on any triangle with the owning face normal.
  ClosestPointResult closest_point_with_normal(const Vec3& q) const;

  // Nearest intersection along a unit direction; hits closer than 1e-6 are
  // ignored as self-intersections.
  std::optional<RayHit> ray_cast(const Vec3& origin, const Vec3& dir) const;

 private:
  struct Node {
    Vec3 box_min;
    Vec3 box_max;
    int left = -1;   // child index, or -1 for leaf
    int right = -1;
    int first = 0;   // leaf: range into tri_order_
    int count = 0;
  };

  int build(std::vector<int>& tris, int begin, int end, int leaf_size);
  void grow_box(Node& node, int tri) const;

  TwinMesh mesh_;
  std::vector<Node> nodes_;
  std::vector<int> tri_order_;
};

}  // namespace twinvio
