#include "twinvio/spatial_index.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace twinvio {

namespace {

constexpr double kRayEps = 1e-6;

double box_distance_sq(const Vec3& q, const Vec3& lo, const Vec3& hi) {
  double d2 = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double v = std::max({lo[i] - q[i], 0.0, q[i] - hi[i]});
    d2 += v * v;
  }
  return d2;
}

// Slab test; returns entry parameter or infinity when the ray misses.
double box_ray_entry(const Vec3& origin, const Vec3& inv_dir, const Vec3& lo, const Vec3& hi) {
  double tmin = 0.0;
  double tmax = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 3; ++i) {
    const double t1 = (lo[i] - origin[i]) * inv_dir[i];
    const double t2 = (hi[i] - origin[i]) * inv_dir[i];
    tmin = std::max(tmin, std::min(t1, t2));
    tmax = std::min(tmax, std::max(t1, t2));
  }
  if (tmax < tmin) return std::numeric_limits<double>::infinity();
  return tmin;
}

}  // namespace

Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  // Ericson, "Real-Time Collision Detection", 5.1.5.
  const Vec3 ab = b - a;
  const Vec3 ac = c - a;
  const Vec3 ap = p - a;
  const double d1 = ab.dot(ap);
  const double d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return a;

  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp);
  const double d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return b;

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    const double v = d1 / (d1 - d3);
    return a + v * ab;
  }

  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp);
  const double d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return c;

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    const double w = d2 / (d2 - d6);
    return a + w * ac;
  }

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return b + w * (c - b);
  }

  const double denom = 1.0 / (va + vb + vc);
  const double v = vb * denom;
  const double w = vc * denom;
  return a + v * ab + w * ac;
}

std::optional<double> ray_triangle(const Vec3& origin, const Vec3& dir, const Vec3& a,
                                   const Vec3& b, const Vec3& c) {
  const Vec3 e1 = b - a;
  const Vec3 e2 = c - a;
  const Vec3 pvec = dir.cross(e2);
  const double det = e1.dot(pvec);
  if (std::abs(det) < 1e-14) return std::nullopt;
  const double inv_det = 1.0 / det;
  const Vec3 tvec = origin - a;
  const double u = tvec.dot(pvec) * inv_det;
  if (u < 0.0 || u > 1.0) return std::nullopt;
  const Vec3 qvec = tvec.cross(e1);
  const double v = dir.dot(qvec) * inv_det;
  if (v < 0.0 || u + v > 1.0) return std::nullopt;
  const double t = e2.dot(qvec) * inv_det;
  if (t < kRayEps) return std::nullopt;
  return t;
}

SpatialIndex::SpatialIndex(const TwinMesh& mesh, int leaf_size) : mesh_(mesh) {
  if (mesh_.empty()) throw std::runtime_error("SpatialIndex: empty mesh");
  tri_order_.resize(mesh_.triangles.size());
  for (size_t i = 0; i < tri_order_.size(); ++i) tri_order_[i] = static_cast<int>(i);
  nodes_.reserve(2 * tri_order_.size());
  build(tri_order_, 0, static_cast<int>(tri_order_.size()), std::max(1, leaf_size));
}

void SpatialIndex::grow_box(Node& node, int tri) const {
  const auto& t = mesh_.triangles[tri];
  for (int k = 0; k < 3; ++k) {
    node.box_min = node.box_min.cwiseMin(mesh_.vertices[t[k]]);
    node.box_max = node.box_max.cwiseMax(mesh_.vertices[t[k]]);
  }
}

int SpatialIndex::build(std::vector<int>& tris, int begin, int end, int leaf_size) {
  const int node_index = static_cast<int>(nodes_.size());
  nodes_.emplace_back();
  {
    Node& node = nodes_.back();
    node.box_min = Vec3::Constant(std::numeric_limits<double>::infinity());
    node.box_max = Vec3::Constant(-std::numeric_limits<double>::infinity());
    for (int i = begin; i < end; ++i) grow_box(node, tris[i]);
    node.first = begin;
    node.count = end - begin;
  }
  if (end - begin <= leaf_size) return node_index;

  const Vec3 extent = nodes_[node_index].box_max - nodes_[node_index].box_min;
  int axis = 0;
  extent.maxCoeff(&axis);
  const int mid = (begin + end) / 2;
  std::nth_element(tris.begin() + begin, tris.begin() + mid, tris.begin() + end,
                   [&](int lhs, int rhs) {
                     const auto& lt = mesh_.triangles[lhs];
                     const auto& rt = mesh_.triangles[rhs];
                     const double lc = mesh_.vertices[lt[0]][axis] + mesh_.vertices[lt[1]][axis] +
                                       mesh_.vertices[lt[2]][axis];
                     const double rc = mesh_.vertices[rt[0]][axis] + mesh_.vertices[rt[1]][axis] +
                                       mesh_.vertices[rt[2]][axis];
                     return lc < rc;
                   });
  const int left = build(tris, begin, mid, leaf_size);
  const int right = build(tris, mid, end, leaf_size);
  nodes_[node_index].left = left;
  nodes_[node_index].right = right;
  nodes_[node_index].count = 0;
  return node_index;
}

ClosestPointResult SpatialIndex::closest_point_with_normal(const Vec3& q) const {
  ClosestPointResult best;
  double best_d2 = std::numeric_limits<double>::infinity();
  // Explicit stack; visits the nearer child first for tighter pruning.
  std::vector<int> stack{0};
  stack.reserve(64);
  while (!stack.empty()) {
    const int ni = stack.back();
    stack.pop_back();
    const Node& node = nodes_[ni];
    if (box_distance_sq(q, node.box_min, node.box_max) >= best_d2) continue;
    if (node.count > 0) {
      for (int i = node.first; i < node.first + node.count; ++i) {
        const int tri = tri_order_[i];
        const auto& t = mesh_.triangles[tri];
        const Vec3 cp = closest_point_on_triangle(q, mesh_.vertices[t[0]], mesh_.vertices[t[1]],
                                                  mesh_.vertices[t[2]]);
        const double d2 = (cp - q).squaredNorm();
        if (d2 < best_d2) {
          best_d2 = d2;
          best.point = cp;
          best.normal = mesh_.face_normals[tri];
          best.triangle = tri;
        }
      }
      continue;
    }
    const double dl = box_distance_sq(q, nodes_[node.left].box_min, nodes_[node.left].box_max);
    const double dr = box_distance_sq(q, nodes_[node.right].box_min, nodes_[node.right].box_max);
    if (dl < dr) {
      if (dr < best_d2) stack.push_back(node.right);
      if (dl < best_d2) stack.push_back(node.left);
    } else {
      if (dl < best_d2) stack.push_back(node.left);
      if (dr < best_d2) stack.push_back(node.right);
    }
  }
  best.distance = std::sqrt(best_d2);
  return best;
}

std::optional<RayHit> SpatialIndex::ray_cast(const Vec3& origin, const Vec3& dir) const {
  const Vec3 inv_dir(1.0 / dir.x(), 1.0 / dir.y(), 1.0 / dir.z());
  RayHit best;
  std::vector<int> stack{0};
  stack.reserve(64);
  while (!stack.empty()) {
    const int ni = stack.back();
    stack.pop_back();
    const Node& node = nodes_[ni];
    if (box_ray_entry(origin, inv_dir, node.box_min, node.box_max) >= best.t) continue;
    if (node.count > 0) {
      for (int i = node.first; i < node.first + node.count; ++i) {
        const int tri = tri_order_[i];
        const auto& t = mesh_.triangles[tri];
        const auto hit = ray_triangle(origin, dir, mesh_.vertices[t[0]], mesh_.vertices[t[1]],
                                      mesh_.vertices[t[2]]);
        if (hit && *hit < best.t) {
          best.t = *hit;
          best.triangle = tri;
          best.normal = mesh_.face_normals[tri];
        }
      }
      continue;
    }
    stack.push_back(node.left);
    stack.push_back(node.right);
  }
  if (best.triangle < 0) return std::nullopt;
  return best;
}

}  // namespace twinvio
