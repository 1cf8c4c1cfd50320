#include "twinvio/mesh.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace twinvio {

namespace {

constexpr double kDegenerateArea = 1e-12;

double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
  return 0.5 * (b - a).cross(c - a).norm();
}

void finalize_faces(TwinMesh& mesh, const std::vector<std::array<int, 3>>& raw_faces,
                    const std::string& path) {
  mesh.triangles.clear();
  mesh.face_normals.clear();
  mesh.degenerate_dropped = 0;
  const int n = static_cast<int>(mesh.vertices.size());
  for (const auto& f : raw_faces) {
    for (int idx : f) {
      if (idx < 0 || idx >= n) {
        throw std::runtime_error(path + ": face references vertex " + std::to_string(idx + 1) +
                                 " out of range");
      }
    }
    const Vec3& a = mesh.vertices[f[0]];
    const Vec3& b = mesh.vertices[f[1]];
    const Vec3& c = mesh.vertices[f[2]];
    const Vec3 cross = (b - a).cross(c - a);
    if (0.5 * cross.norm() <= kDegenerateArea) {
      ++mesh.degenerate_dropped;
      continue;
    }
    mesh.triangles.push_back(f);
    mesh.face_normals.push_back(cross.normalized());
  }
  if (mesh.triangles.empty()) {
    throw std::runtime_error(path + ": mesh has no non-degenerate triangles");
  }
}

TwinMesh load_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open mesh file: " + path);
  TwinMesh mesh;
  std::vector<std::array<int, 3>> faces;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag)) continue;
    if (tag == "v") {
      Vec3 v;
      if (!(ss >> v.x() >> v.y() >> v.z())) {
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": malformed vertex");
      }
      mesh.vertices.push_back(v);
    } else if (tag == "f") {
      // Accept "f i j k ..." with optional /vt/vn suffixes; fan-triangulate.
      std::vector<int> idx;
      std::string tok;
      while (ss >> tok) {
        const auto slash = tok.find('/');
        if (slash != std::string::npos) tok = tok.substr(0, slash);
        try {
          idx.push_back(std::stoi(tok) - 1);
        } catch (const std::exception&) {
          throw std::runtime_error(path + ":" + std::to_string(line_no) + ": malformed face index");
        }
      }
      if (idx.size() < 3) {
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": face needs 3+ indices");
      }
      for (size_t i = 2; i < idx.size(); ++i) {
        faces.push_back({idx[0], idx[static_cast<int>(i) - 1], idx[i]});
      }
    }
    // other records (vn, vt, comments, groups) are ignored
  }
  finalize_faces(mesh, faces, path);
  return mesh;
}

TwinMesh load_ply_ascii(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open mesh file: " + path);
  std::string line;
  int line_no = 0;
  int n_vertices = -1;
  int n_faces = -1;
  bool in_header = true;
  std::getline(in, line);
  ++line_no;
  if (line.rfind("ply", 0) != 0) {
    throw std::runtime_error(path + ":1: not a PLY file");
  }
  while (in_header && std::getline(in, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "format") {
      std::string fmt;
      ss >> fmt;
      if (fmt != "ascii") {
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": only ascii PLY supported");
      }
    } else if (tag == "element") {
      std::string what;
      int count = 0;
      ss >> what >> count;
      if (what == "vertex") n_vertices = count;
      if (what == "face") n_faces = count;
    } else if (tag == "end_header") {
      in_header = false;
    }
  }
  if (in_header || n_vertices < 0 || n_faces < 0) {
    throw std::runtime_error(path + ": incomplete PLY header");
  }
  TwinMesh mesh;
  mesh.vertices.reserve(n_vertices);
  for (int i = 0; i < n_vertices; ++i) {
    if (!std::getline(in, line)) {
      throw std::runtime_error(path + ": unexpected end of vertex list");
    }
    ++line_no;
    std::istringstream ss(line);
    Vec3 v;
    if (!(ss >> v.x() >> v.y() >> v.z())) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": malformed vertex");
    }
    mesh.vertices.push_back(v);
  }
  std::vector<std::array<int, 3>> faces;
  for (int i = 0; i < n_faces; ++i) {
    if (!std::getline(in, line)) {
      throw std::runtime_error(path + ": unexpected end of face list");
    }
    ++line_no;
    std::istringstream ss(line);
    int count = 0;
    if (!(ss >> count) || count < 3) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": malformed face");
    }
    std::vector<int> idx(count);
    for (int& k : idx) {
      if (!(ss >> k)) {
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": malformed face");
      }
    }
    for (int k = 2; k < count; ++k) {
      faces.push_back({idx[0], idx[k - 1], idx[k]});
    }
  }
  finalize_faces(mesh, faces, path);
  return mesh;
}

}  // namespace

double TwinMesh::total_area() const {
  double area = 0.0;
  for (const auto& t : triangles) {
    area += triangle_area(vertices[t[0]], vertices[t[1]], vertices[t[2]]);
  }
  return area;
}

Vec3 TwinMesh::centroid() const {
  Vec3 c = Vec3::Zero();
  if (vertices.empty()) return c;
  for (const auto& v : vertices) c += v;
  return c / static_cast<double>(vertices.size());
}

TwinMesh load_mesh(const std::string& path) {
  const auto dot = path.find_last_of('.');
  const std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  if (ext == "ply") return load_ply_ascii(path);
  return load_obj(path);
}

void save_mesh_obj(const TwinMesh& mesh, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write mesh file: " + path);
  char buf[96];
  for (const auto& v : mesh.vertices) {
    // 17 significant digits round-trips IEEE doubles exactly.
    std::snprintf(buf, sizeof(buf), "v %.17g %.17g %.17g\n", v.x(), v.y(), v.z());
    out << buf;
  }
  for (const auto& t : mesh.triangles) {
    out << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
  }
}

std::optional<LocalCrop> crop_local(const TwinMesh& mesh, const Vec3& center,
                                    double half_extent_xy) {
  if (mesh.empty()) throw std::runtime_error("crop_local: empty mesh");
  auto inside = [&](const Vec3& v) {
    return std::abs(v.x() - center.x()) <= half_extent_xy &&
           std::abs(v.y() - center.y()) <= half_extent_xy;
  };
  LocalCrop crop{{}, center, half_extent_xy};
  std::vector<int> vertex_map(mesh.vertices.size(), -1);
  for (size_t i = 0; i < mesh.triangles.size(); ++i) {
    const auto& t = mesh.triangles[i];
    if (!inside(mesh.vertices[t[0]]) && !inside(mesh.vertices[t[1]]) &&
        !inside(mesh.vertices[t[2]])) {
      continue;
    }
    std::array<int, 3> remapped{};
    for (int k = 0; k < 3; ++k) {
      int& slot = vertex_map[t[k]];
      if (slot < 0) {
        slot = static_cast<int>(crop.mesh.vertices.size());
        crop.mesh.vertices.push_back(mesh.vertices[t[k]]);
      }
      remapped[k] = slot;
    }
    crop.mesh.triangles.push_back(remapped);
    crop.mesh.face_normals.push_back(mesh.face_normals[i]);
  }
  if (crop.mesh.triangles.empty()) return std::nullopt;
  return crop;
}

std::vector<SurfaceSample> sample_surface(const TwinMesh& mesh, double density,
                                          std::uint64_t seed) {
  if (density <= 0.0) throw std::runtime_error("sample_surface: density must be > 0");
  std::vector<double> cum_area(mesh.triangles.size());
  double area = 0.0;
  for (size_t i = 0; i < mesh.triangles.size(); ++i) {
    const auto& t = mesh.triangles[i];
    area += triangle_area(mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
    cum_area[i] = area;
  }
  std::mt19937_64 rng(seed);
  std::poisson_distribution<int> count_dist(density * area);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int n = count_dist(rng);
  std::vector<SurfaceSample> samples;
  samples.reserve(n);
  for (int i = 0; i < n; ++i) {
    const double pick = unit(rng) * area;
    const auto it = std::lower_bound(cum_area.begin(), cum_area.end(), pick);
    const int tri = static_cast<int>(std::min<size_t>(it - cum_area.begin(),
                                                      mesh.triangles.size() - 1));
    double u = unit(rng);
    double v = unit(rng);
    if (u + v > 1.0) {
      u = 1.0 - u;
      v = 1.0 - v;
    }
    const auto& t = mesh.triangles[tri];
    const Vec3& a = mesh.vertices[t[0]];
    const Vec3& b = mesh.vertices[t[1]];
    const Vec3& c = mesh.vertices[t[2]];
    samples.push_back({a + u * (b - a) + v * (c - a), mesh.face_normals[tri], tri});
  }
  return samples;
}

}  // namespace twinvio
