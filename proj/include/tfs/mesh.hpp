// SPDX-License-Identifier: Apache-2.0
//
// Triangle meshes: marching-cubes extraction, cleanup, OBJ serialization and
// area-weighted surface sampling.

#pragma once

#include "tfs/types.hpp"

#include <array>
#include <functional>
#include <string>
#include <vector>

namespace tfs {

struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  std::vector<VecX> vertex_weights;  // optional per-vertex skinning weights

  bool empty() const { return vertices.empty() || faces.empty(); }
  double surface_area() const;
  void bbox(Vec3& lo, Vec3& hi) const;
};

using ScalarField = std::function<double(const Vec3&)>;

// Marching cubes at isolevel 0 over a res^3 grid spanning [lo, hi].
// Negative = inside. Throws InvalidInput when no zero crossing exists.
Mesh marching_cubes(const ScalarField& field, const Vec3& lo, const Vec3& hi,
                    int res, const std::string& entity_name = "entity");

// Same, over a precomputed grid of (res+1)^3 values indexed
// [ (ix*(res+1) + iy)*(res+1) + iz ].
Mesh marching_cubes_grid(const std::vector<double>& values, const Vec3& lo,
                         const Vec3& hi, int res,
                         const std::string& entity_name = "entity");

// Keeps only the largest vertex-connected component (by triangle count).
Mesh largest_component(const Mesh& mesh);

// Drops triangles with area <= 1e-12 and unreferenced vertices.
Mesh remove_degenerate(const Mesh& mesh);

void write_obj(const Mesh& mesh, const std::string& path);
Mesh read_obj(const std::string& path);

// n area-weighted surface samples (3xN), deterministic in seed.
MatX sample_surface(const Mesh& mesh, int n, std::uint64_t seed);

}  // namespace tfs
