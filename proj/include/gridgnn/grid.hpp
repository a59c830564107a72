#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace gridgnn {

/// Grid axes. D is the data-parallel axis; X, Y, Z form the PMM grid.
enum class Axis : int { D = 0, X = 1, Y = 2, Z = 3 };
inline constexpr int kNumAxes = 4;

using Coord4 = std::array<int, 4>;  // (d, x, y, z)

/// Virtual 4D device grid with lexicographic rank numbering:
/// rank = ((d*gx + x)*gy + y)*gz + z.
struct DeviceGrid {
  std::array<int, 4> dims{1, 1, 1, 1};  // (g_d, g_x, g_y, g_z)

  DeviceGrid() = default;
  DeviceGrid(int gd, int gx, int gy, int gz) : dims{gd, gx, gy, gz} {
    for (int d : dims)
      if (d < 1) throw std::invalid_argument("DeviceGrid: dims must be >= 1");
  }

  int total() const { return dims[0] * dims[1] * dims[2] * dims[3]; }
  int dim(Axis a) const { return dims[static_cast<int>(a)]; }

  int rank_of(const Coord4& c) const {
    return ((c[0] * dims[1] + c[1]) * dims[2] + c[2]) * dims[3] + c[3];
  }

  Coord4 coord_of(int rank) const {
    Coord4 c;
    c[3] = rank % dims[3];
    rank /= dims[3];
    c[2] = rank % dims[2];
    rank /= dims[2];
    c[1] = rank % dims[1];
    c[0] = rank / dims[1];
    return c;
  }

  /// Members of `rank`'s group along `axis`, sorted by axis coordinate.
  std::vector<int> group_members(Axis axis, int rank) const {
    const int a = static_cast<int>(axis);
    Coord4 c = coord_of(rank);
    std::vector<int> members;
    members.reserve(static_cast<std::size_t>(dims[a]));
    for (int k = 0; k < dims[a]; ++k) {
      c[a] = k;
      members.push_back(rank_of(c));
    }
    return members;
  }

  /// Flat id of `rank`'s group along `axis` (index over the other coordinates).
  int group_id(Axis axis, int rank) const {
    const Coord4 c = coord_of(rank);
    int id = 0;
    for (int a = 0; a < 4; ++a) {
      if (a == static_cast<int>(axis)) continue;
      id = id * dims[a] + c[a];
    }
    return id;
  }

  int num_groups(Axis axis) const { return total() / dim(axis); }

  /// Data-parallel group index (the D coordinate).
  int dp_group(int rank) const { return coord_of(rank)[0]; }
};

}  // namespace gridgnn
