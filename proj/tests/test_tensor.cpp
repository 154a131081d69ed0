#include <doctest.h>

#include <set>

#include "densenn/tensor.hpp"

using namespace densenn;

namespace {

Volume ramp(Vec3 d) {
  Volume v(d);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = float(i);
  return v;
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("grid layout is x-fastest") {
    Volume v = ramp({4, 3, 2});
    CHECK(v(1, 0, 0) == 1.0f);
    CHECK(v(0, 1, 0) == 4.0f);
    CHECK(v(0, 0, 1) == 12.0f);
    CHECK(v.index(3, 2, 1) == 23);
  }

  TEST_CASE("grid construction is validated") {
    CHECK(Volume().dims() == Vec3{1, 1, 1});
    CHECK_THROWS_AS(Volume(Vec3{0, 2, 2}), ShapeError);
    CHECK_THROWS_AS(Volume(Vec3{2, 2, 2}, std::vector<float>(7)), ShapeError);
  }

  TEST_CASE("crop and paste round-trip") {
    const Volume v = ramp({6, 5, 4});
    const Window w{{1, 2, 1}, {3, 2, 2}};
    const Volume c = crop(v, w);
    CHECK(c.dims() == w.shape);
    CHECK(c(0, 0, 0) == v(1, 2, 1));
    CHECK(c(2, 1, 1) == v(3, 3, 2));

    Volume blank(v.dims(), -1.0f);
    paste(blank, c, w.offset);
    CHECK(crop(blank, w) == c);
    CHECK(blank(0, 0, 0) == -1.0f);
  }

  TEST_CASE("out-of-range windows are rejected") {
    const Volume v = ramp({4, 4, 2});
    CHECK_THROWS_AS(crop(v, Window{{2, 0, 0}, {3, 1, 1}}), BoundsError);
    Volume dst({2, 2, 1});
    CHECK_THROWS_AS(paste(dst, v, {0, 0, 0}), BoundsError);
  }

  TEST_CASE("quarter turn matches a hand-rotated 2x2 block") {
    // Rows are y: [[a, b], [c, d]] becomes [[c, a], [d, b]].
    Volume v({2, 2, 1}, std::vector<float>{1, 2, 3, 4});
    const Volume r = dihedral_xy(v, 1);
    CHECK(r.storage() == std::vector<float>{3, 1, 4, 2});
  }

  TEST_CASE("dihedral transforms form the group of order 8") {
    const Volume v = ramp({4, 3, 2});
    std::set<std::vector<float>> seen;
    for (int t = 0; t < kDihedralCount; ++t) {
      const Volume tv = dihedral_xy(v, t);
      CHECK(tv.dims() == dihedral_dims(v.dims(), t));
      CHECK(dihedral_xy(tv, dihedral_inverse(t)) == v);
      seen.insert(tv.storage());
    }
    CHECK(seen.size() == 8);
    CHECK(dihedral_xy(dihedral_xy(v, 1), 3) == v);
    CHECK_THROWS(dihedral_xy(v, 8));
  }

  TEST_CASE("odd rotations swap the in-plane voxel size") {
    Volume v({3, 2, 1});
    v.voxel_size = VoxelSize{4, 5, 40};
    CHECK(dihedral_xy(v, 1).voxel_size == VoxelSize{5, 4, 40});
    CHECK(dihedral_xy(v, 2).voxel_size == VoxelSize{4, 5, 40});
  }
}
