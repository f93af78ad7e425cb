#include "doctest.h"

#include <fstream>

#include "helpers.hpp"
#include "implantformer/centerline.hpp"
#include "implantformer/io_json.hpp"
#include "implantformer/phantom.hpp"
#include "implantformer/volume.hpp"

using namespace implantformer;

namespace {

Volume tiny_volume(uint32_t size, uint32_t depth, uint32_t boundary) {
  Volume v;
  v.width = v.height = size;
  v.depth = depth;
  v.crown_boundary = boundary;
  v.voxels.assign(static_cast<size_t>(size) * size * depth, 0);
  return v;
}

}  // namespace

TEST_SUITE_BEGIN("volume");

TEST_CASE("save/load round trip is bit-exact") {
  TempDir tmp("vol");
  PhantomConfig cfg;
  cfg.seed = 11;
  auto [vol, track] = generate_phantom(cfg);

  const std::string p1 = tmp.file("a.ivol");
  const std::string p2 = tmp.file("b.ivol");
  save_volume(vol, p1);
  const Volume loaded = load_volume(p1);

  CHECK(loaded.width == vol.width);
  CHECK(loaded.height == vol.height);
  CHECK(loaded.depth == vol.depth);
  CHECK(loaded.crown_boundary == vol.crown_boundary);
  CHECK(loaded.voxel_spacing == vol.voxel_spacing);
  CHECK(loaded.voxels == vol.voxels);

  save_volume(loaded, p2);
  CHECK(read_text_file(p1) == read_text_file(p2));
}

TEST_CASE("file layout: header plus 2 bytes per voxel") {
  TempDir tmp("vol");
  const Volume v = tiny_volume(8, 4, 2);
  const std::string path = tmp.file("zero.ivol");
  save_volume(v, path);
  // 8 magic + 4*u32 + 3*f32 = 36 header bytes, then 8*8*4*2 payload bytes.
  CHECK(std::filesystem::file_size(path) == 36 + 512);
}

TEST_CASE("load rejects malformed input with distinct errors") {
  TempDir tmp("vol");
  const Volume v = tiny_volume(8, 4, 2);
  const std::string path = tmp.file("v.ivol");
  save_volume(v, path);
  const std::string good = read_text_file(path);

  SUBCASE("bad magic") {
    std::string bad = good;
    bad[0] = 'X';
    write_text_file(path, bad);
    CHECK_THROWS_AS(load_volume(path), FormatError);
  }
  SUBCASE("payload one voxel short") {
    write_text_file(path, good.substr(0, good.size() - 2));
    CHECK_THROWS_AS(load_volume(path), SizeMismatchError);
  }
  SUBCASE("payload too long") {
    write_text_file(path, good + "xx");
    CHECK_THROWS_AS(load_volume(path), SizeMismatchError);
  }
  SUBCASE("crown boundary out of range") {
    std::string bad = good;
    bad[20] = 4;  // boundary u32 at offset 20: set equal to depth
    write_text_file(path, bad);
    CHECK_THROWS_AS(load_volume(path), InvalidArgumentError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_volume(tmp.file("absent.ivol")), IoError);
  }
}

TEST_CASE("save rejects invalid volumes before writing") {
  TempDir tmp("vol");
  Volume v = tiny_volume(8, 4, 4);  // boundary == depth
  const std::string path = tmp.file("bad.ivol");
  CHECK_THROWS_AS(save_volume(v, path), InvalidArgumentError);
  CHECK(!std::filesystem::exists(path));

  v.crown_boundary = 2;
  v.voxels.pop_back();
  CHECK_THROWS_AS(save_volume(v, path), SizeMismatchError);
}

TEST_CASE("slice_at windows intensities into [0,1]") {
  Volume v = tiny_volume(4, 2, 1);
  v.at(0, 0, 0) = 3100;
  v.at(1, 0, 0) = -1000;
  v.at(2, 0, 0) = 1050;
  v.at(3, 0, 0) = 5000;   // above the window
  v.at(0, 1, 0) = -3000;  // below the window

  const SliceImage img = slice_at(v, 0);
  CHECK(img.at(0, 0, 0) == doctest::Approx(1.0));
  CHECK(img.at(0, 0, 1) == doctest::Approx(0.0));
  CHECK(img.at(0, 0, 2) == doctest::Approx((1050.0 + 1000.0) / 4100.0));
  CHECK(img.at(0, 0, 3) == doctest::Approx(1.0));
  CHECK(img.at(0, 1, 0) == doctest::Approx(0.0));

  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      CHECK(img.at(0, y, x) == img.at(1, y, x));
      CHECK(img.at(1, y, x) == img.at(2, y, x));
    }

  CHECK_THROWS_AS(slice_at(v, 2), InvalidArgumentError);
}

TEST_CASE("slice_at is monotone in voxel intensity") {
  Volume v = tiny_volume(16, 2, 1);
  for (int i = 0; i < 16; ++i) v.at(i, 0, 0) = static_cast<int16_t>(-2000 + 400 * i);
  const SliceImage img = slice_at(v, 0);
  for (int i = 1; i < 16; ++i) CHECK(img.at(0, 0, i) >= img.at(0, 0, i - 1));
}

TEST_CASE("partition splits crown and root disjointly") {
  const Volume v = tiny_volume(4, 40, 20);
  const auto [crown, root] = partition(v);
  REQUIRE(crown.size() == 20);
  REQUIRE(root.size() == 20);
  CHECK(crown.front() == 20);
  CHECK(crown.back() == 39);
  CHECK(root.front() == 0);
  CHECK(root.back() == 19);

  for (uint32_t b = 1; b < 8; ++b) {
    Volume w = tiny_volume(4, 8, b);
    const auto [c, r] = partition(w);
    CHECK(c.size() + r.size() == 8);
    std::vector<bool> seen(8, false);
    for (uint32_t z : c) seen[z] = true;
    for (uint32_t z : r) {
      CHECK(!seen[z]);
      seen[z] = true;
    }
    for (bool s : seen) CHECK(s);
  }
}

TEST_CASE("phantom generation is deterministic") {
  PhantomConfig cfg;
  cfg.seed = 1234;
  auto [v1, t1] = generate_phantom(cfg);
  auto [v2, t2] = generate_phantom(cfg);
  CHECK(v1.voxels == v2.voxels);
  REQUIRE(t1.points.size() == t2.points.size());
  for (size_t i = 0; i < t1.points.size(); ++i) {
    CHECK(t1.points[i].x == t2.points[i].x);
    CHECK(t1.points[i].y == t2.points[i].y);
    CHECK(t1.points[i].z == t2.points[i].z);
  }

  PhantomConfig other = cfg;
  other.seed = 1235;
  auto [v3, t3] = generate_phantom(other);
  CHECK(v3.voxels != v1.voxels);
}

TEST_CASE("zero tilt gives a constant track") {
  PhantomConfig cfg;
  cfg.tilt_x = 0.0;
  cfg.tilt_y = 0.0;
  cfg.seed = 7;
  auto [vol, track] = generate_phantom(cfg);
  REQUIRE(track.points.size() == static_cast<size_t>(cfg.crown_boundary));
  for (const auto& p : track.points) {
    CHECK(p.x == doctest::Approx(track.points[0].x));
    CHECK(p.y == doctest::Approx(track.points[0].y));
  }
}

TEST_CASE("centerline fit recovers the configured tilt") {
  PhantomConfig cfg;
  cfg.tilt_x = 0.17;
  cfg.tilt_y = -0.08;
  cfg.seed = 99;
  auto [vol, track] = generate_phantom(cfg);
  const CenterlineFit fit = fit_centerline(track);
  CHECK(fit.k1 == doctest::Approx(cfg.tilt_x).epsilon(1e-9));
  CHECK(fit.k2 == doctest::Approx(cfg.tilt_y).epsilon(1e-9));
  CHECK(fit.q1 == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(fit.q2 == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("track stays on the reported line at every slice") {
  PhantomConfig cfg;
  cfg.seed = 5;
  auto [vol, track] = generate_phantom(cfg);
  track.validate();
  REQUIRE(track.region == Region::root);
  for (const auto& p : track.points) {
    const auto [x, y] = phantom_keypoint_at(cfg, p.z);
    CHECK(p.x == doctest::Approx(x).epsilon(1e-12));
    CHECK(p.y == doctest::Approx(y).epsilon(1e-12));
  }
}

TEST_CASE("projected crown points land in the dark gap between bright teeth") {
  PhantomConfig cfg;
  cfg.seed = 21;
  cfg.noise_level = 10.0;
  auto [vol, track] = generate_phantom(cfg);

  std::vector<uint32_t> crown_zs;
  for (int z = cfg.crown_boundary; z < cfg.depth; ++z)
    crown_zs.push_back(static_cast<uint32_t>(z));
  const KeypointTrack crown = project_root_to_crown(track, crown_zs);

  for (const auto& p : crown.points) {
    const SliceImage img = slice_at(vol, static_cast<uint32_t>(p.z));
    const int px = static_cast<int>(std::lround(p.x));
    const int py = static_cast<int>(std::lround(p.y));
    // the gap center is soft tissue, far below tooth intensity
    CHECK(img.at(0, py, px) < 0.3f);
    float brightest = 0.0f;
    for (const float f : img.values) brightest = std::max(brightest, f);
    CHECK(brightest > 0.4f);
  }
}

TEST_CASE("phantom config validation and json round trip") {
  PhantomConfig cfg;
  SUBCASE("gap must be interior") {
    cfg.gap_index = 0;
    CHECK_THROWS_AS(generate_phantom(cfg), InvalidArgumentError);
  }
  SUBCASE("boundary inside depth") {
    cfg.crown_boundary = cfg.depth;
    CHECK_THROWS_AS(generate_phantom(cfg), InvalidArgumentError);
  }
  SUBCASE("tilt cannot leave the frame") {
    cfg.tilt_x = 5.0;
    CHECK_THROWS_AS(generate_phantom(cfg), InvalidArgumentError);
  }
  SUBCASE("config json round trip") {
    TempDir tmp("cfg");
    cfg.tilt_x = 0.11;
    cfg.seed = 42;
    const std::string path = tmp.file("phantom.json");
    save_phantom_config(cfg, path);
    const PhantomConfig back = load_phantom_config(path);
    CHECK(back.tilt_x == doctest::Approx(cfg.tilt_x));
    CHECK(back.seed == cfg.seed);
    CHECK(back.image_size == cfg.image_size);
  }
}

TEST_CASE("track json round trip") {
  TempDir tmp("track");
  KeypointTrack t;
  t.patient = "p007";
  t.region = Region::root;
  t.points = {{10.5, 20.25, 0}, {10.6, 20.20, 1}, {10.7, 20.15, 2}};
  const std::string path = tmp.file("t.json");
  save_track(t, path);
  const KeypointTrack back = load_track(path);
  CHECK(back.patient == t.patient);
  CHECK(back.region == t.region);
  REQUIRE(back.points.size() == 3);
  CHECK(back.points[1].x == doctest::Approx(10.6));
  CHECK(back.points[2].z == 2);
}

TEST_SUITE_END();
