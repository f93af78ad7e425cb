#include "doctest.h"

#include <cmath>
#include <limits>
#include <vector>

#include "implantformer/centerline.hpp"
#include "implantformer/rng.hpp"

using namespace implantformer;

namespace {

KeypointTrack make_track(Region region, const std::vector<TrackPoint>& pts) {
  KeypointTrack t;
  t.region = region;
  t.points = pts;
  return t;
}

// Brute-force oracle: minimizes sum (v - k*z - b)^2 over a dense (k, b)
// grid, repeatedly refined around the best cell until the cell size drops
// below 1e-9. Independent of the closed-form implementation.
std::pair<double, double> grid_search_fit(const std::vector<double>& zs,
                                          const std::vector<double>& vs) {
  double k_lo = -50.0, k_hi = 50.0, b_lo = -500.0, b_hi = 500.0;
  double best_k = 0.0, best_b = 0.0;
  constexpr int n = 33;
  for (int iter = 0; iter < 60; ++iter) {
    double best_q = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      const double k = k_lo + (k_hi - k_lo) * i / (n - 1);
      for (int j = 0; j < n; ++j) {
        const double b = b_lo + (b_hi - b_lo) * j / (n - 1);
        double q = 0.0;
        for (size_t p = 0; p < zs.size(); ++p) {
          const double r = vs[p] - k * zs[p] - b;
          q += r * r;
        }
        if (q < best_q) {
          best_q = q;
          best_k = k;
          best_b = b;
        }
      }
    }
    const double span_k = 2.0 * (k_hi - k_lo) / (n - 1);
    const double span_b = 2.0 * (b_hi - b_lo) / (n - 1);
    k_lo = best_k - span_k;
    k_hi = best_k + span_k;
    b_lo = best_b - span_b;
    b_hi = best_b + span_b;
    if (span_k < 1e-9 && span_b < 1e-9) break;
  }
  return {best_k, best_b};
}

}  // namespace

TEST_SUITE_BEGIN("centerline");

TEST_CASE("constant track fits a vertical line") {
  std::vector<TrackPoint> pts;
  for (int z = 0; z < 10; ++z) pts.push_back({10.0, 20.0, z});
  const CenterlineFit fit = fit_centerline(make_track(Region::root, pts));
  CHECK(fit.k1 == doctest::Approx(0.0));
  CHECK(fit.b1 == doctest::Approx(10.0));
  CHECK(fit.k2 == doctest::Approx(0.0));
  CHECK(fit.b2 == doctest::Approx(20.0));
  CHECK(fit.q1 == doctest::Approx(0.0));
  CHECK(fit.q2 == doctest::Approx(0.0));
  CHECK(fit.n == 10);
}

TEST_CASE("exact line is recovered with zero residual") {
  std::vector<TrackPoint> pts;
  for (int z = 0; z <= 4; ++z) pts.push_back({2.0 * z + 1.0, -1.0 * z + 5.0, z});
  const CenterlineFit fit = fit_centerline(make_track(Region::root, pts));
  CHECK(fit.k1 == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(fit.b1 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(fit.k2 == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(fit.b2 == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(fit.q1 == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(fit.q2 == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("noisy fit matches the grid-search oracle") {
  Rng rng(2024);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<TrackPoint> pts;
    std::vector<double> zs, xs, ys;
    for (int z = 0; z < 20; ++z) {
      const double x = 0.6 * z + 3.0 + rng.uniform(-0.5, 0.5);
      const double y = -0.25 * z + 40.0 + rng.uniform(-0.5, 0.5);
      pts.push_back({x, y, z});
      zs.push_back(z);
      xs.push_back(x);
      ys.push_back(y);
    }
    const CenterlineFit fit = fit_centerline(make_track(Region::root, pts));
    const auto [kx, bx] = grid_search_fit(zs, xs);
    const auto [ky, by] = grid_search_fit(zs, ys);
    CHECK(std::fabs(fit.k1 - kx) < 1e-6);
    CHECK(std::fabs(fit.b1 - bx) < 1e-6);
    CHECK(std::fabs(fit.k2 - ky) < 1e-6);
    CHECK(std::fabs(fit.b2 - by) < 1e-6);
  }
}

TEST_CASE("degenerate inputs are rejected") {
  CHECK_THROWS_AS(fit_centerline(make_track(Region::root, {{1, 1, 0}})),
                  DegenerateFitError);
  // all z identical: the normal-equation denominator vanishes
  CHECK_THROWS_AS(fit_centerline(make_track(Region::root, {{1, 1, 3}, {2, 2, 3}})),
                  DegenerateFitError);
}

TEST_CASE("eval_line substitutes the fitted coefficients") {
  CenterlineFit fit;
  fit.k1 = 2.0;
  fit.b1 = 1.0;
  fit.k2 = -1.0;
  fit.b2 = 5.0;
  fit.n = 2;
  const auto [x, y] = eval_line(fit, 10.0);
  CHECK(x == doctest::Approx(21.0));
  CHECK(y == doctest::Approx(-5.0));
  const auto [x0, y0] = eval_line(fit, 0.0);
  CHECK(x0 == doctest::Approx(fit.b1));
  CHECK(y0 == doctest::Approx(fit.b2));

  // evaluating two points and refitting reproduces the coefficients
  const auto [xa, ya] = eval_line(fit, 3.0);
  const auto [xb, yb] = eval_line(fit, 8.0);
  const CenterlineFit refit =
      fit_centerline(make_track(Region::root, {{xa, ya, 3}, {xb, yb, 8}}));
  CHECK(refit.k1 == doctest::Approx(fit.k1).epsilon(1e-12));
  CHECK(refit.b1 == doctest::Approx(fit.b1).epsilon(1e-12));
  CHECK(refit.k2 == doctest::Approx(fit.k2).epsilon(1e-12));
  CHECK(refit.b2 == doctest::Approx(fit.b2).epsilon(1e-12));
}

TEST_CASE("residual_q evaluates per-axis squared residuals") {
  CenterlineFit zero;
  zero.n = 2;
  const auto [q1, q2] = residual_q(zero, make_track(Region::root, {{1, 1, 0}}));
  CHECK(q1 == doctest::Approx(1.0));
  CHECK(q2 == doctest::Approx(1.0));

  std::vector<TrackPoint> pts;
  for (int z = 0; z <= 4; ++z) pts.push_back({2.0 * z + 1.0, -1.0 * z + 5.0, z});
  const KeypointTrack track = make_track(Region::root, pts);
  const CenterlineFit fit = fit_centerline(track);
  const auto [f1, f2] = residual_q(fit, track);
  CHECK(f1 == doctest::Approx(0.0));
  CHECK(f2 == doctest::Approx(0.0));
}

TEST_CASE("fitted residual is optimal against 1000 random perturbations") {
  Rng rng(77);
  std::vector<TrackPoint> pts;
  for (int z = 0; z < 15; ++z)
    pts.push_back({0.4 * z + 12.0 + rng.uniform(-1.0, 1.0),
                   -0.2 * z + 30.0 + rng.uniform(-1.0, 1.0), z});
  const KeypointTrack track = make_track(Region::root, pts);
  const CenterlineFit fit = fit_centerline(track);

  for (int i = 0; i < 1000; ++i) {
    CenterlineFit other = fit;
    other.k1 += rng.uniform(-0.5, 0.5);
    other.b1 += rng.uniform(-2.0, 2.0);
    other.k2 += rng.uniform(-0.5, 0.5);
    other.b2 += rng.uniform(-2.0, 2.0);
    const auto [q1, q2] = residual_q(other, track);
    CHECK(q1 >= fit.q1 - 1e-9);
    CHECK(q2 >= fit.q2 - 1e-9);
  }
}

TEST_CASE("root to crown projection substitutes crown slice indices") {
  SUBCASE("constant track stays constant") {
    std::vector<TrackPoint> pts;
    for (int z = 0; z < 5; ++z) pts.push_back({10.0, 20.0, z});
    const KeypointTrack crown =
        project_root_to_crown(make_track(Region::root, pts), {7, 8, 9});
    REQUIRE(crown.points.size() == 3);
    CHECK(crown.region == Region::crown);
    for (const auto& p : crown.points) {
      CHECK(p.x == doctest::Approx(10.0));
      CHECK(p.y == doctest::Approx(20.0));
    }
  }
  SUBCASE("line x = 2z + 1") {
    std::vector<TrackPoint> pts;
    for (int z = 0; z <= 4; ++z) pts.push_back({2.0 * z + 1.0, 3.0, z});
    const KeypointTrack crown =
        project_root_to_crown(make_track(Region::root, pts), {10, 11});
    REQUIRE(crown.points.size() == 2);
    CHECK(crown.points[0].x == doctest::Approx(21.0));
    CHECK(crown.points[0].z == 10);
    CHECK(crown.points[1].x == doctest::Approx(23.0));
    CHECK(crown.points[1].z == 11);
  }
  SUBCASE("region and argument preconditions") {
    std::vector<TrackPoint> pts{{1, 1, 0}, {2, 2, 1}};
    CHECK_THROWS_AS(project_root_to_crown(make_track(Region::crown, pts), {5}),
                    InvalidArgumentError);
    CHECK_THROWS_AS(project_root_to_crown(make_track(Region::root, pts), {}),
                    InvalidArgumentError);
    CHECK_THROWS_AS(project_crown_to_root(make_track(Region::root, pts), {0}),
                    InvalidArgumentError);
  }
}

TEST_CASE("crown to root back-projection round trip hits the fitted line") {
  Rng rng(13);
  std::vector<TrackPoint> pts;
  for (int z = 0; z < 20; ++z)
    pts.push_back({0.3 * z + 8.0 + rng.uniform(-0.4, 0.4),
                   -0.1 * z + 25.0 + rng.uniform(-0.4, 0.4), z});
  const KeypointTrack root = make_track(Region::root, pts);
  const CenterlineFit fit = fit_centerline(root);

  std::vector<uint32_t> crown_zs, root_zs;
  for (uint32_t z = 20; z < 40; ++z) crown_zs.push_back(z);
  for (uint32_t z = 0; z < 20; ++z) root_zs.push_back(z);

  const KeypointTrack crown = project_root_to_crown(root, crown_zs);
  const KeypointTrack back = project_crown_to_root(crown, root_zs);
  REQUIRE(back.points.size() == root_zs.size());
  CHECK(back.region == Region::root);
  for (const auto& p : back.points) {
    const auto [x, y] = eval_line(fit, p.z);
    CHECK(std::fabs(p.x - x) < 1e-9);
    CHECK(std::fabs(p.y - y) < 1e-9);
  }
}

TEST_CASE("noisy crown predictions back-project per the oracle fit") {
  Rng rng(31);
  std::vector<TrackPoint> pts;
  std::vector<double> zs, xs, ys;
  for (int z = 20; z < 40; ++z) {
    const double x = -0.15 * z + 40.0 + rng.uniform(-0.8, 0.8);
    const double y = 0.3 * z + 5.0 + rng.uniform(-0.8, 0.8);
    pts.push_back({x, y, z});
    zs.push_back(z);
    xs.push_back(x);
    ys.push_back(y);
  }
  const KeypointTrack back =
      project_crown_to_root(make_track(Region::crown, pts), {0, 5, 10});
  const auto [kx, bx] = grid_search_fit(zs, xs);
  const auto [ky, by] = grid_search_fit(zs, ys);
  for (const auto& p : back.points) {
    CHECK(std::fabs(p.x - (kx * p.z + bx)) < 1e-6);
    CHECK(std::fabs(p.y - (ky * p.z + by)) < 1e-6);
  }
}

TEST_CASE("translation equivariance in x") {
  Rng rng(55);
  std::vector<TrackPoint> pts;
  for (int z = 0; z < 12; ++z)
    pts.push_back({0.5 * z + 4.0 + rng.uniform(-0.3, 0.3), 9.0, z});
  const KeypointTrack base = make_track(Region::root, pts);
  const CenterlineFit fit = fit_centerline(base);

  const double delta = 7.25;
  KeypointTrack shifted = base;
  for (auto& p : shifted.points) p.x += delta;
  const CenterlineFit fit2 = fit_centerline(shifted);
  CHECK(std::fabs(fit2.k1 - fit.k1) < 1e-9);
  CHECK(std::fabs(fit2.b1 - (fit.b1 + delta)) < 1e-9);
}

TEST_CASE("z-shift moves the intercept by -k*c") {
  Rng rng(56);
  std::vector<TrackPoint> pts;
  for (int z = 0; z < 12; ++z)
    pts.push_back({0.5 * z + 4.0 + rng.uniform(-0.3, 0.3),
                   -0.3 * z + 20.0 + rng.uniform(-0.3, 0.3), z});
  const KeypointTrack base = make_track(Region::root, pts);
  const CenterlineFit fit = fit_centerline(base);

  const int c = 9;
  KeypointTrack shifted = base;
  for (auto& p : shifted.points) p.z += c;
  const CenterlineFit fit2 = fit_centerline(shifted);
  CHECK(std::fabs(fit2.k1 - fit.k1) < 1e-9);
  CHECK(std::fabs(fit2.k2 - fit.k2) < 1e-9);
  CHECK(std::fabs(fit2.b1 - (fit.b1 - fit.k1 * c)) < 1e-9);
  CHECK(std::fabs(fit2.b2 - (fit.b2 - fit.k2 * c)) < 1e-9);
}

TEST_SUITE_END();
