#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "liaf/roi.hpp"
#include "support.hpp"

using namespace liaf;

TEST_CASE("clip_and_scale_box") {
  SUBCASE("exact division") {
    const auto r = clip_and_scale_box(Box{0, 0, 32, 32}, 8, 16, 16);
    CHECK(r.box == Box{0, 0, 4, 4});
    CHECK_FALSE(r.degenerate);
  }
  SUBCASE("clip at zero") {
    const auto r = clip_and_scale_box(Box{-8, -8, 16, 16}, 8, 16, 16);
    CHECK(r.box == Box{0, 0, 2, 2});
  }
  SUBCASE("clip at far edge") {
    const auto r = clip_and_scale_box(Box{100, 100, 200, 140}, 8, 16, 16);
    CHECK(r.box == Box{12.5, 12.5, 16, 16});
  }
  SUBCASE("fully out of bounds") { CHECK_THROWS_AS(clip_and_scale_box(Box{200, 200, 300, 300}, 8, 16, 16), std::invalid_argument); }
  SUBCASE("bad stride and empty box") {
    CHECK_THROWS_AS(clip_and_scale_box(Box{0, 0, 8, 8}, 0, 16, 16), std::invalid_argument);
    CHECK_THROWS_AS(clip_and_scale_box(Box{4, 4, 4, 8}, 8, 16, 16), std::invalid_argument);
  }
  SUBCASE("tiny box flagged degenerate") {
    const auto r = clip_and_scale_box(Box{0, 0, 1e-4, 1e-4}, 8, 16, 16);
    CHECK(r.degenerate);
  }
}

TEST_CASE("roi_align closed-form values") {
  SUBCASE("constant map") {
    Tensor4<double> f(2, 3, 6, 5, 7.0);
    const auto out = roi_align(f, Box{0.3, 1.1, 4.2, 5.9}, 1, 3, 2, 2);
    CHECK(out.rows() == 3);
    CHECK(out.cols() == 6);
    for (Index i = 0; i < out.size(); ++i) CHECK(out.data()[i] == doctest::Approx(7.0).epsilon(1e-15));
  }
  SUBCASE("2x2 map, single center sample") {
    Tensor4<double> f(1, 1, 2, 2);
    f(0, 0, 0, 0) = 1;
    f(0, 0, 0, 1) = 2;
    f(0, 0, 1, 0) = 3;
    f(0, 0, 1, 1) = 4;
    const auto out = roi_align(f, Box{0, 0, 2, 2}, 0, 1, 1, 1);
    CHECK(out(0, 0) == doctest::Approx(2.5).epsilon(1e-15));
  }
  SUBCASE("pixel-aligned bins recover pixels") {
    std::mt19937_64 rng(3);
    const auto f = test::random_tensor(rng, 1, 2, 8, 8);
    const auto out = roi_align(f, Box{2, 1, 5, 5}, 0, 4, 3, 1);
    for (Index c = 0; c < 2; ++c)
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 3; ++x) CHECK(out(c, y * 3 + x) == doctest::Approx(f(0, c, 1 + y, 2 + x)).epsilon(1e-12));
  }
  SUBCASE("rejects bad arguments") {
    Tensor4<double> f(1, 1, 4, 4);
    CHECK_THROWS(roi_align(f, Box{0, 0, 5, 2}, 0, 2, 2, 2));
    CHECK_THROWS(roi_align(f, Box{0, 0, 2, 2}, 1, 2, 2, 2));
    CHECK_THROWS(roi_align(f, Box{0, 0, 2, 2}, 0, 0, 2, 2));
    CHECK_THROWS(roi_align(f, Box{0, 0, 2, 2}, 0, 2, 2, 0));
  }
}

TEST_CASE("roi_align agrees with the tent-function oracle") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const Index H = 3 + static_cast<Index>(rng() % 6), W = 3 + static_cast<Index>(rng() % 6);
    const auto f = test::random_tensor(rng, 2, 2, H, W);
    const Box b = test::random_box(rng, H, W);
    const int ph = 1 + static_cast<int>(rng() % 3), pw = 1 + static_cast<int>(rng() % 3);
    for (int s : {1, 2, 3}) {
      const auto got = roi_align(f, b, 1, ph, pw, s);
      const auto want = test::dense_roi_oracle(f, b, 1, ph, pw, s);
      CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("extract_roi_batch") {
  std::mt19937_64 rng(5);
  SUBCASE("empty instance set") {
    const auto f = test::random_tensor(rng, 1, 4, 5, 5);
    const auto batch = extract_roi_batch(f, InstanceSet{}, 3, 3);
    CHECK(batch.rows() == 0);
    CHECK(batch.cols() == 36);
  }
  SUBCASE("constant map gives a row of constants") {
    Tensor4<double> f(1, 2, 6, 6, 3.0);
    InstanceSet inst{{{Box{1, 1, 4, 5}, 0, 0}}};
    const auto batch = extract_roi_batch(f, inst, 2, 2);
    REQUIRE(batch.rows() == 1);
    REQUIRE(batch.cols() == 8);
    for (Index j = 0; j < 8; ++j) CHECK(batch.values(0, j) == doctest::Approx(3.0));
  }
  SUBCASE("rows are flattened per-instance roi_align, channel-major") {
    const auto f = test::random_tensor(rng, 2, 3, 7, 6);
    InstanceSet inst{{{Box{0.5, 1, 4, 6.5}, 1, 2}, {Box{2, 0, 6, 3}, 0, 1}}};
    const auto batch = extract_roi_batch(f, inst, 3, 2, 2);
    REQUIRE(batch.rows() == 2);
    for (Index i = 0; i < 2; ++i) {
      const auto one = test::dense_roi_oracle(f, inst[i].box, inst[i].batch_index, 3, 2, 2);
      for (Index c = 0; c < 3; ++c)
        for (Index b = 0; b < 6; ++b) CHECK(batch.values(i, c * 6 + b) == doctest::Approx(one(c, b)).epsilon(1e-12));
      CHECK(batch.instance_ids[static_cast<std::size_t>(i)] == i);
    }
    CHECK(batch.batch_indices == std::vector<int>{1, 0});
  }
}

TEST_CASE("extract_roi_batch is linear in the feature map") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const auto f = test::random_tensor(rng, 2, 3, 6, 7);
    const auto g = test::random_tensor(rng, 2, 3, 6, 7);
    std::uniform_real_distribution<double> u(-3, 3);
    const double a = u(rng), b = u(rng);
    Tensor4<double> mix(2, 3, 6, 7);
    mix.flat() = a * f.flat() + b * g.flat();
    InstanceSet inst{{{test::random_box(rng, 6, 7), 0, 0}, {test::random_box(rng, 6, 7), 1, 0}}};
    const auto lhs = extract_roi_batch(mix, inst, 3, 3).values;
    const auto rhs = (a * extract_roi_batch(f, inst, 3, 3).values + b * extract_roi_batch(g, inst, 3, 3).values).eval();
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("roi_align is translation consistent for interior boxes") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto f = test::random_tensor(rng, 1, 2, 8, 8);
    const int dy = static_cast<int>(rng() % 3), dx = static_cast<int>(rng() % 3);
    Tensor4<double> shifted(1, 2, 12, 12);
    for (Index c = 0; c < 2; ++c)
      for (Index y = 0; y < 8; ++y)
        for (Index x = 0; x < 8; ++x) shifted(0, c, y + dy, x + dx) = f(0, c, y, x);
    Box b = test::random_box(rng, 7, 7, 1.0);
    b = Box{b.x1 + 0.5, b.y1 + 0.5, b.x2 + 0.5, b.y2 + 0.5};  // sample points stay in [0.5, 7.5]
    const Box moved{b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy};
    const auto a = roi_align(f, b, 0, 3, 3, 2);
    const auto s = roi_align(shifted, moved, 0, 3, 3, 2);
    CHECK((a - s).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("roi_align backward matches finite differences") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    auto f = test::random_tensor(rng, 2, 2, 5, 6);
    const Box b = test::random_box(rng, 5, 6);
    const auto weights = test::random_tensor(rng, 1, 1, 2, 9);  // [C, bins] random cotangent
    MatrixX<double> cot = Eigen::Map<const MatrixX<double>>(weights.data(), 2, 9);
    auto loss = [&] { return (roi_align(f, b, 1, 3, 3, 2).array() * cot.array()).sum(); };
    Tensor4<double> grad = Tensor4<double>::zeros_like(f);
    roi_align_backward(cot, b, 1, 3, 3, 2, grad);
    for (Index i = 0; i < f.size(); ++i) {
      const double num = test::central_difference(loss, f.data()[i]);
      CHECK(test::rel_error(grad.data()[i], num) < 1e-4);
    }
  }
}

TEST_CASE("rasterize rounds outward") {
  const auto r = rasterize(Box{1.2, 0.5, 3.0, 2.01}, 4, 4);
  CHECK(r.x0 == 1);
  CHECK(r.x1 == 3);
  CHECK(r.y0 == 0);
  CHECK(r.y1 == 3);
}
