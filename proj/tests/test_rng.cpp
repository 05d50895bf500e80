#include <doctest.h>

#include <cmath>

#include "curvelang/rng.hpp"

using curvelang::Rng;

TEST_CASE("philox4x32-10 known-answer vectors") {
  using A4 = std::array<std::uint32_t, 4>;
  CHECK(curvelang::philox4x32({0, 0, 0, 0}, {0, 0}) ==
        A4{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u});
  CHECK(curvelang::philox4x32({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu},
                              {0xffffffffu, 0xffffffffu}) ==
        A4{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu});
  CHECK(curvelang::philox4x32({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u},
                              {0xa4093822u, 0x299f31d0u}) ==
        A4{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u});
}

TEST_CASE("streams are reproducible and split streams differ") {
  Rng a(42);
  Rng b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng root(7);
  Rng x = root.split("dropout");
  Rng y = root.split("noise");
  Rng x2 = root.split("dropout");
  int same = 0;
  for (int i = 0; i < 64; ++i) {
    const auto vx = x.next_u32();
    same += vx == y.next_u32();
    CHECK(vx == x2.next_u32());
  }
  CHECK(same < 2);
}

TEST_CASE("uniform and normal moments") {
  Rng rng(123);
  const int n = 200000;
  double su = 0.0, sn = 0.0, sn2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    su += u;
    const double z = rng.normal();
    sn += z;
    sn2 += z * z;
  }
  CHECK(std::abs(su / n - 0.5) < 4.0 * std::sqrt(1.0 / 12.0 / n));
  CHECK(std::abs(sn / n) < 4.0 / std::sqrt(n));
  CHECK(std::abs(sn2 / n - 1.0) < 4.0 * std::sqrt(2.0 / n));
}

TEST_CASE("uniform_int stays in range and covers it") {
  Rng rng(9);
  std::array<int, 5> counts{};
  for (int i = 0; i < 5000; ++i) {
    const auto k = rng.uniform_int(5);
    REQUIRE(k < 5);
    ++counts[k];
  }
  for (int c : counts) CHECK(c > 800);
}
