#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "latentid/errors.hpp"
#include "latentid/mixing.hpp"
#include "latentid/oracle.hpp"
#include "latentid/scm.hpp"

using namespace latentid;

TEST_CASE("identity mixing returns the latent bits") {
  const auto map = MixingMap::identity(3);
  const Bits c{1, 0, 1};
  CHECK(apply_mixing(map, c) == c);
  CHECK(apply_mixing_index(map, 5) == c);
}

TEST_CASE("pool size and permutation validity") {
  const auto map = build_mixing(3, 8, 1);
  CHECK(map.n_perms() == 8);
  CHECK(map.n_observed() == 24);
  CHECK_NOTHROW(map.validate());
  for (const auto& perm : map.permutations) {
    std::vector<std::uint32_t> sorted = perm;
    std::sort(sorted.begin(), sorted.end());
    for (std::uint32_t i = 0; i < 8; ++i) CHECK(sorted[i] == i);
  }
  CHECK(build_mixing(3, 8, 1).permutations == map.permutations);
  CHECK(build_mixing(3, 8, 2).permutations != map.permutations);
}

TEST_CASE("build_mixing parameter checks") {
  CHECK_THROWS_AS(build_mixing(17, 1, 0), ParameterError);
  CHECK_THROWS_AS(build_mixing(3, 0, 0), ParameterError);
}

TEST_CASE("one full permutation block is a bijection") {
  const auto pool = build_mixing(4, 3, 7);
  std::vector<int> block;
  for (int k = 0; k < pool.n_observed(); ++k) {
    if (pool.selected[static_cast<std::size_t>(k)].perm == 1) block.push_back(k);
  }
  const auto map = select_observed(pool, block);
  std::set<Bits> images;
  for (std::uint32_t c = 0; c < 16; ++c) images.insert(apply_mixing_index(map, c));
  CHECK(images.size() == 16);
}

TEST_CASE("single selected bit gives at most two observed values") {
  const auto pool = build_mixing(3, 8, 3);
  const int one[1] = {5};
  const auto map = select_observed(pool, one);
  std::set<Bits> images;
  for (std::uint32_t c = 0; c < 8; ++c) images.insert(apply_mixing_index(map, c));
  CHECK(images.size() <= 2);
}

TEST_CASE("select_observed") {
  const auto pool = build_mixing(3, 4, 9);
  std::vector<int> all(static_cast<std::size_t>(pool.n_observed()));
  std::iota(all.begin(), all.end(), 0);
  CHECK(select_observed(pool, all).selected == pool.selected);
  CHECK_THROWS_AS(select_observed(pool, std::span<const int>{}), ParameterError);
  const int dup[2] = {1, 1};
  CHECK_THROWS_AS(select_observed(pool, dup), ParameterError);
  const int out[1] = {12};
  CHECK_THROWS_AS(select_observed(pool, out), ParameterError);
}

TEST_CASE("mixing is deterministic and injective over the full pool") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const int n = 2 + static_cast<int>(seed % 4);
    const auto map = build_mixing(n, 1 << n, seed);
    std::set<Bits> images;
    for (std::uint32_t c = 0; c < (1u << n); ++c) {
      const auto x = apply_mixing_index(map, c);
      CHECK(x == apply_mixing_index(map, c));
      CHECK(x == apply_mixing(map, index_to_config(c, n)));
      images.insert(x);
    }
    CHECK(images.size() == (1u << n));
  }
}

TEST_CASE("nested prefixes never decrease conditional entropy") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto latent = make_latent_model(3, GraphSpec::chain(), 0.2, 0.8, seed);
    const auto pool = build_mixing(3, 8, seed + 50);
    const auto schedule = nested_schedule(pool, seed + 60);
    std::set<int> unique(schedule.begin(), schedule.end());
    CHECK(unique.size() == 24);
    double prev = std::numeric_limits<double>::infinity();
    for (int m = 1; m <= 24; ++m) {
      const std::vector<int> prefix(schedule.begin(), schedule.begin() + m);
      const GenerativeModel gm(latent, select_observed(pool, prefix));
      const double h = conditional_entropy(gm);
      CHECK(h <= prev + 1e-12);
      prev = h;
    }
    CHECK(prev == doctest::Approx(0.0));
  }
}

TEST_CASE("mask_sample") {
  const Bits x{1, 1, 0};
  const auto masked = mask_sample(x, 0);
  CHECK(masked.visible == Bits{0, 1, 0});
  CHECK(masked.mask_indicator == Bits{1, 0, 0});
  CHECK(masked.mask_pos() == 0);
  CHECK(masked.target == 1);
  CHECK(restore_observed(masked) == x);
  CHECK_THROWS_AS(mask_sample(x, 3), ParameterError);
  CHECK_THROWS_AS(mask_sample(x, -1), ParameterError);
}

TEST_CASE("masking round trip for every position") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    Bits x(9);
    for (auto& b : x) b = static_cast<std::uint8_t>(rng() & 1u);
    for (int p = 0; p < 9; ++p) {
      const auto m = mask_sample(x, p);
      CHECK(std::accumulate(m.mask_indicator.begin(), m.mask_indicator.end(), 0) == 1);
      CHECK(m.visible[static_cast<std::size_t>(p)] == 0);
      CHECK(restore_observed(m) == x);
    }
  }
}

TEST_CASE("random mask position is uniform") {
  std::mt19937_64 rng(12);
  const int m = 6;
  const int N = 60000;
  const Bits x(static_cast<std::size_t>(m), 1);
  std::vector<int> counts(m, 0);
  for (int i = 0; i < N; ++i) ++counts[static_cast<std::size_t>(mask_sample(x, rng).mask_pos())];
  const double p = 1.0 / m;
  const double sigma = std::sqrt(N * p * (1 - p));
  for (int c : counts) CHECK(std::abs(c - N * p) < 3 * sigma);
}

TEST_CASE("block mask target is the joint value") {
  const Bits x{1, 0, 1, 1};
  const int pos[2] = {2, 1};
  const auto m = mask_block(x, pos);
  CHECK(m.target == 1);  // x[2] + 2 * x[1]
  CHECK(m.n_classes() == 4);
  CHECK(m.visible == Bits{1, 0, 0, 1});
  CHECK(restore_observed(m) == x);
}

TEST_CASE("dataset csv round trip and errors") {
  const auto map = select_observed(build_mixing(3, 2, 1), std::vector<int>{0, 3, 4, 5});
  const std::vector<std::uint32_t> configs{0, 5, 7, 2};
  const auto data = make_observed_dataset(map, configs);
  std::stringstream ss;
  write_dataset_csv(ss, data);
  const std::string text = ss.str();
  CHECK(text.rfind("n_latent,m,n_samples\n3,4,4\nc_0,c_1,c_2,x_0,x_1,x_2,x_3\n", 0) == 0);
  const auto back = read_dataset_csv(ss);
  CHECK(back.latent == data.latent);
  CHECK(back.observed == data.observed);

  std::stringstream bad_count("n_latent,m,n_samples\n1,1,2\nc_0,x_0\n0,1\n");
  CHECK_THROWS_AS(read_dataset_csv(bad_count), LoadError);
  std::stringstream bad_value("n_latent,m,n_samples\n1,1,1\nc_0,x_0\n0,2\n");
  CHECK_THROWS_AS(read_dataset_csv(bad_value), LoadError);
  std::stringstream bad_header("n,m\n");
  CHECK_THROWS_AS(read_dataset_csv(bad_header), LoadError);
}

TEST_CASE("mixing json round trip") {
  const auto map = select_observed(build_mixing(3, 4, 2), std::vector<int>{7, 1, 2});
  const nlohmann::json j = map;
  const auto back = j.get<MixingMap>();
  CHECK(back.permutations == map.permutations);
  CHECK(back.selected == map.selected);
}
