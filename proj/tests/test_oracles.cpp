#include <gtest/gtest.h>

#include <string>

#include "support/oracles.hpp"

TEST(Oracle, Lcs) {
  EXPECT_EQ(oracle::oracle_lcs(std::string("abcd"), std::string("acbd")), 3u);
  EXPECT_EQ(oracle::oracle_lcs(std::string("spinning"), std::string("spinning")), 8u);
  EXPECT_EQ(oracle::oracle_lcs(std::string("abc"), std::string()), 0u);
  EXPECT_EQ(oracle::oracle_lcs(std::vector<int>{1, 2, 3}, std::vector<int>{4, 5}), 0u);
}

TEST(Oracle, MinNorm) {
  const double step = 1e-4;
  const auto r = oracle::oracle_min_norm({1, 0}, {0, 2}, step);
  EXPECT_NEAR(r.alpha, 0.8, step);
  EXPECT_FALSE(r.flat);
  EXPECT_TRUE(oracle::oracle_min_norm({1, 2, 3}, {1, 2, 3}, step).flat);
  EXPECT_NEAR(oracle::oracle_min_norm({1, 1}, {3, 3}, step).alpha, 1.0, 1e-12);
  EXPECT_THROW(oracle::oracle_min_norm({1}, {2}, 1e-3), oracle::OracleError);
  EXPECT_THROW(oracle::oracle_min_norm({1}, {2}, 0.0), oracle::OracleError);
  EXPECT_THROW(oracle::oracle_min_norm({1}, {2, 3}, step), oracle::OracleError);
}

TEST(Oracle, FiniteDifferences) {
  auto sq = [](const std::vector<double>& p) { return p[0] * p[0] + p[1] * p[1]; };
  const auto g = oracle::oracle_fd_gradient(sq, {1.0, 2.0}, 1e-5);
  EXPECT_NEAR(g[0], 2.0, 1e-8);
  EXPECT_NEAR(g[1], 4.0, 1e-8);
  EXPECT_THROW(oracle::oracle_fd_gradient(sq, {1.0}, 1e-3), oracle::OracleError);
  EXPECT_THROW(oracle::oracle_fd_gradient(sq, {1.0}, 1e-8), oracle::OracleError);
  auto blowup = [](const std::vector<double>& p) { return p[0] > 0 ? std::log(-1.0) : 0.0; };
  EXPECT_THROW(oracle::oracle_fd_gradient(blowup, {1.0}, 1e-5), oracle::OracleError);
}

TEST(Oracle, RougeAndBleu) {
  EXPECT_NEAR(oracle::oracle_rouge_n({1, 2, 3}, {1, 2, 4}, 1), 200.0 / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(oracle::oracle_rouge_l({1, 2, 3, 4}, {1, 3, 2, 4}), 75.0);
  EXPECT_NEAR(oracle::oracle_bleu({{1, 2, 3, 4, 5}}, {{1, 2, 3, 4, 5}}), 100.0, 1e-12);
  EXPECT_THROW(oracle::oracle_bleu({}, {}), oracle::OracleError);
}
