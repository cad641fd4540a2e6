#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "dlnet/balance.hpp"
#include "dlnet/flow.hpp"
#include "oracles.hpp"

using namespace dlnet;

namespace {

Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }

struct Instance {
  NetworkTuple net;
  Dataset data;
};

// Balanced start on small dims with a rank-deficient-capable bottleneck.
Instance balanced_instance(int n_layers, std::uint64_t seed, double scale = 0.7) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> ud(2, 6);
  std::vector<int> dims(static_cast<std::size_t>(n_layers) + 1);
  for (auto& d : dims) d = ud(rng);
  dims[1] = std::min(dims[0], dims[1]);
  for (std::size_t j = 2; j < dims.size(); ++j) dims[j] = std::max(dims[j], dims[1]);
  NetworkTuple base = balanced_init(dims, seed);
  std::vector<Matrix> layers;
  for (const auto& w : base.layers()) layers.push_back(scale * w);
  const int m = dims[0] + 3;
  Dataset data(oracle::gaussian(dims[0], m, rng, 1.0 / std::sqrt(dims[0])), oracle::gaussian(dims.back(), m, rng, 0.5));
  return {NetworkTuple(std::move(layers)), std::move(data)};
}

}  // namespace

TEST(TupleFlow, CriticalPointStaysPut) {
  std::mt19937_64 rng(1);
  const NetworkTuple net({oracle::gaussian(2, 3, rng), oracle::gaussian(3, 2, rng)});
  const Matrix x = oracle::gaussian(3, 5, rng);
  const Dataset data(x, product(net) * x);
  const auto traj = integrate_tuple_flow(net, data, 0.5, 0.01);
  for (const auto& s : traj.states) {
    EXPECT_LE((s.w - product(net)).norm(), 1e-12);
    EXPECT_LE(s.loss, 1e-24);
  }
}

TEST(TupleFlow, ScalarLayersStayEqual) {
  const NetworkTuple net({scalar(std::sqrt(2.0)), scalar(std::sqrt(2.0))});
  const Dataset data(scalar(1), scalar(0));
  const auto traj = integrate_tuple_flow(net, data, 1.0, 1e-3);
  EXPECT_EQ(traj.states.size(), 1001u);
  EXPECT_TRUE(traj.balanced_origin.value_or(false));
  for (std::size_t i = 0; i < traj.states.size(); ++i) {
    const auto& s = traj.states[i];
    EXPECT_NEAR(s.net.layer(0)(0, 0), s.net.layer(1)(0, 0), 1e-14);
    if (i > 0) {
      EXPECT_LT(s.w(0, 0), traj.states[i - 1].w(0, 0));
    }
  }
  // a' = -a^3 with a(0)^2 = 2 gives a(t)^2 = 2 / (1 + 4t).
  EXPECT_NEAR(traj.states.back().w(0, 0), 2.0 / 5.0, 1e-12);
}

TEST(TupleFlow, ImbalanceIsConserved) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 5; ++t) {
    const auto dims = oracle::random_dims(3, 5, rng);
    const NetworkTuple net(oracle::random_layers(dims, rng, 0.5));
    const Dataset data(oracle::gaussian(dims.front(), 8, rng, 0.5), oracle::gaussian(dims.back(), 8, rng, 0.5));
    const double imbalance = balance_report(net).balancedness_constant;
    const auto traj = integrate_tuple_flow(net, data, 1.0, 1e-3);
    EXPECT_FALSE(traj.balanced_origin.value_or(true));
    for (const auto& s : traj.states) EXPECT_LE(s.invariance_drift, 1e-6 * imbalance);
  }
}

TEST(TupleFlow, DriftHasFourthOrderStepScaling) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 5; ++t) {
    const auto dims = oracle::random_dims(3, 5, rng);
    const NetworkTuple net(oracle::random_layers(dims, rng, 0.5));
    const Dataset data(oracle::gaussian(dims.front(), 8, rng, 0.5), oracle::gaussian(dims.back(), 8, rng, 0.5));
    const double coarse = integrate_tuple_flow(net, data, 1.0, 2e-3).states.back().invariance_drift;
    const double fine = integrate_tuple_flow(net, data, 1.0, 1e-3).states.back().invariance_drift;
    EXPECT_GE(coarse / fine, 8.0) << coarse << " vs " << fine;
    EXPECT_LE(coarse / fine, 32.0) << coarse << " vs " << fine;
  }
}

TEST(TupleFlow, LossNonincreasing) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto inst = balanced_instance(3, seed);
    const auto traj = integrate_tuple_flow(inst.net, inst.data, 2.0, 1e-2);
    for (std::size_t i = 1; i < traj.states.size(); ++i)
      EXPECT_LE(traj.states[i].loss, traj.states[i - 1].loss + 1e-14 * (1 + traj.states[i - 1].loss));
  }
}

TEST(TupleFlow, BalancedRankIsConstant) {
  for (std::uint64_t seed = 10; seed < 16; ++seed) {
    const auto inst = balanced_instance(2 + static_cast<int>(seed % 2), seed);
    const auto traj = integrate_tuple_flow(inst.net, inst.data, 1.0, 1e-3, {.record_stride = 50, .rank_tol = 1e-8});
    const int r0 = traj.states.front().product_rank;
    for (const auto& s : traj.states) EXPECT_EQ(s.product_rank, r0) << "t=" << s.t;
  }
}

TEST(TupleFlow, GradientStepIsFirstOrderConsistent) {
  const auto inst = balanced_instance(3, 21);
  double prev = 0.0;
  for (double eta : {4e-2, 2e-2, 1e-2}) {
    const NetworkTuple gd = gd_step(inst.net, inst.data, eta);
    const NetworkTuple fl = integrate_tuple_flow(inst.net, inst.data, eta, eta / 10).states.back().net;
    double err = 0.0;
    for (std::size_t j = 0; j < gd.depth(); ++j) err += (gd.layer(j) - fl.layer(j)).squaredNorm();
    err = std::sqrt(err);
    if (prev > 0.0) {
      EXPECT_NEAR(prev / err, 4.0, 0.5);
    }
    prev = err;
  }
}

TEST(TupleFlow, HugeStepBlowsUp) {
  std::mt19937_64 rng(4);
  const NetworkTuple net(oracle::random_layers({3, 3, 3, 3}, rng, 3.0));
  const Dataset data(oracle::gaussian(3, 5, rng, 3.0), oracle::gaussian(3, 5, rng, 3.0));
  EXPECT_THROW(integrate_tuple_flow(net, data, 1000.0, 100.0), BlowUpError);
}

TEST(TupleFlow, ParameterErrors) {
  const auto inst = balanced_instance(2, 0);
  EXPECT_THROW(integrate_tuple_flow(inst.net, inst.data, 1.0, 0.0), ParameterError);
  EXPECT_THROW(integrate_tuple_flow(inst.net, inst.data, 1.0, -0.1), ParameterError);
  EXPECT_THROW(integrate_tuple_flow(inst.net, inst.data, 0.01, 0.1), ParameterError);
  EXPECT_THROW(integrate_tuple_flow(inst.net, inst.data, 1.0, 0.1, {.record_stride = 0}), ParameterError);
  EXPECT_THROW(integrate_tuple_flow(inst.net, Dataset(identity(9), identity(9)), 1.0, 0.1), DimensionError);
}

TEST(TupleFlow, LastStateLandsOnHorizon) {
  const auto inst = balanced_instance(2, 1);
  const auto traj = integrate_tuple_flow(inst.net, inst.data, 1.0, 0.3, {.record_stride = 3});
  EXPECT_DOUBLE_EQ(traj.states.back().t, 1.0);
  EXPECT_EQ(traj.states.size(), 3u);  // t = 0, 0.75, 1
}

TEST(AwOperator, Examples) {
  std::mt19937_64 rng(5);
  const Matrix w = oracle::gaussian(3, 4, rng), z = oracle::gaussian(3, 4, rng);
  EXPECT_LE((a_w_operator(w, z, 1) - z).norm(), 1e-13 * z.norm());
  EXPECT_NEAR(a_w_operator(scalar(4), scalar(1.5), 2)(0, 0), 12.0, 1e-13);
  EXPECT_THROW(a_w_operator(w, z, 0), ParameterError);
  EXPECT_THROW(a_w_operator(w, oracle::gaussian(4, 3, rng), 2), DimensionError);
}

// On a balanced tuple, A_W(Z) equals the sum of (W_N..W_{j+1})(W_N..W_{j+1})^T Z (W_{j-1}..W_1)^T (W_{j-1}..W_1).
TEST(AwOperator, MatchesBalancedTupleExpansion) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const int n = 2 + static_cast<int>(seed % 3);
    const auto inst = balanced_instance(n, 100 + seed, 1.3);
    const auto& layers = inst.net.layers();
    std::mt19937_64 rng(seed);
    const Matrix w = product(inst.net);
    const Matrix z = oracle::gaussian(static_cast<int>(w.rows()), static_cast<int>(w.cols()), rng);
    Matrix ref = Matrix::Zero(w.rows(), w.cols());
    for (int j = 1; j <= n; ++j) {
      const std::vector<Matrix> above(layers.begin() + j, layers.end());
      const std::vector<Matrix> below(layers.begin(), layers.begin() + (j - 1));
      const Matrix a = above.empty() ? identity(w.rows()) : oracle::product(above);
      const Matrix b = below.empty() ? identity(w.cols()) : oracle::product(below);
      ref += oracle::matmul(oracle::matmul(oracle::matmul(a, oracle::transpose(a)), z), oracle::matmul(oracle::transpose(b), b));
    }
    EXPECT_LE((a_w_operator(w, z, static_cast<std::size_t>(n)) - ref).norm(), 1e-9 * (1 + ref.norm())) << "seed " << seed;
  }
}

TEST(ProductFlow, ScalarMatchesTupleFlow) {
  const NetworkTuple net({scalar(std::sqrt(2.0)), scalar(std::sqrt(2.0))});
  const Dataset data(scalar(1), scalar(0.3));
  const auto tuple = integrate_tuple_flow(net, data, 1.0, 1e-3);
  const auto prod = integrate_product_flow(net, data, 1.0, 1e-3);
  EXPECT_TRUE(prod.balanced_origin.value_or(false));
  ASSERT_EQ(tuple.states.size(), prod.states.size());
  for (std::size_t i = 0; i < tuple.states.size(); ++i)
    EXPECT_NEAR(tuple.states[i].w(0, 0), prod.states[i].w(0, 0), 1e-6);
}

TEST(ProductFlow, MatchesTupleFlowFromBalancedStart) {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    const auto inst = balanced_instance(2 + static_cast<int>(seed % 2), 40 + seed);
    const auto tuple = integrate_tuple_flow(inst.net, inst.data, 1.0, 1e-3);
    const auto prod = integrate_product_flow(inst.net, inst.data, 1.0, 1e-3);
    const Matrix& a = tuple.states.back().w;
    const Matrix& b = prod.states.back().w;
    EXPECT_LE((a - b).norm() / std::max(1.0, a.norm()), 1e-5) << "seed " << seed;
  }
}

TEST(ProductFlow, UnbalancedStartIsFlagged) {
  const NetworkTuple net({scalar(1), scalar(2)});
  const auto prod = integrate_product_flow(net, Dataset(scalar(1), scalar(0)), 0.1, 0.01);
  EXPECT_FALSE(prod.balanced_origin.value_or(true));
  const auto bare = integrate_product_flow(scalar(2), Dataset(scalar(1), scalar(0)), 2, 0.1, 0.01);
  EXPECT_FALSE(bare.balanced_origin.has_value());
}

TEST(ProductFlow, Errors) {
  const Dataset data(identity(2), identity(2));
  EXPECT_THROW(integrate_product_flow(Matrix::Zero(3, 2), data, 2, 1.0, 0.1), DimensionError);
  EXPECT_THROW(integrate_product_flow(identity(2), data, 2, 1.0, 0.0), ParameterError);
}

TEST(FlowCsv, HeaderAndRows) {
  const auto inst = balanced_instance(2, 3);
  const auto traj = integrate_tuple_flow(inst.net, inst.data, 0.1, 0.05);
  std::stringstream ss;
  write_flow_csv(ss, traj);
  std::string line;
  std::getline(ss, line);
  EXPECT_EQ(line, "t,loss,invariance_drift,product_rank");
  int rows = 0;
  while (std::getline(ss, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 3);
    ++rows;
  }
  EXPECT_EQ(rows, 3);
}
