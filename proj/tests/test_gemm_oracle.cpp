#include <fstream>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "moekit/gemm_oracle.hpp"
#include "moekit/random.hpp"
#include "support/schema_check.hpp"

using namespace moekit;

TEST_CASE("dispatch groups tokens per expert at unbounded capacity") {
  const Matrix2D x(3, 2, {1, 1, 2, 2, 3, 3});
  const DispatchedBatch d = dispatch(x, {0, 1, 0}, 2);
  REQUIRE(d.expert_tokens.size() == 2);
  CHECK(d.expert_tokens[0].rows() == 2);
  CHECK(d.expert_tokens[1].rows() == 1);
  CHECK(d.origin[0] == std::vector<std::int64_t>{0, 2});
  CHECK(d.origin[1] == std::vector<std::int64_t>{1});
  CHECK(d.dropped.empty());
  CHECK(d.padded_rows() == 0);
  CHECK(d.expert_tokens[0].at(1, 0) == 3.0);
}

TEST_CASE("finite capacity keeps the lowest token indices and drops the rest") {
  const Matrix2D x(2, 1, {1, 2});
  const DispatchedBatch d = dispatch(x, {0, 0}, 1, 1);
  CHECK(d.origin[0] == std::vector<std::int64_t>{0});
  CHECK(d.dropped == std::vector<std::int64_t>{1});
}

TEST_CASE("capacity shortfall is zero padding with origin -1") {
  const Matrix2D x(1, 2, {5, 6});
  const DispatchedBatch d = dispatch(x, {0}, 1, 2);
  CHECK(d.expert_tokens[0].rows() == 2);
  CHECK(d.origin[0] == std::vector<std::int64_t>{0, -1});
  CHECK(d.expert_tokens[0].at(1, 0) == 0.0);
  CHECK(d.padded_rows() == 1);
}

TEST_CASE("combine after an identity expert computation restores the batch") {
  Rng rng(41);
  const Matrix2D x = random_matrix(6, 3, rng);
  const DispatchedBatch d = dispatch(x, {0, 1, 2, 0, 1, 2}, 3);
  const Matrix2D y = combine(d, d.expert_tokens, 3);
  CHECK(max_abs_diff(y, x) == 0.0);
}

TEST_CASE("dropped tokens receive a zero output row") {
  const Matrix2D x(2, 1, {1, 2});
  const DispatchedBatch d = dispatch(x, {0, 0}, 1, 1);
  const Matrix2D y = combine(d, d.expert_tokens, 1);
  CHECK(y.at(0, 0) == 1.0);
  CHECK(y.at(1, 0) == 0.0);
}

TEST_CASE("top-2 combine equals the sum of two top-1 passes") {
  Rng rng(42);
  const std::size_t n = 5, e = 3, din = 3, hid = 4, dout = 2;
  const MoeLayerParams p =
      make_random_params(e, din, hid, dout, ActivationKind::kGelu, rng);
  const Matrix2D x = random_matrix(n, din, rng);
  const RoutingChoice r =
      synthesize_routing(n, e, 2, RoutingDistribution::uniform(), 51);

  const Matrix2D y2 = oracle_forward(x, p, r).y;

  RoutingChoice first{n, e, 1, {r.assignments[0]}};
  RoutingChoice second{n, e, 1, {r.assignments[1]}};
  Matrix2D sum = oracle_forward(x, p, first).y;
  add_inplace(sum, oracle_forward(x, p, second).y);
  CHECK(max_abs_diff(y2, sum) <= 1e-12 * (1.0 + max_abs(sum)));
}

TEST_CASE("combine rejects outputs that do not match the origin map") {
  const Matrix2D x(2, 1, {1, 2});
  const DispatchedBatch d = dispatch(x, {0, 1}, 2);
  std::vector<Matrix2D> outputs = {Matrix2D(2, 1), Matrix2D(1, 1)};
  CHECK_THROWS_AS(combine(d, outputs, 1), ShapeError);  // rows mismatch
  CHECK_THROWS_AS(combine(d, {Matrix2D(1, 1)}, 1), ShapeError);
}

TEST_CASE("capacity zero yields zero output and zero gradients") {
  Rng rng(43);
  const MoeLayerParams p =
      make_random_params(2, 3, 4, 3, ActivationKind::kGelu, rng);
  const Matrix2D x = random_matrix(4, 3, rng);
  const RoutingChoice r =
      synthesize_routing(4, 2, 1, RoutingDistribution::uniform(), 5);
  const OracleForwardResult fw = oracle_forward(x, p, r, 0);
  CHECK(max_abs(fw.y) == 0.0);
  const MoeGrads g = oracle_backward(fw.stash, p, random_matrix(4, 3, rng));
  CHECK(max_abs(g.gw1) == 0.0);
  CHECK(max_abs(g.gb1) == 0.0);
  CHECK(max_abs(g.gw2) == 0.0);
  CHECK(max_abs(g.gb2) == 0.0);
  CHECK(max_abs(g.gx) == 0.0);
}

TEST_CASE("k=1 single expert reduces to one dense MLP pair") {
  Rng rng(44);
  const std::size_t n = 6, din = 3, hid = 5, dout = 2;
  const MoeLayerParams p =
      make_random_params(1, din, hid, dout, ActivationKind::kGelu, rng);
  const Matrix2D x = random_matrix(n, din, rng);
  RoutingChoice r{n, 1, 1, {std::vector<std::int32_t>(n, 0)}};
  const Matrix2D y = oracle_forward(x, p, r).y;

  for (std::size_t t = 0; t < n; ++t) {
    std::vector<double> h(hid);
    for (std::size_t c = 0; c < hid; ++c) {
      double acc = p.b1.at(0, c);
      for (std::size_t i = 0; i < din; ++i) acc += x.at(t, i) * p.w1.at(0, i, c);
      h[c] = activation_value(ActivationKind::kGelu, acc);
    }
    for (std::size_t j = 0; j < dout; ++j) {
      double acc = p.b2.at(0, j);
      for (std::size_t c = 0; c < hid; ++c) acc += h[c] * p.w2.at(0, c, j);
      CHECK(y.at(t, j) == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("oracle and expert-specific paths agree at unbounded capacity") {
  Rng rng(45);
  for (int iter = 0; iter < 40; ++iter) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng.below(24));
    const std::size_t e = 1 + static_cast<std::size_t>(rng.below(6));
    const std::size_t k = 1 + static_cast<std::size_t>(rng.below(std::min<std::size_t>(e, 4)));
    const MoeLayerParams p =
        make_random_params(e, 3, 4, 3, ActivationKind::kGelu, rng);
    const Matrix2D x = random_matrix(n, 3, rng);
    const RoutingChoice r =
        synthesize_routing(n, e, k, RoutingDistribution::uniform(), rng.next_u64());

    const MoeForwardResult es = moe_forward(x, p, r, 4, MoeScheme::kMemoryEfficient);
    const OracleForwardResult oc = oracle_forward(x, p, r);
    CHECK(max_abs_diff(es.y, oc.y) <= 1e-10 * (1.0 + max_abs(oc.y)));

    const Matrix2D g_y = random_matrix(n, 3, rng);
    const MoeGrads got = moe_backward(es.stash, p, g_y, false);
    const MoeGrads want = oracle_backward(oc.stash, p, g_y);
    CHECK(max_abs_diff(got.gw1, want.gw1) <= 1e-10 * (1.0 + max_abs(want.gw1)));
    CHECK(max_abs_diff(got.gb1, want.gb1) <= 1e-10 * (1.0 + max_abs(want.gb1)));
    CHECK(max_abs_diff(got.gw2, want.gw2) <= 1e-10 * (1.0 + max_abs(want.gw2)));
    CHECK(max_abs_diff(got.gb2, want.gb2) <= 1e-10 * (1.0 + max_abs(want.gb2)));
    CHECK(max_abs_diff(got.gx, want.gx) <= 1e-10 * (1.0 + max_abs(want.gx)));
  }
}

TEST_CASE("count_redundancy: balanced routing at factor 1 has no overhead") {
  for (std::size_t k : {std::size_t{1}, std::size_t{2}}) {
    const RoutingChoice r =
        synthesize_routing(32, 8, k, RoutingDistribution::balanced(), 1);
    const RedundancyReport rep = count_redundancy(r, 4, 16, 4, 1.0);
    CHECK(rep.padded_rows == 0);
    CHECK(rep.dropped_tokens == 0);
    CHECK(rep.token_macs_oracle == rep.token_macs_expert_specific);
  }
}

TEST_CASE("count_redundancy: all tokens to one expert drops 3/4 at E=4") {
  const RoutingChoice r =
      synthesize_routing(16, 4, 1, RoutingDistribution::fixed_expert(0), 1);
  const RedundancyReport rep = count_redundancy(r, 2, 4, 2, 1.0);
  CHECK(rep.capacity_per_expert == 4);
  CHECK(rep.dropped_tokens == 12);  // 3/4 of 16
  CHECK(rep.padded_rows == 12);     // three empty experts padded to capacity
}

TEST_CASE("count_redundancy matches brute-force row counting") {
  const std::size_t n = 1024, e = 8, k = 2;
  const RoutingChoice r =
      synthesize_routing(n, e, k, RoutingDistribution::uniform(), 2024);
  const double factor = 1.25;
  const RedundancyReport rep = count_redundancy(r, 8, 32, 8, factor);

  // brute force: bucket every (token, choice) pair
  const std::size_t capacity = static_cast<std::size_t>(
      std::ceil(factor * static_cast<double>(k * n) / e));
  std::vector<std::size_t> load(e, 0);
  for (const auto& a : r.assignments) {
    for (std::int32_t ex : a) ++load[static_cast<std::size_t>(ex)];
  }
  std::uint64_t padded = 0, dropped = 0, rows = 0;
  for (std::size_t ex = 0; ex < e; ++ex) {
    const std::size_t kept = std::min(load[ex], capacity);
    padded += capacity - kept;
    dropped += load[ex] - kept;
    rows += capacity;
  }
  const std::uint64_t per_row = 8 * 32 + 32 * 8;
  CHECK(rep.capacity_per_expert == capacity);
  CHECK(rep.padded_rows == padded);
  CHECK(rep.dropped_tokens == dropped);
  CHECK(rep.token_macs_oracle == rows * per_row);
  CHECK(rep.token_macs_expert_specific ==
        static_cast<std::uint64_t>(k) * n * per_row);
  CHECK(rep.dropped_tokens == 0);  // factor 1.25 leaves headroom whp
  CHECK(rep.token_macs_oracle > rep.token_macs_expert_specific);
}

TEST_CASE("redundancy reports serialize against the shipped schema") {
  const RoutingChoice r =
      synthesize_routing(64, 4, 2, RoutingDistribution::uniform(), 7);
  const RedundancyReport rep = count_redundancy(r, 4, 8, 4, 1.25);
  std::ifstream is(std::string(MOEKIT_SCHEMA_DIR) +
                   "/redundancy_report.schema.json");
  REQUIRE(is.good());
  nlohmann::json schema;
  is >> schema;
  std::string err;
  const bool ok = testsupport::validate_schema(
      schema, nlohmann::json::parse(rep.to_json()), &err);
  INFO(err);
  CHECK(ok);
}

TEST_CASE("count_redundancy rejects nonpositive capacity factors") {
  const RoutingChoice r =
      synthesize_routing(8, 2, 1, RoutingDistribution::uniform(), 1);
  CHECK_THROWS_AS(count_redundancy(r, 2, 2, 2, 0.0), std::invalid_argument);
}
