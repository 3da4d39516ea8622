#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "mlpinn/nets.hpp"
#include "oracles.hpp"

using namespace mlpinn;

TEST_SUITE_BEGIN("nets");

TEST_CASE("same seed gives bitwise-identical parameters") {
  FourierNetSpec f{.input_dim = 2,
                   .embeddings = {{.sigma = 2.0, .num_features = 16}},
                   .extractor_hidden = {24, 24},
                   .dense_width = 24};
  Network a = init_network(NetworkSpec{f}, 123);
  Network b = init_network(NetworkSpec{f}, 123);
  CHECK(a.params() == b.params());
  const auto& ea = std::get<FourierNetSpec>(a.spec()).embeddings[0].wavenumbers;
  const auto& eb = std::get<FourierNetSpec>(b.spec()).embeddings[0].wavenumbers;
  CHECK(ea == eb);

  Network c = init_network(NetworkSpec{f}, 124);
  CHECK_FALSE(a.params() == c.params());
}

TEST_CASE("glorot variance within 20% on a width-200 layer") {
  MlpSpec s{.input_dim = 200, .hidden = {200}};
  Network net = init_network(NetworkSpec{s}, 7);
  auto w = net.params().slice("layer0.weight");
  double mean = 0.0;
  for (double v : w) mean += v;
  mean /= double(w.size());
  double var = 0.0;
  for (double v : w) var += (v - mean) * (v - mean);
  var /= double(w.size() - 1);
  const double want = 2.0 / (200.0 + 200.0);
  CHECK(var > 0.8 * want);
  CHECK(var < 1.2 * want);

  auto b = net.params().slice("layer0.bias");
  for (double v : b) CHECK(v == 0.0);
}

TEST_CASE("fourier spec shapes: m=100, n=2 gives B 100x2 and embedded dim 200") {
  FourierNetSpec f{.input_dim = 2,
                   .embeddings = {{.sigma = 1.0, .num_features = 100}},
                   .extractor_hidden = {200},
                   .dense_width = 200};
  Network net = init_network(NetworkSpec{f}, 3);
  const auto& e = std::get<FourierNetSpec>(net.spec()).embeddings[0];
  CHECK(e.wavenumbers.size() == 200);  // 100 x 2
  auto emb = embed(std::vector<double>{0.3, 0.4}, e);
  CHECK(emb.size() == 200);
}

TEST_CASE("embedding hand values") {
  SUBCASE("B = 0 gives (1,...,1,0,...,0)") {
    FourierEmbeddingSpec e{.sigma = 1.0, .num_features = 3, .wavenumbers = {0, 0, 0, 0, 0, 0}};
    auto v = embed(std::vector<double>{0.7, -0.2}, e);
    for (int j = 0; j < 3; ++j) CHECK(v[j] == 1.0);
    for (int j = 3; j < 6; ++j) CHECK(v[j] == 0.0);
  }
  SUBCASE("x = 0 gives (1,...,1,0,...,0)") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> d(0.0, 3.0);
    FourierEmbeddingSpec e{.sigma = 3.0, .num_features = 4};
    e.wavenumbers.resize(8);
    for (double& w : e.wavenumbers) w = d(rng);
    auto v = embed(std::vector<double>{0.0, 0.0}, e);
    for (int j = 0; j < 4; ++j) CHECK(v[j] == 1.0);
    for (int j = 4; j < 8; ++j) CHECK(v[j] == 0.0);
  }
  SUBCASE("single feature row (2pi, 0) at x = (0.25, 0.9)") {
    FourierEmbeddingSpec e{.sigma = 1.0, .num_features = 1,
                           .wavenumbers = {2.0 * std::numbers::pi, 0.0}};
    auto v = embed(std::vector<double>{0.25, 0.9}, e);
    CHECK(std::abs(v[0]) < 1e-15);  // cos(pi/2)
    CHECK(v[1] == doctest::Approx(1.0).epsilon(1e-15));
  }
}

TEST_CASE("embedding periodicity under B delta in 2 pi Z") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> d(0.0, 2.0);
  FourierEmbeddingSpec e{.sigma = 2.0, .num_features = 1};
  e.wavenumbers = {d(rng), d(rng)};
  const double b0 = e.wavenumbers[0], b1 = e.wavenumbers[1];
  const double nb2 = b0 * b0 + b1 * b1;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> x{u(rng), u(rng)};
    for (int k = 1; k <= 3; ++k) {
      const double c = 2.0 * std::numbers::pi * k / nb2;
      std::vector<double> xs{x[0] + c * b0, x[1] + c * b1};
      auto v0 = embed(x, e);
      auto v1 = embed(xs, e);
      for (size_t j = 0; j < v0.size(); ++j) CHECK(v0[j] == doctest::Approx(v1[j]).epsilon(1e-9));
    }
  }
}

TEST_CASE("embedding boundedness by the scaling vector") {
  std::mt19937_64 rng(14);
  std::normal_distribution<double> d(0.0, 5.0);
  FourierEmbeddingSpec e{.sigma = 5.0, .num_features = 8, .scale = {1, 2, 3, 4, 5, 6, 7, 8}};
  e.wavenumbers.resize(16);
  for (double& w : e.wavenumbers) w = d(rng);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> x{u(rng), u(rng)};
    auto v = embed(x, e);
    for (int j = 0; j < 8; ++j) {
      CHECK(std::abs(v[j]) <= e.scale[j] + 1e-12);
      CHECK(std::abs(v[8 + j]) <= e.scale[j] + 1e-12);
    }
  }
}

TEST_CASE("fourier net parameter count excludes wavenumbers") {
  FourierNetSpec f{.input_dim = 2,
                   .embeddings = {{.sigma = 1.0, .num_features = 10},
                                  {.sigma = 5.0, .num_features = 10}},
                   .extractor_hidden = {30, 20},
                   .dense_width = 25};
  NetworkSpec spec{f};
  Network net = init_network(spec, 2);
  // extractor: 20->30, 30->20; dense: 40->25; output: 25->1
  const size_t want = (20 * 30 + 30) + (30 * 20 + 20) + (40 * 25 + 25) + (25 * 1 + 1);
  CHECK(parameter_count(spec) == want);
  CHECK(net.params().size() == want);
}

TEST_CASE("wavenumber matrix is not trainable state") {
  FourierNetSpec f{.input_dim = 2,
                   .embeddings = {{.sigma = 1.0, .num_features = 8}},
                   .extractor_hidden = {12},
                   .dense_width = 12};
  Network net = init_network(NetworkSpec{f}, 11);
  const auto before = std::get<FourierNetSpec>(net.spec()).embeddings[0].wavenumbers;
  // Mutating every trainable parameter must leave the wavenumbers untouched.
  for (double& v : net.params().values()) v += 0.5;
  const auto& after = std::get<FourierNetSpec>(net.spec()).embeddings[0].wavenumbers;
  CHECK(before == after);
}

TEST_CASE("fourier net value path matches embed + extractor oracle") {
  // Cross-check the graph emission against a direct numeric evaluation.
  FourierNetSpec f{.input_dim = 2,
                   .embeddings = {{.sigma = 1.5, .num_features = 6},
                                  {.sigma = 4.0, .num_features = 6}},
                   .extractor_hidden = {10, 9},
                   .dense_width = 8};
  Network net = init_network(NetworkSpec{f}, 21);
  const auto& spec = std::get<FourierNetSpec>(net.spec());
  const auto& ps = net.params();

  auto dense_apply = [&](const std::string& name, std::span<const double> in, size_t out,
                         bool act) {
    auto w = ps.slice(name + ".weight");
    auto b = ps.slice(name + ".bias");
    std::vector<double> z(out);
    for (size_t r = 0; r < out; ++r) {
      double acc = b[r];
      for (size_t j = 0; j < in.size(); ++j) acc += w[r * in.size() + j] * in[j];
      z[r] = act ? std::tanh(acc) : acc;
    }
    return z;
  };

  std::mt19937_64 rng(33);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 10; ++t) {
    std::vector<double> x{u(rng), u(rng)};
    std::vector<double> concat;
    for (const auto& e : spec.embeddings) {
      std::vector<double> h = embed(x, e);
      size_t in = h.size();
      for (size_t l = 0; l < spec.extractor_hidden.size(); ++l) {
        h = dense_apply("extractor.layer" + std::to_string(l), h, spec.extractor_hidden[l], true);
        in = h.size();
      }
      concat.insert(concat.end(), h.begin(), h.end());
      (void)in;
    }
    auto d = dense_apply("dense", concat, spec.dense_width, true);
    auto o = dense_apply("output", d, 1, false);
    CHECK(oracle::rel_err(net.value(x), o[0]) < 1e-13);
  }
}

TEST_CASE("parameter snapshot round-trips") {
  MlpSpec s{.input_dim = 2, .hidden = {5, 4}};
  Network net = init_network(NetworkSpec{s}, 55);
  const std::string path = "params_roundtrip_test.txt";
  net.params().save(path);
  ParameterStore back = ParameterStore::load(path);
  CHECK(back == net.params());
  CHECK(back.slices().size() == net.params().slices().size());
  std::remove(path.c_str());
}

TEST_CASE("invalid specs are rejected") {
  CHECK_THROWS(init_network(NetworkSpec{MlpSpec{.input_dim = 2, .hidden = {}}}, 1));
  CHECK_THROWS(init_network(NetworkSpec{MlpSpec{.input_dim = 0, .hidden = {4}}}, 1));
  FourierNetSpec bad{.input_dim = 2,
                     .embeddings = {{.sigma = -1.0, .num_features = 4}},
                     .extractor_hidden = {8},
                     .dense_width = 8};
  CHECK_THROWS(init_network(NetworkSpec{bad}, 1));
  FourierNetSpec mixed{.input_dim = 2,
                       .embeddings = {{.sigma = 1.0, .num_features = 4},
                                      {.sigma = 2.0, .num_features = 8}},
                       .extractor_hidden = {8},
                       .dense_width = 8};
  CHECK_THROWS(init_network(NetworkSpec{mixed}, 1));
}

TEST_SUITE_END();
