#include <doctest.h>

#include <cmath>
#include <random>

#include "../common/oracles.hpp"
#include "ircl/encoder.hpp"
#include "support.hpp"

using namespace ircl;

namespace {

struct NaiveOut {
  std::vector<std::vector<double>> last_map;  // per sample: C x H x W, flattened
  std::size_t last_h = 0, last_w = 0, last_c = 0;
  std::vector<std::vector<double>> features;
  std::vector<std::vector<double>> outputs;
};

// Direct loops over output pixels, kernel taps and channels.
NaiveOut naive_forward(const ParameterSet<double>& p, const EncoderConfig& cfg,
                       const RowMatrix<double>& input, std::size_t side) {
  NaiveOut out;
  for (Eigen::Index n = 0; n < input.rows(); ++n) {
    std::vector<double> x(input.row(n).data(), input.row(n).data() + input.cols());
    std::size_t c_in = static_cast<std::size_t>(cfg.input_channels), h = side, w = side;
    for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
      const auto& st = cfg.stages[s];
      const int k = st.kernel, pad = k / 2, stride = st.stride;
      const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (w + 2 * pad - k) / stride + 1;
      const auto& W = p.tensors[2 * s].values;
      const auto& b = p.tensors[2 * s + 1].values;
      std::vector<double> y(st.out_channels * oh * ow);
      for (int o = 0; o < st.out_channels; ++o)
        for (std::size_t r = 0; r < oh; ++r)
          for (std::size_t c = 0; c < ow; ++c) {
            double acc = b[o];
            for (std::size_t ci = 0; ci < c_in; ++ci)
              for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw) {
                  const long ih = static_cast<long>(r * stride) + kh - pad;
                  const long iw = static_cast<long>(c * stride) + kw - pad;
                  if (ih < 0 || iw < 0 || ih >= long(h) || iw >= long(w)) continue;
                  acc += W[((o * c_in + ci) * k + kh) * k + kw] * x[(ci * h + ih) * w + iw];
                }
            y[(o * oh + r) * ow + c] = std::max(acc, 0.0);
          }
      x = std::move(y);
      c_in = st.out_channels;
      h = oh;
      w = ow;
    }
    out.last_map.push_back(x);
    out.last_c = c_in;
    out.last_h = h;
    out.last_w = w;
    std::vector<double> f(c_in);
    for (std::size_t c = 0; c < c_in; ++c) {
      double sum = 0.0;
      for (std::size_t i = 0; i < h * w; ++i) sum += x[c * h * w + i];
      f[c] = sum / static_cast<double>(h * w);
    }
    out.features.push_back(f);
    std::vector<double> a = f;
    const std::size_t first = 2 * cfg.stages.size();
    const std::size_t layers = cfg.projection_hidden > 0 ? 2 : 1;
    for (std::size_t j = 0; j < layers; ++j) {
      const auto& Wt = p.tensors[first + 2 * j];
      const auto& bt = p.tensors[first + 2 * j + 1].values;
      std::vector<double> y(Wt.shape[1]);
      for (std::size_t o = 0; o < Wt.shape[1]; ++o) {
        double acc = bt[o];
        for (std::size_t i = 0; i < Wt.shape[0]; ++i) acc += a[i] * Wt.values[i * Wt.shape[1] + o];
        y[o] = (j + 1 < layers) ? std::max(acc, 0.0) : acc;
      }
      a = std::move(y);
    }
    out.outputs.push_back(a);
  }
  return out;
}

}  // namespace

TEST_CASE("init_parameters shapes and determinism") {
  const auto cfg = EncoderConfig::desk();
  const auto a = init_parameters(cfg, 3);
  const auto b = init_parameters(cfg, 3);
  CHECK(a == b);
  CHECK(!(a == init_parameters(cfg, 4)));
  CHECK(a.at("conv0.weight").shape == std::vector<std::size_t>{16, 3, 3, 3});
  CHECK(a.at("conv2.bias").shape == std::vector<std::size_t>{64});
  CHECK(a.at("head1.weight").shape == std::vector<std::size_t>{64, 32});
  CHECK(a.at("head0.weight").shape == std::vector<std::size_t>{64, 64});
  for (float v : a.at("head0.bias").values) CHECK(v == 0.0f);

  // He normal: sample std of conv1 weights near sqrt(2 / (16*9))
  const auto& w = a.at("conv1.weight").values;
  double sq = 0.0;
  for (float v : w) sq += double(v) * v;
  CHECK(std::sqrt(sq / w.size()) == doctest::Approx(std::sqrt(2.0 / 144.0)).epsilon(0.05));

  const auto ce = EncoderConfig::cross_entropy_classifier();
  CHECK(init_parameters(ce, 0).at("head0.weight").shape == std::vector<std::size_t>{64, 2});
}

TEST_CASE("encoder config text round trip") {
  EncoderConfig c;
  c.stages = {{8, 5, 1}, {12, 3, 2}};
  c.projection_hidden = 0;
  c.embedding_dim = 7;
  c.init_seed = 42;
  CHECK(EncoderConfig::from_text(c.to_text()) == c);
  CHECK(EncoderConfig::from_text(EncoderConfig::desk().to_text()) == EncoderConfig::desk());
  EncoderConfig bad;
  bad.embedding_dim = 1;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

TEST_CASE("forward matches a direct convolution oracle") {
  std::mt19937_64 gen(5);
  for (int trial = 0; trial < 6; ++trial) {
    const auto cfg = oracles::random_config(gen, trial % 3 == 2);
    const std::size_t side = 7 + trial;
    const auto problem = oracles::make_problem(cfg, oracles::Objective::contrastive, 4, side, trial);
    const auto pass = forward(problem.params, cfg, problem.input, side, side);
    const auto naive = naive_forward(problem.params, cfg, problem.input, side);
    REQUIRE(pass.heights.back() == naive.last_h);
    for (std::size_t n = 0; n < 4; ++n) {
      for (std::size_t c = 0; c < naive.features[n].size(); ++c)
        CHECK(pass.features(n, c) == doctest::Approx(naive.features[n][c]).epsilon(1e-12));
      for (std::size_t j = 0; j < naive.outputs[n].size(); ++j)
        CHECK(pass.pre_norm(n, j) == doctest::Approx(naive.outputs[n][j]).epsilon(1e-12));
    }
  }
}

TEST_CASE("pooled feature is the spatial mean of the last activation map") {
  std::mt19937_64 gen(9);
  const auto cfg = EncoderConfig::desk();
  auto problem = oracles::make_problem(cfg, oracles::Objective::contrastive, 3, 16, 2);
  const auto pass = forward(problem.params, cfg, problem.input, 16, 16);
  const auto& last = pass.activations.back();
  const std::size_t plane = pass.heights.back() * pass.widths.back();
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t c = 0; c < 64; ++c) {
      double sum = 0.0;
      for (std::size_t i = 0; i < plane; ++i) sum += last(c, n * plane + i);
      CHECK(pass.features(n, c) == doctest::Approx(sum / plane).epsilon(1e-13));
    }
}

TEST_CASE("forward edge cases") {
  const auto cfg = EncoderConfig::desk();
  auto zero = init_parameters(cfg, 0);
  for (auto& t : zero.tensors) std::fill(t.values.begin(), t.values.end(), 0.0f);
  RowMatrix<float> input = RowMatrix<float>::Zero(2, kPatchElements);
  const auto pass = forward(zero, cfg, input, kPatchSize, kPatchSize);
  CHECK(pass.pre_norm.isZero(0.0));

  // duplicated rows give duplicated outputs
  const auto params = init_parameters(cfg, 1);
  std::mt19937_64 gen(2);
  std::normal_distribution<float> nd;
  RowMatrix<float> x(3, kPatchElements);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = nd(gen);
  x.row(2) = x.row(0);
  const auto p2 = forward(params, cfg, x, kPatchSize, kPatchSize);
  CHECK(p2.pre_norm.row(0) == p2.pre_norm.row(2));

  // same input, identical bits
  CHECK(forward(params, cfg, x, kPatchSize, kPatchSize).pre_norm == p2.pre_norm);

  CHECK_THROWS_AS(forward(params, cfg, RowMatrix<float>(0, kPatchElements), kPatchSize, kPatchSize),
                  InvalidArgument);
  CHECK_THROWS_AS(forward(params, cfg, x, 32, 32), InvalidArgument);
  x(1, 5) = std::nanf("");
  CHECK_THROWS_AS(forward(params, cfg, x, kPatchSize, kPatchSize), NonFiniteValue);
  CHECK_THROWS_AS(forward(params, EncoderConfig::cross_entropy_classifier(), x, kPatchSize, kPatchSize),
                  InvalidArgument);
}

TEST_CASE("backward") {
  std::mt19937_64 gen(13);
  SUBCASE("zero upstream gradient") {
    const auto cfg = EncoderConfig::desk();
    auto problem = oracles::make_problem(cfg, oracles::Objective::contrastive, 3, 12, 1);
    const auto pass = forward(problem.params, cfg, problem.input, 12, 12);
    const RowMatrix<double> zero = RowMatrix<double>::Zero(3, cfg.embedding_dim);
    const auto g = backward(problem.params, cfg, pass, zero);
    for (const auto& t : g.tensors)
      for (double v : t.values) CHECK(v == 0.0);
  }

  SUBCASE("finite differences, contrastive objective") {
    for (int trial = 0; trial < 3; ++trial) {
      const auto cfg = oracles::random_config(gen, false);
      const auto p = oracles::make_problem(cfg, oracles::Objective::contrastive, 6, 9, 100 + trial);
      const auto r = oracles::check_gradients(p, 40, trial);
      CHECK(r.sampled == 40);
      CHECK(r.max_rel_error < 1e-4);
    }
  }

  SUBCASE("finite differences, cross-entropy objective") {
    const auto p = oracles::make_problem(oracles::random_config(gen, true),
                                         oracles::Objective::cross_entropy, 6, 9, 7);
    CHECK(oracles::check_gradients(p, 40, 1).max_rel_error < 1e-4);
  }

  SUBCASE("repeatable to the bit") {
    const auto cfg = EncoderConfig::desk();
    auto problem = oracles::make_problem(cfg, oracles::Objective::contrastive, 4, 16, 3);
    ParameterSet<double> g1, g2;
    oracles::problem_loss(problem, problem.params, &g1);
    oracles::problem_loss(problem, problem.params, &g2);
    CHECK(g1 == g2);
  }
}

TEST_CASE("l2_normalize") {
  const std::vector<double> v{3.0, 4.0};
  const auto z = l2_normalize(v);
  CHECK(z[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(z[1] == doctest::Approx(0.8).epsilon(1e-15));

  const std::vector<double> unit{0.0, 1.0, 0.0};
  CHECK(l2_normalize(unit) == unit);

  std::mt19937_64 gen(1);
  std::normal_distribution<double> nd;
  std::vector<double> r(16), r7(16);
  for (std::size_t i = 0; i < 16; ++i) {
    r[i] = nd(gen);
    r7[i] = 7.0 * r[i];
  }
  const auto a = l2_normalize(r), b = l2_normalize(r7);
  for (std::size_t i = 0; i < 16; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-15));

  CHECK_THROWS_AS(l2_normalize(std::vector<double>(4, 0.0)), DegenerateEmbedding);
}

TEST_CASE("row normalization backward matches finite differences") {
  std::mt19937_64 gen(8);
  std::normal_distribution<double> nd;
  RowMatrix<double> v(3, 5), g(3, 5);
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    v.data()[i] = nd(gen);
    g.data()[i] = nd(gen);
  }
  const auto analytic = l2_normalize_rows_backward(v, g);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    auto plus = v, minus = v;
    plus.data()[i] += h;
    minus.data()[i] -= h;
    const double numeric =
        ((l2_normalize_rows(plus).cwiseProduct(g)).sum() - (l2_normalize_rows(minus).cwiseProduct(g)).sum()) /
        (2 * h);
    CHECK(analytic.data()[i] == doctest::Approx(numeric).epsilon(1e-7));
  }
}

TEST_CASE("embed") {
  const auto cfg = EncoderConfig::desk();
  const auto params = init_parameters(cfg, 0);
  std::mt19937_64 gen(4);
  std::uniform_int_distribution<int> px(7000, 9000);
  std::vector<IRImage> imgs;
  for (int i = 0; i < 5; ++i) {
    auto img = testing::make_image(10 + i, 1, i + 1, 40, 30);
    for (auto& v : img.raw.data) v = static_cast<std::uint16_t>(px(gen));
    imgs.push_back(img);
  }
  imgs.push_back(imgs[0]);
  imgs.back().image_id = 99;
  const PlantStatsTable stats{{1, {1, 128.0, 60.0}}};

  const auto all = embed(params, cfg, imgs, stats);
  REQUIRE(all.size() == imgs.size());
  CHECK(all[0].z == all[5].z);
  CHECK(all[5].image_id == 99);
  for (const auto& e : all) {
    double n = 0.0;
    for (float v : e.z) n += double(v) * v;
    CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(e.z.size() == 32);
  }

  // order and neighbours leave every embedding bit-identical
  std::vector<IRImage> reversed(imgs.rbegin(), imgs.rend());
  const auto rev = embed(params, cfg, reversed, stats);
  for (std::size_t i = 0; i < imgs.size(); ++i) CHECK(rev[imgs.size() - 1 - i].z == all[i].z);
  const auto single = embed(params, cfg, std::span(imgs).subspan(3, 1), stats);
  CHECK(single[0].z == all[3].z);

  const auto feats = embed(params, cfg, imgs, stats, FeatureLevel::pooled_features);
  CHECK(feats[0].z.size() == 64);
}

