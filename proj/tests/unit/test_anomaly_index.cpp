#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <random>

#include "../common/oracles.hpp"
#include "ircl/anomaly_index.hpp"
#include "support.hpp"

using namespace ircl;

namespace {

std::vector<Embedding> random_store(std::mt19937_64& gen, std::size_t n, std::size_t d,
                                    double anomaly_rate) {
  std::bernoulli_distribution anomalous(anomaly_rate);
  std::vector<Embedding> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(testing::make_embedding(i, testing::random_unit(gen, d),
                                          anomalous(gen) ? BinaryLabel::anomalous : BinaryLabel::normal));
  return out;
}

Prediction pred(std::uint64_t id, std::uint32_t module, double score, double delta = 0.1) {
  Prediction p;
  p.image_id = id;
  p.plant_id = 1;
  p.module_id = module;
  p.score = score;
  p.verdict = classify(score, delta);
  p.delta = delta;
  return p;
}

}  // namespace

TEST_CASE("build") {
  std::mt19937_64 gen(1);
  const auto one = random_store(gen, 1, 8, 0.0);
  CHECK(AnomalyIndex::build(one).count() == 1);
  CHECK(AnomalyIndex::build(one).dim() == 8);

  auto unlabelled = random_store(gen, 3, 8, 0.5);
  unlabelled[1].binary_label.reset();
  CHECK_THROWS_AS(AnomalyIndex::build(unlabelled), InvalidArgument);

  auto long_vec = random_store(gen, 3, 8, 0.5);
  long_vec[2].z[0] *= 1.5f;
  CHECK_THROWS_AS(AnomalyIndex::build(long_vec), InvalidArgument);

  auto mixed = random_store(gen, 3, 8, 0.5);
  mixed[1].z = testing::random_unit(gen, 4);
  CHECK_THROWS_AS(AnomalyIndex::build(mixed), InvalidArgument);
  CHECK_THROWS_AS(AnomalyIndex::build({}), InvalidArgument);
}

TEST_CASE("query") {
  std::mt19937_64 gen(2);
  const auto store = random_store(gen, 200, 8, 0.3);
  const auto index = AnomalyIndex::build(store);

  SUBCASE("self match") {
    for (std::size_t i : {0u, 57u, 199u}) {
      const auto nb = index.query(store[i].z, 1);
      CHECK(nb.indices[0] == i);
      CHECK(nb.distances[0] == 0.0);
      CHECK(nb.anomaly_fraction == (store[i].binary_label == BinaryLabel::anomalous ? 1.0 : 0.0));
    }
  }

  SUBCASE("k = count gives the overall fraction") {
    const auto nb = index.query(testing::random_unit(gen, 8), index.count());
    CHECK(nb.anomaly_fraction == index.anomaly_fraction());
  }

  SUBCASE("exhaustive sort oracle") {
    for (int q = 0; q < 200; ++q) {
      const auto z = testing::random_unit(gen, 8);
      const auto nb = index.query(z, 10);
      const auto brute = oracles::brute_knn(store, z, 10);
      CHECK(nb.indices == brute.indices);
      CHECK(nb.distances == brute.distances);
      CHECK(nb.anomaly_fraction == brute.fraction);
    }
  }

  SUBCASE("ties go to the lower index") {
    auto dup = store;
    dup.push_back(store[5]);
    dup.back().image_id = 999;
    dup.insert(dup.begin(), store[5]);
    const auto idx = AnomalyIndex::build(dup);
    const auto nb = idx.query(store[5].z, 3);
    CHECK(nb.indices[0] == 0);
    CHECK(nb.indices[1] == 6);
    CHECK(nb.indices[2] == dup.size() - 1);
  }

  SUBCASE("cosine and euclidean rankings agree on the sphere") {
    for (int q = 0; q < 50; ++q) {
      const auto z = testing::random_unit(gen, 8);
      std::vector<std::pair<double, std::size_t>> by_cos;
      for (std::size_t i = 0; i < store.size(); ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < 8; ++j) dot += double(z[j]) * store[i].z[j];
        by_cos.emplace_back(-dot, i);
      }
      std::sort(by_cos.begin(), by_cos.end());
      const auto nb = index.query(z, 20);
      for (std::size_t r = 0; r < 20; ++r) CHECK(nb.indices[r] == by_cos[r].second);
    }
  }

  CHECK_THROWS_AS(index.query(store[0].z, 0), InvalidArgument);
  CHECK_THROWS_AS(index.query(store[0].z, 201), InvalidArgument);
  CHECK_THROWS_AS(index.query(testing::random_unit(gen, 3), 1), InvalidArgument);
}

TEST_CASE("classify") {
  CHECK(classify(0.11, 0.1) == BinaryLabel::anomalous);
  CHECK(classify(0.10, 0.1) == BinaryLabel::normal);
  CHECK(classify(0.0, 0.0) == BinaryLabel::normal);
  CHECK(classify(0.0, 0.5) == BinaryLabel::normal);
  CHECK(classify(1.0, 1.0) == BinaryLabel::normal);
  // monotone in score, antitone in delta
  for (int s = 0; s <= 20; ++s)
    for (int d = 0; d <= 20; ++d) {
      const double score = s / 20.0, delta = d / 20.0;
      if (classify(score, delta) == BinaryLabel::anomalous) {
        CHECK(classify(std::min(1.0, score + 0.05), delta) == BinaryLabel::anomalous);
        CHECK(classify(score, std::max(0.0, delta - 0.05)) == BinaryLabel::anomalous);
      }
    }
}

TEST_CASE("predict_batch") {
  std::mt19937_64 gen(3);
  auto index_store = random_store(gen, 150, 6, 0.0);
  const auto normal_index = AnomalyIndex::build(index_store);
  CHECK(predict_batch(normal_index, {}).empty());
  const auto targets = random_store(gen, 20, 6, 0.5);
  for (const auto& p : predict_batch(normal_index, targets, 100, 0.1)) {
    CHECK(p.score == 0.0);
    CHECK(p.verdict == BinaryLabel::normal);
  }

  // 100 neighbours, 11 of them anomalous: the 11 rows closest to the query are anomalous
  std::vector<Embedding> planted;
  const auto q = testing::random_unit(gen, 6);
  for (std::size_t i = 0; i < 150; ++i) {
    auto z = testing::random_unit(gen, 6);
    if (i < 11) {
      for (std::size_t j = 0; j < 6; ++j) z[j] = q[j] + 1e-3f * z[j];
      std::vector<double> zd(z.begin(), z.end());
      const auto n = l2_normalize(zd);
      z.assign(n.begin(), n.end());
    } else {
      for (std::size_t j = 0; j < 6; ++j) z[j] = -q[j] + 0.5f * z[j];
      std::vector<double> zd(z.begin(), z.end());
      const auto n = l2_normalize(zd);
      z.assign(n.begin(), n.end());
    }
    planted.push_back(testing::make_embedding(i, z, i < 11 ? BinaryLabel::anomalous : BinaryLabel::normal));
  }
  const auto idx = AnomalyIndex::build(planted);
  const std::vector<Embedding> one{testing::make_embedding(7, q, BinaryLabel::normal, 3)};
  const auto p = predict_batch(idx, one, 100, 0.1);
  CHECK(p[0].score == doctest::Approx(0.11).epsilon(1e-15));
  CHECK(p[0].verdict == BinaryLabel::anomalous);
  CHECK(p[0].module_id == 3);
  CHECK(p[0].binary_label == BinaryLabel::normal);

  const auto r = rethreshold(p, 0.2);
  CHECK(r[0].score == p[0].score);
  CHECK(r[0].verdict == BinaryLabel::normal);
  CHECK_THROWS_AS(rethreshold(p, 1.5), InvalidArgument);
  CHECK_THROWS_AS(predict_batch(idx, one, 151), InvalidArgument);
}

TEST_CASE("predict_batch matches the oracle on random queries") {
  std::mt19937_64 gen(4);
  std::uniform_int_distribution<std::size_t> dims(2, 16), sizes(20, 300);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t d = dims(gen);
    const auto store = random_store(gen, sizes(gen), d, 0.2);
    const auto index = AnomalyIndex::build(store);
    const auto targets = random_store(gen, 100, d, 0.5);
    const std::size_t k = std::min<std::size_t>(1 + gen() % 30, store.size());
    const auto preds = predict_batch(index, targets, k, 0.1);
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const auto b = oracles::brute_knn(store, targets[i].z, k);
      CHECK(preds[i].score == b.fraction);
      CHECK(preds[i].verdict == (b.fraction > 0.1 ? BinaryLabel::anomalous : BinaryLabel::normal));
    }
  }
}

TEST_CASE("module aggregation") {
  std::vector<Prediction> half, short_of_half;
  for (int i = 0; i < 40; ++i) {
    half.push_back(pred(i, 4, i < 20 ? 0.5 : 0.0));
    short_of_half.push_back(pred(i, 4, i < 19 ? 0.5 : 0.0));
  }
  CHECK(aggregate_module(half).verdict == BinaryLabel::anomalous);
  CHECK(aggregate_module(short_of_half).verdict == BinaryLabel::normal);
  CHECK(aggregate_module(half).score == doctest::Approx(0.25));
  CHECK(aggregate_module(half).anomalous_images == 20);

  for (double s : {0.0, 0.3}) {
    const std::vector<Prediction> single{pred(1, 2, s)};
    CHECK(aggregate_module(single).verdict == single[0].verdict);
  }

  std::vector<Prediction> mixed{pred(1, 1, 0.4), pred(2, 1, 0.9), pred(3, 1, 0.9)};
  mixed[0].binary_label = BinaryLabel::normal;
  mixed[1].binary_label = BinaryLabel::anomalous;
  auto m = aggregate_module(mixed);
  CHECK(m.representative_image == 2);
  CHECK(m.binary_label == BinaryLabel::anomalous);

  // permutation invariance
  std::mt19937_64 gen(5);
  std::vector<Prediction> many;
  for (int i = 0; i < 15; ++i) many.push_back(pred(i, 9, (gen() % 10) / 10.0));
  const auto ref = aggregate_module(many);
  for (int t = 0; t < 20; ++t) {
    std::shuffle(many.begin(), many.end(), gen);
    const auto a = aggregate_module(many);
    CHECK(a.verdict == ref.verdict);
    CHECK(a.score == doctest::Approx(ref.score).epsilon(1e-15));
    CHECK(a.representative_image == ref.representative_image);
  }

  CHECK_THROWS_AS(aggregate_module({}), InvalidArgument);
  std::vector<Prediction> two_modules{pred(1, 1, 0.0), pred(2, 2, 0.0)};
  CHECK_THROWS_AS(aggregate_module(two_modules), InvalidArgument);
  const auto grouped = aggregate_modules(two_modules);
  REQUIRE(grouped.size() == 2);
  CHECK(grouped[0].module_id == 1);
  CHECK(grouped[1].module_id == 2);
}

TEST_CASE("compress_index") {
  std::mt19937_64 gen(6);

  SUBCASE("m = count keeps every (direction, label) pair") {
    const auto store = random_store(gen, 40, 5, 0.3);
    const auto index = AnomalyIndex::build(store);
    const auto c = compress_index(index, index.count(), 1);
    REQUIRE(c.count() == index.count());
    std::vector<bool> used(c.count(), false);
    for (std::size_t i = 0; i < index.count(); ++i) {
      bool found = false;
      for (std::size_t j = 0; j < c.count() && !found; ++j) {
        if (used[j] || c.label(j) != index.label(i)) continue;
        double err = 0.0;
        for (std::size_t t = 0; t < 5; ++t) err = std::max(err, std::abs(double(c.row(j)[t]) - index.row(i)[t]));
        if (err < 1e-6) used[j] = found = true;
      }
      CHECK(found);
    }
  }

  SUBCASE("planted blobs") {
    const std::size_t d = 6;
    std::vector<std::vector<float>> centers;
    for (int b = 0; b < 4; ++b) centers.push_back(testing::random_unit(gen, d));
    std::normal_distribution<double> jitter(0.0, 0.02);
    std::vector<Embedding> store;
    std::vector<std::vector<double>> sums(4, std::vector<double>(d, 0.0));
    for (int i = 0; i < 200; ++i) {
      const int b = i % 4;
      std::vector<double> v(d);
      for (std::size_t j = 0; j < d; ++j) v[j] = centers[b][j] + jitter(gen);
      const auto z = l2_normalize(v);
      std::vector<float> zf(z.begin(), z.end());
      for (std::size_t j = 0; j < d; ++j) sums[b][j] += zf[j];
      store.push_back(testing::make_embedding(i, zf, b < 2 ? BinaryLabel::normal : BinaryLabel::anomalous));
    }
    // Make sure the blobs are far apart before using them as an oracle.
    for (int a = 0; a < 4; ++a)
      for (int b = a + 1; b < 4; ++b) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += centers[a][j] * centers[b][j];
        REQUIRE(dot < 0.8);
      }
    const auto c = compress_index(AnomalyIndex::build(store), 4, 3);
    REQUIRE(c.count() == 4);
    CHECK(c.anomaly_fraction() == 0.5);
    for (int b = 0; b < 4; ++b) {
      const auto want = l2_normalize(sums[b]);
      double best = 1e9;
      for (std::size_t j = 0; j < 4; ++j) {
        if (c.label(j) != (b < 2 ? BinaryLabel::normal : BinaryLabel::anomalous)) continue;
        double err = 0.0;
        for (std::size_t t = 0; t < d; ++t) err = std::max(err, std::abs(c.row(j)[t] - want[t]));
        best = std::min(best, err);
      }
      CHECK(best < 1e-3);
    }
  }

  SUBCASE("deterministic and validated") {
    const auto store = random_store(gen, 100, 4, 0.2);
    const auto index = AnomalyIndex::build(store);
    const auto a = compress_index(index, 10, 7), b = compress_index(index, 10, 7);
    REQUIRE(a.count() == 10);
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(a.entry(i).z == b.entry(i).z);
      CHECK(a.label(i) == b.label(i));
    }
    CHECK_THROWS_AS(compress_index(index, 101, 0), InvalidArgument);
    CHECK_THROWS_AS(compress_index(index, 1, 0), InvalidArgument);
  }
}

TEST_CASE("embedding store and predictions files") {
  std::mt19937_64 gen(7);
  auto store = random_store(gen, 5, 3, 0.4);
  store[1].fault_class = FaultClass::Pid;
  store[1].binary_label = BinaryLabel::anomalous;
  store[2].binary_label.reset();
  store[3].plant_id = 9;
  store[3].module_id = 123456;
  const auto bytes = encode_embeddings(store);
  CHECK(bytes.substr(0, 5) == "IREMB");
  // header 5 + 4 + 4 + 8, record 8 + 2 + 4 + 1 + 1 + 3*4
  CHECK(bytes.size() == 21 + 5 * 28);
  const auto back = decode_embeddings(bytes);
  REQUIRE(back.size() == store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    CHECK(back[i].image_id == store[i].image_id);
    CHECK(back[i].plant_id == store[i].plant_id);
    CHECK(back[i].module_id == store[i].module_id);
    CHECK(back[i].binary_label == store[i].binary_label);
    CHECK(back[i].fault_class == store[i].fault_class);
    CHECK(back[i].z == store[i].z);
  }
  CHECK_THROWS_AS(decode_embeddings(bytes.substr(0, bytes.size() - 1)), FormatError);
  CHECK_THROWS_AS(decode_embeddings("IREMX" + bytes.substr(5)), FormatError);

  testing::TempDir dir;
  write_embeddings(dir / "e.bin", store);
  CHECK(encode_embeddings(read_embeddings(dir / "e.bin")) == bytes);

  std::vector<Prediction> preds{pred(1, 1, 0.13), pred(2, 1, 1.0 / 3.0), pred(3, 2, 0.0)};
  preds[0].binary_label = BinaryLabel::anomalous;
  preds[0].fault_class = FaultClass::CmPlus;
  preds[1].binary_label = BinaryLabel::normal;
  write_predictions(dir / "p.csv", preds);
  const auto pb = read_predictions(dir / "p.csv");
  REQUIRE(pb.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(pb[i].image_id == preds[i].image_id);
    CHECK(pb[i].score == preds[i].score);
    CHECK(pb[i].verdict == preds[i].verdict);
    CHECK(pb[i].binary_label == preds[i].binary_label);
    CHECK(pb[i].fault_class == preds[i].fault_class);
    CHECK(pb[i].k == preds[i].k);
    CHECK(pb[i].delta == preds[i].delta);
  }
  std::ofstream(dir / "bad.csv") << "image_id,plant_id\n1,2\n";
  CHECK_THROWS_AS(read_predictions(dir / "bad.csv"), FormatError);
}
