#include "ircl/anomaly_index.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "binary_io.hpp"

namespace ircl {

namespace {

constexpr double kUnitTolerance = 1e-6;

double distance(std::span<const float> a, std::span<const float> b) {
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    sq += d * d;
  }
  return std::sqrt(sq);
}

double norm(std::span<const float> v) {
  double sq = 0.0;
  for (float x : v) sq += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(sq);
}

}  // namespace

AnomalyIndex AnomalyIndex::build(std::span<const Embedding> embeddings) {
  if (embeddings.empty()) throw InvalidArgument("cannot build an index from no embeddings");
  AnomalyIndex index;
  index.dim_ = embeddings.front().z.size();
  if (index.dim_ == 0) throw InvalidArgument("embeddings have dimension 0");
  index.rows_.reserve(embeddings.size() * index.dim_);
  for (const auto& e : embeddings) {
    if (e.z.size() != index.dim_) throw InvalidArgument("embeddings of mixed dimensions");
    if (!e.binary_label)
      throw InvalidArgument("index embedding " + std::to_string(e.image_id) + " has no label");
    const double n = norm(e.z);
    if (!(std::abs(n - 1.0) <= kUnitTolerance))
      throw InvalidArgument("index embedding " + std::to_string(e.image_id) + " is not unit norm");
    index.rows_.insert(index.rows_.end(), e.z.begin(), e.z.end());
    index.labels_.push_back(*e.binary_label);
  }
  index.entries_.assign(embeddings.begin(), embeddings.end());
  return index;
}

double AnomalyIndex::anomaly_fraction() const {
  const auto a = std::count(labels_.begin(), labels_.end(), BinaryLabel::anomalous);
  return static_cast<double>(a) / static_cast<double>(labels_.size());
}

NeighborSet AnomalyIndex::query(std::span<const float> z, std::size_t k) const {
  if (k < 1 || k > count())
    throw InvalidArgument("k = " + std::to_string(k) + " outside [1, " + std::to_string(count()) + "]");
  if (z.size() != dim_) throw InvalidArgument("query dimension does not match the index");
  std::vector<std::pair<double, std::size_t>> d(count());
  for (std::size_t i = 0; i < count(); ++i) d[i] = {distance(z, row(i)), i};
  const auto kth = d.begin() + static_cast<std::ptrdiff_t>(k);
  std::partial_sort(d.begin(), kth, d.end());
  NeighborSet out;
  std::size_t anomalous = 0;
  for (auto it = d.begin(); it != kth; ++it) {
    out.distances.push_back(it->first);
    out.indices.push_back(it->second);
    if (labels_[it->second] == BinaryLabel::anomalous) ++anomalous;
  }
  out.anomaly_fraction = static_cast<double>(anomalous) / static_cast<double>(k);
  return out;
}

BinaryLabel classify(double score, double delta) {
  return score > delta ? BinaryLabel::anomalous : BinaryLabel::normal;
}

std::vector<Prediction> predict_batch(const AnomalyIndex& index, std::span<const Embedding> targets,
                                      std::size_t k, double delta) {
  if (!(delta >= 0.0 && delta <= 1.0)) throw InvalidArgument("delta must lie in [0, 1]");
  if (k < 1 || k > index.count())
    throw InvalidArgument("k = " + std::to_string(k) + " outside [1, " +
                          std::to_string(index.count()) + "]");
  std::vector<Prediction> out;
  out.reserve(targets.size());
  for (const auto& t : targets) {
    const auto nb = index.query(t.z, k);
    Prediction p;
    p.image_id = t.image_id;
    p.plant_id = t.plant_id;
    p.module_id = t.module_id;
    p.score = nb.anomaly_fraction;
    p.verdict = classify(p.score, delta);
    p.k = k;
    p.delta = delta;
    p.binary_label = t.binary_label;
    p.fault_class = t.fault_class;
    out.push_back(p);
  }
  return out;
}

std::vector<Prediction> rethreshold(std::span<const Prediction> predictions, double delta) {
  if (!(delta >= 0.0 && delta <= 1.0)) throw InvalidArgument("delta must lie in [0, 1]");
  std::vector<Prediction> out(predictions.begin(), predictions.end());
  for (auto& p : out) {
    p.delta = delta;
    p.verdict = classify(p.score, delta);
  }
  return out;
}

ModuleVerdict aggregate_module(std::span<const Prediction> predictions) {
  if (predictions.empty()) throw InvalidArgument("module has no predictions");
  ModuleVerdict m;
  m.plant_id = predictions.front().plant_id;
  m.module_id = predictions.front().module_id;
  double best = -1.0;
  double sum = 0.0;
  for (const auto& p : predictions) {
    if (p.plant_id != m.plant_id || p.module_id != m.module_id)
      throw InvalidArgument("predictions from different modules");
    ++m.images;
    if (p.verdict == BinaryLabel::anomalous) ++m.anomalous_images;
    sum += p.score;
    if (p.score > best || (p.score == best && p.image_id < m.representative_image)) {
      best = p.score;
      m.representative_image = p.image_id;
    }
    if (p.binary_label && (!m.binary_label || *p.binary_label == BinaryLabel::anomalous))
      m.binary_label = *p.binary_label;
  }
  m.score = sum / static_cast<double>(m.images);
  m.verdict = 2 * m.anomalous_images >= m.images ? BinaryLabel::anomalous : BinaryLabel::normal;
  return m;
}

std::vector<ModuleVerdict> aggregate_modules(std::span<const Prediction> predictions) {
  std::map<ModuleKey, std::vector<Prediction>> groups;
  for (const auto& p : predictions) groups[{p.plant_id, p.module_id}].push_back(p);
  std::vector<ModuleVerdict> out;
  out.reserve(groups.size());
  for (const auto& [key, preds] : groups) out.push_back(aggregate_module(preds));
  return out;
}

// --- k-means compression -------------------------------------------------

namespace {

using Point = std::vector<double>;

double sq_dist(const Point& a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - static_cast<double>(b[i]);
    s += d * d;
  }
  return s;
}

std::vector<Point> lloyd(const AnomalyIndex& index, const std::vector<std::size_t>& members,
                         std::size_t m, Rng& rng) {
  const std::size_t dim = index.dim();
  std::vector<Point> centroids;
  // Farthest-point initialization from a seeded first pick.
  std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
  const auto first = members[pick(rng)];
  const auto r0 = index.row(first);
  centroids.emplace_back(r0.begin(), r0.end());
  std::vector<double> nearest(members.size());
  for (std::size_t i = 0; i < members.size(); ++i) nearest[i] = sq_dist(centroids[0], index.row(members[i]));
  while (centroids.size() < m) {
    std::size_t far = 0;
    for (std::size_t i = 1; i < members.size(); ++i)
      if (nearest[i] > nearest[far]) far = i;
    const auto r = index.row(members[far]);
    centroids.emplace_back(r.begin(), r.end());
    for (std::size_t i = 0; i < members.size(); ++i)
      nearest[i] = std::min(nearest[i], sq_dist(centroids.back(), index.row(members[i])));
  }

  std::vector<std::size_t> assign(members.size());
  for (int iter = 0; iter < 100; ++iter) {
    for (std::size_t i = 0; i < members.size(); ++i) {
      const auto r = index.row(members[i]);
      std::size_t best = 0;
      double best_d = sq_dist(centroids[0], r);
      for (std::size_t c = 1; c < m; ++c) {
        const double d = sq_dist(centroids[c], r);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      assign[i] = best;
    }
    std::vector<Point> sums(m, Point(dim, 0.0));
    std::vector<std::size_t> counts(m, 0);
    for (std::size_t i = 0; i < members.size(); ++i) {
      const auto r = index.row(members[i]);
      for (std::size_t j = 0; j < dim; ++j) sums[assign[i]][j] += r[j];
      ++counts[assign[i]];
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < m; ++c) {
      if (counts[c] == 0) continue;  // empty cluster keeps its centroid
      double sq = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        const double v = sums[c][j] / static_cast<double>(counts[c]);
        sq += (v - centroids[c][j]) * (v - centroids[c][j]);
        centroids[c][j] = v;
      }
      shift = std::max(shift, std::sqrt(sq));
    }
    if (shift < 1e-6) break;
  }
  return centroids;
}

// Largest-remainder split of m over class counts, at least one per present class.
std::vector<std::size_t> allocate(const std::vector<std::size_t>& counts, std::size_t m) {
  const std::size_t total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  std::vector<std::size_t> alloc(counts.size(), 0);
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t used = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) continue;
    const double exact = static_cast<double>(m) * static_cast<double>(counts[c]) / static_cast<double>(total);
    alloc[c] = std::clamp<std::size_t>(static_cast<std::size_t>(std::floor(exact)), 1, counts[c]);
    used += alloc[c];
    rema.push_back({exact - std::floor(exact), c});
  }
  std::stable_sort(rema.begin(), rema.end(), [](auto a, auto b) { return a.first > b.first; });
  while (used < m) {
    bool grew = false;
    for (const auto& [r, c] : rema) {
      if (used == m) break;
      if (alloc[c] < counts[c]) {
        ++alloc[c];
        ++used;
        grew = true;
      }
    }
    if (!grew) break;
  }
  while (used > m) {
    const auto big = std::max_element(alloc.begin(), alloc.end());
    --*big;
    --used;
  }
  return alloc;
}

}  // namespace

AnomalyIndex compress_index(const AnomalyIndex& index, std::size_t m, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> members(2);
  for (std::size_t i = 0; i < index.count(); ++i)
    members[static_cast<std::size_t>(index.label(i))].push_back(i);
  const std::size_t classes = (members[0].empty() ? 0 : 1) + (members[1].empty() ? 0 : 1);
  if (m < classes || m > index.count())
    throw InvalidArgument("cluster count " + std::to_string(m) + " must lie in [" +
                          std::to_string(classes) + ", " + std::to_string(index.count()) + "]");
  const auto alloc = allocate({members[0].size(), members[1].size()}, m);

  Rng rng(seed);
  std::vector<Embedding> out;
  for (std::size_t c = 0; c < 2; ++c) {
    if (alloc[c] == 0) continue;
    for (const auto& centroid : lloyd(index, members[c], alloc[c], rng)) {
      Embedding e;
      e.image_id = out.size();
      e.binary_label = static_cast<BinaryLabel>(c);
      const auto z = l2_normalize(centroid);
      e.z.assign(z.begin(), z.end());
      out.push_back(std::move(e));
    }
  }
  return AnomalyIndex::build(out);
}

// --- embedding store -----------------------------------------------------

namespace {

constexpr std::string_view kStoreMagic = "IREMB";
constexpr std::uint32_t kStoreVersion = 1;
constexpr std::uint8_t kUnlabelled = 255;

}  // namespace

std::string encode_embeddings(std::span<const Embedding> embeddings) {
  const std::size_t dim = embeddings.empty() ? 0 : embeddings.front().z.size();
  detail::ByteWriter w;
  w.put_bytes(kStoreMagic);
  w.put<std::uint32_t>(kStoreVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(dim));
  w.put<std::uint64_t>(embeddings.size());
  for (const auto& e : embeddings) {
    if (e.z.size() != dim) throw InvalidArgument("embeddings of mixed dimensions");
    w.put<std::uint64_t>(e.image_id);
    w.put<std::uint16_t>(e.plant_id);
    w.put<std::uint32_t>(e.module_id);
    w.put<std::uint8_t>(e.binary_label ? static_cast<std::uint8_t>(*e.binary_label) : kUnlabelled);
    w.put<std::uint8_t>(e.fault_class ? static_cast<std::uint8_t>(*e.fault_class) : 0);
    for (float v : e.z) w.put_f32(v);
  }
  return w.take();
}

std::vector<Embedding> decode_embeddings(const std::string& bytes) {
  detail::ByteReader r(bytes, "embedding store");
  if (r.get_bytes(kStoreMagic.size()) != kStoreMagic) throw FormatError("not an embedding store");
  const auto version = r.get<std::uint32_t>();
  if (version != kStoreVersion)
    throw FormatError("unsupported embedding store version " + std::to_string(version));
  const auto dim = r.get<std::uint32_t>();
  const auto count = r.get<std::uint64_t>();
  const std::size_t record = 8 + 2 + 4 + 1 + 1 + 4 * static_cast<std::size_t>(dim);
  if (count > r.remaining() / record) throw FormatError("embedding store: truncated");
  std::vector<Embedding> out;
  out.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Embedding e;
    e.image_id = r.get<std::uint64_t>();
    e.plant_id = r.get<std::uint16_t>();
    e.module_id = r.get<std::uint32_t>();
    const auto label = r.get<std::uint8_t>();
    const auto fault = r.get<std::uint8_t>();
    if (label == 0 || label == 1) e.binary_label = static_cast<BinaryLabel>(label);
    else if (label != kUnlabelled) throw FormatError("embedding store: bad label byte");
    if (fault > kNumFaultClasses) throw FormatError("embedding store: bad fault byte");
    if (fault != 0) e.fault_class = static_cast<FaultClass>(fault);
    e.z.resize(dim);
    for (auto& v : e.z) v = r.get_f32();
    out.push_back(std::move(e));
  }
  if (!r.at_end()) throw FormatError("embedding store: trailing bytes");
  return out;
}

void write_embeddings(const std::filesystem::path& file, std::span<const Embedding> embeddings) {
  detail::write_file_atomic(file, encode_embeddings(embeddings));
}

std::vector<Embedding> read_embeddings(const std::filesystem::path& file) {
  return decode_embeddings(detail::read_file(file));
}

// --- predictions CSV -----------------------------------------------------

namespace {

constexpr std::string_view kPredictionHeader =
    "image_id,plant_id,module_id,score,verdict,k,delta,binary_label,fault_class";

// Shortest text that reads back to the same double.
std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

void write_predictions(const std::filesystem::path& file, std::span<const Prediction> predictions) {
  std::ostringstream out;
  out << kPredictionHeader << '\n';
  for (const auto& p : predictions) {
    out << p.image_id << ',' << p.plant_id << ',' << p.module_id << ',' << format_double(p.score)
        << ',' << label_name(p.verdict) << ',' << p.k << ',' << format_double(p.delta) << ','
        << (p.binary_label ? label_name(*p.binary_label) : "") << ','
        << (p.fault_class ? fault_name(*p.fault_class) : "") << '\n';
  }
  detail::write_file_atomic(file, out.str());
}

std::vector<Prediction> read_predictions(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw NotFound("cannot open " + file.string());
  std::string line;
  if (!std::getline(in, line) || line != kPredictionHeader)
    throw FormatError(file.string() + ": missing predictions header");
  std::vector<Prediction> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    const auto where = file.string() + ":" + std::to_string(lineno);
    if (f.size() != 9) throw FormatError(where + ": expected 9 fields");
    Prediction p;
    try {
      p.image_id = std::stoull(f[0]);
      p.plant_id = static_cast<std::uint16_t>(std::stoul(f[1]));
      p.module_id = static_cast<std::uint32_t>(std::stoul(f[2]));
      p.score = std::stod(f[3]);
      p.k = std::stoull(f[5]);
      p.delta = std::stod(f[6]);
    } catch (const std::logic_error&) {
      throw FormatError(where + ": bad number");
    }
    if (!std::isfinite(p.score) || p.score < 0.0 || p.score > 1.0)
      throw FormatError(where + ": score outside [0, 1]");
    const auto verdict = parse_binary_label(f[4]);
    if (!verdict) throw FormatError(where + ": bad verdict");
    p.verdict = *verdict;
    if (!f[7].empty()) {
      p.binary_label = parse_binary_label(f[7]);
      if (!p.binary_label) throw FormatError(where + ": bad binary_label");
    }
    if (!f[8].empty()) {
      p.fault_class = parse_fault_class(f[8]);
      if (!p.fault_class) throw FormatError(where + ": bad fault_class");
    }
    out.push_back(p);
  }
  return out;
}

}  // namespace ircl
