#include "ircl/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace ircl {

// --- config --------------------------------------------------------------

void EncoderConfig::validate() const {
  if (input_channels < 1) throw InvalidArgument("input_channels must be at least 1");
  for (const auto& s : stages)
    if (s.out_channels < 1 || s.kernel < 1 || s.stride < 1)
      throw InvalidArgument("conv stage widths, kernels and strides must be at least 1");
  if (projection_hidden < 0) throw InvalidArgument("projection_hidden must be non-negative");
  if (embedding_dim < 2) throw InvalidArgument("embedding_dim must be at least 2");
}

std::string EncoderConfig::to_text() const {
  std::ostringstream out;
  out << "encoder.input_channels=" << input_channels << '\n';
  out << "encoder.stages=";
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (i) out << ',';
    out << stages[i].out_channels << ':' << stages[i].kernel << ':' << stages[i].stride;
  }
  out << '\n';
  out << "encoder.projection_hidden=" << projection_hidden << '\n';
  out << "encoder.embedding_dim=" << embedding_dim << '\n';
  out << "encoder.init_seed=" << init_seed << '\n';
  return out.str();
}

EncoderConfig EncoderConfig::from_text(const std::string& text) {
  EncoderConfig c;
  std::istringstream in(text);
  std::string line;
  bool saw_stages = false;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key.rfind("encoder.", 0) != 0) continue;
    try {
      if (key == "encoder.input_channels") c.input_channels = std::stoi(value);
      else if (key == "encoder.projection_hidden") c.projection_hidden = std::stoi(value);
      else if (key == "encoder.embedding_dim") c.embedding_dim = std::stoi(value);
      else if (key == "encoder.init_seed") c.init_seed = std::stoull(value);
      else if (key == "encoder.stages") {
        saw_stages = true;
        c.stages.clear();
        std::istringstream ss(value);
        std::string item;
        while (std::getline(ss, item, ',')) {
          ConvStage st;
          char sep1 = 0, sep2 = 0;
          std::istringstream is(item);
          if (!(is >> st.out_channels >> sep1 >> st.kernel >> sep2 >> st.stride) || sep1 != ':' ||
              sep2 != ':')
            throw FormatError("bad conv stage '" + item + "'");
          c.stages.push_back(st);
        }
      } else {
        throw FormatError("unknown encoder key '" + key + "'");
      }
    } catch (const std::logic_error&) {
      throw FormatError("bad value for '" + key + "'");
    }
  }
  if (!saw_stages) throw FormatError("encoder config lacks encoder.stages");
  c.validate();
  return c;
}

EncoderConfig EncoderConfig::desk() { return EncoderConfig{}; }

EncoderConfig EncoderConfig::cross_entropy_classifier() {
  EncoderConfig c;
  c.projection_hidden = 0;
  c.embedding_dim = 2;
  return c;
}

// --- parameter sets ------------------------------------------------------

template <typename T>
const NamedTensor<T>& ParameterSet<T>::at(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw NotFound("no parameter tensor named " + name);
}

template <typename T>
NamedTensor<T>& ParameterSet<T>::at(const std::string& name) {
  for (auto& t : tensors)
    if (t.name == name) return t;
  throw NotFound("no parameter tensor named " + name);
}

template <typename T>
std::size_t ParameterSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

template <typename T>
bool ParameterSet<T>::same_layout(const ParameterSet& other) const {
  if (tensors.size() != other.tensors.size()) return false;
  for (std::size_t i = 0; i < tensors.size(); ++i)
    if (tensors[i].name != other.tensors[i].name || tensors[i].shape != other.tensors[i].shape ||
        tensors[i].size() != other.tensors[i].size())
      return false;
  return true;
}

template <typename T>
bool ParameterSet<T>::all_finite() const {
  for (const auto& t : tensors)
    for (T v : t.values)
      if (!std::isfinite(v)) return false;
  return true;
}

template <typename T>
ParameterSet<T> ParameterSet<T>::zeros_like() const {
  ParameterSet out = *this;
  for (auto& t : out.tensors) std::fill(t.values.begin(), t.values.end(), T{0});
  return out;
}

template <typename T>
template <typename U>
ParameterSet<U> ParameterSet<T>::cast() const {
  ParameterSet<U> out;
  out.tensors.reserve(tensors.size());
  for (const auto& t : tensors)
    out.tensors.push_back({t.name, t.shape, TensorValues<U>(t.values.begin(), t.values.end())});
  return out;
}

template struct ParameterSet<float>;
template struct ParameterSet<double>;
template ParameterSet<double> ParameterSet<float>::cast<double>() const;
template ParameterSet<float> ParameterSet<double>::cast<float>() const;
template ParameterSet<float> ParameterSet<float>::cast<float>() const;
template ParameterSet<double> ParameterSet<double>::cast<double>() const;

EncoderParameters init_parameters(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  EncoderParameters params;
  const auto add = [&](std::string name, std::vector<std::size_t> shape, std::size_t fan_in,
                       bool random) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    NamedTensor<float> t{std::move(name), std::move(shape), TensorValues<float>(n, 0.0f)};
    if (random) {
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
      for (auto& v : t.values) v = static_cast<float>(dist(rng));
    }
    params.tensors.push_back(std::move(t));
  };
  std::size_t in_ch = static_cast<std::size_t>(config.input_channels);
  for (std::size_t s = 0; s < config.stages.size(); ++s) {
    const auto& st = config.stages[s];
    const auto out = static_cast<std::size_t>(st.out_channels);
    const auto k = static_cast<std::size_t>(st.kernel);
    add("conv" + std::to_string(s) + ".weight", {out, in_ch, k, k}, in_ch * k * k, true);
    add("conv" + std::to_string(s) + ".bias", {out}, 0, false);
    in_ch = out;
  }
  std::vector<std::size_t> widths{static_cast<std::size_t>(config.feature_dim())};
  if (config.projection_hidden > 0) widths.push_back(static_cast<std::size_t>(config.projection_hidden));
  widths.push_back(static_cast<std::size_t>(config.embedding_dim));
  for (std::size_t j = 0; j + 1 < widths.size(); ++j) {
    add("head" + std::to_string(j) + ".weight", {widths[j], widths[j + 1]}, widths[j], true);
    add("head" + std::to_string(j) + ".bias", {widths[j + 1]}, 0, false);
  }
  return params;
}

// --- forward / backward --------------------------------------------------

namespace {

struct StageGeometry {
  std::size_t in_ch, out_ch, k, stride, pad, h, w, oh, ow;
};

StageGeometry geometry(const ConvStage& st, std::size_t in_ch, std::size_t h, std::size_t w) {
  StageGeometry g{};
  g.in_ch = in_ch;
  g.out_ch = static_cast<std::size_t>(st.out_channels);
  g.k = static_cast<std::size_t>(st.kernel);
  g.stride = static_cast<std::size_t>(st.stride);
  g.pad = g.k / 2;
  g.h = h;
  g.w = w;
  if (h + 2 * g.pad < g.k || w + 2 * g.pad < g.k)
    throw InvalidArgument("input too small for the conv stack");
  g.oh = (h + 2 * g.pad - g.k) / g.stride + 1;
  g.ow = (w + 2 * g.pad - g.k) / g.stride + 1;
  return g;
}

std::size_t head_layers(const EncoderConfig& c) { return c.projection_hidden > 0 ? 2 : 1; }

template <typename T>
void check_layout(const ParameterSet<T>& params, const EncoderConfig& config) {
  const std::size_t expected = 2 * (config.stages.size() + head_layers(config));
  if (params.tensors.size() != expected)
    throw InvalidArgument("parameter set does not match the encoder config");
  std::size_t in_ch = static_cast<std::size_t>(config.input_channels);
  for (std::size_t s = 0; s < config.stages.size(); ++s) {
    const auto& st = config.stages[s];
    const std::size_t need = static_cast<std::size_t>(st.out_channels) * in_ch *
                             static_cast<std::size_t>(st.kernel * st.kernel);
    if (params.tensors[2 * s].size() != need ||
        params.tensors[2 * s + 1].size() != static_cast<std::size_t>(st.out_channels))
      throw InvalidArgument("conv parameter shapes do not match the encoder config");
    in_ch = static_cast<std::size_t>(st.out_channels);
  }
}

// cols(r = (c*k + kh)*k + kw, n*OH*OW + oh*OW + ow) = x(c, n*H*W + ih*W + iw), zero padded.
template <typename T>
void im2col(const RowMatrix<T>& x, std::size_t batch, const StageGeometry& g, RowMatrix<T>& cols) {
  const std::size_t in_plane = g.h * g.w, out_plane = g.oh * g.ow;
  cols.resize(static_cast<Eigen::Index>(g.in_ch * g.k * g.k),
              static_cast<Eigen::Index>(batch * out_plane));
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    const T* src_c = x.data() + c * x.cols();
    for (std::size_t kh = 0; kh < g.k; ++kh)
      for (std::size_t kw = 0; kw < g.k; ++kw) {
        T* dst = cols.data() + ((c * g.k + kh) * g.k + kw) * cols.cols();
        for (std::size_t n = 0; n < batch; ++n) {
          const T* src = src_c + n * in_plane;
          for (std::size_t oh = 0; oh < g.oh; ++oh) {
            T* row = dst + n * out_plane + oh * g.ow;
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) {
              std::fill(row, row + g.ow, T{0});
              continue;
            }
            const T* line = src + static_cast<std::size_t>(ih) * g.w;
            for (std::size_t ow = 0; ow < g.ow; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              row[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w))
                            ? T{0}
                            : line[static_cast<std::size_t>(iw)];
            }
          }
        }
      }
  }
}

template <typename T>
RowMatrix<T> col2im(const RowMatrix<T>& cols, std::size_t batch, const StageGeometry& g) {
  const std::size_t in_plane = g.h * g.w, out_plane = g.oh * g.ow;
  RowMatrix<T> x = RowMatrix<T>::Zero(static_cast<Eigen::Index>(g.in_ch),
                                      static_cast<Eigen::Index>(batch * in_plane));
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    T* dst_c = x.data() + c * x.cols();
    for (std::size_t kh = 0; kh < g.k; ++kh)
      for (std::size_t kw = 0; kw < g.k; ++kw) {
        const T* src = cols.data() + ((c * g.k + kh) * g.k + kw) * cols.cols();
        for (std::size_t n = 0; n < batch; ++n) {
          T* dst = dst_c + n * in_plane;
          for (std::size_t oh = 0; oh < g.oh; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
            const T* row = src + n * out_plane + oh * g.ow;
            T* line = dst + static_cast<std::size_t>(ih) * g.w;
            for (std::size_t ow = 0; ow < g.ow; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w)) continue;
              line[static_cast<std::size_t>(iw)] += row[ow];
            }
          }
        }
      }
  }
  return x;
}

template <typename T>
using ConstMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

}  // namespace

template <typename T>
ForwardPass<T> forward(const ParameterSet<T>& params, const EncoderConfig& config,
                       const RowMatrix<T>& input, std::size_t height, std::size_t width) {
  check_layout(params, config);
  const auto batch = static_cast<std::size_t>(input.rows());
  if (batch == 0) throw InvalidArgument("forward on an empty batch");
  const auto in_ch = static_cast<std::size_t>(config.input_channels);
  if (static_cast<std::size_t>(input.cols()) != in_ch * height * width)
    throw InvalidArgument("input batch does not match channels x height x width");
  if (!input.allFinite()) throw NonFiniteValue("non-finite value in encoder input");

  ForwardPass<T> pass;
  pass.batch = batch;

  // N x (C*H*W)  ->  C x (N*H*W)
  const std::size_t plane = height * width;
  RowMatrix<T> x(static_cast<Eigen::Index>(in_ch), static_cast<Eigen::Index>(batch * plane));
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < in_ch; ++c)
      std::copy_n(input.data() + n * input.cols() + c * plane, plane,
                  x.data() + c * x.cols() + n * plane);

  std::size_t h = height, w = width, ch = in_ch;
  for (std::size_t s = 0; s < config.stages.size(); ++s) {
    const auto g = geometry(config.stages[s], ch, h, w);
    pass.heights.push_back(h);
    pass.widths.push_back(w);
    RowMatrix<T> cols;
    im2col(s == 0 ? x : pass.activations.back(), batch, g, cols);
    const auto& wt = params.tensors[2 * s];
    const auto& bias = params.tensors[2 * s + 1];
    const ConstMap<T> weight(wt.values.data(), static_cast<Eigen::Index>(g.out_ch),
                             static_cast<Eigen::Index>(g.in_ch * g.k * g.k));
    RowMatrix<T> y = weight * cols;
    const ConstVecMap<T> b(bias.values.data(), static_cast<Eigen::Index>(g.out_ch));
    y.colwise() += b;
    y = y.cwiseMax(T{0});
    pass.columns.push_back(std::move(cols));
    pass.activations.push_back(std::move(y));
    h = g.oh;
    w = g.ow;
    ch = g.out_ch;
  }
  pass.heights.push_back(h);
  pass.widths.push_back(w);

  const std::size_t out_plane = h * w;
  pass.features.resize(static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(ch));
  if (config.stages.empty()) {
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t c = 0; c < ch; ++c)
        pass.features(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c)) =
            x.row(static_cast<Eigen::Index>(c))
                .segment(static_cast<Eigen::Index>(n * out_plane), static_cast<Eigen::Index>(out_plane))
                .mean();
  } else {
    const auto& last = pass.activations.back();
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t c = 0; c < ch; ++c)
        pass.features(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c)) =
            last.row(static_cast<Eigen::Index>(c))
                .segment(static_cast<Eigen::Index>(n * out_plane), static_cast<Eigen::Index>(out_plane))
                .mean();
  }

  const std::size_t first_head = 2 * config.stages.size();
  const std::size_t layers = head_layers(config);
  RowMatrix<T> act = pass.features;
  for (std::size_t j = 0; j < layers; ++j) {
    const auto& wt = params.tensors[first_head + 2 * j];
    const auto& bias = params.tensors[first_head + 2 * j + 1];
    if (wt.shape.size() != 2 || wt.shape[0] != static_cast<std::size_t>(act.cols()))
      throw InvalidArgument("head parameter shapes do not match the encoder config");
    const ConstMap<T> weight(wt.values.data(), static_cast<Eigen::Index>(wt.shape[0]),
                             static_cast<Eigen::Index>(wt.shape[1]));
    const ConstVecMap<T> b(bias.values.data(), static_cast<Eigen::Index>(wt.shape[1]));
    RowMatrix<T> y = act * weight;
    y.rowwise() += b.transpose();
    if (j + 1 < layers) y = y.cwiseMax(T{0});
    pass.head_inputs.push_back(std::move(act));
    act = std::move(y);
  }
  pass.pre_norm = std::move(act);
  if (!pass.pre_norm.allFinite()) throw NonFiniteValue("encoder produced non-finite outputs");
  return pass;
}

template <typename T>
ParameterSet<T> backward(const ParameterSet<T>& params, const EncoderConfig& config,
                         const ForwardPass<T>& pass, const RowMatrix<T>& grad_pre_norm) {
  check_layout(params, config);
  if (grad_pre_norm.rows() != pass.pre_norm.rows() || grad_pre_norm.cols() != pass.pre_norm.cols())
    throw InvalidArgument("upstream gradient shape does not match the forward outputs");
  ParameterSet<T> grads = params.zeros_like();
  const std::size_t batch = pass.batch;

  const std::size_t first_head = 2 * config.stages.size();
  const std::size_t layers = head_layers(config);
  RowMatrix<T> g = grad_pre_norm;
  for (std::size_t jj = layers; jj-- > 0;) {
    if (jj + 1 < layers) {
      const RowMatrix<T>& out = pass.head_inputs[jj + 1];
      g = (out.array() > T{0}).select(g, T{0});
    }
    const auto& wt = params.tensors[first_head + 2 * jj];
    const ConstMap<T> weight(wt.values.data(), static_cast<Eigen::Index>(wt.shape[0]),
                             static_cast<Eigen::Index>(wt.shape[1]));
    Eigen::Map<RowMatrix<T>> dw(grads.tensors[first_head + 2 * jj].values.data(), weight.rows(),
                                weight.cols());
    dw.noalias() = pass.head_inputs[jj].transpose() * g;
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(
        grads.tensors[first_head + 2 * jj + 1].values.data(), weight.cols());
    db = g.colwise().sum();
    RowMatrix<T> next = g * weight.transpose();
    g = std::move(next);
  }
  if (config.stages.empty()) return grads;

  // Global average pooling.
  const std::size_t last = config.stages.size() - 1;
  const std::size_t out_plane = pass.heights.back() * pass.widths.back();
  const auto channels = static_cast<std::size_t>(config.stages[last].out_channels);
  RowMatrix<T> dy(static_cast<Eigen::Index>(channels), static_cast<Eigen::Index>(batch * out_plane));
  const T inv = T{1} / static_cast<T>(out_plane);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t n = 0; n < batch; ++n)
      dy.row(static_cast<Eigen::Index>(c))
          .segment(static_cast<Eigen::Index>(n * out_plane), static_cast<Eigen::Index>(out_plane))
          .setConstant(g(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c)) * inv);

  std::size_t in_ch = static_cast<std::size_t>(config.input_channels);
  std::vector<StageGeometry> geoms;
  for (std::size_t s = 0; s < config.stages.size(); ++s) {
    geoms.push_back(geometry(config.stages[s], in_ch, pass.heights[s], pass.widths[s]));
    in_ch = geoms.back().out_ch;
  }

  for (std::size_t s = config.stages.size(); s-- > 0;) {
    const auto& geo = geoms[s];
    dy = (pass.activations[s].array() > T{0}).select(dy, T{0});
    const auto& wt = params.tensors[2 * s];
    const ConstMap<T> weight(wt.values.data(), static_cast<Eigen::Index>(geo.out_ch),
                             static_cast<Eigen::Index>(geo.in_ch * geo.k * geo.k));
    Eigen::Map<RowMatrix<T>> dw(grads.tensors[2 * s].values.data(), weight.rows(), weight.cols());
    dw.noalias() = dy * pass.columns[s].transpose();
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(grads.tensors[2 * s + 1].values.data(),
                                                       weight.rows());
    db = dy.rowwise().sum();
    if (s == 0) break;
    RowMatrix<T> dcols = weight.transpose() * dy;
    dy = col2im(dcols, batch, geo);
  }
  return grads;
}

template ForwardPass<float> forward(const ParameterSet<float>&, const EncoderConfig&,
                                    const RowMatrix<float>&, std::size_t, std::size_t);
template ForwardPass<double> forward(const ParameterSet<double>&, const EncoderConfig&,
                                     const RowMatrix<double>&, std::size_t, std::size_t);
template ParameterSet<float> backward(const ParameterSet<float>&, const EncoderConfig&,
                                      const ForwardPass<float>&, const RowMatrix<float>&);
template ParameterSet<double> backward(const ParameterSet<double>&, const EncoderConfig&,
                                       const ForwardPass<double>&, const RowMatrix<double>&);

RowMatrix<float> batch_matrix(std::span<const PreprocessedPatch> patches) {
  if (patches.empty()) throw InvalidArgument("empty batch");
  const auto cols = patches.front().tensor.size();
  RowMatrix<float> m(static_cast<Eigen::Index>(patches.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (patches[i].tensor.size() != cols) throw InvalidArgument("patches of different sizes");
    std::copy(patches[i].tensor.begin(), patches[i].tensor.end(), m.data() + i * cols);
  }
  return m;
}

// --- normalization -------------------------------------------------------

std::vector<double> l2_normalize(std::span<const double> v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double norm = std::sqrt(sq);
  if (!(norm > 0.0) || !std::isfinite(norm))
    throw DegenerateEmbedding("cannot normalize a zero or non-finite vector");
  std::vector<double> z(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) z[i] = v[i] / norm;
  return z;
}

template <typename T>
RowMatrix<T> l2_normalize_rows(const RowMatrix<T>& v) {
  RowMatrix<T> z(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const T norm = v.row(i).norm();
    if (!(norm > T{0}) || !std::isfinite(norm))
      throw DegenerateEmbedding("cannot normalize a zero or non-finite embedding");
    z.row(i) = v.row(i) / norm;
  }
  return z;
}

template <typename T>
RowMatrix<T> l2_normalize_rows_backward(const RowMatrix<T>& v, const RowMatrix<T>& grad_z) {
  RowMatrix<T> dv(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const T norm = v.row(i).norm();
    if (!(norm > T{0})) throw DegenerateEmbedding("cannot differentiate through a zero vector");
    const auto z = v.row(i) / norm;
    dv.row(i) = (grad_z.row(i) - z * grad_z.row(i).dot(z)) / norm;
  }
  return dv;
}

template RowMatrix<float> l2_normalize_rows(const RowMatrix<float>&);
template RowMatrix<double> l2_normalize_rows(const RowMatrix<double>&);
template RowMatrix<float> l2_normalize_rows_backward(const RowMatrix<float>&, const RowMatrix<float>&);
template RowMatrix<double> l2_normalize_rows_backward(const RowMatrix<double>&,
                                                      const RowMatrix<double>&);

// --- embedding -----------------------------------------------------------

namespace {

Embedding make_embedding(const PreprocessedPatch& patch, std::span<const float> raw) {
  std::vector<double> v(raw.begin(), raw.end());
  const auto z = l2_normalize(v);
  Embedding e;
  e.image_id = patch.image_id;
  e.plant_id = patch.plant_id;
  e.module_id = patch.module_id;
  e.binary_label = patch.binary_label;
  e.fault_class = patch.fault_class;
  e.z.assign(z.begin(), z.end());
  return e;
}

}  // namespace

std::vector<Embedding> embed_patches(const EncoderParameters& params, const EncoderConfig& config,
                                     std::span<const PreprocessedPatch> patches, FeatureLevel level) {
  // One image per forward pass: GEMM blocking depends on the batch width, so
  // batching would let neighbours perturb the last bits of an embedding.
  std::vector<Embedding> out;
  out.reserve(patches.size());
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const auto pass = forward(params, config, batch_matrix(patches.subspan(i, 1)), kPatchSize, kPatchSize);
    const RowMatrix<float>& src = level == FeatureLevel::embedding ? pass.pre_norm : pass.features;
    out.push_back(make_embedding(patches[i], std::span<const float>(src.data(), static_cast<std::size_t>(src.cols()))));
  }
  return out;
}

std::vector<Embedding> embed(const EncoderParameters& params, const EncoderConfig& config,
                             std::span<const IRImage> images, const PlantStatsTable& stats,
                             FeatureLevel level) {
  std::vector<Embedding> out;
  out.reserve(images.size());
  for (const auto& image : images) {
    const PreprocessedPatch patch = preprocess(image, stats);
    out.push_back(std::move(embed_patches(params, config, std::span(&patch, 1), level).front()));
  }
  return out;
}

RowMatrix<float> head_outputs(const EncoderParameters& params, const EncoderConfig& config,
                              std::span<const PreprocessedPatch> patches) {
  RowMatrix<float> out(static_cast<Eigen::Index>(patches.size()), config.embedding_dim);
  for (std::size_t i = 0; i < patches.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) =
        forward(params, config, batch_matrix(patches.subspan(i, 1)), kPatchSize, kPatchSize).pre_norm;
  return out;
}

}  // namespace ircl
