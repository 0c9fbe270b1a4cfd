#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ircl/dataset.hpp"
#include "ircl/types.hpp"

namespace ircl {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvStage {
  int out_channels = 16;
  int kernel = 3;
  int stride = 2;
  bool operator==(const ConvStage&) const = default;
};

/// Plain convolutional encoder (conv + ReLU stages, global average pooling)
/// followed by a fully connected projection head.
///
/// With `projection_hidden == 0` the head is a single linear layer; this is the
/// shape of the cross-entropy baseline (embedding_dim 2 acts as the logits).
struct EncoderConfig {
  int input_channels = static_cast<int>(kPatchChannels);
  std::vector<ConvStage> stages{{16, 3, 2}, {32, 3, 2}, {64, 3, 2}};
  int projection_hidden = 64;
  int embedding_dim = 32;
  std::uint64_t init_seed = 0;

  int feature_dim() const { return stages.empty() ? input_channels : stages.back().out_channels; }
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;

  /// `key=value` lines, prefix `encoder.`.
  std::string to_text() const;
  static EncoderConfig from_text(const std::string& text);

  /// Desk-scale reference: (16,3,2),(32,3,2),(64,3,2), head 64 -> 64 -> 32.
  static EncoderConfig desk();
  /// Same backbone with a single 64 -> 2 linear layer.
  static EncoderConfig cross_entropy_classifier();
};

/// Parameter storage. Eigen maps these buffers; a fixed alignment keeps the
/// vectorized loop split, and with it every rounding, independent of the heap.
template <typename T>
using TensorValues = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  TensorValues<T> values;

  std::size_t size() const { return values.size(); }
  bool operator==(const NamedTensor&) const = default;
};

/// Ordered list of named parameter tensors:
/// conv{i}.weight (out, in, k, k), conv{i}.bias (out),
/// head{j}.weight (in, out), head{j}.bias (out).
template <typename T>
struct ParameterSet {
  std::vector<NamedTensor<T>> tensors;

  const NamedTensor<T>& at(const std::string& name) const;
  NamedTensor<T>& at(const std::string& name);
  std::size_t scalar_count() const;
  bool same_layout(const ParameterSet& other) const;
  bool all_finite() const;
  ParameterSet zeros_like() const;
  template <typename U>
  ParameterSet<U> cast() const;
  bool operator==(const ParameterSet&) const = default;
};

using EncoderParameters = ParameterSet<float>;

/// He-style normal initialization (std sqrt(2 / fan_in)), zero biases.
EncoderParameters init_parameters(const EncoderConfig& config, std::uint64_t seed);

/// Every intermediate needed by backward(); produced by forward().
template <typename T>
struct ForwardPass {
  std::size_t batch = 0;
  std::vector<std::size_t> heights;  // spatial size of each stage input, plus the last output
  std::vector<std::size_t> widths;
  std::vector<RowMatrix<T>> columns;      // im2col buffer of each stage
  std::vector<RowMatrix<T>> activations;  // post-ReLU output of each stage, C x (N*H*W)
  std::vector<RowMatrix<T>> head_inputs;  // input to each head layer, N x width
  RowMatrix<T> features;                  // pooled encoder output, N x F
  RowMatrix<T> pre_norm;                  // head output, N x d
};

/// Input batch: N x (C*H*W) rows, each a channel-major image.
template <typename T>
ForwardPass<T> forward(const ParameterSet<T>& params, const EncoderConfig& config,
                       const RowMatrix<T>& input, std::size_t height, std::size_t width);

/// Exact reverse-mode gradients of sum(grad_pre_norm .* pre_norm) with respect
/// to every parameter tensor.
template <typename T>
ParameterSet<T> backward(const ParameterSet<T>& params, const EncoderConfig& config,
                         const ForwardPass<T>& pass, const RowMatrix<T>& grad_pre_norm);

/// Stacks patch tensors into a float batch matrix.
RowMatrix<float> batch_matrix(std::span<const PreprocessedPatch> patches);

/// z = v / ||v||; throws DegenerateEmbedding for a zero (or non-finite) vector.
std::vector<double> l2_normalize(std::span<const double> v);

/// Row-wise normalization of a batch and its vector-Jacobian product.
template <typename T>
RowMatrix<T> l2_normalize_rows(const RowMatrix<T>& v);
template <typename T>
RowMatrix<T> l2_normalize_rows_backward(const RowMatrix<T>& v, const RowMatrix<T>& grad_z);

/// Unit-norm embedding of one image with identity and labels carried along.
struct Embedding {
  std::uint64_t image_id = 0;
  std::uint16_t plant_id = 0;
  std::uint32_t module_id = 0;
  std::optional<BinaryLabel> binary_label;
  std::optional<FaultClass> fault_class;
  std::vector<float> z;
};

enum class FeatureLevel { embedding, pooled_features };

/// preprocess -> forward -> l2_normalize, one image per forward pass so that an
/// embedding never depends on its batch neighbours. `pooled_features` exports
/// the normalized pooled encoder output instead.
std::vector<Embedding> embed(const EncoderParameters& params, const EncoderConfig& config,
                             std::span<const IRImage> images, const PlantStatsTable& stats,
                             FeatureLevel level = FeatureLevel::embedding);
std::vector<Embedding> embed_patches(const EncoderParameters& params, const EncoderConfig& config,
                                     std::span<const PreprocessedPatch> patches,
                                     FeatureLevel level = FeatureLevel::embedding);

/// Raw head outputs (N x d) without normalization; the logits of a
/// cross-entropy classifier.
RowMatrix<float> head_outputs(const EncoderParameters& params, const EncoderConfig& config,
                              std::span<const PreprocessedPatch> patches);

}  // namespace ircl
