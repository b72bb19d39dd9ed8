#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mpcseg/pointcloud.hpp"
#include "mpcseg/tensor.hpp"

namespace mpcseg {

/// Encoder/decoder depth; the shape law below is written for five levels.
inline constexpr std::size_t kLevels = 5;
/// Channel growth and point reduction between consecutive encoder levels.
inline constexpr std::size_t kScaleFactor = 4;

struct NetworkConfig {
  std::size_t base_channels = 4;  // C0
  std::size_t receptive_field = 4096;
  std::size_t bands = 3;
  std::size_t classes = 2;
  std::size_t knn_neighbors = 8;
  std::size_t head_hidden = 32;  // width of the three-layer scale classifiers
  std::uint64_t seed = 0;        // weight initialization

  /// Channels of encoder level l (0-based): C0 * 4^l.
  std::size_t channels(std::size_t level) const;
  /// Rows of encoder level l for an n-point input: ceil applied per level.
  static std::size_t points(std::size_t n, std::size_t level);
  std::size_t input_features() const { return 2 * bands + 3; }
  void validate() const;
};

/// Which of the optional components are present.
struct ModelToggles {
  bool msff = true;
  bool msl = true;
  bool ltl = true;
};

/// Affine map x W + b.
struct Dense {
  ParamId weight = 0;
  ParamId bias = 0;
};

struct MsffParams {
  ParamId proj_shallow = 0;  // P_{L->S}: c -> c/4
  ParamId proj_deep = 0;     // P_{L->D}: c -> 4c
  Dense out;                 // (c/4 + c + 4c) -> c
};

/// Three stacked affine maps with relu in between plus an adaptive weight.
struct ScaleHead {
  std::array<Dense, 3> layers;
  ParamId omega = 0;
};

/// Two single-affine classifiers with one adaptive weight each.
struct TailHead {
  std::array<Dense, 2> classifiers;
  std::array<ParamId, 2> omegas{};
};

/// All learned parameters of one model instance.
struct NetworkParams {
  NetworkConfig config;
  ModelToggles toggles;
  ParameterStore store;

  std::array<Dense, 2> local_mlp{};
  std::array<Dense, kLevels - 1> encoder{};  // level l uses encoder[l - 1]
  std::vector<MsffParams> msff;              // levels 1..3 when enabled
  std::array<Dense, kLevels> decoder{};      // decoder[l] produces level l
  std::vector<ScaleHead> scale_heads;        // decoder outputs F1..F4
  std::optional<TailHead> tail;
  std::optional<Dense> ce_head;              // single head when LTL is off

  std::size_t classification_heads() const;
  std::size_t msff_scalar_count() const;
};

/// Glorot-uniform weights, zero biases, all-ones adaptive weights.
NetworkParams init_network(const NetworkConfig& config, const ModelToggles& toggles);

/// Reflectances in [0, 1] enter the network as (s - 0.5) * kSpectralGain.
inline constexpr double kSpectralGain = 4.0;

/// Network input for one sample: per-point encoding features and labels.
struct SampleInput {
  std::vector<Point3> positions;
  Matrix features;  // N x (2d + 3): spectra, position - neighborhood mean, neighbor spectra mean
                    // (both spectral blocks rescaled by kSpectralGain)
  std::vector<int> labels;
  std::vector<std::size_t> point_index;  // cloud indices
};

/// Builds the per-point input features from a sample's points. The
/// neighborhood is the point's knn_neighbors nearest points within the
/// sample, itself included.
SampleInput prepare_sample(const MultispectralPointCloud& cloud,
                           std::span<const std::size_t> indices, std::size_t knn_neighbors);

/// Kept-row indices for each downsampling step. kept[l - 1] selects rows of
/// level l - 1 that form level l.
struct Sampling {
  std::array<std::vector<std::size_t>, kLevels - 1> kept;
};

/// Uniform random subset of ceil(n / 4) rows per level, in ascending order.
Sampling draw_sampling(std::size_t n, std::uint64_t seed);

struct EncoderState {
  std::array<Var, kLevels> features;
  std::array<std::vector<Point3>, kLevels> positions;
  /// kept[l] selects level l rows from level l - 1 (kept[0] unused).
  std::array<std::vector<std::size_t>, kLevels> kept;
  /// parent[l] maps every level l - 1 row to its nearest level l row.
  std::array<std::vector<std::size_t>, kLevels> parent;
  /// Sample-row index of every level l row.
  std::array<std::vector<std::size_t>, kLevels> absolute;
};

/// Shared two-layer relu MLP over the input features: N x C0.
Var local_feature_encode(Binding& bind, const NetworkParams& params, const SampleInput& input);

/// Four MLP (c -> 4c) + random 1/4 downsampling steps on top of F0.
EncoderState encode(Binding& bind, const NetworkParams& params, const Var& f0,
                    std::span<const Point3> positions, const Sampling& sampling);

struct MsffOptions {
  bool unit_shallow_gate = false;
  bool unit_deep_gate = false;
};

struct MsffOutput {
  Var fused;           // F_O, n x c
  Var shallow_gate;    // e_S, 1 x c/4
  Var deep_gate;       // e_D, 1 x 4c
  Var shallow_fused;   // F~_S
  Var deep_fused;      // F~_D
};

/// Multi-scale feature fusion of shallow (4n x c/4), local (n x c) and deep
/// (n/4 x 4c) encoder features. `kept` aligns the shallow rows with the
/// local rows, `parent` lifts the deep rows to the local resolution.
MsffOutput msff(Binding& bind, const NetworkParams& params, const MsffParams& mp, const Var& shallow,
                const Var& local, const Var& deep, std::span<const std::size_t> kept,
                std::span<const std::size_t> parent, const MsffOptions& options = {});

/// Decoder outputs F1 (coarsest) .. F5 (N x C0), index 0..4.
std::array<Var, kLevels> decode(Binding& bind, const NetworkParams& params,
                                const EncoderState& state);

struct ForwardResult {
  EncoderState encoder;
  std::array<Var, kLevels> decoder;
};

ForwardResult forward(Binding& bind, const NetworkParams& params, const SampleInput& input,
                      const Sampling& sampling);

/// Affine map with optional relu, shared by all MLP layers.
Var dense(Binding& bind, const Dense& layer, const Var& x, bool relu_out);

}  // namespace mpcseg
