#include "mpcseg/network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "mpcseg/kernels.hpp"

namespace mpcseg {

namespace {

Matrix glorot(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix w(fan_in, fan_out);
  for (double& v : w.data) v = dist(rng);
  return w;
}

Dense make_dense(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
                 std::mt19937_64& rng) {
  Dense d;
  d.weight = store.add(name + ".weight", glorot(in, out, rng), true);
  d.bias = store.add(name + ".bias", Matrix(1, out), false);
  return d;
}

}  // namespace

std::size_t NetworkConfig::channels(std::size_t level) const {
  std::size_t c = base_channels;
  for (std::size_t l = 0; l < level; ++l) c *= kScaleFactor;
  return c;
}

std::size_t NetworkConfig::points(std::size_t n, std::size_t level) {
  for (std::size_t l = 0; l < level; ++l) n = (n + kScaleFactor - 1) / kScaleFactor;
  return n;
}

void NetworkConfig::validate() const {
  if (base_channels == 0) throw ValidationError("base_channels: must be >= 1");
  if (receptive_field == 0) throw ValidationError("receptive_field: must be >= 1");
  if (bands == 0) throw ValidationError("bands: must be >= 1");
  if (classes < 2) throw ValidationError("classes: need at least 2");
  if (knn_neighbors == 0) throw ValidationError("knn_neighbors: must be >= 1");
  if (head_hidden == 0) throw ValidationError("head_hidden: must be >= 1");
}

std::size_t NetworkParams::classification_heads() const {
  return scale_heads.size() + (tail ? 2 : 0) + (ce_head ? 1 : 0);
}

std::size_t NetworkParams::msff_scalar_count() const {
  std::size_t n = 0;
  for (const auto& m : msff) {
    n += store[m.proj_shallow].value.size() + store[m.proj_deep].value.size() +
         store[m.out.weight].value.size() + store[m.out.bias].value.size();
  }
  return n;
}

NetworkParams init_network(const NetworkConfig& config, const ModelToggles& toggles) {
  config.validate();
  NetworkParams p;
  p.config = config;
  p.toggles = toggles;
  std::mt19937_64 rng(config.seed);
  auto& s = p.store;
  const std::size_t c0 = config.base_channels;
  const std::size_t num_classes = config.classes;

  p.local_mlp[0] = make_dense(s, "local.0", config.input_features(), c0, rng);
  p.local_mlp[1] = make_dense(s, "local.1", c0, c0, rng);
  for (std::size_t l = 1; l < kLevels; ++l) {
    p.encoder[l - 1] = make_dense(s, "encoder." + std::to_string(l), config.channels(l - 1),
                                  config.channels(l), rng);
  }
  if (toggles.msff) {
    for (std::size_t l = 1; l + 1 < kLevels; ++l) {
      const std::size_t c = config.channels(l);
      const std::string name = "msff." + std::to_string(l);
      MsffParams m;
      m.proj_shallow = s.add(name + ".proj_shallow", glorot(c, c / kScaleFactor, rng), true);
      m.proj_deep = s.add(name + ".proj_deep", glorot(c, c * kScaleFactor, rng), true);
      m.out = make_dense(s, name + ".out", c / kScaleFactor + c + c * kScaleFactor, c, rng);
      p.msff.push_back(m);
    }
  }
  const std::size_t top = kLevels - 1;
  p.decoder[top] = make_dense(s, "decoder." + std::to_string(top), config.channels(top),
                              config.channels(top), rng);
  for (std::size_t l = top; l-- > 0;) {
    const std::size_t c = config.channels(l);
    p.decoder[l] = make_dense(s, "decoder." + std::to_string(l), c * kScaleFactor + c, c, rng);
  }
  if (toggles.msl) {
    // Heads for F1..F4, i.e. decoder levels 4..1.
    for (std::size_t i = 0; i + 1 < kLevels; ++i) {
      const std::size_t level = top - i;
      const std::string name = "scale_head." + std::to_string(i + 1);
      ScaleHead h;
      h.layers[0] = make_dense(s, name + ".0", config.channels(level), config.head_hidden, rng);
      h.layers[1] = make_dense(s, name + ".1", config.head_hidden, config.head_hidden, rng);
      h.layers[2] = make_dense(s, name + ".2", config.head_hidden, num_classes, rng);
      h.omega = s.add(name + ".omega", Matrix(1, num_classes, 1.0), false);
      p.scale_heads.push_back(h);
    }
  }
  if (toggles.ltl) {
    TailHead t;
    for (std::size_t i = 0; i < 2; ++i) {
      const std::string name = "tail_head." + std::to_string(i + 1);
      t.classifiers[i] = make_dense(s, name, c0, num_classes, rng);
      t.omegas[i] = s.add(name + ".omega", Matrix(1, num_classes, 1.0), false);
    }
    p.tail = t;
  } else {
    p.ce_head = make_dense(s, "ce_head", c0, num_classes, rng);
  }
  return p;
}

SampleInput prepare_sample(const MultispectralPointCloud& cloud, std::span<const std::size_t> indices,
                           std::size_t knn_neighbors) {
  if (indices.empty()) throw ValidationError("sample: no points");
  if (knn_neighbors == 0) throw ValidationError("knn_neighbors: must be >= 1");
  SampleInput in;
  const std::size_t n = indices.size();
  const std::size_t d = cloud.bands;
  in.point_index.assign(indices.begin(), indices.end());
  in.positions.reserve(n);
  in.labels.reserve(n);
  for (std::size_t i : indices) {
    in.positions.push_back(cloud.positions.at(i));
    in.labels.push_back(cloud.labels[i]);
  }
  const auto neighbors = kernels::omp::knn_brute_batch(in.positions, in.positions, knn_neighbors);
  in.features = Matrix(n, 2 * d + 3);
  for (std::size_t j = 0; j < n; ++j) {
    auto row = in.features.row(j);
    const auto own = cloud.spectrum(indices[j]);
    std::copy(own.begin(), own.end(), row.begin());
    Point3 mean{0.0, 0.0, 0.0};
    const auto& nb = neighbors[j];
    for (std::size_t k : nb) {
      for (int a = 0; a < 3; ++a) mean[a] += in.positions[k][a];
      const auto spec = cloud.spectrum(indices[k]);
      for (std::size_t b = 0; b < d; ++b) row[d + 3 + b] += spec[b];
    }
    const double inv = 1.0 / static_cast<double>(nb.size());
    for (int a = 0; a < 3; ++a) row[d + a] = in.positions[j][a] - mean[a] * inv;
    for (std::size_t b = 0; b < d; ++b) row[d + 3 + b] *= inv;
    for (std::size_t b = 0; b < d; ++b) {
      row[b] = (row[b] - 0.5) * kSpectralGain;
      row[d + 3 + b] = (row[d + 3 + b] - 0.5) * kSpectralGain;
    }
  }
  return in;
}

Sampling draw_sampling(std::size_t n, std::uint64_t seed) {
  Sampling s;
  std::mt19937_64 rng(seed);
  std::size_t prev = n;
  for (std::size_t l = 1; l < kLevels; ++l) {
    const std::size_t keep = NetworkConfig::points(prev, 1);
    std::vector<std::size_t> idx(prev);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(keep);
    std::sort(idx.begin(), idx.end());
    s.kept[l - 1] = std::move(idx);
    prev = keep;
  }
  return s;
}

Var dense(Binding& bind, const Dense& layer, const Var& x, bool relu_out) {
  Var y = add_row(matmul(x, bind(layer.weight)), bind(layer.bias));
  return relu_out ? relu(y) : y;
}

Var local_feature_encode(Binding& bind, const NetworkParams& params, const SampleInput& input) {
  if (input.features.cols != params.config.input_features()) {
    throw ValidationError("sample: feature width does not match the configured band count");
  }
  Var x = bind.tape().constant(input.features);
  Var h = dense(bind, params.local_mlp[0], x, true);
  return dense(bind, params.local_mlp[1], h, true);
}

EncoderState encode(Binding& bind, const NetworkParams& params, const Var& f0,
                    std::span<const Point3> positions, const Sampling& sampling) {
  EncoderState st;
  const std::size_t n = f0.rows();
  if (positions.size() != n) throw ValidationError("encode: positions and features differ in length");
  st.features[0] = f0;
  st.positions[0].assign(positions.begin(), positions.end());
  st.absolute[0].resize(n);
  std::iota(st.absolute[0].begin(), st.absolute[0].end(), 0);
  for (std::size_t l = 1; l < kLevels; ++l) {
    const auto& kept = sampling.kept[l - 1];
    const std::size_t prev = st.positions[l - 1].size();
    if (kept.size() != NetworkConfig::points(prev, 1)) {
      throw ValidationError("encode: level " + std::to_string(l) + " must keep ceil(n/4) rows");
    }
    st.kept[l] = kept;
    // Row-wise MLP commutes with row selection, so select first.
    Var selected = gather_rows(st.features[l - 1], kept);
    st.features[l] = dense(bind, params.encoder[l - 1], selected, true);
    st.positions[l].reserve(kept.size());
    st.absolute[l].reserve(kept.size());
    for (std::size_t k : kept) {
      st.positions[l].push_back(st.positions[l - 1][k]);
      st.absolute[l].push_back(st.absolute[l - 1][k]);
    }
    // Nearest kept point for every fine point; kept points map to themselves.
    std::vector<std::size_t> parent(prev, 0);
    std::vector<std::ptrdiff_t> self(prev, -1);
    for (std::size_t j = 0; j < kept.size(); ++j) self[kept[j]] = static_cast<std::ptrdiff_t>(j);
    const auto& coarse = st.positions[l];
    for (std::size_t i = 0; i < prev; ++i) {
      if (self[i] >= 0) {
        parent[i] = static_cast<std::size_t>(self[i]);
        continue;
      }
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < coarse.size(); ++j) {
        const double d2 = kernels::squared_distance(st.positions[l - 1][i], coarse[j]);
        if (d2 < best) {
          best = d2;
          parent[i] = j;
        }
      }
    }
    st.parent[l] = std::move(parent);
  }
  return st;
}

MsffOutput msff(Binding& bind, const NetworkParams& params, const MsffParams& mp, const Var& shallow,
                const Var& local, const Var& deep, std::span<const std::size_t> kept,
                std::span<const std::size_t> parent, const MsffOptions& options) {
  (void)params;
  const std::size_t n = local.rows();
  const std::size_t c = local.cols();
  if (shallow.cols() * kScaleFactor != c || deep.cols() != c * kScaleFactor) {
    throw std::invalid_argument("msff: branch widths must be (c/4, c, 4c)");
  }
  if (kept.size() != n || parent.size() != n) {
    throw std::invalid_argument("msff: index maps must have one entry per local row");
  }
  MsffOutput out;
  Tape& tape = bind.tape();
  Var shallow_aligned = gather_rows(shallow, kept);   // F'_S: n x c/4
  Var deep_aligned = nearest_upsample(deep, parent);  // F'_D: n x 4c
  Var pooled_local = global_avg_pool(local);

  if (options.unit_shallow_gate) {
    out.shallow_gate = tape.constant(Matrix(1, c / kScaleFactor, 1.0));
  } else {
    Var merged = add(global_avg_pool(shallow_aligned), matmul(pooled_local, bind(mp.proj_shallow)));
    out.shallow_gate = sigmoid(merged);
  }
  out.shallow_fused = mul_broadcast(shallow_aligned, out.shallow_gate);

  if (options.unit_deep_gate) {
    out.deep_gate = tape.constant(Matrix(1, c * kScaleFactor, 1.0));
  } else {
    Var merged = mul(global_avg_pool(deep_aligned), matmul(pooled_local, bind(mp.proj_deep)));
    out.deep_gate = sigmoid(merged);
  }
  out.deep_fused = mul_broadcast(deep_aligned, out.deep_gate);

  const std::array<Var, 3> parts{out.shallow_fused, local, out.deep_fused};
  out.fused = dense(bind, mp.out, concat_cols(parts), true);
  return out;
}

std::array<Var, kLevels> decode(Binding& bind, const NetworkParams& params,
                                const EncoderState& state) {
  std::array<Var, kLevels> skip;
  for (std::size_t l = 0; l < kLevels; ++l) skip[l] = state.features[l];
  if (params.toggles.msff) {
    for (std::size_t l = 1; l + 1 < kLevels; ++l) {
      skip[l] = msff(bind, params, params.msff[l - 1], state.features[l - 1], state.features[l],
                     state.features[l + 1], state.kept[l], state.parent[l + 1])
                    .fused;
    }
  }
  // out[i] is F^{i+1}; F1 sits at the deepest level.
  std::array<Var, kLevels> out;
  const std::size_t top = kLevels - 1;
  Var current = dense(bind, params.decoder[top], skip[top], true);
  out[0] = current;
  for (std::size_t l = top; l-- > 0;) {
    Var lifted = nearest_upsample(current, state.parent[l + 1]);
    const std::array<Var, 2> parts{lifted, skip[l]};
    current = dense(bind, params.decoder[l], concat_cols(parts), true);
    out[top - l] = current;
  }
  return out;
}

ForwardResult forward(Binding& bind, const NetworkParams& params, const SampleInput& input,
                      const Sampling& sampling) {
  ForwardResult r;
  Var f0 = local_feature_encode(bind, params, input);
  r.encoder = encode(bind, params, f0, input.positions, sampling);
  r.decoder = decode(bind, params, r.encoder);
  return r;
}

}  // namespace mpcseg
