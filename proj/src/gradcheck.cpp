#include "mpcseg/gradcheck.hpp"

#include <functional>
#include <random>

#include "mpcseg/loss.hpp"
#include "mpcseg/network.hpp"
#include "mpcseg/pipeline.hpp"

namespace mpcseg {

namespace {

Matrix uniform(std::size_t r, std::size_t c, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (double& v : m.data) v = u(rng);
  return m;
}

Var weighted_sum(const Var& x, const Matrix& r) { return sum(mul(x, x.tape()->constant(r))); }

void append(std::vector<ParamId>& ids, const Dense& d) {
  ids.push_back(d.weight);
  ids.push_back(d.bias);
}

struct Fixture {
  NetworkParams params;
  SampleInput input;
  Sampling sampling;
  TrainedModel model;
};

Fixture make_fixture(std::uint64_t seed, const GradSuiteOptions& o) {
  std::mt19937_64 rng(seed);
  MultispectralPointCloud cloud;
  cloud.bands = o.bands;
  for (std::size_t c = 0; c < o.classes; ++c) cloud.class_names.push_back("c" + std::to_string(c));
  std::uniform_real_distribution<double> pos(0.0, 4.0), spec(0.0, 1.0);
  std::uniform_int_distribution<int> label(-1, static_cast<int>(o.classes) - 1);
  for (std::size_t i = 0; i < o.points; ++i) {
    cloud.positions.push_back({pos(rng), pos(rng), pos(rng)});
    for (std::size_t b = 0; b < o.bands; ++b) cloud.spectra.push_back(spec(rng));
    cloud.labels.push_back(label(rng));
  }
  std::vector<std::size_t> idx(o.points);
  for (std::size_t i = 0; i < o.points; ++i) idx[i] = i;

  Fixture f;
  NetworkConfig nc;
  nc.base_channels = o.base_channels;
  nc.bands = o.bands;
  nc.classes = o.classes;
  nc.receptive_field = o.points;
  nc.head_hidden = 8;
  nc.seed = seed;
  f.params = init_network(nc, {true, true, true});
  // Move biases and adaptive weights off their constant initial values.
  for (auto& p : f.params.store.all()) {
    if (p.decay) continue;
    const bool omega = p.name.find("omega") != std::string::npos;
    for (double& v : p.value.data) v = omega ? 0.5 + spec(rng) : 0.2 * (spec(rng) - 0.5);
  }
  f.input = prepare_sample(cloud, idx, 8);
  f.sampling = draw_sampling(o.points, seed ^ 0x5eed);
  f.model.params = f.params;
  f.model.tail.is_tail.assign(o.classes, false);
  f.model.tail.is_tail.back() = true;
  std::vector<std::size_t> hist(o.classes, 0);
  for (int l : cloud.labels) {
    if (l >= 0) ++hist[static_cast<std::size_t>(l)];
  }
  for (auto& h : hist) h += 1;
  f.model.weights = compute_class_weights(hist, 0.05);
  return f;
}

using Builder = std::function<Var(Binding&, std::span<const Var>)>;

GradCheckReport check(const NetworkParams& params, const std::vector<ParamId>& ids,
                      std::vector<Matrix> extras, const Builder& build, const GradSuiteOptions& o,
                      std::uint64_t seed) {
  std::vector<Matrix> inputs;
  for (ParamId id : ids) inputs.push_back(params.store[id].value);
  const std::size_t n_params = inputs.size();
  for (auto& e : extras) inputs.push_back(std::move(e));
  auto f = [&](Tape& tape, std::span<const Var> leaves) {
    Binding bind(tape, params.store);
    for (std::size_t i = 0; i < n_params; ++i) bind.preset(ids[i], leaves[i]);
    return build(bind, leaves.subspan(n_params));
  };
  return grad_check(f, std::move(inputs), o.eps, o.max_entries_per_input, seed);
}

}  // namespace

std::vector<GradSuiteEntry> run_gradient_suite(std::span<const std::uint64_t> seeds,
                                               const GradSuiteOptions& o) {
  std::vector<GradSuiteEntry> out;
  for (std::uint64_t seed : seeds) {
    const Fixture fx = make_fixture(seed, o);
    const NetworkParams& p = fx.params;
    std::mt19937_64 rng(seed * 7919 + 1);
    const std::size_t n = o.points;

    std::vector<ParamId> local_ids, body_ids, scale_ids, tail_ids, all_ids;
    for (const auto& d : p.local_mlp) append(local_ids, d);
    for (const auto& d : p.encoder) append(body_ids, d);
    for (const auto& m : p.msff) {
      body_ids.push_back(m.proj_shallow);
      body_ids.push_back(m.proj_deep);
      append(body_ids, m.out);
    }
    for (const auto& d : p.decoder) append(body_ids, d);
    for (const auto& h : p.scale_heads) {
      for (const auto& d : h.layers) append(scale_ids, d);
      scale_ids.push_back(h.omega);
    }
    for (std::size_t i = 0; i < 2; ++i) {
      append(tail_ids, p.tail->classifiers[i]);
      tail_ids.push_back(p.tail->omegas[i]);
    }
    for (std::size_t id = 0; id < p.store.size(); ++id) all_ids.push_back(id);

    auto record = [&](const char* name, GradCheckReport r) { out.push_back({name, seed, std::move(r)}); };

    {
      const Matrix r = uniform(n, o.base_channels, -1.0, 1.0, rng);
      record("local_feature_encode",
             check(p, local_ids, {}, [&](Binding& b, std::span<const Var>) {
               return weighted_sum(local_feature_encode(b, p, fx.input), r);
             }, o, seed));
    }
    {
      const std::size_t c = p.config.channels(1);
      const std::size_t m = NetworkConfig::points(n, 1);
      const std::size_t deep_rows = NetworkConfig::points(m, 1);
      std::vector<std::size_t> parent(m);
      std::uniform_int_distribution<std::size_t> pick(0, deep_rows - 1);
      for (auto& v : parent) v = pick(rng);
      const auto& kept = fx.sampling.kept[0];
      const Matrix r = uniform(m, c, -1.0, 1.0, rng);
      std::vector<ParamId> ids{p.msff[0].proj_shallow, p.msff[0].proj_deep};
      append(ids, p.msff[0].out);
      std::vector<Matrix> extras{uniform(n, c / kScaleFactor, 0.0, 1.0, rng), uniform(m, c, 0.0, 1.0, rng),
                                 uniform(deep_rows, c * kScaleFactor, 0.0, 1.0, rng)};
      record("msff", check(p, ids, std::move(extras), [&](Binding& b, std::span<const Var> x) {
               return weighted_sum(msff(b, p, p.msff[0], x[0], x[1], x[2], kept, parent).fused, r);
             }, o, seed));
    }
    {
      std::array<Matrix, kLevels> r;
      for (std::size_t i = 0; i < kLevels; ++i) {
        const std::size_t level = kLevels - 1 - i;
        std::size_t rows = n;
        for (std::size_t l = 0; l < level; ++l) rows = NetworkConfig::points(rows, 1);
        r[i] = uniform(rows, p.config.channels(level), -1.0, 1.0, rng);
      }
      std::vector<ParamId> ids = local_ids;
      ids.insert(ids.end(), body_ids.begin(), body_ids.end());
      record("decode", check(p, ids, {}, [&](Binding& b, std::span<const Var>) {
               const ForwardResult fr = forward(b, p, fx.input, fx.sampling);
               Var total = weighted_sum(fr.decoder[0], r[0]);
               for (std::size_t i = 1; i < kLevels; ++i) total = add(total, weighted_sum(fr.decoder[i], r[i]));
               return total;
             }, o, seed));
    }
    {
      std::vector<ParamId> ids = scale_ids;
      ids.insert(ids.end(), body_ids.begin(), body_ids.end());
      record("multiscale_loss", check(p, ids, {}, [&](Binding& b, std::span<const Var>) {
               const ForwardResult fr = forward(b, p, fx.input, fx.sampling);
               const auto labels = downsample_labels(fx.input.labels, fr.encoder);
               return multiscale_loss(b, p, fr.decoder, labels, fx.model.weights).total;
             }, o, seed));
    }
    {
      std::vector<Matrix> extras{uniform(n, o.base_channels, 0.0, 2.0, rng)};
      record("longtail_loss", check(p, tail_ids, std::move(extras), [&](Binding& b, std::span<const Var> x) {
               return longtail_loss(b, p, x[0], fx.input.labels, fx.model.tail).total;
             }, o, seed));
    }
    {
      record("hybrid_loss", check(p, all_ids, {}, [&](Binding& b, std::span<const Var>) {
               return sample_loss(b, fx.model, fx.input, fx.sampling, 0.7).total;
             }, o, seed));
    }
  }
  return out;
}

}  // namespace mpcseg
