#include "pfrouter/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "pfrouter/binary_io.hpp"

namespace pfrouter {

namespace {

constexpr double kBaseRateTolerance = 0.02;

// stream ids for derive_seed
constexpr std::uint64_t kDirectionStream = 1;
constexpr std::uint64_t kMetaStream = 2;
constexpr std::uint64_t kLabelStream = 3;
constexpr std::uint64_t kShiftStream = 4;
constexpr std::uint64_t kLayerStreamBase = 1000;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::uint64_t layer_stream(int encoder, int layer, Pooling pooling) {
  return kLayerStreamBase + static_cast<std::uint64_t>(encoder) * 4096 + static_cast<std::uint64_t>(layer) * 2 +
         static_cast<std::uint64_t>(pooling);
}

MatrixF gaussian(std::size_t rows, int cols, double std_dev, std::uint64_t seed) {
  Rng rng(seed);
  MatrixF m(static_cast<Eigen::Index>(rows), cols);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = static_cast<float>(std_dev * rng.normal());
  }
  return m;
}

Vector unit_vector(int dim, Rng& rng) {
  Vector v(dim);
  do {
    for (int i = 0; i < dim; ++i) v(i) = rng.normal();
  } while (!(v.norm() > 0.0));
  return v / v.norm();
}

double realized_rate(const Vector& logits, const Vector& uniforms, double bias) {
  std::size_t hit = 0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (uniforms(i) < sigmoid(logits(i) + bias)) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(logits.size());
}

/// Bias whose realized rate under the fixed uniforms is closest to `target`.
double solve_bias(const Vector& logits, const Vector& uniforms, double target) {
  double lo = -60.0;
  double hi = 60.0;
  for (int it = 0; it < 200 && hi - lo > 1e-12; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (realized_rate(logits, uniforms, mid) < target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  const double r_lo = realized_rate(logits, uniforms, lo);
  const double r_hi = realized_rate(logits, uniforms, hi);
  return std::abs(r_lo - target) < std::abs(r_hi - target) ? lo : hi;
}

std::string query_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "q%06zu", i);
  return buf;
}

}  // namespace

double SynthSpec::strength(int target) const {
  return signal_strength.size() == 1 ? signal_strength[0] : signal_strength.at(static_cast<std::size_t>(target));
}

double SynthSpec::base_rate(int target) const {
  return base_rates.size() == 1 ? base_rates[0] : base_rates.at(static_cast<std::size_t>(target));
}

void SynthSpec::validate() const {
  if (n_queries < 2) throw ConfigError("synth: n_queries must be at least 2");
  if (hidden_dim < 1) throw ConfigError("synth: hidden_dim must be positive");
  if (num_layers < 1) throw ConfigError("synth: num_layers must be positive");
  if (num_targets < 2) throw ConfigError("synth: need at least two targets");
  if (signal_layer < (num_layers + 1) / 2 || signal_layer > num_layers) {
    throw ConfigError("synth: signal_layer must lie in the upper half [" + std::to_string((num_layers + 1) / 2) +
                      ", " + std::to_string(num_layers) + "]");
  }
  const auto per_target = [&](std::size_t size, const char* name) {
    if (size != 1 && size != static_cast<std::size_t>(num_targets)) {
      throw ConfigError(std::string("synth: ") + name + " needs 1 or num_targets entries");
    }
  };
  per_target(signal_strength.size(), "signal_strength");
  per_target(base_rates.size(), "base_rates");
  for (int k = 0; k < num_targets; ++k) {
    if (!(strength(k) >= 0.0)) throw ConfigError("synth: signal strength must be nonnegative");
    if (!(base_rate(k) > 0.0 && base_rate(k) < 1.0)) throw ConfigError("synth: base rates must lie in (0, 1)");
  }
  if (!(noise_std > 0.0)) throw ConfigError("synth: noise_std must be positive");
  if (!(mean_pool_noise_std >= 0.0)) throw ConfigError("synth: mean_pool_noise_std must be nonnegative");
  if (!(anisotropy_shift >= 0.0)) throw ConfigError("synth: anisotropy_shift must be nonnegative");
  if (benchmark_weights.empty()) throw ConfigError("synth: benchmark_weights is empty");
  for (const auto& [tag, w] : benchmark_weights) {
    if (!(w > 0.0)) throw ConfigError("synth: benchmark weight for '" + tag + "' must be positive");
  }
  if (input_tokens_min < 1 || input_tokens_max < input_tokens_min) {
    throw ConfigError("synth: input token range is empty");
  }
  if (!pricing.empty() && pricing.size() != static_cast<std::size_t>(num_targets)) {
    throw ConfigError("synth: pricing needs num_targets entries");
  }
  if (decoy_encoders < 0) throw ConfigError("synth: decoy_encoders must be nonnegative");
}

nlohmann::ordered_json SynthSpec::to_json() const {
  nlohmann::ordered_json j;
  j["n_queries"] = n_queries;
  j["hidden_dim"] = hidden_dim;
  j["num_layers"] = num_layers;
  j["num_targets"] = num_targets;
  j["signal_layer"] = signal_layer;
  j["signal_strength"] = signal_strength;
  j["noise_std"] = noise_std;
  j["base_rates"] = base_rates;
  j["mean_pool_noise_std"] = mean_pool_noise_std;
  j["anisotropy_shift"] = anisotropy_shift;
  j["benchmark_weights"] = benchmark_weights;
  j["input_tokens_min"] = input_tokens_min;
  j["input_tokens_max"] = input_tokens_max;
  if (!pricing.empty()) j["pricing"] = ModelPool{pricing}.to_json().at("models");
  j["encoder_id"] = encoder_id;
  j["decoy_encoders"] = decoy_encoders;
  j["seed"] = seed;
  return j;
}

SynthSpec SynthSpec::from_json(const nlohmann::json& j) {
  SynthSpec s;
  try {
    if (!j.is_object()) throw ConfigError("synth spec must be a JSON object");
    static const std::set<std::string> known{"n_queries",        "hidden_dim",         "num_layers",
                                             "num_targets",      "signal_layer",       "signal_strength",
                                             "noise_std",        "base_rates",         "mean_pool_noise_std",
                                             "anisotropy_shift", "benchmark_weights",  "input_tokens_min",
                                             "input_tokens_max", "pricing",            "encoder_id",
                                             "decoy_encoders",   "seed"};
    for (const auto& [key, value] : j.items()) {
      if (!known.contains(key)) throw ConfigError("synth spec: unknown field '" + key + "'");
    }
    const auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("n_queries", s.n_queries);
    get("hidden_dim", s.hidden_dim);
    get("num_layers", s.num_layers);
    get("num_targets", s.num_targets);
    get("signal_layer", s.signal_layer);
    if (j.contains("signal_strength")) {
      const auto& v = j.at("signal_strength");
      s.signal_strength = v.is_array() ? v.get<std::vector<double>>() : std::vector<double>{v.get<double>()};
    }
    get("noise_std", s.noise_std);
    if (j.contains("base_rates")) {
      const auto& v = j.at("base_rates");
      s.base_rates = v.is_array() ? v.get<std::vector<double>>() : std::vector<double>{v.get<double>()};
    }
    get("mean_pool_noise_std", s.mean_pool_noise_std);
    get("anisotropy_shift", s.anisotropy_shift);
    get("benchmark_weights", s.benchmark_weights);
    get("input_tokens_min", s.input_tokens_min);
    get("input_tokens_max", s.input_tokens_max);
    if (j.contains("pricing")) s.pricing = ModelPool::from_json({{"models", j.at("pricing")}}).models;
    get("encoder_id", s.encoder_id);
    get("decoy_encoders", s.decoy_encoders);
    get("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synth spec: ") + e.what());
  }
  s.validate();
  return s;
}

nlohmann::ordered_json SynthMetadata::to_json() const {
  nlohmann::ordered_json j;
  j["spec"] = spec.to_json();
  j["signal_encoder"] = signal_encoder;
  j["signal_layer"] = signal_layer;
  auto targets_json = nlohmann::ordered_json::array();
  for (const auto& t : targets) {
    targets_json.push_back({{"model_id", t.model_id},
                            {"strength", t.strength},
                            {"bias", t.bias},
                            {"requested_base_rate", t.requested_base_rate},
                            {"realized_base_rate", t.realized_base_rate},
                            {"direction", std::vector<double>(t.direction.data(), t.direction.data() + t.direction.size())}});
  }
  j["targets"] = targets_json;
  return j;
}

SynthMetadata SynthMetadata::from_json(const nlohmann::json& j) {
  try {
    SynthMetadata m;
    m.spec = SynthSpec::from_json(j.at("spec"));
    m.signal_encoder = j.at("signal_encoder").get<std::string>();
    m.signal_layer = j.at("signal_layer").get<int>();
    for (const auto& t : j.at("targets")) {
      SynthTargetTruth truth;
      truth.model_id = t.at("model_id").get<std::string>();
      truth.strength = t.at("strength").get<double>();
      truth.bias = t.at("bias").get<double>();
      truth.requested_base_rate = t.at("requested_base_rate").get<double>();
      truth.realized_base_rate = t.at("realized_base_rate").get<double>();
      const auto dir = t.at("direction").get<std::vector<double>>();
      truth.direction = Eigen::Map<const Vector>(dir.data(), static_cast<Eigen::Index>(dir.size()));
      m.targets.push_back(std::move(truth));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed synth metadata: ") + e.what());
  }
}

SynthDataset generate(const SynthSpec& spec) {
  spec.validate();
  const std::size_t n = spec.n_queries;
  const int d = spec.hidden_dim;
  const int K = spec.num_targets;

  SynthDataset out;
  out.metadata.spec = spec;
  out.metadata.signal_encoder = spec.encoder_id;
  out.metadata.signal_layer = spec.signal_layer;

  // pool
  std::vector<std::string> model_ids;
  for (int k = 0; k < K; ++k) {
    ModelSpec m;
    if (!spec.pricing.empty()) {
      m = spec.pricing[static_cast<std::size_t>(k)];
    } else {
      const double factor = 1.0 + static_cast<double>(k) / static_cast<double>(K - 1);
      m = ModelSpec{"model_" + std::to_string(k), 0.2 * factor, 1.0 * factor, 800};
    }
    model_ids.push_back(m.model_id);
    out.pool.models.push_back(std::move(m));
  }
  out.pool.validate();

  // query metadata
  std::vector<std::string> ids(n);
  std::vector<std::string> benchmarks(n);
  std::vector<std::int64_t> tokens(n);
  {
    Rng rng(derive_seed(spec.seed, kMetaStream));
    double total = 0.0;
    for (const auto& [tag, w] : spec.benchmark_weights) total += w;
    const auto span = static_cast<std::uint64_t>(spec.input_tokens_max - spec.input_tokens_min + 1);
    for (std::size_t i = 0; i < n; ++i) {
      ids[i] = query_id(i);
      double u = rng.uniform() * total;
      benchmarks[i] = spec.benchmark_weights.rbegin()->first;
      for (const auto& [tag, w] : spec.benchmark_weights) {
        if (u < w) {
          benchmarks[i] = tag;
          break;
        }
        u -= w;
      }
      tokens[i] = spec.input_tokens_min + static_cast<std::int64_t>(rng.below(span));
    }
  }

  Vector shift = Vector::Zero(d);
  if (spec.anisotropy_shift > 0.0) {
    Rng rng(derive_seed(spec.seed, kShiftStream));
    shift = spec.anisotropy_shift * unit_vector(d, rng);
  }

  // encoders: the signal encoder first, then decoys
  std::vector<std::string> encoders{spec.encoder_id};
  for (int e = 0; e < spec.decoy_encoders; ++e) encoders.push_back(spec.encoder_id + "-decoy" + std::to_string(e + 1));

  std::vector<MatrixKey> keys;
  for (int layer = 0; layer <= spec.num_layers; ++layer) {
    keys.push_back(MatrixKey{layer, Pooling::kLastToken});
    keys.push_back(MatrixKey{layer, Pooling::kMean});
  }
  const MatrixKey signal_key{spec.signal_layer, Pooling::kLastToken};

  MatrixF signal;
  for (std::size_t e = 0; e < encoders.size(); ++e) {
    std::vector<MatrixF> mats(keys.size());
    parallel_for(keys.size(), 1, [&](std::size_t i) {
      mats[i] = gaussian(n, d, spec.noise_std, derive_seed(spec.seed, layer_stream(static_cast<int>(e), keys[i].layer, keys[i].pooling)));
    });
    if (e == 0) {
      // the mean-pooled signal layer is a noisier copy of the last-token states
      const auto last = static_cast<std::size_t>(std::find(keys.begin(), keys.end(), signal_key) - keys.begin());
      signal = mats[last];
      MatrixF& pooled = mats[last + 1];
      pooled = signal + (pooled * static_cast<float>(spec.mean_pool_noise_std / spec.noise_std));
    }
    ActivationManifest manifest;
    manifest.encoder_id = encoders[e];
    manifest.num_layers = spec.num_layers;
    manifest.hidden_dim = d;
    manifest.query_ids = ids;
    std::map<MatrixKey, MatrixF> by_key;
    for (std::size_t i = 0; i < keys.size(); ++i) {
      manifest.matrices.push_back(MatrixEntry{keys[i], canonical_matrix_name(keys[i])});
      if (spec.anisotropy_shift > 0.0) mats[i].rowwise() += shift.cast<float>().transpose();
      by_key.emplace(keys[i], std::move(mats[i]));
    }
    out.stores.emplace(encoders[e], ActivationStore::from_matrices(std::move(manifest), std::move(by_key)));
  }

  // labels from the unshifted signal states
  const Matrix h = signal.cast<double>();
  Rng dir_rng(derive_seed(spec.seed, kDirectionStream));
  Rng label_rng(derive_seed(spec.seed, kLabelStream));
  std::vector<std::uint8_t> correct(n * static_cast<std::size_t>(K));
  out.true_probability.resize(static_cast<Eigen::Index>(n), K);
  for (int k = 0; k < K; ++k) {
    SynthTargetTruth truth;
    truth.model_id = model_ids[static_cast<std::size_t>(k)];
    truth.direction = unit_vector(d, dir_rng);
    truth.strength = spec.strength(k);
    truth.requested_base_rate = spec.base_rate(k);
    const Vector logits = truth.strength * (h * truth.direction);
    Vector uniforms(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) uniforms(static_cast<Eigen::Index>(i)) = label_rng.uniform();
    truth.bias = solve_bias(logits, uniforms, truth.requested_base_rate);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const double p = sigmoid(logits(r) + truth.bias);
      out.true_probability(r, k) = p;
      const bool y = uniforms(r) < p;
      correct[i * static_cast<std::size_t>(K) + static_cast<std::size_t>(k)] = y ? 1 : 0;
      hits += y ? 1 : 0;
    }
    truth.realized_base_rate = static_cast<double>(hits) / static_cast<double>(n);
    if (std::abs(truth.realized_base_rate - truth.requested_base_rate) > kBaseRateTolerance) {
      throw DataError("synth: base rate " + std::to_string(truth.requested_base_rate) + " for '" + truth.model_id +
                      "' is unattainable at strength " + std::to_string(truth.strength) + " (closest " +
                      std::to_string(truth.realized_base_rate) + ")");
    }
    out.metadata.targets.push_back(std::move(truth));
  }
  out.labels = LabelTable(model_ids, ids, std::move(benchmarks), std::move(tokens), std::move(correct));
  return out;
}

void write_dataset(const SynthDataset& dataset, const std::filesystem::path& directory) {
  std::filesystem::create_directories(directory);
  for (const auto& [id, store] : dataset.stores) write_activation_store(store, directory / "activations" / id);
  io::write_text(directory / "labels.csv", format_label_csv(dataset.labels));
  io::write_text(directory / "pool.json", dataset.pool.to_json().dump(2) + "\n");
  io::write_text(directory / "metadata.json", dataset.metadata.to_json().dump(2) + "\n");
}

double soft_label_auc(std::span<const double> scores, std::span<const double> p) {
  if (scores.size() != p.size()) throw DataError("soft_label_auc: size mismatch");
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double numerator = 0.0;
  double neg_below = 0.0;
  double pos_total = 0.0;
  double neg_total = 0.0;
  double self_pairs = 0.0;
  for (std::size_t g = 0; g < order.size();) {
    std::size_t end = g;
    double pos = 0.0, neg = 0.0, self = 0.0;
    while (end < order.size() && scores[order[end]] == scores[order[g]]) {
      const double pi = p[order[end]];
      pos += pi;
      neg += 1.0 - pi;
      self += pi * (1.0 - pi);
      ++end;
    }
    numerator += pos * neg_below + 0.5 * (pos * neg - self);
    neg_below += neg;
    pos_total += pos;
    neg_total += neg;
    self_pairs += self;
    g = end;
  }
  const double denominator = pos_total * neg_total - self_pairs;
  if (!(denominator > 0.0)) throw DataError("soft_label_auc: degenerate soft labels");
  return numerator / denominator;
}

double bayes_optimal_auc(double strength, double bias, double noise_std, std::size_t draws, std::uint64_t seed) {
  if (draws < 2) throw ConfigError("bayes_optimal_auc needs at least 2 draws");
  // ⟨w, h⟩ ~ N(0, noise²) for a unit w and isotropic h
  Rng rng(seed);
  std::vector<double> scores(draws);
  std::vector<double> p(draws);
  for (std::size_t i = 0; i < draws; ++i) {
    const double logit = strength * noise_std * rng.normal() + bias;
    scores[i] = logit;
    p[i] = sigmoid(logit);
  }
  return soft_label_auc(scores, p);
}

}  // namespace pfrouter
