#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "pfrouter/binary_io.hpp"
#include "pfrouter/ingest.hpp"
#include "pfrouter/predictors.hpp"

namespace pfrouter {

namespace {

Matrix sigmoid(const Matrix& z) {
  return z.unaryExpr([](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}

double bce_with_logits(const Matrix& logits, const Matrix& Y) {
  double total = 0.0;
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      const double z = logits(r, c);
      total += std::max(z, 0.0) - z * Y(r, c) + std::log1p(std::exp(-std::abs(z)));
    }
  }
  return total / static_cast<double>(logits.size());
}

struct AdamState {
  std::vector<Matrix> mw, vw;
  std::vector<Vector> mb, vb;
  long step = 0;

  explicit AdamState(const TrunkNet& net) {
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
      mw.push_back(Matrix::Zero(net.weights()[l].rows(), net.weights()[l].cols()));
      vw.push_back(mw.back());
      mb.push_back(Vector::Zero(net.biases()[l].size()));
      vb.push_back(mb.back());
    }
  }
};

struct Gradients {
  std::vector<Matrix> w;
  std::vector<Vector> b;
};

/// Forward pass retaining pre-activations, then backprop of mean BCE.
double backprop(const TrunkNet& net, const Matrix& X, const Matrix& Y, Gradients& grads) {
  const std::size_t L = net.num_layers();
  std::vector<Matrix> pre(L);
  std::vector<Matrix> act(L + 1);
  act[0] = X;
  for (std::size_t l = 0; l < L; ++l) {
    pre[l] = act[l] * net.weights()[l].transpose();
    pre[l].rowwise() += net.biases()[l].transpose();
    act[l + 1] = (l + 1 < L) ? Matrix(pre[l].cwiseMax(0.0)) : pre[l];
  }
  const Matrix& logits = pre[L - 1];
  const double loss = bce_with_logits(logits, Y);

  grads.w.resize(L);
  grads.b.resize(L);
  Matrix delta = (sigmoid(logits) - Y) / static_cast<double>(logits.size());
  for (std::size_t l = L; l-- > 0;) {
    grads.w[l].noalias() = delta.transpose() * act[l];
    grads.b[l] = delta.colwise().sum().transpose();
    if (l > 0) {
      Matrix upstream = delta * net.weights()[l];
      delta = upstream.cwiseProduct((pre[l - 1].array() > 0.0).cast<double>().matrix());
    }
  }
  return loss;
}

void adam_update(TrunkNet& net, AdamState& state, const Gradients& grads, const TrunkNetConfig& cfg) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.step));
  const double step_size = cfg.learning_rate / bc1;
  const double b1 = cfg.adam_beta1;
  const double b2 = cfg.adam_beta2;
  const double eps = cfg.adam_eps;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    Matrix gw = grads.w[l];
    if (cfg.weight_decay > 0) gw += cfg.weight_decay * net.weights()[l];
    state.mw[l] = b1 * state.mw[l] + (1 - b1) * gw;
    state.vw[l] = b2 * state.vw[l] + (1 - b2) * gw.cwiseAbs2();
    net.weights()[l].array() -=
        step_size * state.mw[l].array() / ((state.vw[l].array() / bc2).sqrt() + eps);

    const Vector& gb = grads.b[l];
    state.mb[l] = b1 * state.mb[l] + (1 - b1) * gb;
    state.vb[l] = b2 * state.vb[l] + (1 - b2) * gb.cwiseAbs2();
    net.biases()[l].array() -=
        step_size * state.mb[l].array() / ((state.vb[l].array() / bc2).sqrt() + eps);
  }
}

/// Regime-stratified partition of row indices into (train, validation).
std::pair<std::vector<Eigen::Index>, std::vector<Eigen::Index>> internal_split(const Matrix& Y, double val_fraction,
                                                                                std::uint64_t seed) {
  std::map<Regime, std::vector<Eigen::Index>> strata;
  for (Eigen::Index r = 0; r < Y.rows(); ++r) strata[consensus_regime_of_outcomes(Y.row(r))].push_back(r);
  std::vector<Eigen::Index> train, val;
  const double fractions[2] = {1.0 - val_fraction, val_fraction};
  for (auto& [regime, rows] : strata) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(regime)));
    rng.shuffle(rows);
    const auto counts = rows.size() >= 2 ? largest_remainder(rows.size(), fractions)
                                         : std::vector<std::size_t>{rows.size(), 0};
    train.insert(train.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(counts[0]));
    val.insert(val.end(), rows.begin() + static_cast<std::ptrdiff_t>(counts[0]), rows.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {train, val};
}

TrunkNetMember train_member(const Matrix& X, const Matrix& Y, const TrunkNetConfig& cfg, std::uint64_t master_seed,
                            std::uint64_t member_seed) {
  const std::uint64_t stream = derive_seed(master_seed, member_seed);
  auto [train_rows, val_rows] = internal_split(Y, cfg.val_fraction, derive_seed(stream, 1));
  if (val_rows.empty() || train_rows.empty()) throw DataError("internal validation split is empty");
  const Matrix X_val = X(val_rows, Eigen::all);
  const Matrix Y_val = Y(val_rows, Eigen::all);

  TrunkNetMember member;
  member.seed = member_seed;
  member.net = TrunkNet(static_cast<int>(X.cols()), cfg.trunk_hidden_sizes, static_cast<int>(Y.cols()));
  member.net.initialize(derive_seed(stream, 2));
  AdamState adam(member.net);
  Rng shuffle_rng(derive_seed(stream, 3));

  TrunkNet best = member.net;
  double best_loss = member.net.loss(X_val, Y_val);
  int best_epoch = 0;
  int stale = 0;
  Gradients grads;
  std::vector<Eigen::Index> order = train_rows;
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  int epoch = 0;
  for (epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t stop = std::min(order.size(), start + batch);
      std::vector<Eigen::Index> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(stop));
      const Matrix xb = X(idx, Eigen::all);
      const Matrix yb = Y(idx, Eigen::all);
      backprop(member.net, xb, yb, grads);
      adam_update(member.net, adam, grads, cfg);
    }
    const double val_loss = member.net.loss(X_val, Y_val);
    if (!std::isfinite(val_loss)) throw NumericError("validation loss diverged for seed " + std::to_string(member_seed));
    if (val_loss < best_loss) {
      best_loss = val_loss;
      best = member.net;
      best_epoch = epoch;
      stale = 0;
    } else if (++stale >= cfg.early_stop_patience) {
      break;
    }
  }
  member.net = std::move(best);
  member.val_loss = best_loss;
  member.best_epoch = best_epoch;
  member.epochs_run = std::min(epoch, cfg.max_epochs);
  return member;
}

}  // namespace

// ---------------------------------------------------------------------------

void TrunkNetConfig::validate() const {
  if (trunk_hidden_sizes.empty()) throw ConfigError("trunk_hidden_sizes must be nonempty");
  for (int h : trunk_hidden_sizes) {
    if (h <= 0) throw ConfigError("trunk_hidden_sizes must be positive");
  }
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (batch_size <= 0 || max_epochs <= 0 || early_stop_patience <= 0) {
    throw ConfigError("batch_size, max_epochs and early_stop_patience must be positive");
  }
  if (!(val_fraction > 0 && val_fraction < 1)) throw ConfigError("val_fraction must lie in (0, 1)");
  if (num_seeds <= 0 || ensemble_top <= 0 || ensemble_top > num_seeds) {
    throw ConfigError("need 0 < ensemble_top <= num_seeds");
  }
  if (weight_decay < 0) throw ConfigError("weight_decay must be nonnegative");
}

nlohmann::ordered_json TrunkNetConfig::to_json() const {
  return {{"trunk_hidden_sizes", trunk_hidden_sizes},
          {"learning_rate", learning_rate},
          {"batch_size", batch_size},
          {"max_epochs", max_epochs},
          {"early_stop_patience", early_stop_patience},
          {"val_fraction", val_fraction},
          {"num_seeds", num_seeds},
          {"ensemble_top", ensemble_top},
          {"weight_decay", weight_decay},
          {"adam_beta1", adam_beta1},
          {"adam_beta2", adam_beta2},
          {"adam_eps", adam_eps}};
}

TrunkNetConfig TrunkNetConfig::from_json(const nlohmann::json& j) {
  TrunkNetConfig c;
  try {
    c.trunk_hidden_sizes = j.value("trunk_hidden_sizes", c.trunk_hidden_sizes);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.num_seeds = j.value("num_seeds", c.num_seeds);
    c.ensemble_top = j.value("ensemble_top", c.ensemble_top);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.threads = j.value("threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("trunk config: ") + e.what());
  }
  c.validate();
  return c;
}

TrunkNet::TrunkNet(int input_dim, const std::vector<int>& trunk_sizes, int num_targets) {
  int fan_in = input_dim;
  for (int h : trunk_sizes) {
    weights_.push_back(Matrix::Zero(h, fan_in));
    biases_.push_back(Vector::Zero(h));
    fan_in = h;
  }
  weights_.push_back(Matrix::Zero(num_targets, fan_in));
  biases_.push_back(Vector::Zero(num_targets));
}

void TrunkNet::initialize(std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(weights_[l].cols()));
    for (Eigen::Index r = 0; r < weights_[l].rows(); ++r) {
      for (Eigen::Index c = 0; c < weights_[l].cols(); ++c) weights_[l](r, c) = bound * (2.0 * rng.uniform() - 1.0);
    }
    for (Eigen::Index i = 0; i < biases_[l].size(); ++i) biases_[l](i) = bound * (2.0 * rng.uniform() - 1.0);
  }
}

int TrunkNet::input_dim() const { return weights_.empty() ? 0 : static_cast<int>(weights_.front().cols()); }
int TrunkNet::num_targets() const { return weights_.empty() ? 0 : static_cast<int>(weights_.back().rows()); }

Matrix TrunkNet::forward(const Matrix& X) const {
  if (X.cols() != input_dim()) {
    throw DataError("feature dimension mismatch: network expects " + std::to_string(input_dim()) + ", got " +
                    std::to_string(X.cols()));
  }
  Matrix a = X;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    Matrix z = a * weights_[l].transpose();
    z.rowwise() += biases_[l].transpose();
    a = (l + 1 < weights_.size()) ? Matrix(z.cwiseMax(0.0)) : z;
  }
  return a;
}

double TrunkNet::loss(const Matrix& X, const Matrix& Y) const { return bce_with_logits(forward(X), Y); }

double TrunkNet::loss_and_gradient(const Matrix& X, const Matrix& Y, Vector& gradient) const {
  Gradients grads;
  const double loss = backprop(*this, X, Y, grads);
  gradient.resize(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index pos = 0;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    gradient.segment(pos, grads.w[l].size()) = grads.w[l].reshaped();
    pos += grads.w[l].size();
    gradient.segment(pos, grads.b[l].size()) = grads.b[l];
    pos += grads.b[l].size();
  }
  return loss;
}

std::size_t TrunkNet::parameter_count() const {
  std::size_t count = 0;
  for (std::size_t l = 0; l < weights_.size(); ++l) count += weights_[l].size() + biases_[l].size();
  return count;
}

Vector TrunkNet::flat_parameters() const {
  Vector out(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index pos = 0;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.segment(pos, weights_[l].size()) = weights_[l].reshaped();
    pos += weights_[l].size();
    out.segment(pos, biases_[l].size()) = biases_[l];
    pos += biases_[l].size();
  }
  return out;
}

void TrunkNet::set_flat_parameters(const Vector& params) {
  if (static_cast<std::size_t>(params.size()) != parameter_count()) throw DataError("parameter count mismatch");
  Eigen::Index pos = 0;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    weights_[l].reshaped() = params.segment(pos, weights_[l].size());
    pos += weights_[l].size();
    biases_[l] = params.segment(pos, biases_[l].size());
    pos += biases_[l].size();
  }
}

int TrunkNetEnsemble::input_dim() const { return members.empty() ? 0 : members.front().net.input_dim(); }

TrunkNetEnsemble train_shared_trunk(const Matrix& X_train, const Matrix& Y_train,
                                    const std::vector<std::string>& target_order, const TrunkNetConfig& cfg,
                                    std::uint64_t master_seed) {
  cfg.validate();
  if (X_train.rows() != Y_train.rows()) throw DataError("feature and label row counts differ");
  if (X_train.rows() < 50) throw DataError("SharedTrunkNet needs at least 50 training rows");
  if (Y_train.cols() < 1) throw DataError("SharedTrunkNet needs at least one target");
  if (static_cast<Eigen::Index>(target_order.size()) != Y_train.cols()) {
    throw DataError("target_order does not match label columns");
  }
  if (!X_train.allFinite()) throw DataError("training features contain non-finite values");
  for (Eigen::Index k = 0; k < Y_train.cols(); ++k) {
    const double positives = Y_train.col(k).sum();
    if (positives == 0.0 || positives == static_cast<double>(Y_train.rows())) {
      throw DataError("target '" + target_order[static_cast<std::size_t>(k)] +
                      "' has single-class training labels");
    }
  }

  TrunkNetEnsemble ens;
  ens.config = cfg;
  ens.target_order = target_order;
  ens.master_seed = master_seed;
  ens.members.resize(static_cast<std::size_t>(cfg.num_seeds));
  parallel_for(ens.members.size(), cfg.threads, [&](std::size_t i) {
    ens.members[i] = train_member(X_train, Y_train, cfg, master_seed, i);
  });

  std::vector<std::size_t> order(ens.members.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ma = ens.members[a];
    const auto& mb = ens.members[b];
    return ma.val_loss != mb.val_loss ? ma.val_loss < mb.val_loss : ma.seed < mb.seed;
  });
  ens.selected.assign(order.begin(), order.begin() + cfg.ensemble_top);
  return ens;
}

Matrix predict_probabilities(const TrunkNetEnsemble& ensemble, const Matrix& X) {
  if (ensemble.selected.empty()) throw DataError("ensemble has no selected members");
  Matrix total = Matrix::Zero(X.rows(), static_cast<Eigen::Index>(ensemble.target_order.size()));
  for (std::size_t idx : ensemble.selected) total += sigmoid(ensemble.members.at(idx).net.forward(X));
  return total / static_cast<double>(ensemble.selected.size());
}

PredictionMatrix predict(const TrunkNetEnsemble& ensemble, const Matrix& X, std::vector<std::string> query_ids) {
  if (!query_ids.empty() && static_cast<Eigen::Index>(query_ids.size()) != X.rows()) {
    throw DataError("query id count does not match feature rows");
  }
  return PredictionMatrix{std::move(query_ids), ensemble.target_order, predict_probabilities(ensemble, X)};
}

void save_ensemble(const TrunkNetEnsemble& ensemble, const std::filesystem::path& path) {
  nlohmann::ordered_json header;
  header["config"] = ensemble.config.to_json();
  header["target_order"] = ensemble.target_order;
  header["master_seed"] = ensemble.master_seed;
  header["selected"] = ensemble.selected;
  auto members = nlohmann::ordered_json::array();
  for (const auto& m : ensemble.members) {
    members.push_back(
        {{"seed", m.seed}, {"val_loss", m.val_loss}, {"epochs_run", m.epochs_run}, {"best_epoch", m.best_epoch}});
  }
  header["members"] = std::move(members);
  io::ByteWriter w;
  w.magic(io::kNetMagic);
  w.string(header.dump());
  for (const auto& m : ensemble.members) {
    w.u32(static_cast<std::uint32_t>(m.net.num_layers()));
    for (std::size_t l = 0; l < m.net.num_layers(); ++l) {
      w.matrix(m.net.weights()[l]);
      w.vector(m.net.biases()[l]);
    }
  }
  w.save(path);
}

TrunkNetEnsemble load_ensemble(const std::filesystem::path& path) {
  auto r = io::ByteReader::load(path);
  r.expect_magic(io::kNetMagic);
  TrunkNetEnsemble ens;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.string());
    ens.config = TrunkNetConfig::from_json(header.at("config"));
    ens.target_order = header.at("target_order").get<std::vector<std::string>>();
    ens.master_seed = header.at("master_seed").get<std::uint64_t>();
    ens.selected = header.at("selected").get<std::vector<std::size_t>>();
    for (const auto& m : header.at("members")) {
      TrunkNetMember member;
      member.seed = m.at("seed").get<std::uint64_t>();
      member.val_loss = m.at("val_loss").get<double>();
      member.epochs_run = m.at("epochs_run").get<int>();
      member.best_epoch = m.at("best_epoch").get<int>();
      ens.members.push_back(std::move(member));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  for (auto& member : ens.members) {
    const std::uint32_t layers = r.u32();
    for (std::uint32_t l = 0; l < layers; ++l) {
      member.net.weights().push_back(r.matrix());
      member.net.biases().push_back(r.vector());
    }
  }
  for (std::size_t idx : ens.selected) {
    if (idx >= ens.members.size()) throw DataError(path.string() + ": selected member out of range");
  }
  return ens;
}

GradientCheckResult gradient_check(const TrunkNetConfig& cfg, std::uint64_t seed, double step) {
  constexpr int kInputDim = 5;
  constexpr int kTargets = 2;
  constexpr int kBatch = 16;
  TrunkNet net(kInputDim, cfg.trunk_hidden_sizes, kTargets);
  net.initialize(seed);
  Rng rng(derive_seed(seed, 7));
  Matrix X(kBatch, kInputDim);
  Matrix Y(kBatch, kTargets);
  for (int r = 0; r < kBatch; ++r) {
    for (int c = 0; c < kInputDim; ++c) X(r, c) = rng.normal();
    for (int k = 0; k < kTargets; ++k) Y(r, k) = static_cast<double>((r + k) % 2);
  }
  Vector analytic;
  net.loss_and_gradient(X, Y, analytic);
  Vector params = net.flat_parameters();
  GradientCheckResult result;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double original = params(i);
    params(i) = original + step;
    net.set_flat_parameters(params);
    const double up = net.loss(X, Y);
    params(i) = original - step;
    net.set_flat_parameters(params);
    const double down = net.loss(X, Y);
    params(i) = original;
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max(std::abs(analytic(i)) + std::abs(numeric), 1e-7);
    result.max_relative_error = std::max(result.max_relative_error, std::abs(analytic(i) - numeric) / denom);
    ++result.parameters_checked;
  }
  net.set_flat_parameters(params);
  return result;
}

std::string format_predictions_tsv(const PredictionMatrix& predictions) {
  std::ostringstream out;
  out << "query_id";
  for (const auto& t : predictions.target_order) out << '\t' << t;
  out << '\n';
  char buf[32];
  for (Eigen::Index r = 0; r < predictions.p_hat.rows(); ++r) {
    out << predictions.query_ids.at(static_cast<std::size_t>(r));
    for (Eigen::Index c = 0; c < predictions.p_hat.cols(); ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", predictions.p_hat(r, c));
      out << '\t' << buf;
    }
    out << '\n';
  }
  return out.str();
}

PredictionMatrix parse_predictions_tsv(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  PredictionMatrix out;
  auto split_tabs = [](const std::string& s) {
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (;;) {
      const auto tab = s.find('\t', start);
      cells.push_back(s.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    return cells;
  };
  if (!std::getline(in, line)) throw DataError(origin + ": empty predictions file");
  auto header = split_tabs(line);
  if (header.size() < 2 || header[0] != "query_id") throw DataError(origin + ": bad predictions header");
  out.target_order.assign(header.begin() + 1, header.end());
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_tabs(line);
    if (cells.size() != header.size()) throw DataError(origin + ": ragged predictions row");
    out.query_ids.push_back(cells[0]);
    std::vector<double> row;
    for (std::size_t c = 1; c < cells.size(); ++c) {
      try {
        row.push_back(std::stod(cells[c]));
      } catch (const std::exception&) {
        throw DataError(origin + ": bad probability '" + cells[c] + "'");
      }
      if (!(row.back() >= 0.0 && row.back() <= 1.0)) throw DataError(origin + ": probability outside [0, 1]");
    }
    rows.push_back(std::move(row));
  }
  out.p_hat.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(out.target_order.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      out.p_hat(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    }
  }
  return out;
}

}  // namespace pfrouter
