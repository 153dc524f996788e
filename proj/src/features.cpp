#include "pfrouter/features.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <Eigen/SVD>

#include "pfrouter/binary_io.hpp"

namespace pfrouter {

namespace {

constexpr int kOversample = 10;
constexpr int kPowerIterations = 2;

Matrix thin_q(const Matrix& Y) {
  Eigen::HouseholderQR<Matrix> qr(Y);
  return qr.householderQ() * Matrix::Identity(Y.rows(), Y.cols());
}

void fix_signs(Matrix& components) {
  for (Eigen::Index r = 0; r < components.rows(); ++r) {
    Eigen::Index arg = 0;
    components.row(r).cwiseAbs().maxCoeff(&arg);
    if (components(r, arg) < 0) components.row(r) *= -1.0;
  }
}

}  // namespace

PcaModel fit_pca(const Matrix& X, int d_pca, std::uint64_t seed) {
  const Eigen::Index n = X.rows();
  const Eigen::Index d = X.cols();
  if (d_pca < 1) throw ConfigError("pca dim must be >= 1");
  if (n < 2 || d_pca > std::min<Eigen::Index>(n - 1, d)) {
    throw DataError("pca dim exceeds rank bound (d_pca=" + std::to_string(d_pca) + ", n=" + std::to_string(n) +
                    ", d=" + std::to_string(d) + ")");
  }
  PcaModel model;
  model.mean = X.colwise().mean().transpose();
  const Matrix centered = X.rowwise() - model.mean.transpose();

  if (d <= kExactPcaMaxDim) {
    const Matrix cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
    if (solver.info() != Eigen::Success) throw NumericError("covariance eigendecomposition failed");
    model.components.resize(d_pca, d);
    model.explained_variance.resize(d_pca);
    for (int i = 0; i < d_pca; ++i) {
      const Eigen::Index src = d - 1 - i;  // eigenvalues ascend
      model.components.row(i) = solver.eigenvectors().col(src).transpose();
      model.explained_variance(i) = std::max(0.0, solver.eigenvalues()(src));
    }
  } else {
    const Eigen::Index k = std::min<Eigen::Index>(d_pca + kOversample, std::min<Eigen::Index>(n - 1, d));
    Rng rng(seed);
    Matrix omega(d, k);
    for (Eigen::Index c = 0; c < k; ++c) {
      for (Eigen::Index r = 0; r < d; ++r) omega(r, c) = rng.normal();
    }
    Matrix q = thin_q(centered * omega);
    for (int it = 0; it < kPowerIterations; ++it) {
      q = thin_q(centered * thin_q(centered.transpose() * q));
    }
    const Matrix b = q.transpose() * centered;
    Eigen::BDCSVD<Matrix> svd(b, Eigen::ComputeThinV);
    model.components = svd.matrixV().leftCols(d_pca).transpose();
    model.explained_variance =
        svd.singularValues().head(d_pca).array().square() / static_cast<double>(n - 1);
  }
  fix_signs(model.components);
  return model;
}

Matrix project(const PcaModel& model, const Matrix& X) {
  if (X.cols() != model.mean.size()) {
    throw DataError("pca projection dimension mismatch: model expects " + std::to_string(model.mean.size()) +
                    " columns, got " + std::to_string(X.cols()));
  }
  return (X.rowwise() - model.mean.transpose()) * model.components.transpose();
}

void save_pca(const PcaModel& model, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.magic(io::kPcaMagic);
  w.u32(static_cast<std::uint32_t>(model.output_dim()));
  w.u32(static_cast<std::uint32_t>(model.input_dim()));
  w.vector(model.mean);
  w.matrix(model.components);
  w.vector(model.explained_variance);
  w.save(path);
}

PcaModel load_pca(const std::filesystem::path& path) {
  auto r = io::ByteReader::load(path);
  r.expect_magic(io::kPcaMagic);
  const auto d_pca = r.u32();
  const auto d = r.u32();
  PcaModel model;
  model.mean = r.vector();
  model.components = r.matrix();
  model.explained_variance = r.vector();
  if (model.mean.size() != d || model.components.rows() != d_pca || model.components.cols() != d ||
      model.explained_variance.size() != d_pca) {
    throw DataError(path.string() + ": inconsistent pca dimensions");
  }
  return model;
}

std::string_view to_string(LayerCriterion criterion) {
  return criterion == LayerCriterion::kFisherJ ? "fisher_J" : "cv_auc";
}

LayerCriterion parse_layer_criterion(std::string_view text) {
  if (text == "fisher_J" || text == "fisher_j" || text == "fisher") return LayerCriterion::kFisherJ;
  if (text == "cv_auc") return LayerCriterion::kCvAuc;
  throw ConfigError("unknown layer criterion '" + std::string(text) + "'");
}

const LayerChoice& LayerSelection::at(const std::string& model_id) const {
  auto it = choices.find(model_id);
  if (it == choices.end()) throw DataError("no layer selection for target '" + model_id + "'");
  return it->second;
}

nlohmann::ordered_json LayerSelection::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [model, c] : choices) {
    j[model] = {{"encoder_id", c.encoder_id},
                {"layer", c.layer},
                {"pooling", std::string(to_string(c.pooling))},
                {"score", c.score},
                {"criterion", std::string(to_string(c.criterion))}};
  }
  return j;
}

LayerSelection LayerSelection::from_json(const nlohmann::json& j) {
  LayerSelection sel;
  try {
    for (const auto& [model, c] : j.items()) {
      sel.choices[model] = LayerChoice{c.at("encoder_id").get<std::string>(), c.at("layer").get<int>(),
                                       parse_pooling(c.at("pooling").get<std::string>()),
                                       c.value("score", 0.0),
                                       parse_layer_criterion(c.value("criterion", std::string("fisher_J")))};
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("layer selection: ") + e.what());
  }
  return sel;
}

FeatureMatrix build_features(const std::map<std::string, ActivationStore>& stores, const LayerSelection& selection,
                             const std::map<std::string, PcaModel>& pcas, const ModelPool& pool,
                             std::span<const std::string> ids) {
  FeatureMatrix out;
  out.query_ids.assign(ids.begin(), ids.end());
  std::vector<Matrix> blocks;
  std::size_t offset = 0;
  for (const auto& model : pool.models) {
    const LayerChoice& choice = selection.at(model.model_id);
    auto store_it = stores.find(choice.encoder_id);
    if (store_it == stores.end()) throw DataError("no activation store for encoder '" + choice.encoder_id + "'");
    auto pca_it = pcas.find(model.model_id);
    if (pca_it == pcas.end()) throw DataError("missing PCA for target '" + model.model_id + "'");
    blocks.push_back(project(pca_it->second, store_it->second.gather(choice.key(), ids)));
    const auto len = static_cast<std::size_t>(blocks.back().cols());
    out.segments.push_back(FeatureSegment{model.model_id, offset, len});
    offset += len;
  }
  out.values.resize(static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(offset));
  for (std::size_t s = 0; s < blocks.size(); ++s) {
    out.values.middleCols(static_cast<Eigen::Index>(out.segments[s].offset), blocks[s].cols()) = blocks[s];
  }
  return out;
}

std::map<std::string, PcaModel> fit_target_pcas(const std::map<std::string, ActivationStore>& stores,
                                                const LayerSelection& selection, const ModelPool& pool,
                                                std::span<const std::string> train_ids, int d_pca,
                                                std::uint64_t seed, int threads) {
  // Targets that share an (encoder, layer, pooling) share one fit.
  using Source = std::tuple<std::string, int, Pooling>;
  std::vector<Source> sources;
  for (const auto& model : pool.models) {
    const auto& c = selection.at(model.model_id);
    Source s{c.encoder_id, c.layer, c.pooling};
    if (std::find(sources.begin(), sources.end(), s) == sources.end()) sources.push_back(s);
  }
  std::vector<PcaModel> fitted(sources.size());
  parallel_for(sources.size(), threads, [&](std::size_t i) {
    const auto& [encoder, layer, pooling] = sources[i];
    auto it = stores.find(encoder);
    if (it == stores.end()) throw DataError("no activation store for encoder '" + encoder + "'");
    fitted[i] = fit_pca(it->second.gather(MatrixKey{layer, pooling}, train_ids), d_pca, seed);
  });
  std::map<std::string, PcaModel> out;
  for (const auto& model : pool.models) {
    const auto& c = selection.at(model.model_id);
    const auto pos = std::find(sources.begin(), sources.end(), Source{c.encoder_id, c.layer, c.pooling});
    out.emplace(model.model_id, fitted[static_cast<std::size_t>(pos - sources.begin())]);
  }
  return out;
}

void save_features(const FeatureMatrix& features, const std::filesystem::path& path) {
  nlohmann::ordered_json header;
  header["query_ids"] = features.query_ids;
  auto segs = nlohmann::ordered_json::array();
  for (const auto& s : features.segments) segs.push_back({{"model_id", s.model_id}, {"offset", s.offset}, {"length", s.length}});
  header["segments"] = std::move(segs);
  io::ByteWriter w;
  w.magic(io::kFeatureMagic);
  w.string(header.dump());
  w.matrix(features.values);
  w.save(path);
}

FeatureMatrix load_features(const std::filesystem::path& path) {
  auto r = io::ByteReader::load(path);
  r.expect_magic(io::kFeatureMagic);
  FeatureMatrix out;
  try {
    const auto header = nlohmann::json::parse(r.string());
    out.query_ids = header.at("query_ids").get<std::vector<std::string>>();
    for (const auto& s : header.at("segments")) {
      out.segments.push_back(FeatureSegment{s.at("model_id").get<std::string>(), s.at("offset").get<std::size_t>(),
                                            s.at("length").get<std::size_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  out.values = r.matrix();
  if (static_cast<std::size_t>(out.values.rows()) != out.query_ids.size()) {
    throw DataError(path.string() + ": feature rows do not match query ids");
  }
  return out;
}

}  // namespace pfrouter
