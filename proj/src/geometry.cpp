#include "pfrouter/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <Eigen/Eigenvalues>

namespace pfrouter {

namespace {

std::string describe(const LayerDiagnostics& d) {
  return "encoder '" + d.encoder_id + "' layer " + std::to_string(d.layer) + " " + std::string(to_string(d.pooling));
}

/// Strict "better" relation used by select_layers, including its tie rules.
bool better_candidate(double score, const LayerDiagnostics& a, double best_score, const LayerDiagnostics& b) {
  if (score != best_score) return score > best_score;
  if (a.layer != b.layer) return a.layer > b.layer;
  if (a.pooling != b.pooling) return a.pooling == Pooling::kLastToken;
  return a.encoder_id < b.encoder_id;
}

}  // namespace

double effective_dimensionality(const Matrix& X) {
  const Eigen::Index n = X.rows();
  if (n < 2) throw DataError("effective dimensionality needs at least 2 rows");
  if (!X.allFinite()) throw DataError("effective dimensionality: non-finite input");
  const Matrix centered = X.rowwise() - X.colwise().mean();
  // The nonzero spectrum of XᵀX equals that of XXᵀ; use the smaller Gram.
  const Matrix gram = (n - 1 < X.cols()) ? Matrix(centered * centered.transpose())
                                         : Matrix(centered.transpose() * centered);
  Eigen::SelfAdjointEigenSolver<Matrix> solver(gram / static_cast<double>(n - 1), Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) throw NumericError("effective dimensionality: eigensolver failed");
  const Vector& eig = solver.eigenvalues();
  const double top = eig.maxCoeff();
  if (!(top > 0.0)) throw DataError("degenerate sample: covariance is zero");
  double sum = 0.0;
  double sum_sq = 0.0;
  for (Eigen::Index i = 0; i < eig.size(); ++i) {
    const double v = eig(i) < kEigenvalueFloor * top ? 0.0 : eig(i);
    sum += v;
    sum_sq += v * v;
  }
  return sum * sum / sum_sq;
}

double anisotropy(const Matrix& X, std::uint64_t seed) {
  if (X.rows() < 2) throw DataError("anisotropy needs at least 2 rows");
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(X.rows()));
  for (Eigen::Index i = 0; i < X.rows(); ++i) rows[static_cast<std::size_t>(i)] = i;
  if (rows.size() > kAnisotropyMaxRows) {
    Rng rng(seed);
    rng.shuffle(rows);
    rows.resize(kAnisotropyMaxRows);
    std::sort(rows.begin(), rows.end());
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  Matrix unit(n, X.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double norm = X.row(rows[static_cast<std::size_t>(i)]).norm();
    if (!(norm > 0.0)) throw DataError("anisotropy: zero-norm row " + std::to_string(rows[static_cast<std::size_t>(i)]));
    unit.row(i) = X.row(rows[static_cast<std::size_t>(i)]) / norm;
  }
  const double pairs = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;
  if (static_cast<std::size_t>(n) <= kAnisotropyPairwiseMaxRows) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = i + 1; j < n; ++j) total += unit.row(i).dot(unit.row(j));
    }
    return total / pairs;
  }
  // Σ_{i<j} ĥ_i·ĥ_j = (‖Σ ĥ_i‖² − n) / 2
  const double s = unit.colwise().sum().squaredNorm();
  return (s - static_cast<double>(n)) / (2.0 * pairs);
}

FisherTerms fisher_terms(const Matrix& X, std::span<const std::uint8_t> y) {
  if (static_cast<std::size_t>(X.rows()) != y.size()) throw DataError("fisher: row/label count mismatch");
  FisherTerms t;
  t.mean0 = Vector::Zero(X.cols());
  t.mean1 = Vector::Zero(X.cols());
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i]) {
      t.mean1 += X.row(static_cast<Eigen::Index>(i)).transpose();
      ++t.n1;
    } else {
      t.mean0 += X.row(static_cast<Eigen::Index>(i)).transpose();
      ++t.n0;
    }
  }
  if (t.n0 == 0 || t.n1 == 0) throw DataError("fisher requires both classes");
  t.mean0 /= static_cast<double>(t.n0);
  t.mean1 /= static_cast<double>(t.n1);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const auto row = X.row(static_cast<Eigen::Index>(i)).transpose();
    if (y[i]) {
      t.trace1 += (row - t.mean1).squaredNorm();
    } else {
      t.trace0 += (row - t.mean0).squaredNorm();
    }
  }
  t.trace0 = t.n0 > 1 ? t.trace0 / static_cast<double>(t.n0 - 1) : 0.0;
  t.trace1 = t.n1 > 1 ? t.trace1 / static_cast<double>(t.n1 - 1) : 0.0;
  const double denom = t.trace0 + t.trace1;
  if (!(denom > 0.0)) throw DataError("degenerate classes: both classes are constant");
  t.j = (t.mean1 - t.mean0).squaredNorm() / denom;
  return t;
}

double fisher_j(const Matrix& X, std::span<const std::uint8_t> y) { return fisher_terms(X, y).j; }

int upper_half_start(int num_layers) { return (num_layers + 1) / 2; }

std::vector<LayerDiagnostics> probe_layers(const ActivationStore& store, const LabelTable& labels,
                                           const ModelPool& pool, const SplitAssignment& split,
                                           const ProbeOptions& options) {
  if (split.train_ids.empty()) throw DataError("probe: train split is empty");
  const auto& ids = split.train_ids;
  const int L = store.manifest().num_layers;
  std::vector<MatrixKey> keys;
  for (const auto& key : store.keys()) {
    if (key.layer >= upper_half_start(L)) keys.push_back(key);
  }
  std::vector<std::vector<std::uint8_t>> y;
  for (const auto& model : pool.models) y.push_back(labels.column(labels.model_index(model.model_id), ids));

  std::vector<LayerDiagnostics> out(keys.size());
  parallel_for(keys.size(), options.threads, [&](std::size_t i) {
    LayerDiagnostics& d = out[i];
    d.encoder_id = store.encoder_id();
    d.num_layers = L;
    d.layer = keys[i].layer;
    d.pooling = keys[i].pooling;
    try {
      const Matrix X = store.gather(keys[i], ids);
      d.sample_count = static_cast<std::size_t>(X.rows());
      d.dim = static_cast<std::size_t>(X.cols());
      d.d_eff = effective_dimensionality(X);
      d.anisotropy = anisotropy(X, options.seed);
      const PcaModel pca = fit_pca(X, options.pca_dim, options.seed);
      d.pca_dim = pca.output_dim();
      const Matrix reduced = project(pca, X);
      for (std::size_t k = 0; k < pool.models.size(); ++k) {
        d.fisher.emplace(pool.models[k].model_id, fisher_terms(reduced, y[k]));
      }
    } catch (const DataError& e) {
      throw DataError(describe(d) + ": " + e.what());
    } catch (const NumericError& e) {
      throw NumericError(describe(d) + ": " + e.what());
    }
  });
  return out;
}

LayerSelection select_layers(std::vector<LayerDiagnostics>& diags, const std::vector<std::string>& targets,
                             LayerCriterion criterion, const CvInputs* cv, const SelectionConstraints& constraints) {
  if (diags.empty()) throw DataError("select_layers: no diagnostics");
  auto allowed = [&](const LayerDiagnostics& d, const std::string& target) {
    if (d.layer < upper_half_start(d.num_layers) || d.layer > d.num_layers) return false;
    if (constraints.single_encoder && d.encoder_id != *constraints.single_encoder) return false;
    if (auto it = constraints.encoder_for_target.find(target);
        it != constraints.encoder_for_target.end() && d.encoder_id != it->second) {
      return false;
    }
    return true;
  };

  if (criterion == LayerCriterion::kCvAuc) {
    if (cv == nullptr || cv->stores == nullptr || cv->labels == nullptr || cv->split == nullptr) {
      throw ConfigError("cv_auc criterion requires cv inputs");
    }
    struct Job {
      LayerDiagnostics* diag;
      std::string target;
      double auc = 0.0;
    };
    std::vector<Job> jobs;
    for (auto& d : diags) {
      for (const auto& t : targets) {
        if (allowed(d, t) && !d.cv_auc.contains(t)) jobs.push_back(Job{&d, t});
      }
    }
    const auto& ids = cv->split->train_ids;
    parallel_for(jobs.size(), cv->threads, [&](std::size_t i) {
      Job& job = jobs[i];
      const auto& store = cv->stores->at(job.diag->encoder_id);
      const auto y = cv->labels->column(cv->labels->model_index(job.target), ids);
      try {
        job.auc = cv_auc_for_layer(store.gather(job.diag->key(), ids), y, cv->options);
      } catch (const DataError& e) {
        throw DataError(describe(*job.diag) + ": " + e.what());
      }
    });
    for (const auto& job : jobs) job.diag->cv_auc[job.target] = job.auc;
  }

  LayerSelection selection;
  for (const auto& target : targets) {
    const LayerDiagnostics* best = nullptr;
    double best_score = 0.0;
    for (const auto& d : diags) {
      if (!allowed(d, target)) continue;
      double score;
      if (criterion == LayerCriterion::kFisherJ) {
        auto it = d.fisher.find(target);
        if (it == d.fisher.end()) throw DataError(describe(d) + ": no Fisher J for target '" + target + "'");
        score = it->second.j;
      } else {
        score = d.cv_auc.at(target);
      }
      if (best == nullptr || better_candidate(score, d, best_score, *best)) {
        best = &d;
        best_score = score;
      }
    }
    if (best == nullptr) throw DataError("no candidate layer for target '" + target + "'");
    selection.choices[target] = LayerChoice{best->encoder_id, best->layer, best->pooling, best_score, criterion};
  }
  return selection;
}

std::string format_diagnostics_table(const std::vector<LayerDiagnostics>& diags,
                                     const std::vector<std::string>& targets) {
  std::ostringstream out;
  out << "encoder\tlayer\tpooling\tn\td_eff\tanisotropy";
  for (const auto& t : targets) out << "\tJ[" << t << "]";
  bool any_cv = false;
  for (const auto& d : diags) any_cv = any_cv || !d.cv_auc.empty();
  if (any_cv) {
    for (const auto& t : targets) out << "\tcv_auc[" << t << "]";
  }
  out << '\n';
  char buf[64];
  for (const auto& d : diags) {
    out << d.encoder_id << '\t' << d.layer << '\t' << to_string(d.pooling) << '\t' << d.sample_count;
    std::snprintf(buf, sizeof(buf), "\t%.6f\t%.6f", d.d_eff, d.anisotropy);
    out << buf;
    for (const auto& t : targets) {
      auto it = d.fisher.find(t);
      std::snprintf(buf, sizeof(buf), "\t%.6g", it == d.fisher.end() ? 0.0 : it->second.j);
      out << buf;
    }
    if (any_cv) {
      for (const auto& t : targets) {
        auto it = d.cv_auc.find(t);
        if (it == d.cv_auc.end()) {
          out << "\t-";
        } else {
          std::snprintf(buf, sizeof(buf), "\t%.6f", it->second);
          out << buf;
        }
      }
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace pfrouter
