/*
 * Copyright (c) 2026, the persona-moe contributors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// Linear probe on frozen embeddings: multinomial logistic regression fit by
// full-batch gradient descent, scored by stratified k-fold cross-validation.
// Features are z-scored with statistics of the training fold only.

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <vector>

#include <json.hpp>

#include "persona/error.hpp"
#include "persona/rng.hpp"

namespace persona::eval {

struct ProbeOptions {
  std::size_t folds = 5;
  std::size_t epochs = 200;
  double lr = 0.1;
  std::uint64_t seed = 0;
};

struct ProbeScore {
  double accuracy = 0.0;
  std::vector<double> per_class;  // recall per class
  bool degenerate = false;        // all embeddings identical
};

struct ProbeResult {
  ProbeScore trained;
  ProbeScore baseline;
  std::size_t classes = 0;
  std::size_t samples = 0;

  nlohmann::ordered_json to_json() const {
    auto score = [](const ProbeScore& s) {
      return nlohmann::ordered_json{{"accuracy", s.accuracy}, {"per_class", s.per_class}, {"degenerate", s.degenerate}};
    };
    return {{"classes", classes}, {"samples", samples}, {"trained", score(trained)}, {"baseline", score(baseline)},
            {"gap_points", 100.0 * (trained.accuracy - baseline.accuracy)}};
  }
};

using Matrix = Eigen::MatrixXd;

/// Fold index per sample: within each class, shuffled members are dealt
/// round-robin over the folds.
inline std::vector<std::size_t> stratified_folds(const std::vector<std::size_t>& labels, std::size_t folds,
                                                 std::uint64_t seed) {
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  Rng rng(derive_seed(seed, "probe-folds"));
  std::vector<std::size_t> fold(labels.size());
  for (auto& [cls, members] : by_class) {
    rng.shuffle(members.begin(), members.end());
    for (std::size_t k = 0; k < members.size(); ++k) fold[members[k]] = k % folds;
  }
  return fold;
}

/// Weights [(d+1), C] after `epochs` gradient steps on the mean cross-entropy.
inline Matrix fit_softmax_regression(const Matrix& x, const std::vector<std::size_t>& y, std::size_t classes,
                                     const ProbeOptions& opt) {
  const auto n = static_cast<Eigen::Index>(x.rows());
  Matrix xb(n, x.cols() + 1);
  xb << x, Matrix::Ones(n, 1);
  Matrix w = Matrix::Zero(xb.cols(), static_cast<Eigen::Index>(classes));
  Matrix onehot = Matrix::Zero(n, static_cast<Eigen::Index>(classes));
  for (Eigen::Index i = 0; i < n; ++i) onehot(i, static_cast<Eigen::Index>(y[static_cast<std::size_t>(i)])) = 1.0;
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    Matrix logits = xb * w;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mx = logits.row(i).maxCoeff();
      logits.row(i) = (logits.row(i).array() - mx).exp();
      logits.row(i) /= logits.row(i).sum();
    }
    w -= opt.lr * (xb.transpose() * (logits - onehot)) / static_cast<double>(n);
  }
  return w;
}

inline ProbeScore cross_validate(const std::vector<std::vector<double>>& emb, const std::vector<std::size_t>& labels,
                                 std::size_t classes, const std::vector<std::size_t>& fold, const ProbeOptions& opt) {
  ProbeScore s;
  s.per_class.assign(classes, 0.0);
  const std::size_t d = emb.front().size();
  s.degenerate = std::all_of(emb.begin(), emb.end(), [&](const auto& e) { return e == emb.front(); });
  std::vector<std::size_t> correct(classes, 0), total(classes, 0);
  for (std::size_t f = 0; f < opt.folds; ++f) {
    std::vector<std::size_t> tr, te;
    for (std::size_t i = 0; i < emb.size(); ++i) (fold[i] == f ? te : tr).push_back(i);
    if (te.empty() || tr.empty()) continue;
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
    Eigen::VectorXd sd = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
    for (auto i : tr)
      for (std::size_t k = 0; k < d; ++k) mean(static_cast<Eigen::Index>(k)) += emb[i][k];
    mean /= static_cast<double>(tr.size());
    for (auto i : tr)
      for (std::size_t k = 0; k < d; ++k) {
        const double z = emb[i][k] - mean(static_cast<Eigen::Index>(k));
        sd(static_cast<Eigen::Index>(k)) += z * z;
      }
    for (std::size_t k = 0; k < d; ++k) {
      const auto kk = static_cast<Eigen::Index>(k);
      sd(kk) = std::sqrt(sd(kk) / static_cast<double>(tr.size()));
      if (!(sd(kk) > 1e-12)) sd(kk) = 1.0;
    }
    auto design = [&](const std::vector<std::size_t>& idx) {
      Matrix m(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(d));
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t k = 0; k < d; ++k) {
          const auto kk = static_cast<Eigen::Index>(k);
          m(static_cast<Eigen::Index>(r), kk) = (emb[idx[r]][k] - mean(kk)) / sd(kk);
        }
      return m;
    };
    std::vector<std::size_t> ytr;
    for (auto i : tr) ytr.push_back(labels[i]);
    const Matrix w = fit_softmax_regression(design(tr), ytr, classes, opt);
    const Matrix xte = design(te);
    Matrix xb(xte.rows(), xte.cols() + 1);
    xb << xte, Matrix::Ones(xte.rows(), 1);
    const Matrix scores = xb * w;
    for (std::size_t r = 0; r < te.size(); ++r) {
      Eigen::Index best = 0;
      scores.row(static_cast<Eigen::Index>(r)).maxCoeff(&best);
      const auto truth = labels[te[r]];
      ++total[truth];
      if (static_cast<std::size_t>(best) == truth) ++correct[truth];
    }
  }
  std::size_t all_correct = 0, all_total = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    all_correct += correct[c];
    all_total += total[c];
    s.per_class[c] = total[c] ? static_cast<double>(correct[c]) / static_cast<double>(total[c]) : 0.0;
  }
  s.accuracy = all_total ? static_cast<double>(all_correct) / static_cast<double>(all_total) : 0.0;
  return s;
}

/// Paired comparison: both embedding sets are scored on the same folds.
inline ProbeResult probe_eval(const std::vector<std::vector<double>>& trained,
                              const std::vector<std::vector<double>>& baseline,
                              const std::vector<std::size_t>& labels, const ProbeOptions& opt = {}) {
  if (trained.size() != labels.size() || baseline.size() != labels.size()) {
    throw InputError("probe_eval: embeddings and labels differ in count");
  }
  if (labels.empty()) throw InputError("probe_eval: no samples");
  if (opt.folds < 2) throw ParameterError("probe_eval: need at least 2 folds");
  std::map<std::size_t, std::size_t> counts;
  for (auto l : labels) ++counts[l];
  if (counts.size() < 2) throw InputError("probe_eval: need at least 2 classes");
  for (auto [cls, n] : counts) {
    if (n < 20) throw InputError("probe_eval: class " + std::to_string(cls) + " has fewer than 20 samples");
  }
  const std::size_t classes = counts.rbegin()->first + 1;
  const auto fold = stratified_folds(labels, opt.folds, opt.seed);
  ProbeResult r;
  r.classes = counts.size();
  r.samples = labels.size();
  r.trained = cross_validate(trained, labels, classes, fold, opt);
  r.baseline = cross_validate(baseline, labels, classes, fold, opt);
  return r;
}

}  // namespace persona::eval
