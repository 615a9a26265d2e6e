#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "matchscope/error.hpp"
#include "matchscope/linalg.hpp"

// Desk-scale metric-learning lab: triplet losses over a squared-distance
// matrix, easy-positive / hard-negative mining, a linear stand-in embedder
// trained by plain gradient descent, and recall@K evaluation.
namespace matchscope::metric {

using ClassLabel = std::int64_t;

struct LabeledBatch {
  Matrix inputs;                  // N x D raw descriptors
  std::vector<ClassLabel> labels;  // N class ids (class = hotel)
  std::vector<std::size_t> modes;  // optional per-sample mode index (generator output)
};

inline constexpr double kUnitNormTolerance = 1e-6;

// M(i, j) = ||e_i - e_j||^2 = 2 - 2 e_i.e_j for unit rows; exact zero diagonal.
inline Matrix pairwise_sq_distances(const Matrix& embeddings) {
  for (std::size_t i = 0; i < embeddings.rows; ++i) {
    double n = norm(embeddings.row(i));
    if (std::abs(n - 1.0) > kUnitNormTolerance)
      fail(ErrorCode::InvalidArgument, "row " + std::to_string(i) + " is not unit-norm");
  }
  const std::size_t n = embeddings.rows;
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double d = 2.0 - 2.0 * dot(embeddings.row(i), embeddings.row(j));
      m(i, j) = d;
      m(j, i) = d;
    }
  }
  return m;
}

struct MinedTriplet {
  std::size_t anchor = 0;
  std::size_t positive = 0;  // closest same-class sample, self excluded
  std::size_t negative = 0;  // closest different-class sample
};

struct TripletSelection {
  std::vector<MinedTriplet> triplets;
  std::vector<std::size_t> skipped_anchors;  // no positive or no negative in the batch
};

inline void check_distance_input(const Matrix& m, const std::vector<ClassLabel>& labels) {
  if (m.rows != m.cols) fail(ErrorCode::ShapeMismatch, "distance matrix must be square");
  if (m.rows != labels.size()) fail(ErrorCode::DimensionMismatch, "label count does not match distance matrix");
}

// Ties resolve to the lowest index because only strictly smaller distances
// replace the current choice during the ascending scan.
inline TripletSelection mine_ep_hn(const Matrix& m, const std::vector<ClassLabel>& labels) {
  check_distance_input(m, labels);
  TripletSelection out;
  const std::size_t n = labels.size();
  for (std::size_t a = 0; a < n; ++a) {
    std::optional<std::size_t> pos, neg;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == a) continue;
      if (labels[j] == labels[a]) {
        if (!pos || m(a, j) < m(a, *pos)) pos = j;
      } else {
        if (!neg || m(a, j) < m(a, *neg)) neg = j;
      }
    }
    if (pos && neg)
      out.triplets.push_back({a, *pos, *neg});
    else
      out.skipped_anchors.push_back(a);
  }
  return out;
}

// Value of a loss on a distance matrix together with dLoss/dM.
struct DistanceLoss {
  double loss = 0.0;
  std::size_t active_triplet_count = 0;
  std::size_t valid_triplet_count = 0;
  Matrix grad;  // same shape as the distance matrix
  std::vector<std::size_t> skipped_anchors;
};

// Mean hinge over the triplets with positive hinge; zero when none is active.
inline DistanceLoss batch_all_loss(const Matrix& m, const std::vector<ClassLabel>& labels, double margin) {
  check_distance_input(m, labels);
  if (!(margin > 0.0)) fail(ErrorCode::InvalidArgument, "margin must be > 0");
  const std::size_t n = labels.size();
  DistanceLoss out;
  out.grad = Matrix(n, n);
  double sum = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t p = 0; p < n; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      for (std::size_t k = 0; k < n; ++k) {
        if (labels[k] == labels[a]) continue;
        ++out.valid_triplet_count;
        double h = m(a, p) - m(a, k) + margin;
        if (h > 0.0) {
          sum += h;
          ++out.active_triplet_count;
          out.grad(a, p) += 1.0;
          out.grad(a, k) -= 1.0;
        }
      }
    }
  }
  if (out.valid_triplet_count == 0) fail(ErrorCode::NoValidTriplet, "batch contains no valid triplet");
  if (out.active_triplet_count > 0) {
    const double scale = 1.0 / static_cast<double>(out.active_triplet_count);
    out.loss = sum * scale;
    for (double& g : out.grad.data) g *= scale;
  }
  return out;
}

// Hinge on each anchor's (easy positive, hard negative) pair, averaged over
// the anchors that could be mined. Mined indices are constants for the
// gradient.
inline DistanceLoss easy_positive_loss(const Matrix& m, const std::vector<ClassLabel>& labels, double margin) {
  if (!(margin > 0.0)) fail(ErrorCode::InvalidArgument, "margin must be > 0");
  auto mined = mine_ep_hn(m, labels);
  if (mined.triplets.empty()) fail(ErrorCode::NoValidTriplet, "no anchor has both a positive and a negative");
  const std::size_t n = labels.size();
  DistanceLoss out;
  out.grad = Matrix(n, n);
  out.valid_triplet_count = mined.triplets.size();
  out.skipped_anchors = std::move(mined.skipped_anchors);
  const double scale = 1.0 / static_cast<double>(mined.triplets.size());
  double sum = 0.0;
  for (const auto& t : mined.triplets) {
    double h = m(t.anchor, t.positive) - m(t.anchor, t.negative) + margin;
    if (h > 0.0) {
      sum += h;
      ++out.active_triplet_count;
      out.grad(t.anchor, t.positive) += scale;
      out.grad(t.anchor, t.negative) -= scale;
    }
  }
  out.loss = sum * scale;
  return out;
}

inline constexpr double kSoftTemperature = 0.1;

// Non-default smooth variant: mean over mined anchors of
// -log sigmoid((s_p - s_n) / T) with s = 1 - d^2 / 2. Every mined anchor is
// active since the value is strictly positive.
inline DistanceLoss easy_positive_soft_loss(const Matrix& m, const std::vector<ClassLabel>& labels,
                                            double temperature = kSoftTemperature) {
  if (!(temperature > 0.0)) fail(ErrorCode::InvalidArgument, "temperature must be > 0");
  auto mined = mine_ep_hn(m, labels);
  if (mined.triplets.empty()) fail(ErrorCode::NoValidTriplet, "no anchor has both a positive and a negative");
  const std::size_t n = labels.size();
  DistanceLoss out;
  out.grad = Matrix(n, n);
  out.valid_triplet_count = mined.triplets.size();
  out.active_triplet_count = mined.triplets.size();
  out.skipped_anchors = std::move(mined.skipped_anchors);
  const double scale = 1.0 / static_cast<double>(mined.triplets.size());
  double sum = 0.0;
  for (const auto& t : mined.triplets) {
    // (s_p - s_n) / T = (d_n - d_p) / (2T)
    double x = (m(t.anchor, t.negative) - m(t.anchor, t.positive)) / (2.0 * temperature);
    double softplus = x > 0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
    sum += softplus;
    double sig_neg = 1.0 / (1.0 + std::exp(x));  // sigmoid(-x) = -d softplus(-x)/dx
    double g = scale * sig_neg / (2.0 * temperature);
    out.grad(t.anchor, t.positive) += g;
    out.grad(t.anchor, t.negative) -= g;
  }
  out.loss = sum * scale;
  return out;
}

enum class LossKind { BatchAll, EasyPositive, EasyPositiveSoft };

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::BatchAll: return "batch_all";
    case LossKind::EasyPositive: return "easy_positive";
    case LossKind::EasyPositiveSoft: return "easy_positive_soft";
  }
  return "batch_all";
}

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "batch_all") return LossKind::BatchAll;
  if (s == "easy_positive") return LossKind::EasyPositive;
  if (s == "easy_positive_soft") return LossKind::EasyPositiveSoft;
  fail(ErrorCode::InvalidArgument, "unknown loss kind '" + s + "' (batch_all|easy_positive|easy_positive_soft)");
}

inline DistanceLoss distance_loss(LossKind kind, const Matrix& m, const std::vector<ClassLabel>& labels,
                                  double margin) {
  switch (kind) {
    case LossKind::BatchAll: return batch_all_loss(m, labels, margin);
    case LossKind::EasyPositive: return easy_positive_loss(m, labels, margin);
    case LossKind::EasyPositiveSoft: return easy_positive_soft_loss(m, labels);
  }
  fail(ErrorCode::InvalidArgument, "unknown loss kind");
}

// Linear map from raw descriptors to an L2-normalized embedding space; the
// stand-in for a convolutional backbone.
struct ToyEmbedder {
  Matrix weight;  // d x D

  std::size_t output_dim() const { return weight.rows; }
  std::size_t input_dim() const { return weight.cols; }
};

inline ToyEmbedder random_embedder(std::size_t output_dim, std::size_t input_dim, std::uint64_t seed) {
  if (output_dim < 2 || input_dim < 1) fail(ErrorCode::InvalidArgument, "embedder needs d >= 2 and D >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(input_dim)));
  ToyEmbedder model{Matrix(output_dim, input_dim)};
  for (double& w : model.weight.data) w = normal(rng);
  return model;
}

struct Forward {
  Matrix projected;   // N x d, z = W x
  Matrix embeddings;  // N x d, z / ||z||
  std::vector<double> norms;
};

inline Forward forward(const ToyEmbedder& model, const Matrix& inputs) {
  if (inputs.cols != model.input_dim())
    fail(ErrorCode::DimensionMismatch, "input dimension does not match embedder");
  Forward f;
  f.projected = multiply_transposed(inputs, model.weight);
  f.embeddings = f.projected;
  f.norms.resize(inputs.rows);
  for (std::size_t i = 0; i < inputs.rows; ++i) {
    double n = norm(f.projected.row(i));
    if (!(n > 1e-12)) fail(ErrorCode::DegenerateVector, "embedder maps sample " + std::to_string(i) + " to zero");
    f.norms[i] = n;
    for (double& v : f.embeddings.row(i)) v /= n;
  }
  return f;
}

inline Matrix embed(const ToyEmbedder& model, const Matrix& inputs) { return forward(model, inputs).embeddings; }

struct LossReport {
  double loss = 0.0;
  std::size_t active_triplet_count = 0;
  Matrix gradient;  // dLoss/dWeight, d x D
};

// Forward pass, loss on squared distances, and backpropagation through
// M = 2 - 2 E E^T, the row normalization and the linear map.
inline LossReport compute_loss(const ToyEmbedder& model, const LabeledBatch& batch, LossKind kind, double margin) {
  if (batch.labels.size() != batch.inputs.rows) fail(ErrorCode::DimensionMismatch, "label count != sample count");
  if (batch.inputs.rows < 2) fail(ErrorCode::InvalidArgument, "batch needs at least 2 samples");
  auto f = forward(model, batch.inputs);
  auto m = pairwise_sq_distances(f.embeddings);
  auto dl = distance_loss(kind, m, batch.labels, margin);

  LossReport report;
  report.loss = dl.loss;
  report.active_triplet_count = dl.active_triplet_count;
  report.gradient = Matrix(model.output_dim(), model.input_dim());
  if (dl.active_triplet_count == 0) return report;

  const std::size_t n = batch.inputs.rows;
  const std::size_t d = model.output_dim();
  // dL/de_i = -2 * sum_j (G_ij + G_ji) e_j
  Matrix grad_e(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    auto gi = grad_e.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      double s = dl.grad(i, j) + dl.grad(j, i);
      if (s == 0.0) continue;
      auto ej = f.embeddings.row(j);
      for (std::size_t k = 0; k < d; ++k) gi[k] += -2.0 * s * ej[k];
    }
  }
  // dL/dz_i = (g - (g.e) e) / ||z||, then dL/dW += (dL/dz_i) x_i^T
  for (std::size_t i = 0; i < n; ++i) {
    auto gi = grad_e.row(i);
    auto ei = f.embeddings.row(i);
    double ge = dot(gi, ei);
    auto xi = batch.inputs.row(i);
    for (std::size_t k = 0; k < d; ++k) {
      double gz = (gi[k] - ge * ei[k]) / f.norms[i];
      if (gz == 0.0) continue;
      auto wrow = report.gradient.row(k);
      for (std::size_t c = 0; c < xi.size(); ++c) wrow[c] += gz * xi[c];
    }
  }
  return report;
}

struct TrainStepResult {
  ToyEmbedder model;
  LossReport report;  // evaluated before the update
};

inline TrainStepResult train_step(const ToyEmbedder& model, const LabeledBatch& batch, LossKind kind,
                                  double margin, double learning_rate) {
  if (!(learning_rate > 0.0)) fail(ErrorCode::InvalidArgument, "learning_rate must be > 0");
  auto report = compute_loss(model, batch, kind, margin);
  for (double g : report.gradient.data)
    if (!std::isfinite(g)) fail(ErrorCode::NonFinite, "non-finite gradient");
  TrainStepResult out{model, std::move(report)};
  if (out.report.active_triplet_count == 0) return out;
  for (std::size_t i = 0; i < out.model.weight.data.size(); ++i)
    out.model.weight.data[i] -= learning_rate * out.report.gradient.data[i];
  return out;
}

// Fraction of queries whose K most similar index rows (by dot product, ties
// to the lower index) contain the query's label. With exclude_self the index
// and query sets are the same and row i is skipped for query i.
inline double evaluate_recall_at_k(const Matrix& index_embeddings, const std::vector<ClassLabel>& index_labels,
                                   const Matrix& query_embeddings, const std::vector<ClassLabel>& query_labels,
                                   std::size_t k, bool exclude_self) {
  if (k < 1) fail(ErrorCode::InvalidArgument, "K must be >= 1");
  if (index_embeddings.rows == 0) fail(ErrorCode::InvalidArgument, "empty index");
  if (index_embeddings.rows != index_labels.size() || query_embeddings.rows != query_labels.size())
    fail(ErrorCode::DimensionMismatch, "labels do not match embeddings");
  if (index_embeddings.cols != query_embeddings.cols)
    fail(ErrorCode::DimensionMismatch, "index and query dimensions differ");
  if (exclude_self && index_embeddings.rows != query_embeddings.rows)
    fail(ErrorCode::InvalidArgument, "exclude_self requires the query set to be the index set");
  if (query_embeddings.rows == 0) return 0.0;

  std::size_t hits = 0;
  std::vector<std::pair<double, std::size_t>> scored;
  for (std::size_t q = 0; q < query_embeddings.rows; ++q) {
    scored.clear();
    for (std::size_t i = 0; i < index_embeddings.rows; ++i) {
      if (exclude_self && i == q) continue;
      scored.emplace_back(dot(query_embeddings.row(q), index_embeddings.row(i)), i);
    }
    std::size_t take = std::min(k, scored.size());
    auto better = [](const auto& x, const auto& y) { return x.first > y.first || (x.first == y.first && x.second < y.second); };
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(), better);
    for (std::size_t r = 0; r < take; ++r) {
      if (index_labels[scored[r].second] == query_labels[q]) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(query_embeddings.rows);
}

struct DatasetShape {
  std::uint64_t seed = 0;
  std::size_t classes = 50;
  std::size_t modes_per_class = 3;
  std::size_t samples_per_mode = 10;
  std::size_t input_dim = 32;
  double noise_scale = 0.3;
  double class_scale = 0.3;  // stddev of class means
  double mode_scale = 1.0;   // stddev of per-mode offsets
  // Class means and mode offsets occupy the first signal_dim coordinates;
  // the remaining ones carry noise only. 0 means the full input dimension.
  std::size_t signal_dim = 8;
};

// Samples are laid out class-major, then mode, then sample:
// class mean + mode offset + isotropic Gaussian noise.
inline LabeledBatch generate_multimodal_dataset(const DatasetShape& shape) {
  if (shape.classes < 1 || shape.modes_per_class < 1 || shape.samples_per_mode < 1 || shape.input_dim < 1)
    fail(ErrorCode::InvalidArgument, "dataset counts must be >= 1");
  if (shape.noise_scale < 0 || shape.class_scale < 0 || shape.mode_scale < 0)
    fail(ErrorCode::InvalidArgument, "dataset scales must be >= 0");
  std::mt19937_64 rng(shape.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t dim = shape.input_dim;
  const std::size_t total = shape.classes * shape.modes_per_class * shape.samples_per_mode;

  LabeledBatch out;
  out.inputs = Matrix(total, dim);
  out.labels.reserve(total);
  out.modes.reserve(total);
  const std::size_t signal = shape.signal_dim == 0 ? dim : std::min(shape.signal_dim, dim);
  std::vector<double> mean(dim, 0.0), offset(dim, 0.0);
  std::size_t row = 0;
  for (std::size_t c = 0; c < shape.classes; ++c) {
    for (std::size_t k = 0; k < signal; ++k) mean[k] = shape.class_scale * normal(rng);
    for (std::size_t mo = 0; mo < shape.modes_per_class; ++mo) {
      for (std::size_t k = 0; k < signal; ++k) offset[k] = shape.mode_scale * normal(rng);
      for (std::size_t s = 0; s < shape.samples_per_mode; ++s, ++row) {
        auto x = out.inputs.row(row);
        for (std::size_t k = 0; k < dim; ++k) x[k] = mean[k] + offset[k] + shape.noise_scale * normal(rng);
        out.labels.push_back(static_cast<ClassLabel>(c));
        out.modes.push_back(mo);
      }
    }
  }
  return out;
}

inline LabeledBatch generate_multimodal_dataset(std::uint64_t seed, std::size_t classes, std::size_t modes_per_class,
                                                std::size_t samples_per_mode, std::size_t input_dim,
                                                double noise_scale) {
  DatasetShape shape;
  shape.seed = seed;
  shape.classes = classes;
  shape.modes_per_class = modes_per_class;
  shape.samples_per_mode = samples_per_mode;
  shape.input_dim = input_dim;
  shape.noise_scale = noise_scale;
  return generate_multimodal_dataset(shape);
}

inline LabeledBatch select_rows(const LabeledBatch& batch, const std::vector<std::size_t>& rows) {
  LabeledBatch out;
  out.inputs = Matrix(rows.size(), batch.inputs.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = batch.inputs.row(rows[i]);
    std::copy(src.begin(), src.end(), out.inputs.row(i).begin());
    out.labels.push_back(batch.labels[rows[i]]);
    if (!batch.modes.empty()) out.modes.push_back(batch.modes[rows[i]]);
  }
  return out;
}

struct Split {
  LabeledBatch train;
  LabeledBatch heldout;
};

// Holds out the last `heldout_per_mode` samples of every (class, mode) group,
// so held-out queries see the same classes and modes as training.
inline Split split_heldout(const LabeledBatch& data, std::size_t heldout_per_mode) {
  if (data.modes.size() != data.labels.size()) fail(ErrorCode::InvalidArgument, "dataset lacks mode annotations");
  std::map<std::pair<ClassLabel, std::size_t>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < data.labels.size(); ++i) groups[{data.labels[i], data.modes[i]}].push_back(i);
  std::vector<std::size_t> train_rows, held_rows;
  for (const auto& [key, rows] : groups) {
    if (heldout_per_mode >= rows.size())
      fail(ErrorCode::InvalidArgument, "heldout_per_mode leaves no training sample in a group");
    std::size_t cut = rows.size() - heldout_per_mode;
    train_rows.insert(train_rows.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(cut));
    held_rows.insert(held_rows.end(), rows.begin() + static_cast<std::ptrdiff_t>(cut), rows.end());
  }
  std::sort(train_rows.begin(), train_rows.end());
  std::sort(held_rows.begin(), held_rows.end());
  return {select_rows(data, train_rows), select_rows(data, held_rows)};
}

// Draws classes_per_batch distinct classes, then samples_per_class distinct
// samples from each.
class BatchSampler {
 public:
  BatchSampler(const LabeledBatch& data, std::size_t classes_per_batch, std::size_t samples_per_class,
               std::uint64_t seed)
      : data_(&data), classes_per_batch_(classes_per_batch), samples_per_class_(samples_per_class), rng_(seed) {
    std::map<ClassLabel, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < data.labels.size(); ++i) by_class[data.labels[i]].push_back(i);
    for (auto& [label, rows] : by_class)
      if (rows.size() >= samples_per_class) pools_.push_back(std::move(rows));
    if (classes_per_batch < 2 || samples_per_class < 2)
      fail(ErrorCode::InvalidArgument, "batches need >= 2 classes and >= 2 samples per class");
    if (pools_.size() < classes_per_batch)
      fail(ErrorCode::InvalidArgument, "not enough classes with samples_per_class samples");
  }

  LabeledBatch next() {
    std::vector<std::size_t> class_order(pools_.size());
    std::iota(class_order.begin(), class_order.end(), 0);
    std::shuffle(class_order.begin(), class_order.end(), rng_);
    std::vector<std::size_t> rows;
    for (std::size_t c = 0; c < classes_per_batch_; ++c) {
      auto pool = pools_[class_order[c]];
      std::shuffle(pool.begin(), pool.end(), rng_);
      rows.insert(rows.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(samples_per_class_));
    }
    return select_rows(*data_, rows);
  }

 private:
  const LabeledBatch* data_;
  std::size_t classes_per_batch_;
  std::size_t samples_per_class_;
  std::vector<std::vector<std::size_t>> pools_;
  std::mt19937_64 rng_;
};

struct ExperimentConfig {
  DatasetShape dataset;
  std::size_t heldout_per_mode = 3;
  std::size_t embed_dim = 16;
  std::vector<LossKind> losses{LossKind::BatchAll, LossKind::EasyPositive};
  double margin = 0.2;
  double learning_rate = 1e-2;
  std::size_t steps = 500;
  std::size_t classes_per_batch = 8;
  std::size_t samples_per_class = 4;
};

struct RunResult {
  LossKind kind = LossKind::BatchAll;
  std::vector<double> loss_curve;  // per-step batch loss before the update
  double initial_train_recall_at_1 = 0.0;
  double initial_heldout_recall_at_1 = 0.0;
  double train_recall_at_1 = 0.0;
  double heldout_recall_at_1 = 0.0;
  ToyEmbedder model;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::size_t train_size = 0;
  std::size_t heldout_size = 0;
  std::vector<RunResult> runs;
};

// Class-level R@1: training samples form the index; held-out queries search
// it, training queries search it with self excluded.
inline std::pair<double, double> recall_at_1(const ToyEmbedder& model, const Split& split) {
  auto train = embed(model, split.train.inputs);
  auto held = embed(model, split.heldout.inputs);
  double train_r = evaluate_recall_at_k(train, split.train.labels, train, split.train.labels, 1, true);
  double held_r = split.heldout.labels.empty()
                      ? 0.0
                      : evaluate_recall_at_k(train, split.train.labels, held, split.heldout.labels, 1, false);
  return {train_r, held_r};
}

// Every loss starts from the same initial weights and sees the same batch
// sequence, so the runs differ only in the objective.
inline ExperimentResult run_experiment(const ExperimentConfig& config) {
  auto data = generate_multimodal_dataset(config.dataset);
  auto split = split_heldout(data, config.heldout_per_mode);
  const auto init = random_embedder(config.embed_dim, config.dataset.input_dim, config.dataset.seed + 1);

  ExperimentResult result;
  result.config = config;
  result.train_size = split.train.labels.size();
  result.heldout_size = split.heldout.labels.size();
  for (LossKind kind : config.losses) {
    RunResult run;
    run.kind = kind;
    std::tie(run.initial_train_recall_at_1, run.initial_heldout_recall_at_1) = recall_at_1(init, split);
    BatchSampler sampler(split.train, config.classes_per_batch, config.samples_per_class, config.dataset.seed + 2);
    ToyEmbedder model = init;
    run.loss_curve.reserve(config.steps);
    for (std::size_t step = 0; step < config.steps; ++step) {
      auto batch = sampler.next();
      auto stepped = train_step(model, batch, kind, config.margin, config.learning_rate);
      run.loss_curve.push_back(stepped.report.loss);
      model = std::move(stepped.model);
    }
    std::tie(run.train_recall_at_1, run.heldout_recall_at_1) = recall_at_1(model, split);
    run.model = std::move(model);
    result.runs.push_back(std::move(run));
  }
  return result;
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorCode::MalformedJson, "experiment config must be a JSON object");
  ExperimentConfig c;
  try {
    c.dataset.seed = j.value("seed", c.dataset.seed);
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      c.dataset.classes = d.value("classes", c.dataset.classes);
      c.dataset.modes_per_class = d.value("modes_per_class", c.dataset.modes_per_class);
      c.dataset.samples_per_mode = d.value("samples_per_mode", c.dataset.samples_per_mode);
      c.dataset.input_dim = d.value("input_dim", c.dataset.input_dim);
      c.dataset.noise_scale = d.value("noise_scale", c.dataset.noise_scale);
      c.dataset.class_scale = d.value("class_scale", c.dataset.class_scale);
      c.dataset.mode_scale = d.value("mode_scale", c.dataset.mode_scale);
      c.dataset.signal_dim = d.value("signal_dim", c.dataset.signal_dim);
      c.heldout_per_mode = d.value("heldout_per_mode", c.heldout_per_mode);
    }
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    if (j.contains("loss")) {
      c.losses = {parse_loss_kind(j.at("loss").get<std::string>())};
    } else if (j.contains("losses")) {
      c.losses.clear();
      for (const auto& l : j.at("losses")) c.losses.push_back(parse_loss_kind(l.get<std::string>()));
    }
    c.margin = j.value("margin", c.margin);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.steps = j.value("steps", c.steps);
    if (j.contains("batch")) {
      c.classes_per_batch = j.at("batch").value("classes", c.classes_per_batch);
      c.samples_per_class = j.at("batch").value("samples_per_class", c.samples_per_class);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::MalformedJson, std::string("bad experiment config: ") + e.what());
  }
  if (c.losses.empty()) fail(ErrorCode::InvalidArgument, "no loss selected");
  return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json losses = nlohmann::json::array();
  for (auto k : c.losses) losses.push_back(to_string(k));
  return {{"seed", c.dataset.seed},
          {"dataset",
           {{"classes", c.dataset.classes},
            {"modes_per_class", c.dataset.modes_per_class},
            {"samples_per_mode", c.dataset.samples_per_mode},
            {"input_dim", c.dataset.input_dim},
            {"noise_scale", c.dataset.noise_scale},
            {"class_scale", c.dataset.class_scale},
            {"mode_scale", c.dataset.mode_scale},
            {"signal_dim", c.dataset.signal_dim},
            {"heldout_per_mode", c.heldout_per_mode}}},
          {"embed_dim", c.embed_dim},
          {"losses", losses},
          {"margin", c.margin},
          {"learning_rate", c.learning_rate},
          {"steps", c.steps},
          {"batch", {{"classes", c.classes_per_batch}, {"samples_per_class", c.samples_per_class}}}};
}

inline nlohmann::json to_json(const ExperimentResult& r) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& run : r.runs) {
    runs.push_back({{"loss", to_string(run.kind)},
                    {"loss_curve", run.loss_curve},
                    {"initial_train_recall_at_1", run.initial_train_recall_at_1},
                    {"initial_heldout_recall_at_1", run.initial_heldout_recall_at_1},
                    {"train_recall_at_1", run.train_recall_at_1},
                    {"heldout_recall_at_1", run.heldout_recall_at_1}});
  }
  const double chance = r.config.dataset.classes > 0 ? 1.0 / static_cast<double>(r.config.dataset.classes) : 0.0;
  return {{"config", to_json(r.config)},
          {"train_size", r.train_size},
          {"heldout_size", r.heldout_size},
          {"chance_recall_at_1", chance},
          {"runs", runs}};
}

}  // namespace matchscope::metric
