#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ual/checkpoint.hpp"
#include "ual/dataset.hpp"

namespace ual {

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

struct CorpusText {
  std::string id;
  std::string text;
};

/// instruction + response of every sample.
std::vector<CorpusText> corpus_from_dataset(const Dataset& dataset);

struct FeatureRecord {
  int token = 0;
  std::size_t occurrence = 0;  // 0-based index among this token's records
  std::string text_id;
  std::vector<double> values;
};

/// Penultimate-layer vectors tagged by the input token at their position.
struct FeatureSet {
  std::size_t dim = 0;
  std::vector<FeatureRecord> records;

  /// All record vectors stacked in record order.
  Matrix matrix() const;
  std::vector<int> tokens() const;
  /// Records whose token is in `tokens`, original order kept.
  FeatureSet subset(std::span<const int> tokens) const;
};

/// Runs the model over each text ([BOS] bytes [EOS], split into
/// context-length windows) and records the final layer-norm output at every
/// position whose input token is of interest, at most `cap` per token in
/// corpus order. Throws TokenNotFound / EmptyCorpus.
FeatureSet extract_features(const Checkpoint& checkpoint, const std::vector<CorpusText>& corpus,
                            std::span<const int> tokens, std::size_t cap);

/// Input-token occurrence counts (index = token id) over the same windows.
std::vector<std::size_t> count_tokens(const std::vector<CorpusText>& corpus, int vocab_size);

/// Top-2 principal directions of mean-centered rows.
struct Projection2D {
  std::vector<double> mean;      // d
  Matrix basis;                  // 2 x d, orthonormal rows
  Matrix points;                 // n x 2
  std::vector<double> explained; // variance fractions of the two components
};

/// PCA via a cyclic Jacobi eigensolve of the sample covariance. Each basis
/// vector is signed so that its largest-magnitude coordinate is positive.
/// Throws InputError for n < 3 or d < 2, DegenerateData for zero variance.
Projection2D pca_2d(const Matrix& features);

/// Mean silhouette coefficient with Euclidean distance in the full space.
/// s(i) = (b - a) / max(a, b), 0 when both are 0. Every label needs at least
/// two members and there must be at least two labels (ClassTooSmall).
double silhouette(const Matrix& features, std::span<const int> labels);

struct PairScore {
  int token_a = 0;
  int token_b = 0;
  std::size_t count_a = 0;
  std::size_t count_b = 0;
  double score = 0.0;
};

struct PairStudyReport {
  std::uint64_t seed = 0;
  std::size_t requested_pairs = 0;
  std::size_t min_occurrences = 0;
  std::size_t cap = 0;
  std::size_t eligible_tokens = 0;
  std::vector<PairScore> pairs;
  double mean_score = 0.0;
};

struct PairStudyOptions {
  std::size_t n_pairs = 100;
  std::size_t min_occurrences = 10;
  std::size_t cap = 200;
  std::uint64_t seed = 0;
};

/// Samples distinct unordered pairs of byte tokens occurring at least
/// `min_occurrences` times (fewer pairs when fewer exist) and scores each by
/// the silhouette of their features with token identity as the label.
/// Throws NotEnoughEligibleTokens.
PairStudyReport pair_study(const Checkpoint& checkpoint, const std::vector<CorpusText>& corpus,
                           const PairStudyOptions& options);

std::string report_to_json(const PairStudyReport& report);

/// CSV with header token_id,label,x,y.
std::string projection_csv(const FeatureSet& features, const Projection2D& projection);
/// Standalone SVG scatter of the same data, one color per token.
std::string projection_svg(const FeatureSet& features, const Projection2D& projection);

}  // namespace ual
