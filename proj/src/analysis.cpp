#include "ual/analysis.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ual/error.hpp"
#include "ual/io.hpp"
#include "ual/tokenizer.hpp"

namespace ual {

namespace {

std::vector<std::vector<int>> windows_of(const CorpusText& text, int context_length) {
  const auto ids = tokenize(text.text);
  std::vector<std::vector<int>> out;
  const auto T = static_cast<std::size_t>(context_length);
  for (std::size_t start = 0; start < ids.size(); start += T) {
    const std::size_t end = std::min(ids.size(), start + T);
    out.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(start), ids.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

// Symmetric eigendecomposition by cyclic Jacobi rotations. On return the
// diagonal of `a` holds eigenvalues and the columns of `vectors` the
// corresponding eigenvectors.
void jacobi_eigen(Matrix& a, Matrix& vectors) {
  const std::size_t d = a.rows;
  vectors = Matrix(d, d);
  for (std::size_t i = 0; i < d; ++i) vectors(i, i) = 1.0;

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0, diag = 0.0;
    for (std::size_t p = 0; p < d; ++p) {
      diag += a(p, p) * a(p, p);
      for (std::size_t q = p + 1; q < d; ++q) off += a(p, q) * a(p, q);
    }
    if (off == 0.0 || off < 1e-32 * diag) break;

    for (std::size_t p = 0; p < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < d; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double vkp = vectors(k, p), vkq = vectors(k, q);
          vectors(k, p) = c * vkp - s * vkq;
          vectors(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
}

std::string token_label(int token) {
  if (token == kBos) return "<bos>";
  if (token == kEos) return "<eos>";
  if (token == kPad) return "<pad>";
  if (token > 32 && token < 127 && token != ',' && token != '"' && token != '<' && token != '>' && token != '&') {
    return std::string(1, static_cast<char>(token));
  }
  char buf[8];
  std::snprintf(buf, sizeof(buf), "0x%02X", token);
  return buf;
}

}  // namespace

std::vector<CorpusText> corpus_from_dataset(const Dataset& dataset) {
  std::vector<CorpusText> out;
  out.reserve(dataset.size());
  for (const auto& s : dataset) out.push_back({s.id, s.instruction + s.response});
  return out;
}

Matrix FeatureSet::matrix() const {
  Matrix m(records.size(), dim);
  for (std::size_t r = 0; r < records.size(); ++r) {
    std::copy(records[r].values.begin(), records[r].values.end(), m.data.begin() + static_cast<std::ptrdiff_t>(r * dim));
  }
  return m;
}

std::vector<int> FeatureSet::tokens() const {
  std::vector<int> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.token);
  return out;
}

FeatureSet FeatureSet::subset(std::span<const int> wanted) const {
  FeatureSet out{dim, {}};
  for (const auto& r : records) {
    if (std::find(wanted.begin(), wanted.end(), r.token) != wanted.end()) out.records.push_back(r);
  }
  return out;
}

std::vector<std::size_t> count_tokens(const std::vector<CorpusText>& corpus, int vocab_size) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(vocab_size), 0);
  for (const auto& text : corpus) {
    for (int id : tokenize(text.text)) {
      if (id < vocab_size) counts[static_cast<std::size_t>(id)] += 1;
    }
  }
  return counts;
}

FeatureSet extract_features(const Checkpoint& checkpoint, const std::vector<CorpusText>& corpus,
                            std::span<const int> tokens, std::size_t cap) {
  if (corpus.empty()) throw EmptyCorpus();
  const auto& params = checkpoint.params;
  const auto d = static_cast<std::size_t>(params.config.embed_dim);
  std::map<int, std::size_t> taken;
  for (int t : tokens) taken[t] = 0;

  FeatureSet out{d, {}};
  auto wanted = [&](int id) {
    auto it = taken.find(id);
    return it != taken.end() && it->second < cap;
  };
  for (const auto& text : corpus) {
    for (const auto& window : windows_of(text, params.config.context_length)) {
      if (std::none_of(window.begin(), window.end(), wanted)) continue;
      const auto fwd = forward(params, TokenBatch{1, window.size(), window}, true);
      for (std::size_t t = 0; t < window.size(); ++t) {
        if (!wanted(window[t])) continue;
        FeatureRecord rec;
        rec.token = window[t];
        rec.occurrence = taken[window[t]]++;
        rec.text_id = text.id;
        rec.values.assign(fwd.features->begin() + static_cast<std::ptrdiff_t>(t * d),
                          fwd.features->begin() + static_cast<std::ptrdiff_t>((t + 1) * d));
        for (double v : rec.values) {
          if (!std::isfinite(v)) throw Error("non-finite feature value");
        }
        out.records.push_back(std::move(rec));
      }
    }
  }
  for (const auto& [token, count] : taken) {
    if (count == 0 && cap > 0) throw TokenNotFound(token);
  }
  return out;
}

Projection2D pca_2d(const Matrix& x) {
  const std::size_t n = x.rows;
  const std::size_t d = x.cols;
  if (n < 3 || d < 2) throw InputError("pca needs at least 3 points in at least 2 dimensions");

  Projection2D out;
  out.mean.assign(d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) out.mean[c] += x(r, c);
  }
  for (auto& m : out.mean) m /= static_cast<double>(n);

  Matrix centered(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) centered(r, c) = x(r, c) - out.mean[c];
  }
  Matrix cov(d, d);
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = centered.row(r);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = i; j < d; ++j) cov(i, j) += row[i] * row[j];
    }
  }
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      cov(i, j) /= static_cast<double>(n - 1);
      cov(j, i) = cov(i, j);
    }
  }
  double trace = 0.0;
  for (std::size_t i = 0; i < d; ++i) trace += cov(i, i);
  if (!(trace > 0.0)) throw DegenerateData();

  Matrix vectors;
  jacobi_eigen(cov, vectors);
  std::vector<std::size_t> order(d);
  for (std::size_t i = 0; i < d; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return cov(a, a) > cov(b, b); });

  out.basis = Matrix(2, d);
  for (std::size_t k = 0; k < 2; ++k) {
    const std::size_t col = order[k];
    std::size_t argmax = 0;
    for (std::size_t i = 1; i < d; ++i) {
      if (std::abs(vectors(i, col)) > std::abs(vectors(argmax, col))) argmax = i;
    }
    const double sign = vectors(argmax, col) < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < d; ++i) out.basis(k, i) = sign * vectors(i, col);
    out.explained.push_back(std::clamp(cov(col, col) / trace, 0.0, 1.0));
  }

  out.points = Matrix(n, 2);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < 2; ++k) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += centered(r, c) * out.basis(k, c);
      out.points(r, k) = s;
    }
  }

#ifndef NDEBUG
  for (std::size_t a = 0; a < 2; ++a) {
    for (std::size_t b = 0; b < 2; ++b) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += out.basis(a, c) * out.basis(b, c);
      assert(std::abs(dot - (a == b ? 1.0 : 0.0)) <= 1e-10);
    }
  }
  assert(out.explained[0] >= out.explained[1]);
#endif
  return out;
}

double silhouette(const Matrix& x, std::span<const int> labels) {
  const std::size_t n = x.rows;
  if (labels.size() != n) throw ShapeMismatch("one label per feature row required");
  std::vector<int> classes(labels.begin(), labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 2) throw ClassTooSmall("silhouette needs at least two labels");
  std::vector<std::size_t> members(classes.size(), 0);
  std::vector<std::size_t> class_of(n);
  for (std::size_t i = 0; i < n; ++i) {
    class_of[i] = static_cast<std::size_t>(std::lower_bound(classes.begin(), classes.end(), labels[i]) - classes.begin());
    members[class_of[i]] += 1;
  }
  for (std::size_t c = 0; c < classes.size(); ++c) {
    if (members[c] < 2) {
      throw ClassTooSmall("label " + std::to_string(classes[c]) + " has fewer than two members");
    }
  }

  std::vector<double> sums(classes.size());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(sums.begin(), sums.end(), 0.0);
    const auto xi = x.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const auto xj = x.row(j);
      double sq = 0.0;
      for (std::size_t k = 0; k < x.cols; ++k) {
        const double diff = xi[k] - xj[k];
        sq += diff * diff;
      }
      sums[class_of[j]] += std::sqrt(sq);
    }
    const std::size_t own = class_of[i];
    const double a = sums[own] / static_cast<double>(members[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes.size(); ++c) {
      if (c != own) b = std::min(b, sums[c] / static_cast<double>(members[c]));
    }
    const double denom = std::max(a, b);
    total += denom == 0.0 ? 0.0 : (b - a) / denom;
  }
  return total / static_cast<double>(n);
}

PairStudyReport pair_study(const Checkpoint& checkpoint, const std::vector<CorpusText>& corpus,
                           const PairStudyOptions& options) {
  if (corpus.empty()) throw EmptyCorpus();
  if (options.min_occurrences < 2 || options.cap < 2) {
    throw InputError("pair study needs min_occurrences >= 2 and cap >= 2");
  }
  const auto counts = count_tokens(corpus, checkpoint.config().vocab_size);
  std::vector<int> eligible;
  for (std::size_t id = 0; id < counts.size(); ++id) {
    if (!is_special_token(static_cast<int>(id)) && counts[id] >= options.min_occurrences) {
      eligible.push_back(static_cast<int>(id));
    }
  }
  if (eligible.size() < 2) throw NotEnoughEligibleTokens(eligible.size(), options.min_occurrences);

  std::vector<std::pair<int, int>> all_pairs;
  for (std::size_t i = 0; i < eligible.size(); ++i) {
    for (std::size_t j = i + 1; j < eligible.size(); ++j) all_pairs.emplace_back(eligible[i], eligible[j]);
  }
  std::mt19937_64 rng(options.seed);
  std::shuffle(all_pairs.begin(), all_pairs.end(), rng);
  all_pairs.resize(std::min(all_pairs.size(), options.n_pairs));

  std::set<int> needed;
  for (const auto& [a, b] : all_pairs) {
    needed.insert(a);
    needed.insert(b);
  }
  const std::vector<int> needed_tokens(needed.begin(), needed.end());
  const FeatureSet features = extract_features(checkpoint, corpus, needed_tokens, options.cap);

  PairStudyReport report;
  report.seed = options.seed;
  report.requested_pairs = options.n_pairs;
  report.min_occurrences = options.min_occurrences;
  report.cap = options.cap;
  report.eligible_tokens = eligible.size();
  double total = 0.0;
  for (const auto& [a, b] : all_pairs) {
    const int pair[2] = {a, b};
    const FeatureSet sub = features.subset(pair);
    std::vector<int> labels = sub.tokens();
    PairScore ps;
    ps.token_a = a;
    ps.token_b = b;
    ps.count_a = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), a));
    ps.count_b = labels.size() - ps.count_a;
    ps.score = silhouette(sub.matrix(), labels);
    total += ps.score;
    report.pairs.push_back(ps);
  }
  report.mean_score = total / static_cast<double>(report.pairs.size());
  return report;
}

std::string report_to_json(const PairStudyReport& report) {
  nlohmann::ordered_json j;
  j["seed"] = report.seed;
  j["n_pairs"] = report.pairs.size();
  j["requested_pairs"] = report.requested_pairs;
  j["min_occurrences"] = report.min_occurrences;
  j["cap"] = report.cap;
  j["eligible_tokens"] = report.eligible_tokens;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& p : report.pairs) {
    nlohmann::ordered_json row;
    row["token_a"] = p.token_a;
    row["token_b"] = p.token_b;
    row["label_a"] = token_label(p.token_a);
    row["label_b"] = token_label(p.token_b);
    row["count_a"] = p.count_a;
    row["count_b"] = p.count_b;
    row["silhouette"] = p.score;
    rows.push_back(std::move(row));
  }
  j["pairs"] = std::move(rows);
  j["mean_silhouette"] = report.mean_score;
  return j.dump(2) + "\n";
}

std::string projection_csv(const FeatureSet& features, const Projection2D& projection) {
  std::ostringstream out;
  out << "token_id,label,x,y\n";
  for (std::size_t r = 0; r < features.records.size(); ++r) {
    const int token = features.records[r].token;
    out << token << ',' << token_label(token) << ',' << io::format_double(projection.points(r, 0)) << ','
        << io::format_double(projection.points(r, 1)) << '\n';
  }
  return out.str();
}

std::string projection_svg(const FeatureSet& features, const Projection2D& projection) {
  static constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  constexpr double kSize = 480.0, kMargin = 24.0;
  double min_x = 0, max_x = 0, min_y = 0, max_y = 0;
  for (std::size_t r = 0; r < projection.points.rows; ++r) {
    const double px = projection.points(r, 0), py = projection.points(r, 1);
    if (r == 0 || px < min_x) min_x = px;
    if (r == 0 || px > max_x) max_x = px;
    if (r == 0 || py < min_y) min_y = py;
    if (r == 0 || py > max_y) max_y = py;
  }
  const double span = std::max({max_x - min_x, max_y - min_y, 1e-12});
  std::map<int, std::size_t> color_of;
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSize << "\" height=\"" << kSize << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t r = 0; r < features.records.size(); ++r) {
    const int token = features.records[r].token;
    const auto color = color_of.emplace(token, color_of.size()).first->second % std::size(kColors);
    const double cx = kMargin + (projection.points(r, 0) - min_x) / span * (kSize - 2 * kMargin);
    const double cy = kSize - kMargin - (projection.points(r, 1) - min_y) / span * (kSize - 2 * kMargin);
    out << "<circle cx=\"" << cx << "\" cy=\"" << cy << "\" r=\"3\" fill=\"" << kColors[color]
        << "\" fill-opacity=\"0.6\"><title>" << token_label(token) << "</title></circle>\n";
  }
  double legend_y = 16.0;
  for (const auto& [token, color] : color_of) {
    out << "<text x=\"8\" y=\"" << legend_y << "\" font-family=\"monospace\" font-size=\"12\" fill=\""
        << kColors[color % std::size(kColors)] << "\">" << token_label(token) << "</text>\n";
    legend_y += 14.0;
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace ual
