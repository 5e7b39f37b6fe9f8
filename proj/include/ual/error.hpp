#pragma once

#include <stdexcept>
#include <string>

namespace ual {

/// Process exit codes used by the command-line front end.
enum class ExitCode : int {
  kOk = 0,
  kInputError = 2,
  kExternalService = 3,
  kInfeasible = 4,
  kInternal = 5,
};

/// Base of every error raised by the library. Each subclass knows which
/// exit code it maps to so the CLI can translate without a type switch.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, ExitCode code = ExitCode::kInternal)
      : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error(what, ExitCode::kInputError) {}
};

class EmptyDataset : public InputError {
 public:
  EmptyDataset() : InputError("dataset is empty") {}
};

class MissingUncertainty : public InputError {
 public:
  explicit MissingUncertainty(const std::string& sample_id)
      : InputError("sample '" + sample_id + "' has no uncertainty score"), sample_id_(sample_id) {}
  const std::string& sample_id() const noexcept { return sample_id_; }

 private:
  std::string sample_id_;
};

class InfeasibleConstraint : public Error {
 public:
  InfeasibleConstraint(double alpha, double supremum)
      : Error("mean smoothing target alpha=" + std::to_string(alpha) +
                  " exceeds the attainable supremum " + std::to_string(supremum),
              ExitCode::kInfeasible),
        alpha_(alpha),
        supremum_(supremum) {}
  double alpha() const noexcept { return alpha_; }
  double supremum() const noexcept { return supremum_; }

 private:
  double alpha_;
  double supremum_;
};

class EmptyMask : public InputError {
 public:
  EmptyMask() : InputError("loss mask has no active positions") {}
};

class ShapeMismatch : public InputError {
 public:
  explicit ShapeMismatch(const std::string& what) : InputError("shape mismatch: " + what) {}
};

class PlanDatasetMismatch : public InputError {
 public:
  explicit PlanDatasetMismatch(const std::string& what) : InputError("plan/dataset mismatch: " + what) {}
};

class InvalidHyper : public InputError {
 public:
  explicit InvalidHyper(const std::string& what) : InputError("invalid hyperparameter: " + what) {}
};

class EmptyCorpus : public InputError {
 public:
  EmptyCorpus() : InputError("corpus is empty") {}
};

class FormatError : public InputError {
 public:
  explicit FormatError(const std::string& what) : InputError(what) {}
};

/// Raised by the judge client once retries are exhausted.
class JudgeUnavailable : public Error {
 public:
  JudgeUnavailable(const std::string& what, std::string raw_text)
      : Error("judge unavailable: " + what, ExitCode::kExternalService), raw_text_(std::move(raw_text)) {}
  const std::string& raw_text() const noexcept { return raw_text_; }

 private:
  std::string raw_text_;
};

class UnparseableScore : public Error {
 public:
  explicit UnparseableScore(std::string raw_text)
      : Error("judge reply contains no 'SCORE: <0-100>' marker", ExitCode::kExternalService),
        raw_text_(std::move(raw_text)) {}
  const std::string& raw_text() const noexcept { return raw_text_; }

 private:
  std::string raw_text_;
};

class NonPositivePpl : public InputError {
 public:
  explicit NonPositivePpl(double ppl) : InputError("perplexity must be positive, got " + std::to_string(ppl)) {}
};

class DegenerateData : public InputError {
 public:
  DegenerateData() : InputError("features have rank 0 after centering") {}
};

class ClassTooSmall : public InputError {
 public:
  explicit ClassTooSmall(const std::string& what) : InputError(what) {}
};

class TokenNotFound : public InputError {
 public:
  explicit TokenNotFound(int token) : InputError("token " + std::to_string(token) + " does not occur in corpus"), token_(token) {}
  int token() const noexcept { return token_; }

 private:
  int token_;
};

class NotEnoughEligibleTokens : public InputError {
 public:
  NotEnoughEligibleTokens(std::size_t eligible, std::size_t min_occurrences)
      : InputError("only " + std::to_string(eligible) + " token(s) occur at least " +
                   std::to_string(min_occurrences) + " times; need 2") {}
};

}  // namespace ual
