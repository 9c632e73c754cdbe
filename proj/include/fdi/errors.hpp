#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

#include <Eigen/Dense>

namespace fdi {

// Broad failure classes. The CLI maps them onto exit codes 2, 3 and 4.
enum class ErrorCategory { kInput, kNumerical, kSolver };

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

#define FDI_DEFINE_ERROR(Name, Category)                               \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& what) : Error(Category, what) {} \
  }

// Input / configuration problems.
FDI_DEFINE_ERROR(ParseError, ErrorCategory::kInput);
FDI_DEFINE_ERROR(ValidationError, ErrorCategory::kInput);
FDI_DEFINE_ERROR(DimensionError, ErrorCategory::kInput);
FDI_DEFINE_ERROR(UnknownBranchError, ErrorCategory::kInput);
FDI_DEFINE_ERROR(ConfigError, ErrorCategory::kInput);
FDI_DEFINE_ERROR(MissingThresholdError, ErrorCategory::kInput);

// Numerical trouble in the estimator, detectors or calibration.
FDI_DEFINE_ERROR(DegenerateError, ErrorCategory::kNumerical);
FDI_DEFINE_ERROR(SingularError, ErrorCategory::kNumerical);
FDI_DEFINE_ERROR(DegenerateDataError, ErrorCategory::kNumerical);
FDI_DEFINE_ERROR(EmptySetError, ErrorCategory::kNumerical);
FDI_DEFINE_ERROR(NonconvergenceError, ErrorCategory::kNumerical);
FDI_DEFINE_ERROR(CalibrationMismatchError, ErrorCategory::kNumerical);

// Optimisation / LP solver outcomes.
FDI_DEFINE_ERROR(NumericalError, ErrorCategory::kSolver);
FDI_DEFINE_ERROR(InfeasibleBaseline, ErrorCategory::kSolver);
FDI_DEFINE_ERROR(DegenerateGameError, ErrorCategory::kSolver);

#undef FDI_DEFINE_ERROR

// A perfectly stealthy attack direction exists: W * certificate == 0 and the
// objective grows along it. The certificate is expressed in measurement space.
class UnboundedError : public Error {
 public:
  UnboundedError(const std::string& what, Eigen::VectorXd certificate)
      : Error(ErrorCategory::kSolver, what),
        certificate_(std::move(certificate)) {}
  const Eigen::VectorXd& certificate() const noexcept { return certificate_; }

 private:
  Eigen::VectorXd certificate_;
};

// Wraps a failure raised while filling one payoff cell.
class GameCellError : public Error {
 public:
  GameCellError(const Error& inner, std::size_t row, std::size_t col,
                const std::string& where)
      : Error(inner.category(), "cell (" + std::to_string(row) + "," +
                                    std::to_string(col) + ") " + where +
                                    ": " + inner.what()),
        row_(row),
        col_(col) {}
  std::size_t row() const noexcept { return row_; }
  std::size_t col() const noexcept { return col_; }

 private:
  std::size_t row_;
  std::size_t col_;
};

inline int exit_code_for(ErrorCategory category) {
  switch (category) {
    case ErrorCategory::kInput:
      return 2;
    case ErrorCategory::kNumerical:
      return 3;
    case ErrorCategory::kSolver:
      return 4;
  }
  return 1;
}

}  // namespace fdi
