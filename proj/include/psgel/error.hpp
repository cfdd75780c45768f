#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace psgel {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid user-supplied configuration (bad config fields, knot vectors, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Quadrature or other numerical routine failed to reach its tolerance.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, double achieved)
      : Error(what + " (achieved tolerance " + std::to_string(achieved) + ")"), achieved_(achieved) {}
  double achieved() const noexcept { return achieved_; }

 private:
  double achieved_;
};

// Malformed input file.
class IngestionError : public Error {
 public:
  IngestionError(const std::string& what, std::size_t row)
      : Error(what + " at row " + std::to_string(row)), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

// Empirical Gram of an instrument basis is numerically rank deficient.
class DegenerateBasisError : public Error {
 public:
  DegenerateBasisError(double eigenvalue, std::size_t j)
      : Error("degenerate instrument basis: minimum Gram eigenvalue " + std::to_string(eigenvalue) +
              " with J=" + std::to_string(j) + "; try a smaller J"),
        eigenvalue_(eigenvalue) {}
  double eigenvalue() const noexcept { return eigenvalue_; }

 private:
  double eigenvalue_;
};

// lambda' g_i left the domain of the GEL carrier.
class OutOfDomainError : public Error {
 public:
  explicit OutOfDomainError(std::size_t index)
      : Error("lambda'g outside the GEL domain at observation " + std::to_string(index)), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

class InnerSolverError : public Error {
 public:
  using Error::Error;
};

class EstimationError : public Error {
 public:
  using Error::Error;
};

class RankDeficiencyError : public Error {
 public:
  using Error::Error;
};

// Restricted fit beat the unrestricted fit by more than the tolerance.
class OptimizerInconsistencyError : public Error {
 public:
  using Error::Error;
};

}  // namespace psgel
