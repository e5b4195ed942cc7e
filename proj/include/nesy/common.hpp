#ifndef NESY_COMMON_HPP
#define NESY_COMMON_HPP

#include <Eigen/Dense>

#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace nesy {

// Row-major throughout: tensors are flat row-major arrays of doubles and
// Eigen views must agree with that layout.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Eigen::Index;
using Rng = std::mt19937_64;

struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct LookupError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TransferError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(Index rows, Index cols) {
  std::ostringstream os;
  os << "[" << rows << "x" << cols << "]";
  return os.str();
}

inline std::string shape_str(const Matrix& m) { return shape_str(m.rows(), m.cols()); }

}  // namespace nesy

#endif  // NESY_COMMON_HPP
