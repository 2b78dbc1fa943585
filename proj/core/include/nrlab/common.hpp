#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace nrlab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Errors raised by the library. Numerical non-convergence of Newton-Raphson is
// never an exception; it is reported through NRResult.
class Error : public std::runtime_error {
 public:
  enum class Kind {
    kParse,
    kInvalidNetwork,
    kDimension,
    kSingular,
    kDegenerateDirection,
    kConfig,
    kNumerical,
    kIo,
  };

  Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

}  // namespace nrlab
