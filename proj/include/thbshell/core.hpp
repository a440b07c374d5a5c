#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace thbshell {

using Real = double;
using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

// Thrown when a geometry map degenerates (vanishing surface measure etc.).
class GeometryError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Thrown when an iterative process fails to reach its tolerance.
class NonConvergenceError : public std::runtime_error {
public:
  NonConvergenceError(const std::string& what, Real achieved)
      : std::runtime_error(what), achieved_residual(achieved) {}
  Real achieved_residual;
};

// Thrown when a numerical routine cannot continue (singular matrix,
// bracketing failure, ...).
class NumericError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace thbshell
