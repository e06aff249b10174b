#pragma once

#include <array>

#include "avflow/common.hpp"

namespace avflow {

struct Quat {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
  Quat normalized() const;
  // sign-canonical form with w >= 0
  Quat canonical() const;
};

using Mat3 = std::array<double, 9>;  // row-major

// Requires R^T R = I within 1e-4 and det(R) = +1; result has w >= 0.
Quat rotmat_to_quat(const Mat3& r);
Mat3 quat_to_rotmat(const Quat& q);

Mat3 axis_angle_to_rotmat(double ax, double ay, double az, double angle);

}  // namespace avflow
