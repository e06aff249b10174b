#include "avflow/quat.hpp"

#include <cmath>

namespace avflow {

Quat Quat::normalized() const {
  double n = norm();
  if (n <= 0.0) fail(ErrKind::NotARotation, "zero quaternion");
  return {w / n, x / n, y / n, z / n};
}

Quat Quat::canonical() const {
  Quat q = normalized();
  if (q.w < 0.0) return {-q.w, -q.x, -q.y, -q.z};
  return q;
}

namespace {

double det3(const Mat3& r) {
  return r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) +
         r[2] * (r[3] * r[7] - r[4] * r[6]);
}

void check_rotation(const Mat3& r) {
  // orthogonality: R^T R = I
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int k = 0; k < 3; ++k) dot += r[k * 3 + i] * r[k * 3 + j];
      double want = (i == j) ? 1.0 : 0.0;
      if (std::abs(dot - want) > 1e-4)
        fail(ErrKind::NotARotation, "matrix is not orthogonal");
    }
  }
  if (std::abs(det3(r) - 1.0) > 1e-4) fail(ErrKind::NotARotation, "determinant is not +1");
}

}  // namespace

Quat rotmat_to_quat(const Mat3& r) {
  check_rotation(r);
  // Shepperd's method: pick the largest of the four squared components.
  double t0 = 1.0 + r[0] + r[4] + r[8];
  double t1 = 1.0 + r[0] - r[4] - r[8];
  double t2 = 1.0 - r[0] + r[4] - r[8];
  double t3 = 1.0 - r[0] - r[4] + r[8];
  Quat q;
  if (t0 >= t1 && t0 >= t2 && t0 >= t3) {
    double s = 2.0 * std::sqrt(t0);
    q.w = 0.25 * s;
    q.x = (r[7] - r[5]) / s;
    q.y = (r[2] - r[6]) / s;
    q.z = (r[3] - r[1]) / s;
  } else if (t1 >= t2 && t1 >= t3) {
    double s = 2.0 * std::sqrt(t1);
    q.w = (r[7] - r[5]) / s;
    q.x = 0.25 * s;
    q.y = (r[1] + r[3]) / s;
    q.z = (r[2] + r[6]) / s;
  } else if (t2 >= t3) {
    double s = 2.0 * std::sqrt(t2);
    q.w = (r[2] - r[6]) / s;
    q.x = (r[1] + r[3]) / s;
    q.y = 0.25 * s;
    q.z = (r[5] + r[7]) / s;
  } else {
    double s = 2.0 * std::sqrt(t3);
    q.w = (r[3] - r[1]) / s;
    q.x = (r[2] + r[6]) / s;
    q.y = (r[5] + r[7]) / s;
    q.z = 0.25 * s;
  }
  return q.canonical();
}

Mat3 quat_to_rotmat(const Quat& qin) {
  Quat q = qin.normalized();
  double w = q.w, x = q.x, y = q.y, z = q.z;
  return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),    2 * (x * z + w * y),
          2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
          2 * (x * z - w * y),     2 * (y * z + w * x),    1 - 2 * (x * x + y * y)};
}

Mat3 axis_angle_to_rotmat(double ax, double ay, double az, double angle) {
  double n = std::sqrt(ax * ax + ay * ay + az * az);
  if (n <= 0.0) fail(ErrKind::NotARotation, "zero rotation axis");
  ax /= n;
  ay /= n;
  az /= n;
  double c = std::cos(angle), s = std::sin(angle), ic = 1.0 - c;
  return {c + ax * ax * ic,          ax * ay * ic - az * s,    ax * az * ic + ay * s,
          ay * ax * ic + az * s,     c + ay * ay * ic,         ay * az * ic - ax * s,
          az * ax * ic - ay * s,     az * ay * ic + ax * s,    c + az * az * ic};
}

}  // namespace avflow
