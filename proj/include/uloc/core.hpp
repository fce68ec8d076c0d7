#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace uloc {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kDegPerRad = 180.0 / kPi;

// Error taxonomy. ConfigError covers misuse that a caller can fix before
// running (bad shapes, bad thresholds); the runtime errors cover data- or
// state-dependent failures.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct SchemaError : ConfigError {
  using ConfigError::ConfigError;
};
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};
struct DegenerateOrientation : std::domain_error {
  using std::domain_error::domain_error;
};
struct EmptySample : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Vec2 = std::array<double, 2>;

// Planar pose: position in meters plus the orientation pair (cos theta,
// sin theta). Ground-truth and aggregated poses keep the pair unit-norm;
// raw network outputs live in RawPoseOutput instead.
struct Pose2D {
  double x = 0.0;
  double y = 0.0;
  Vec2 q{1.0, 0.0};

  static Pose2D from_heading(double x, double y, double theta) {
    return Pose2D{x, y, {std::cos(theta), std::sin(theta)}};
  }

  Vec2 position() const { return {x, y}; }
  double heading() const { return std::atan2(q[1], q[0]); }
};

inline bool pose_valid(const Pose2D& p, double tol = 1e-9) {
  if (!std::isfinite(p.x) || !std::isfinite(p.y)) return false;
  if (!std::isfinite(p.q[0]) || !std::isfinite(p.q[1])) return false;
  const double n = std::hypot(p.q[0], p.q[1]);
  return std::abs(n - 1.0) <= tol;
}

// Raw network output for one forward pass: position, orientation pair (not
// necessarily unit-norm) and the log-variances s = log(sigma^2) of both.
struct RawPoseOutput {
  Vec2 p_hat{0.0, 0.0};
  Vec2 q_hat{0.0, 0.0};
  double s_p = 0.0;
  double s_q = 0.0;

  bool finite() const {
    return std::isfinite(p_hat[0]) && std::isfinite(p_hat[1]) &&
           std::isfinite(q_hat[0]) && std::isfinite(q_hat[1]) &&
           std::isfinite(s_p) && std::isfinite(s_q);
  }
};

struct ErrorPair {
  double position_m = 0.0;
  double orientation_deg = 0.0;
};

inline double position_error(const Vec2& pred, const Vec2& truth) {
  if (!std::isfinite(pred[0]) || !std::isfinite(pred[1]) ||
      !std::isfinite(truth[0]) || !std::isfinite(truth[1])) {
    throw DomainError("position_error: non-finite input");
  }
  return std::hypot(pred[0] - truth[0], pred[1] - truth[1]);
}

inline Vec2 normalize_orientation(const Vec2& q) {
  if (!std::isfinite(q[0]) || !std::isfinite(q[1])) {
    throw DegenerateOrientation("normalize_orientation: non-finite orientation pair");
  }
  const double n = std::hypot(q[0], q[1]);
  if (n <= 1e-12) {
    throw DegenerateOrientation("normalize_orientation: near-zero orientation pair");
  }
  return {q[0] / n, q[1] / n};
}

// Angle between the normalized predicted pair and the unit-norm truth pair,
// in degrees, range [0, 180].
inline double orientation_error(const Vec2& pred_q, const Vec2& truth_q) {
  const Vec2 p = normalize_orientation(pred_q);
  if (!std::isfinite(truth_q[0]) || !std::isfinite(truth_q[1])) {
    throw DomainError("orientation_error: non-finite truth orientation");
  }
  const double tn = std::hypot(truth_q[0], truth_q[1]);
  if (std::abs(tn - 1.0) > 1e-9) {
    throw DomainError("orientation_error: truth orientation pair is not unit-norm");
  }
  const double d = std::clamp(p[0] * truth_q[0] + p[1] * truth_q[1], -1.0, 1.0);
  return std::acos(d) * kDegPerRad;
}

struct ErrorStats {
  double min = 0.0;
  double median = 0.0;
  double max = 0.0;
  double mean = 0.0;
};

// min/median/max/mean of a non-empty list. Median uses the midpoint
// convention: the average of the two central order statistics for even n.
inline ErrorStats summarize_errors(const std::vector<double>& values) {
  if (values.empty()) throw EmptySample("summarize_errors: empty list");
  for (double v : values) {
    if (!std::isfinite(v)) throw DomainError("summarize_errors: non-finite value");
  }
  std::vector<double> sorted(values);
  std::sort(sorted.begin(), sorted.end());
  ErrorStats s;
  s.min = sorted.front();
  s.max = sorted.back();
  const std::size_t n = sorted.size();
  s.median = (n % 2 == 1) ? sorted[n / 2]
                          : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  double acc = 0.0;
  for (double v : sorted) acc += v;
  s.mean = acc / static_cast<double>(n);
  return s;
}

}  // namespace uloc
