#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "uloc/core.hpp"
#include "uloc/mcdropout.hpp"

namespace uloc {

enum class RejectionMode { PositionOnly, OrientationOnly, JointEither };

inline const char* to_string(RejectionMode m) {
  switch (m) {
    case RejectionMode::PositionOnly: return "position-only";
    case RejectionMode::OrientationOnly: return "orientation-only";
    case RejectionMode::JointEither: return "joint-either";
  }
  return "?";
}

struct ThresholdSpec {
  int keep_percent = 100;
  RejectionMode mode = RejectionMode::PositionOnly;

  void validate() const {
    if (keep_percent < 1 || keep_percent > 100) {
      throw ConfigError("ThresholdSpec: keep_percent must be in 1..100");
    }
  }
};

inline const std::vector<int> kDefaultThresholdSweep = {100, 90, 80, 70};

// Nearest-rank percentile: the k-th smallest value with k = ceil(p/100 * n).
// keep_percent = 100 returns the maximum, so nothing is rejected.
inline double percentile_threshold(const std::vector<double>& values, int keep_percent) {
  if (values.empty()) throw EmptySample("percentile_threshold: empty list");
  if (keep_percent < 1 || keep_percent > 100) {
    throw ConfigError("percentile_threshold: keep_percent must be in 1..100");
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw DomainError("percentile_threshold: non-finite value");
  }
  std::vector<double> sorted(values);
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const std::size_t k =
      (static_cast<std::size_t>(keep_percent) * n + 99) / 100;  // ceil(p*n/100)
  return sorted[k - 1];
}

struct RetentionResult {
  std::optional<double> threshold_p;
  std::optional<double> threshold_q;
  std::vector<std::size_t> kept;      // ascending input order
  std::vector<std::size_t> rejected;  // ascending input order
};

// Keeps index i iff its governing uncertainty is <= the threshold; ties at
// the threshold are always kept. Thresholds may come from a calibration set.
inline RetentionResult apply_rejection_with_thresholds(
    const std::vector<UncertainPose>& predictions, RejectionMode mode,
    std::optional<double> threshold_p, std::optional<double> threshold_q) {
  if (predictions.empty()) throw EmptySample("apply_rejection: empty predictions");
  const bool need_p = mode != RejectionMode::OrientationOnly;
  const bool need_q = mode != RejectionMode::PositionOnly;
  if (need_p && !threshold_p) {
    throw ConfigError("apply_rejection: mode requires a position threshold");
  }
  if (need_q && !threshold_q) {
    throw ConfigError("apply_rejection: mode requires an orientation threshold");
  }

  RetentionResult r;
  r.threshold_p = need_p ? threshold_p : std::nullopt;
  r.threshold_q = need_q ? threshold_q : std::nullopt;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& u = predictions[i];
    bool keep = true;
    if (need_p && u.u_p > *threshold_p) keep = false;
    if (need_q && u.u_q > *threshold_q) keep = false;
    (keep ? r.kept : r.rejected).push_back(i);
  }
  return r;
}

// Thresholds computed on the evaluated predictions themselves, matching the
// percentile-of-the-test-outputs protocol.
inline RetentionResult apply_rejection(const std::vector<UncertainPose>& predictions,
                                       const ThresholdSpec& spec) {
  spec.validate();
  if (predictions.empty()) throw EmptySample("apply_rejection: empty predictions");
  std::optional<double> tp, tq;
  if (spec.mode != RejectionMode::OrientationOnly) {
    std::vector<double> up;
    up.reserve(predictions.size());
    for (const auto& u : predictions) up.push_back(u.u_p);
    tp = percentile_threshold(up, spec.keep_percent);
  }
  if (spec.mode != RejectionMode::PositionOnly) {
    std::vector<double> uq;
    uq.reserve(predictions.size());
    for (const auto& u : predictions) uq.push_back(u.u_q);
    tq = percentile_threshold(uq, spec.keep_percent);
  }
  return apply_rejection_with_thresholds(predictions, spec.mode, tp, tq);
}

// CSV of per-sample uncertainties and keep flags across the sweep, one row
// per prediction.
inline void write_retention_csv(std::ostream& out,
                                const std::vector<std::string>& sample_ids,
                                const std::vector<UncertainPose>& predictions,
                                RejectionMode mode,
                                const std::vector<int>& sweep = kDefaultThresholdSweep) {
  if (sample_ids.size() != predictions.size()) {
    throw ConfigError("write_retention_csv: ids/predictions size mismatch");
  }
  std::vector<std::vector<char>> kept_flags;
  for (int p : sweep) {
    const auto r = apply_rejection(predictions, ThresholdSpec{p, mode});
    std::vector<char> flags(predictions.size(), 0);
    for (std::size_t i : r.kept) flags[i] = 1;
    kept_flags.push_back(std::move(flags));
  }
  out << "sample_id,u_p,u_q";
  for (int p : sweep) out << ",kept_at_" << p;
  out << "\n";
  char buf[64];
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    out << sample_ids[i];
    std::snprintf(buf, sizeof(buf), ",%.17g,%.17g", predictions[i].u_p,
                  predictions[i].u_q);
    out << buf;
    for (std::size_t s = 0; s < sweep.size(); ++s) {
      out << ',' << (kept_flags[s][i] ? '1' : '0');
    }
    out << "\n";
  }
}

}  // namespace uloc
