#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "uloc/core.hpp"
#include "uloc/mcdropout.hpp"
#include "uloc/net.hpp"
#include "uloc/rejection.hpp"
#include "uloc/sample.hpp"
#include "uloc/version.hpp"

namespace uloc {

enum class EvalMode { PerQuantity, PositionOnly, OrientationOnly, JointEither };

inline const char* to_string(EvalMode m) {
  switch (m) {
    case EvalMode::PerQuantity: return "per-quantity";
    case EvalMode::PositionOnly: return "position-only";
    case EvalMode::OrientationOnly: return "orientation-only";
    case EvalMode::JointEither: return "joint-either";
  }
  return "?";
}

inline EvalMode eval_mode_from_string(const std::string& s) {
  if (s == "per-quantity") return EvalMode::PerQuantity;
  if (s == "position-only") return EvalMode::PositionOnly;
  if (s == "orientation-only") return EvalMode::OrientationOnly;
  if (s == "joint-either") return EvalMode::JointEither;
  throw ConfigError("unknown evaluation mode: " + s);
}

struct QuantityReport {
  std::size_t retained = 0;
  std::size_t rejected = 0;
  std::optional<double> threshold_value;
  ErrorStats stats;
  bool empty = false;  // no retained samples; stats are not meaningful
};

struct ThresholdReport {
  int keep_percent = 100;
  EvalMode mode = EvalMode::PerQuantity;
  QuantityReport position;     // errors in meters, governed by u_p where applicable
  QuantityReport orientation;  // errors in degrees, governed by u_q where applicable
};

struct EvalRecord {
  std::string sample_id;
  std::string sequence_id;
  std::int64_t index_in_sequence = 0;
  Pose2D truth;
  UncertainPose estimate;
  ErrorPair errors;
};

struct Evaluation {
  std::vector<EvalRecord> records;  // ordered by (sequence_id, index_in_sequence)
  std::vector<ThresholdReport> reports;
};

namespace detail {

inline QuantityReport make_quantity_report(const std::vector<double>& errors,
                                           const RetentionResult& retention,
                                           std::optional<double> threshold_value) {
  QuantityReport q;
  q.retained = retention.kept.size();
  q.rejected = retention.rejected.size();
  q.threshold_value = threshold_value;
  if (retention.kept.empty()) {
    q.empty = true;
    return q;
  }
  std::vector<double> kept_errors;
  kept_errors.reserve(retention.kept.size());
  for (std::size_t i : retention.kept) kept_errors.push_back(errors[i]);
  q.stats = summarize_errors(kept_errors);
  return q;
}

}  // namespace detail

// Pure report assembly over already-computed records; evaluate() delegates
// here, and constructed-record tests drive it directly.
inline std::vector<ThresholdReport> build_reports(const std::vector<EvalRecord>& records,
                                                  const std::vector<int>& thresholds,
                                                  EvalMode mode) {
  if (records.empty()) throw EmptySample("build_reports: no records");
  std::vector<UncertainPose> estimates;
  std::vector<double> pos_errors, ori_errors;
  estimates.reserve(records.size());
  for (const auto& r : records) {
    estimates.push_back(r.estimate);
    pos_errors.push_back(r.errors.position_m);
    ori_errors.push_back(r.errors.orientation_deg);
  }

  std::vector<ThresholdReport> reports;
  for (int keep : thresholds) {
    ThresholdReport rep;
    rep.keep_percent = keep;
    rep.mode = mode;
    if (mode == EvalMode::PerQuantity) {
      const auto rp =
          apply_rejection(estimates, ThresholdSpec{keep, RejectionMode::PositionOnly});
      const auto rq =
          apply_rejection(estimates, ThresholdSpec{keep, RejectionMode::OrientationOnly});
      rep.position = detail::make_quantity_report(pos_errors, rp, rp.threshold_p);
      rep.orientation = detail::make_quantity_report(ori_errors, rq, rq.threshold_q);
    } else {
      const RejectionMode rm = mode == EvalMode::PositionOnly
                                   ? RejectionMode::PositionOnly
                                   : (mode == EvalMode::OrientationOnly
                                          ? RejectionMode::OrientationOnly
                                          : RejectionMode::JointEither);
      const auto r = apply_rejection(estimates, ThresholdSpec{keep, rm});
      rep.position = detail::make_quantity_report(pos_errors, r, r.threshold_p);
      rep.orientation = detail::make_quantity_report(ori_errors, r, r.threshold_q);
    }
    reports.push_back(std::move(rep));
  }
  return reports;
}

struct EvalOptions {
  std::size_t passes = 40;  // T
  DropoutSpec dropout{0.2};
  std::vector<int> thresholds = kDefaultThresholdSweep;
  EvalMode mode = EvalMode::PerQuantity;
  std::uint64_t seed = 1;
};

// One MC inference per test tuple. Per-sample mask substreams are derived
// from the sample id, so results do not depend on evaluation order.
inline Evaluation evaluate(const ModelParams& params,
                           const std::vector<SampleTuple>& test_split,
                           const EvalOptions& opt) {
  if (test_split.empty()) throw EmptySample("evaluate: empty test split");
  opt.dropout.validate();
  if (opt.passes < 1) throw ConfigError("evaluate: T must be >= 1");
  for (int keep : opt.thresholds) {
    if (keep < 1 || keep > 100) {
      throw ConfigError("evaluate: thresholds must be in 1..100");
    }
  }
  for (const auto& s : test_split) {
    if (s.image_feat.size() != params.config.image_dim ||
        s.scan.size() != params.config.scan_dim) {
      throw SchemaError("evaluate: dataset feature dims do not match checkpoint config");
    }
  }

  std::vector<const SampleTuple*> ordered;
  ordered.reserve(test_split.size());
  for (const auto& s : test_split) ordered.push_back(&s);
  std::sort(ordered.begin(), ordered.end(), [](const SampleTuple* a, const SampleTuple* b) {
    if (a->sequence_id != b->sequence_id) return a->sequence_id < b->sequence_id;
    return a->index_in_sequence < b->index_in_sequence;
  });

  Evaluation ev;
  ev.records.reserve(ordered.size());
  for (const SampleTuple* s : ordered) {
    EvalRecord rec;
    rec.sample_id = s->sample_id();
    rec.sequence_id = s->sequence_id;
    rec.index_in_sequence = s->index_in_sequence;
    rec.truth = s->pose;
    const auto mc = mc_infer(params, *s, opt.passes, opt.dropout,
                             substream_seed(opt.seed, rec.sample_id));
    rec.estimate = mc.estimate;
    rec.errors.position_m =
        position_error(rec.estimate.p_star, {s->pose.x, s->pose.y});
    rec.errors.orientation_deg = orientation_error(rec.estimate.q_star, s->pose.q);
    ev.records.push_back(std::move(rec));
  }
  ev.reports = build_reports(ev.records, opt.thresholds, opt.mode);
  return ev;
}

// ---------------------------------------------------------------------------
// Scatter export: per-sample (error, uncertainty, band) rows for both
// quantities. Band labels follow the tightest-to-loosest sweep coloring:
// kept_at_<strictest> for samples that survive every cut, otherwise
// rejected_at_<p> where p is the loosest keep-percent that rejects the
// sample.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> band_labels(const std::vector<double>& values,
                                            const std::vector<int>& sweep) {
  std::vector<int> percents(sweep);
  std::sort(percents.begin(), percents.end());
  percents.erase(std::unique(percents.begin(), percents.end()), percents.end());
  std::vector<double> cuts;
  cuts.reserve(percents.size());
  for (int p : percents) cuts.push_back(percentile_threshold(values, p));

  std::vector<std::string> labels(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] <= cuts.front()) {
      labels[i] = "kept_at_" + std::to_string(percents.front());
      continue;
    }
    // the loosest cut that still rejects this value
    std::size_t j = 0;
    while (j + 1 < cuts.size() && values[i] > cuts[j + 1]) ++j;
    labels[i] = "rejected_at_" + std::to_string(percents[j]);
  }
  return labels;
}

inline void print_double(std::ostream& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out << buf;
}

}  // namespace detail

inline void export_scatter_csv(std::ostream& out, const std::vector<EvalRecord>& records,
                               const std::vector<int>& sweep = kDefaultThresholdSweep) {
  if (records.empty()) throw EmptySample("export_scatter_csv: no records");
  std::vector<double> up, uq;
  up.reserve(records.size());
  uq.reserve(records.size());
  for (const auto& r : records) {
    up.push_back(r.estimate.u_p);
    uq.push_back(r.estimate.u_q);
  }
  const auto bands_p = detail::band_labels(up, sweep);
  const auto bands_q = detail::band_labels(uq, sweep);

  out << "sample_id,position_error,u_p,band_p,orientation_error,u_q,band_q\n";
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    out << r.sample_id << ',';
    detail::print_double(out, r.errors.position_m);
    out << ',';
    detail::print_double(out, r.estimate.u_p);
    out << ',' << bands_p[i] << ',';
    detail::print_double(out, r.errors.orientation_deg);
    out << ',';
    detail::print_double(out, r.estimate.u_q);
    out << ',' << bands_q[i] << "\n";
  }
}

// Trajectory export for one threshold: ground-truth and predicted positions
// of retained samples in (sequence_id, index) order. Retention is governed
// by u_p (trajectories are positional paths) unless an explicit single-mode
// rejection is requested.
inline void export_trajectory_csv(std::ostream& out,
                                  const std::vector<EvalRecord>& records,
                                  int keep_percent,
                                  EvalMode mode = EvalMode::PerQuantity) {
  if (records.empty()) throw EmptySample("export_trajectory_csv: no records");
  std::vector<UncertainPose> estimates;
  estimates.reserve(records.size());
  for (const auto& r : records) estimates.push_back(r.estimate);
  const RejectionMode rm = mode == EvalMode::OrientationOnly
                               ? RejectionMode::OrientationOnly
                               : (mode == EvalMode::JointEither ? RejectionMode::JointEither
                                                                : RejectionMode::PositionOnly);
  const auto retention = apply_rejection(estimates, ThresholdSpec{keep_percent, rm});

  out << "sequence_id,index_in_sequence,truth_x,truth_y,pred_x,pred_y\n";
  for (std::size_t i : retention.kept) {
    const auto& r = records[i];
    out << r.sequence_id << ',' << r.index_in_sequence << ',';
    detail::print_double(out, r.truth.x);
    out << ',';
    detail::print_double(out, r.truth.y);
    out << ',';
    detail::print_double(out, r.estimate.p_star[0]);
    out << ',';
    detail::print_double(out, r.estimate.p_star[1]);
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// Eval-record JSONL (reloadable; errors are recomputed and checked on load)
// ---------------------------------------------------------------------------

inline void write_eval_records_jsonl(std::ostream& out,
                                     const std::vector<EvalRecord>& records) {
  for (const auto& r : records) {
    const nlohmann::json j = {
        {"sample_id", r.sample_id},
        {"sequence_id", r.sequence_id},
        {"index_in_sequence", r.index_in_sequence},
        {"truth",
         {{"x", r.truth.x}, {"y", r.truth.y}, {"qc", r.truth.q[0]}, {"qs", r.truth.q[1]}}},
        {"estimate",
         {{"p_star", {r.estimate.p_star[0], r.estimate.p_star[1]}},
          {"q_star", {r.estimate.q_star[0], r.estimate.q_star[1]}},
          {"u_p", r.estimate.u_p},
          {"u_q", r.estimate.u_q},
          {"epistemic_p", r.estimate.epistemic_p},
          {"aleatoric_p", r.estimate.aleatoric_p},
          {"epistemic_q", r.estimate.epistemic_q},
          {"aleatoric_q", r.estimate.aleatoric_q},
          {"passes", r.estimate.passes}}},
        {"errors",
         {{"position_m", r.errors.position_m},
          {"orientation_deg", r.errors.orientation_deg}}}};
    out << j.dump() << "\n";
  }
}

inline std::vector<EvalRecord> load_eval_records_jsonl(std::istream& in) {
  std::vector<EvalRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      EvalRecord r;
      r.sample_id = j.at("sample_id").get<std::string>();
      r.sequence_id = j.at("sequence_id").get<std::string>();
      r.index_in_sequence = j.at("index_in_sequence").get<std::int64_t>();
      const auto& t = j.at("truth");
      r.truth.x = t.at("x").get<double>();
      r.truth.y = t.at("y").get<double>();
      r.truth.q = {t.at("qc").get<double>(), t.at("qs").get<double>()};
      const auto& e = j.at("estimate");
      r.estimate.p_star = {e.at("p_star").at(0).get<double>(),
                           e.at("p_star").at(1).get<double>()};
      r.estimate.q_star = {e.at("q_star").at(0).get<double>(),
                           e.at("q_star").at(1).get<double>()};
      r.estimate.u_p = e.at("u_p").get<double>();
      r.estimate.u_q = e.at("u_q").get<double>();
      r.estimate.epistemic_p = e.at("epistemic_p").get<double>();
      r.estimate.aleatoric_p = e.at("aleatoric_p").get<double>();
      r.estimate.epistemic_q = e.at("epistemic_q").get<double>();
      r.estimate.aleatoric_q = e.at("aleatoric_q").get<double>();
      r.estimate.passes = e.at("passes").get<std::size_t>();
      const auto& er = j.at("errors");
      r.errors.position_m = er.at("position_m").get<double>();
      r.errors.orientation_deg = er.at("orientation_deg").get<double>();

      // self-consistency: stored errors must be recomputable from the poses
      const double pos = position_error(r.estimate.p_star, {r.truth.x, r.truth.y});
      const double ori = orientation_error(r.estimate.q_star, r.truth.q);
      if (std::abs(pos - r.errors.position_m) > 1e-9 ||
          std::abs(ori - r.errors.orientation_deg) > 1e-9) {
        throw SchemaError("eval records line " + std::to_string(line_no) +
                          ": stored errors do not match the stored poses");
      }
      records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& ex) {
      throw SchemaError("eval records line " + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return records;
}

// ---------------------------------------------------------------------------
// Report rendering
// ---------------------------------------------------------------------------

struct EvalMetadata {
  std::string dataset;
  std::string checkpoint;
  std::size_t passes = 40;
  double dropout_rate = 0.2;
  EvalMode mode = EvalMode::PerQuantity;
  std::uint64_t seed = 1;
  std::size_t sample_count = 0;
};

inline nlohmann::json report_to_json(const ThresholdReport& r) {
  auto quantity = [](const QuantityReport& q) {
    nlohmann::json j = {{"retained", q.retained}, {"rejected", q.rejected}, {"empty", q.empty}};
    if (q.threshold_value) j["threshold_value"] = *q.threshold_value;
    else j["threshold_value"] = nullptr;
    if (!q.empty) {
      j["min"] = q.stats.min;
      j["median"] = q.stats.median;
      j["max"] = q.stats.max;
      j["mean"] = q.stats.mean;
    }
    return j;
  };
  return {{"keep_percent", r.keep_percent},
          {"mode", to_string(r.mode)},
          {"position", quantity(r.position)},
          {"orientation", quantity(r.orientation)}};
}

inline void write_report_json(std::ostream& out, const std::vector<ThresholdReport>& reports,
                              const EvalMetadata& meta) {
  nlohmann::json jr = nlohmann::json::array();
  for (const auto& r : reports) jr.push_back(report_to_json(r));
  const nlohmann::json j = {{"format", "uloc-report"},
                            {"version", 1},
                            {"tool_version", kVersion},
                            {"dataset", meta.dataset},
                            {"checkpoint", meta.checkpoint},
                            {"T", meta.passes},
                            {"dropout", meta.dropout_rate},
                            {"mode", to_string(meta.mode)},
                            {"seed", meta.seed},
                            {"samples", meta.sample_count},
                            {"reports", jr}};
  out << j.dump(2) << "\n";
}

// Text table mirroring the min/median/max/mean rows per quantity across the
// threshold sweep, plus retained counts and mean reductions vs the 100% row.
inline void write_report_text(std::ostream& out, const std::vector<ThresholdReport>& reports,
                              const EvalMetadata& meta) {
  char buf[128];
  out << "uncertainty-aware localization report (uloc " << kVersion << ")\n";
  out << "dataset: " << (meta.dataset.empty() ? "-" : meta.dataset)
      << "  checkpoint: " << (meta.checkpoint.empty() ? "-" : meta.checkpoint) << "\n";
  std::snprintf(buf, sizeof(buf), "samples: %zu  T: %zu  dropout: %.3f  mode: %s  seed: %llu\n",
                meta.sample_count, meta.passes, meta.dropout_rate, to_string(meta.mode),
                static_cast<unsigned long long>(meta.seed));
  out << buf << "\n";

  out << "Threshold       ";
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof(buf), "%9d%%", r.keep_percent);
    out << buf;
  }
  out << "\n";

  const ThresholdReport* full = nullptr;
  for (const auto& r : reports) {
    if (r.keep_percent == 100) full = &r;
  }

  auto section = [&](const char* title, auto pick) {
    out << title << "\n";
    const char* rows[4] = {"  Min", "  Median", "  Max", "  Mean"};
    for (int row = 0; row < 4; ++row) {
      std::snprintf(buf, sizeof(buf), "%-16s", rows[row]);
      out << buf;
      for (const auto& r : reports) {
        const QuantityReport& q = pick(r);
        if (q.empty) {
          std::snprintf(buf, sizeof(buf), "%10s", "empty");
        } else {
          const double v = row == 0   ? q.stats.min
                           : row == 1 ? q.stats.median
                           : row == 2 ? q.stats.max
                                      : q.stats.mean;
          std::snprintf(buf, sizeof(buf), "%10.3f", v);
        }
        out << buf;
      }
      out << "\n";
    }
    std::snprintf(buf, sizeof(buf), "%-16s", "  Retained");
    out << buf;
    for (const auto& r : reports) {
      std::snprintf(buf, sizeof(buf), "%10zu", pick(r).retained);
      out << buf;
    }
    out << "\n";
    if (full != nullptr && !pick(*full).empty && pick(*full).stats.mean > 0.0) {
      std::snprintf(buf, sizeof(buf), "%-16s", "  Mean red. %");
      out << buf;
      for (const auto& r : reports) {
        const QuantityReport& q = pick(r);
        if (q.empty) {
          std::snprintf(buf, sizeof(buf), "%10s", "empty");
        } else {
          const double red =
              100.0 * (pick(*full).stats.mean - q.stats.mean) / pick(*full).stats.mean;
          std::snprintf(buf, sizeof(buf), "%10.1f", red);
        }
        out << buf;
      }
      out << "\n";
    }
  };
  section("Position (m)", [](const ThresholdReport& r) -> const QuantityReport& {
    return r.position;
  });
  out << "\n";
  section("Orientation (deg)", [](const ThresholdReport& r) -> const QuantityReport& {
    return r.orientation;
  });
}

}  // namespace uloc
