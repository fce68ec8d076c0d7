#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "uloc/core.hpp"
#include "uloc/rng.hpp"
#include "uloc/sample.hpp"
#include "uloc/version.hpp"

namespace uloc {

// ---------------------------------------------------------------------------
// World description
// ---------------------------------------------------------------------------

struct Rect {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;

  bool contains(double x, double y) const {
    return x >= x0 && x <= x1 && y >= y0 && y <= y1;
  }
  void validate(const std::string& what) const {
    if (!(x0 < x1 && y0 < y1)) throw ConfigError(what + ": degenerate rectangle");
  }
};

// A region with elevated sensing noise: the pose used to synthesize the
// sensor channels is jittered by position_sigma/heading_sigma, and the image
// feature vector gets additive feature_sigma noise per coordinate.
struct NoiseRegion {
  Rect region;
  double position_sigma = 0.0;     // meters
  double feature_sigma = 0.0;      // feature units
  double heading_sigma_deg = 0.0;  // degrees
};

struct WorldSpec {
  double width = 10.0;
  double height = 10.0;
  std::vector<Rect> obstacles;
  std::size_t scan_rays = 64;
  double scan_max_range = 12.0;
  std::vector<NoiseRegion> noise_regions;
  std::size_t image_feature_dim = 16;
  std::uint64_t feature_map_seed = 7041112ull;

  void validate() const {
    if (!(width > 0.0 && height > 0.0)) throw ConfigError("WorldSpec: non-positive floor plan");
    if (scan_rays == 0) throw ConfigError("WorldSpec: scan_rays must be positive");
    if (!(scan_max_range > 0.0)) throw ConfigError("WorldSpec: scan_max_range must be positive");
    if (image_feature_dim == 0) throw ConfigError("WorldSpec: image_feature_dim must be positive");
    for (const auto& o : obstacles) {
      o.validate("WorldSpec obstacle");
      if (o.x0 < 0.0 || o.y0 < 0.0 || o.x1 > width || o.y1 > height) {
        throw ConfigError("WorldSpec: obstacle outside floor plan");
      }
    }
    for (const auto& r : noise_regions) {
      r.region.validate("WorldSpec noise region");
      if (r.position_sigma < 0.0 || r.feature_sigma < 0.0 || r.heading_sigma_deg < 0.0) {
        throw ConfigError("WorldSpec: negative noise sigma");
      }
    }
  }

  // strictly inside the floor plan and not inside (or on) any obstacle
  bool in_free_space(double x, double y) const {
    if (!(x > 0.0 && x < width && y > 0.0 && y < height)) return false;
    for (const auto& o : obstacles) {
      if (o.contains(x, y)) return false;
    }
    return true;
  }

  const NoiseRegion* noise_at(double x, double y) const {
    for (const auto& r : noise_regions) {
      if (r.region.contains(x, y)) return &r;
    }
    return nullptr;
  }
};

// ---------------------------------------------------------------------------
// Scan synthesis: exact ray/segment intersections against walls + obstacles
// ---------------------------------------------------------------------------

namespace detail {

// distance along (dx, dy) from (px, py) to the vertical segment x = c,
// y in [lo, hi]; negative if no hit
inline double ray_vs_vertical(double px, double py, double dx, double dy, double c,
                              double lo, double hi) {
  if (std::abs(dx) < 1e-15) return -1.0;
  const double t = (c - px) / dx;
  if (t <= 1e-12) return -1.0;
  const double y = py + t * dy;
  if (y < lo - 1e-12 || y > hi + 1e-12) return -1.0;
  return t;
}

inline double ray_vs_horizontal(double px, double py, double dx, double dy, double c,
                                double lo, double hi) {
  if (std::abs(dy) < 1e-15) return -1.0;
  const double t = (c - py) / dy;
  if (t <= 1e-12) return -1.0;
  const double x = px + t * dx;
  if (x < lo - 1e-12 || x > hi + 1e-12) return -1.0;
  return t;
}

inline double nearest_hit(const WorldSpec& w, double px, double py, double dx,
                          double dy) {
  double best = -1.0;
  auto consider = [&](double t) {
    if (t > 0.0 && (best < 0.0 || t < best)) best = t;
  };
  consider(ray_vs_vertical(px, py, dx, dy, 0.0, 0.0, w.height));
  consider(ray_vs_vertical(px, py, dx, dy, w.width, 0.0, w.height));
  consider(ray_vs_horizontal(px, py, dx, dy, 0.0, 0.0, w.width));
  consider(ray_vs_horizontal(px, py, dx, dy, w.height, 0.0, w.width));
  for (const auto& o : w.obstacles) {
    consider(ray_vs_vertical(px, py, dx, dy, o.x0, o.y0, o.y1));
    consider(ray_vs_vertical(px, py, dx, dy, o.x1, o.y0, o.y1));
    consider(ray_vs_horizontal(px, py, dx, dy, o.y0, o.x0, o.x1));
    consider(ray_vs_horizontal(px, py, dx, dy, o.y1, o.x0, o.x1));
  }
  return best;
}

}  // namespace detail

// Ray distances at scan_rays equally spaced bearings in the robot frame,
// clamped to scan_max_range.
inline Vec raycast_scan(const WorldSpec& world, const Pose2D& pose) {
  if (!world.in_free_space(pose.x, pose.y)) {
    throw DomainError("raycast_scan: pose outside free space");
  }
  const double qc = pose.q[0], qs = pose.q[1];
  Vec scan(world.scan_rays, world.scan_max_range);
  for (std::size_t k = 0; k < world.scan_rays; ++k) {
    const double b = 2.0 * kPi * static_cast<double>(k) / static_cast<double>(world.scan_rays);
    const double cb = std::cos(b), sb = std::sin(b);
    const double dx = qc * cb - qs * sb;
    const double dy = qs * cb + qc * sb;
    const double t = detail::nearest_hit(world, pose.x, pose.y, dx, dy);
    if (t > 0.0) scan[k] = std::min(t, world.scan_max_range);
  }
  return scan;
}

// ---------------------------------------------------------------------------
// Image-feature synthesis: a fixed seeded sinusoidal embedding of the pose
// ---------------------------------------------------------------------------

// f_j = sin(a_j . v + phi_j) with v = (2x/W - 1, 2y/H - 1, cos t, sin t); the
// coefficients are a pure function of feature_map_seed, so the embedding is
// identical across sequences, splits and runs.
inline Vec base_image_feature(const WorldSpec& world, const Pose2D& pose) {
  auto rng = make_rng(substream_seed(world.feature_map_seed, "feature-map"));
  std::normal_distribution<double> coef(0.0, 1.5);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * kPi);
  const double v[4] = {2.0 * pose.x / world.width - 1.0,
                       2.0 * pose.y / world.height - 1.0, pose.q[0], pose.q[1]};
  Vec f(world.image_feature_dim);
  for (auto& fj : f) {
    double arg = 0.0;
    for (double vi : v) arg += coef(rng) * vi;
    fj = std::sin(arg + phase(rng));
  }
  return f;
}

// Base embedding plus per-coordinate Gaussian noise from the noise region
// containing the pose (if any).
inline Vec synth_image_feature(const WorldSpec& world, const Pose2D& pose,
                               std::mt19937_64& rng) {
  Vec f = base_image_feature(world, pose);
  const NoiseRegion* region = world.noise_at(pose.x, pose.y);
  if (region != nullptr && region->feature_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, region->feature_sigma);
    for (auto& fj : f) fj += noise(rng);
  }
  return f;
}

// ---------------------------------------------------------------------------
// Trajectory patterns
// ---------------------------------------------------------------------------

struct TrajectorySpec {
  int loop_sequences = 4;
  int zigzag_sequences = 4;
  int back_and_forth_sequences = 2;
  int rotation_sequences = 2;
  double step_m = 0.1;
  double rotation_step_deg = 3.0;
  double margin_m = 1.0;
  int zigzag_lanes = 5;

  void validate() const {
    if (loop_sequences < 0 || zigzag_sequences < 0 || back_and_forth_sequences < 0 ||
        rotation_sequences < 0) {
      throw ConfigError("TrajectorySpec: negative sequence count");
    }
    if (loop_sequences + zigzag_sequences + back_and_forth_sequences +
            rotation_sequences == 0) {
      throw ConfigError("TrajectorySpec: no sequences requested");
    }
    if (!(step_m > 0.0)) throw ConfigError("TrajectorySpec: step_m must be positive");
    if (!(rotation_step_deg > 0.0)) {
      throw ConfigError("TrajectorySpec: rotation_step_deg must be positive");
    }
    if (!(margin_m > 0.0)) throw ConfigError("TrajectorySpec: margin_m must be positive");
    if (zigzag_lanes < 2) throw ConfigError("TrajectorySpec: zigzag_lanes must be >= 2");
  }
};

namespace detail {

// Walks a closed or open polyline edge by edge, emitting poses every step_m
// with the heading along the direction of travel. Every edge length must be
// an exact multiple of step_m (the builders snap lengths), which keeps
// consecutive positions exactly one step apart, corners included.
inline std::vector<Pose2D> walk_edges(const std::vector<std::array<double, 4>>& edges,
                                      double step) {
  std::vector<Pose2D> poses;
  for (const auto& e : edges) {
    const double ex = e[2] - e[0], ey = e[3] - e[1];
    const double len = std::hypot(ex, ey);
    const auto steps = static_cast<std::size_t>(std::llround(len / step));
    const double ux = ex / len, uy = ey / len;
    const double heading = std::atan2(uy, ux);
    for (std::size_t k = 0; k < steps; ++k) {
      const double d = step * static_cast<double>(k);
      poses.push_back(Pose2D::from_heading(e[0] + d * ux, e[1] + d * uy, heading));
    }
  }
  return poses;
}

inline double snap_down(double len, double step) {
  return std::floor(len / step + 1e-9) * step;
}

inline std::vector<Pose2D> build_loop(const WorldSpec& w, double margin, double step) {
  const double lx = snap_down(w.width - 2.0 * margin, step);
  const double ly = snap_down(w.height - 2.0 * margin, step);
  if (lx < step || ly < step) throw GenerationError("loop trajectory does not fit the world");
  const double x0 = (w.width - lx) / 2.0, y0 = (w.height - ly) / 2.0;
  const std::vector<std::array<double, 4>> edges = {
      {x0, y0, x0 + lx, y0},
      {x0 + lx, y0, x0 + lx, y0 + ly},
      {x0 + lx, y0 + ly, x0, y0 + ly},
      {x0, y0 + ly, x0, y0},
  };
  return walk_edges(edges, step);
}

// Back-and-forth line through the world center at an arbitrary angle.
inline std::vector<Pose2D> build_back_and_forth_angled(const WorldSpec& w, double margin,
                                                       double step, double alpha,
                                                       int passes) {
  const double radius = std::min(w.width, w.height) / 2.0 - margin;
  const double len = snap_down(1.8 * radius, step);
  if (len < step) throw GenerationError("angled back-and-forth does not fit the world");
  const double cx = w.width / 2.0, cy = w.height / 2.0;
  const double ux = std::cos(alpha), uy = std::sin(alpha);
  const double ax = cx - ux * len / 2.0, ay = cy - uy * len / 2.0;
  const double bx = cx + ux * len / 2.0, by = cy + uy * len / 2.0;
  std::vector<std::array<double, 4>> edges;
  for (int p = 0; p < passes; ++p) {
    if (p % 2 == 0) edges.push_back({ax, ay, bx, by});
    else edges.push_back({bx, by, ax, ay});
  }
  return walk_edges(edges, step);
}

// Serpentine sweep; horizontal lanes by default, or vertical when
// transposed (alternating orientations widen the covered area).
inline std::vector<Pose2D> build_zigzag(const WorldSpec& w, double margin, double step,
                                        int lanes, bool transposed = false) {
  const double span_w = transposed ? w.height : w.width;
  const double span_h = transposed ? w.width : w.height;
  const double lx = snap_down(span_w - 2.0 * margin, step);
  const double gap = snap_down((span_h - 2.0 * margin) / static_cast<double>(lanes - 1), step);
  if (lx < step || gap < step) {
    throw GenerationError("zigzag trajectory does not fit the world");
  }
  const double x0 = (span_w - lx) / 2.0;
  const double y0 = (span_h - gap * static_cast<double>(lanes - 1)) / 2.0;
  std::vector<std::array<double, 4>> edges;
  auto push = [&](double ax, double ay, double bx, double by) {
    if (transposed) edges.push_back({ay, ax, by, bx});
    else edges.push_back({ax, ay, bx, by});
  };
  for (int lane = 0; lane < lanes; ++lane) {
    const double y = y0 + gap * lane;
    if (lane % 2 == 0) {
      push(x0, y, x0 + lx, y);
    } else {
      push(x0 + lx, y, x0, y);
    }
    if (lane + 1 < lanes) {
      const double xv = (lane % 2 == 0) ? x0 + lx : x0;
      push(xv, y, xv, y + gap);
    }
  }
  return walk_edges(edges, step);
}

inline std::vector<Pose2D> build_rotation(double cx, double cy, double start_deg,
                                          double step_deg) {
  const auto steps = static_cast<std::size_t>(std::ceil(360.0 / step_deg));
  std::vector<Pose2D> poses;
  poses.reserve(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    const double theta = (start_deg + step_deg * static_cast<double>(k)) / kDegPerRad;
    poses.push_back(Pose2D::from_heading(cx, cy, theta));
  }
  return poses;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

struct SplitManifest {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

struct Dataset {
  std::vector<SampleTuple> samples;
  SplitManifest splits;
};

namespace detail {

inline std::string seq_name(const char* pattern, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s-%03d", pattern, i);
  return buf;
}

// Whole sequences go to exactly one split, roughly 2/3 : 1/6 : 1/6.
inline SplitManifest split_sequences(std::vector<std::string> ids, std::mt19937_64& rng) {
  std::shuffle(ids.begin(), ids.end(), rng);
  const std::size_t n = ids.size();
  SplitManifest m;
  if (n < 3) {
    m.train = std::move(ids);
    return m;
  }
  std::size_t n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(
                                                   static_cast<double>(n) / 6.0)));
  std::size_t n_test = n_val;
  while (n_val + n_test + 1 > n) {
    if (n_test > 1) --n_test;
    else --n_val;
  }
  const std::size_t n_train = n - n_val - n_test;
  m.train.assign(ids.begin(), ids.begin() + n_train);
  m.val.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
  m.test.assign(ids.begin() + n_train + n_val, ids.end());
  return m;
}

}  // namespace detail

// Generates every sequence, validates each ground-truth pose against the
// world, applies region noise to the sensed channels and splits by whole
// sequences. Identical (world, trajectory, seed) inputs reproduce the
// dataset bit for bit.
inline Dataset generate_dataset(const WorldSpec& world, const TrajectorySpec& traj,
                                std::uint64_t seed) {
  world.validate();
  traj.validate();

  struct SeqPlan {
    std::string id;
    std::vector<Pose2D> poses;
  };
  std::vector<SeqPlan> plans;
  auto geom_rng = make_rng(substream_seed(seed, "data/geometry"));
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  const double max_margin_extra =
      std::max(traj.step_m, std::min(world.width, world.height) / 10.0);
  for (int i = 0; i < traj.loop_sequences; ++i) {
    const double margin = traj.margin_m + u01(geom_rng) * max_margin_extra;
    plans.push_back({detail::seq_name("loop", i),
                     detail::build_loop(world, margin, traj.step_m)});
  }
  for (int i = 0; i < traj.zigzag_sequences; ++i) {
    const double margin = traj.margin_m + u01(geom_rng) * max_margin_extra;
    plans.push_back({detail::seq_name("zigzag", i),
                     detail::build_zigzag(world, margin, traj.step_m, traj.zigzag_lanes,
                                          i % 2 == 1)});
  }
  for (int i = 0; i < traj.back_and_forth_sequences; ++i) {
    const double margin = traj.margin_m + u01(geom_rng) * max_margin_extra;
    const double alpha = u01(geom_rng) * kPi;
    plans.push_back(
        {detail::seq_name("bf", i),
         detail::build_back_and_forth_angled(world, margin, traj.step_m, alpha, 4)});
  }
  for (int i = 0; i < traj.rotation_sequences; ++i) {
    double cx = 0.0, cy = 0.0;
    bool placed = false;
    for (int tries = 0; tries < 256 && !placed; ++tries) {
      cx = traj.margin_m + u01(geom_rng) * (world.width - 2.0 * traj.margin_m);
      cy = traj.margin_m + u01(geom_rng) * (world.height - 2.0 * traj.margin_m);
      placed = world.in_free_space(cx, cy);
    }
    if (!placed) throw GenerationError("rotation trajectory: no free-space center found");
    const double start_deg = u01(geom_rng) * 360.0;
    plans.push_back({detail::seq_name("rot", i),
                     detail::build_rotation(cx, cy, start_deg, traj.rotation_step_deg)});
  }

  Dataset ds;
  for (const auto& plan : plans) {
    auto rng = make_rng(substream_seed(seed, "data/seq/" + plan.id));
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t idx = 0; idx < plan.poses.size(); ++idx) {
      const Pose2D& pose = plan.poses[idx];
      if (!world.in_free_space(pose.x, pose.y)) {
        char buf[128];
        std::snprintf(buf, sizeof(buf),
                      "trajectory collides with an obstacle: sequence %s index %zu "
                      "pose (%.3f, %.3f)",
                      plan.id.c_str(), idx, pose.x, pose.y);
        throw GenerationError(buf);
      }

      const NoiseRegion* region = world.noise_at(pose.x, pose.y);
      Pose2D sensed = pose;
      if (region != nullptr && region->position_sigma > 0.0) {
        for (int tries = 0; tries < 32; ++tries) {
          const double jx = pose.x + gauss(rng) * region->position_sigma;
          const double jy = pose.y + gauss(rng) * region->position_sigma;
          if (world.in_free_space(jx, jy)) {
            sensed.x = jx;
            sensed.y = jy;
            break;
          }
        }
      }
      if (region != nullptr && region->heading_sigma_deg > 0.0) {
        const double dtheta = gauss(rng) * region->heading_sigma_deg / kDegPerRad;
        sensed = Pose2D::from_heading(sensed.x, sensed.y, sensed.heading() + dtheta);
      }

      SampleTuple s;
      s.pose = pose;
      s.sequence_id = plan.id;
      s.index_in_sequence = static_cast<std::int64_t>(idx);
      s.scan = raycast_scan(world, sensed);
      s.image_feat = synth_image_feature(world, sensed, rng);
      ds.samples.push_back(std::move(s));
    }
  }

  std::vector<std::string> ids;
  ids.reserve(plans.size());
  for (const auto& p : plans) ids.push_back(p.id);
  auto split_rng = make_rng(substream_seed(seed, "data/split"));
  ds.splits = detail::split_sequences(std::move(ids), split_rng);
  return ds;
}

// Noiseless toy set where the pose is an affine read-out of both feature
// vectors; used by the convergence smoke checks.
inline std::vector<SampleTuple> make_linear_pose_dataset(std::size_t n,
                                                         std::size_t image_dim,
                                                         std::size_t scan_dim,
                                                         std::uint64_t seed) {
  if (image_dim < 4 || scan_dim < 4) {
    throw ConfigError("make_linear_pose_dataset: feature dims must be >= 4");
  }
  if (n == 0) throw ConfigError("make_linear_pose_dataset: n must be positive");
  auto rng = make_rng(substream_seed(seed, "linear-pose"));
  std::uniform_real_distribution<double> pos(-3.0, 3.0);
  std::uniform_real_distribution<double> ang(-kPi, kPi);
  std::vector<SampleTuple> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    SampleTuple s;
    s.pose = Pose2D::from_heading(pos(rng), pos(rng), ang(rng));
    s.image_feat.assign(image_dim, 0.0);
    s.image_feat[0] = s.pose.x / 3.0;
    s.image_feat[1] = s.pose.y / 3.0;
    s.image_feat[2] = s.pose.q[0];
    s.image_feat[3] = s.pose.q[1];
    s.scan.assign(scan_dim, 6.0);
    s.scan[0] = 6.0 + 2.0 * (s.pose.x / 3.0);
    s.scan[1] = 6.0 + 2.0 * (s.pose.y / 3.0);
    s.scan[2] = 6.0 + 2.0 * s.pose.q[0];
    s.scan[3] = 6.0 + 2.0 * s.pose.q[1];
    s.sequence_id = "linear";
    s.index_in_sequence = static_cast<std::int64_t>(i);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// File formats: JSONL dataset, JSON split manifest, JSON world spec
// ---------------------------------------------------------------------------

inline nlohmann::json rect_to_json(const Rect& r) {
  return {{"x0", r.x0}, {"y0", r.y0}, {"x1", r.x1}, {"y1", r.y1}};
}

inline Rect rect_from_json(const nlohmann::json& j) {
  Rect r;
  r.x0 = j.at("x0").get<double>();
  r.y0 = j.at("y0").get<double>();
  r.x1 = j.at("x1").get<double>();
  r.y1 = j.at("y1").get<double>();
  return r;
}

inline nlohmann::json world_to_json(const WorldSpec& w) {
  nlohmann::json obstacles = nlohmann::json::array();
  for (const auto& o : w.obstacles) obstacles.push_back(rect_to_json(o));
  nlohmann::json regions = nlohmann::json::array();
  for (const auto& r : w.noise_regions) {
    nlohmann::json jr = rect_to_json(r.region);
    jr["position_sigma"] = r.position_sigma;
    jr["feature_sigma"] = r.feature_sigma;
    jr["heading_sigma_deg"] = r.heading_sigma_deg;
    regions.push_back(jr);
  }
  return {{"width", w.width},
          {"height", w.height},
          {"obstacles", obstacles},
          {"scan_rays", w.scan_rays},
          {"scan_max_range", w.scan_max_range},
          {"noise_regions", regions},
          {"image_feature_dim", w.image_feature_dim},
          {"feature_map_seed", w.feature_map_seed}};
}

inline WorldSpec world_from_json(const nlohmann::json& j) {
  WorldSpec w;
  w.width = j.at("width").get<double>();
  w.height = j.at("height").get<double>();
  for (const auto& o : j.value("obstacles", nlohmann::json::array())) {
    w.obstacles.push_back(rect_from_json(o));
  }
  w.scan_rays = j.value("scan_rays", w.scan_rays);
  w.scan_max_range = j.value("scan_max_range", w.scan_max_range);
  for (const auto& r : j.value("noise_regions", nlohmann::json::array())) {
    NoiseRegion nr;
    nr.region = rect_from_json(r);
    nr.position_sigma = r.value("position_sigma", 0.0);
    nr.feature_sigma = r.value("feature_sigma", 0.0);
    nr.heading_sigma_deg = r.value("heading_sigma_deg", 0.0);
    w.noise_regions.push_back(nr);
  }
  w.image_feature_dim = j.value("image_feature_dim", w.image_feature_dim);
  w.feature_map_seed = j.value("feature_map_seed", w.feature_map_seed);
  w.validate();
  return w;
}

inline WorldSpec load_world(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_world: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("load_world: invalid JSON: " + std::string(e.what()));
  }
  return world_from_json(j);
}

inline void save_world(const WorldSpec& w, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("save_world: cannot open " + path.string());
  out << world_to_json(w).dump(2) << "\n";
}

inline constexpr int kDatasetVersion = 1;

inline void write_dataset_jsonl(const std::filesystem::path& path, const WorldSpec& world,
                                std::uint64_t seed,
                                const std::vector<SampleTuple>& samples) {
  std::ofstream out(path);
  if (!out) throw IoError("write_dataset_jsonl: cannot open " + path.string());
  const nlohmann::json header = {{"record", "header"},
                                 {"format", "uloc-dataset"},
                                 {"version", kDatasetVersion},
                                 {"generator_version", kVersion},
                                 {"seed", seed},
                                 {"world", world_to_json(world)}};
  out << header.dump() << "\n";
  for (const auto& s : samples) {
    const nlohmann::json j = {
        {"record", "sample"},
        {"sequence_id", s.sequence_id},
        {"index_in_sequence", s.index_in_sequence},
        {"image_feat", s.image_feat},
        {"scan", s.scan},
        {"pose", {{"x", s.pose.x}, {"y", s.pose.y}, {"qc", s.pose.q[0]}, {"qs", s.pose.q[1]}}}};
    out << j.dump() << "\n";
  }
}

struct LoadedDataset {
  WorldSpec world;
  std::uint64_t seed = 0;
  std::string generator_version;
  std::vector<SampleTuple> samples;
};

inline LoadedDataset load_dataset_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_dataset_jsonl: cannot open " + path.string());
  LoadedDataset ds;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
    const std::string record = j.value("record", "");
    if (record == "header") {
      if (j.value("format", "") != "uloc-dataset" ||
          j.value("version", -1) != kDatasetVersion) {
        throw SchemaError("load_dataset_jsonl: unsupported dataset format/version");
      }
      ds.world = world_from_json(j.at("world"));
      ds.seed = j.value("seed", 0ull);
      ds.generator_version = j.value("generator_version", "");
      have_header = true;
    } else if (record == "sample") {
      if (!have_header) {
        throw SchemaError("load_dataset_jsonl: sample record before header");
      }
      SampleTuple s;
      try {
        s.sequence_id = j.at("sequence_id").get<std::string>();
        s.index_in_sequence = j.at("index_in_sequence").get<std::int64_t>();
        j.at("image_feat").get_to(s.image_feat);
        j.at("scan").get_to(s.scan);
        const auto& p = j.at("pose");
        s.pose.x = p.at("x").get<double>();
        s.pose.y = p.at("y").get<double>();
        s.pose.q = {p.at("qc").get<double>(), p.at("qs").get<double>()};
      } catch (const nlohmann::json::exception& e) {
        throw SchemaError("dataset line " + std::to_string(line_no) + ": " + e.what());
      }
      if (!pose_valid(s.pose)) {
        throw SchemaError("dataset line " + std::to_string(line_no) + ": invalid pose");
      }
      if (s.image_feat.size() != ds.world.image_feature_dim ||
          s.scan.size() != ds.world.scan_rays) {
        throw SchemaError("dataset line " + std::to_string(line_no) +
                          ": feature dims do not match world header");
      }
      ds.samples.push_back(std::move(s));
    } else {
      throw SchemaError("dataset line " + std::to_string(line_no) +
                        ": unknown record type");
    }
  }
  if (!have_header) throw SchemaError("load_dataset_jsonl: missing header record");
  return ds;
}

inline void write_split_manifest(const std::filesystem::path& path, const WorldSpec& world,
                                 std::uint64_t seed, const SplitManifest& splits) {
  std::ofstream out(path);
  if (!out) throw IoError("write_split_manifest: cannot open " + path.string());
  const nlohmann::json j = {{"format", "uloc-split-manifest"},
                            {"version", kDatasetVersion},
                            {"generator_version", kVersion},
                            {"seed", seed},
                            {"world", world_to_json(world)},
                            {"splits",
                             {{"train", splits.train},
                              {"val", splits.val},
                              {"test", splits.test}}}};
  out << j.dump(2) << "\n";
}

inline SplitManifest load_split_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_split_manifest: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("load_split_manifest: invalid JSON: " + std::string(e.what()));
  }
  if (j.value("format", "") != "uloc-split-manifest" ||
      j.value("version", -1) != kDatasetVersion) {
    throw SchemaError("load_split_manifest: unsupported manifest format/version");
  }
  SplitManifest m;
  j.at("splits").at("train").get_to(m.train);
  j.at("splits").at("val").get_to(m.val);
  j.at("splits").at("test").get_to(m.test);
  return m;
}

inline std::vector<SampleTuple> filter_split(const std::vector<SampleTuple>& samples,
                                             const std::vector<std::string>& sequence_ids) {
  std::vector<SampleTuple> out;
  for (const auto& s : samples) {
    if (std::find(sequence_ids.begin(), sequence_ids.end(), s.sequence_id) !=
        sequence_ids.end()) {
      out.push_back(s);
    }
  }
  return out;
}

}  // namespace uloc
