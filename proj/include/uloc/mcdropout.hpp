#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "uloc/core.hpp"
#include "uloc/net.hpp"
#include "uloc/rng.hpp"
#include "uloc/sample.hpp"

namespace uloc {

// One stochastic forward pass: position/orientation outputs plus the
// predicted aleatoric variances sigma^2 = exp(s).
struct StochasticPass {
  Vec2 p_hat{0.0, 0.0};
  Vec2 q_hat{0.0, 0.0};
  double sigma2_p = 1.0;
  double sigma2_q = 1.0;
};

struct UncertaintyDecomposition {
  double epistemic_p = 0.0;
  double aleatoric_p = 0.0;
  double epistemic_q = 0.0;
  double aleatoric_q = 0.0;
};

// Aggregated prediction over T passes with the additive uncertainty split
// u = epistemic + aleatoric (held exactly, by construction).
struct UncertainPose {
  Vec2 p_star{0.0, 0.0};
  Vec2 q_star{1.0, 0.0};
  double u_p = 0.0;
  double u_q = 0.0;
  double epistemic_p = 0.0;
  double aleatoric_p = 0.0;
  double epistemic_q = 0.0;
  double aleatoric_q = 0.0;
  std::size_t passes = 0;
};

// Epistemic term: per-dimension population variance as printed, i.e. mean of
// squares minus square of mean, summed over the two output dims. Aleatoric
// term: mean of the per-pass sigma^2.
inline UncertaintyDecomposition decompose(const std::vector<StochasticPass>& passes) {
  if (passes.empty()) throw EmptySample("decompose: empty pass list");
  const double t = static_cast<double>(passes.size());
  double sum_p[2] = {0.0, 0.0}, sum_p2[2] = {0.0, 0.0};
  double sum_q[2] = {0.0, 0.0}, sum_q2[2] = {0.0, 0.0};
  double sum_s2p = 0.0, sum_s2q = 0.0;
  for (const auto& pass : passes) {
    for (int d = 0; d < 2; ++d) {
      sum_p[d] += pass.p_hat[d];
      sum_p2[d] += pass.p_hat[d] * pass.p_hat[d];
      sum_q[d] += pass.q_hat[d];
      sum_q2[d] += pass.q_hat[d] * pass.q_hat[d];
    }
    sum_s2p += pass.sigma2_p;
    sum_s2q += pass.sigma2_q;
  }
  UncertaintyDecomposition u;
  for (int d = 0; d < 2; ++d) {
    const double mp = sum_p[d] / t;
    const double mq = sum_q[d] / t;
    u.epistemic_p += sum_p2[d] / t - mp * mp;
    u.epistemic_q += sum_q2[d] / t - mq * mq;
  }
  u.aleatoric_p = sum_s2p / t;
  u.aleatoric_q = sum_s2q / t;
  return u;
}

struct McResult {
  UncertainPose estimate;
  std::vector<StochasticPass> passes;
};

// T stochastic forward passes with independent per-pass mask substreams;
// aggregation always reduces in ascending pass index.
inline McResult mc_infer(const ModelParams& params, const SampleTuple& sample,
                         std::size_t t_passes, const DropoutSpec& dropout,
                         std::uint64_t seed) {
  if (t_passes < 1) throw ConfigError("mc_infer: T must be >= 1");
  dropout.validate();

  McResult res;
  res.passes.reserve(t_passes);
  for (std::size_t t = 0; t < t_passes; ++t) {
    auto rng = make_rng(substream_seed(seed, static_cast<std::uint64_t>(t)));
    const DropoutMask mask =
        sample_dropout_mask(rng, params.config.fused_dim(), dropout.rate);
    const RawPoseOutput out = forward(params, sample.image_feat, sample.scan, &mask);
    if (!out.finite()) {
      throw DomainError("mc_infer: non-finite network output at pass " + std::to_string(t));
    }
    StochasticPass pass;
    pass.p_hat = out.p_hat;
    pass.q_hat = out.q_hat;
    pass.sigma2_p = std::exp(out.s_p);
    pass.sigma2_q = std::exp(out.s_q);
    if (!std::isfinite(pass.sigma2_p) || !std::isfinite(pass.sigma2_q)) {
      throw DomainError("mc_infer: sigma^2 overflow at pass " + std::to_string(t));
    }
    res.passes.push_back(pass);
  }

  const double t = static_cast<double>(t_passes);
  Vec2 mean_p{0.0, 0.0}, mean_q{0.0, 0.0};
  for (const auto& pass : res.passes) {
    for (int d = 0; d < 2; ++d) {
      mean_p[d] += pass.p_hat[d];
      mean_q[d] += pass.q_hat[d];
    }
  }
  for (int d = 0; d < 2; ++d) {
    mean_p[d] /= t;
    mean_q[d] /= t;
  }

  const UncertaintyDecomposition u = decompose(res.passes);
  auto& e = res.estimate;
  e.p_star = mean_p;
  e.q_star = normalize_orientation(mean_q);
  e.epistemic_p = u.epistemic_p;
  e.aleatoric_p = u.aleatoric_p;
  e.epistemic_q = u.epistemic_q;
  e.aleatoric_q = u.aleatoric_q;
  e.u_p = u.epistemic_p + u.aleatoric_p;
  e.u_q = u.epistemic_q + u.aleatoric_q;
  e.passes = t_passes;
  return res;
}

// ---------------------------------------------------------------------------
// Pass-log JSONL: one line per pass per sample. decompose() accepts the pass
// lists read back from this format for post-hoc analysis.
// ---------------------------------------------------------------------------

inline void append_pass_log(std::ostream& out, const std::string& sample_id,
                            const std::vector<StochasticPass>& passes) {
  for (std::size_t t = 0; t < passes.size(); ++t) {
    const auto& p = passes[t];
    const nlohmann::json j = {{"sample_id", sample_id},
                              {"t", t},
                              {"p_hat", {p.p_hat[0], p.p_hat[1]}},
                              {"q_hat", {p.q_hat[0], p.q_hat[1]}},
                              {"sigma2_p", p.sigma2_p},
                              {"sigma2_q", p.sigma2_q}};
    out << j.dump() << "\n";
  }
}

// Groups lines by sample_id (first-seen order) and sorts each group by t.
inline std::vector<std::pair<std::string, std::vector<StochasticPass>>> read_pass_log(
    std::istream& in) {
  std::vector<std::pair<std::string, std::vector<StochasticPass>>> groups;
  std::map<std::string, std::size_t> index;
  std::vector<std::vector<std::size_t>> ts;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      const std::string id = j.at("sample_id").get<std::string>();
      auto [it, inserted] = index.try_emplace(id, groups.size());
      if (inserted) {
        groups.push_back({id, {}});
        ts.push_back({});
      }
      StochasticPass p;
      p.p_hat = {j.at("p_hat").at(0).get<double>(), j.at("p_hat").at(1).get<double>()};
      p.q_hat = {j.at("q_hat").at(0).get<double>(), j.at("q_hat").at(1).get<double>()};
      p.sigma2_p = j.at("sigma2_p").get<double>();
      p.sigma2_q = j.at("sigma2_q").get<double>();
      groups[it->second].second.push_back(p);
      ts[it->second].push_back(j.at("t").get<std::size_t>());
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError("pass log line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  // restore ascending pass order per sample
  for (std::size_t g = 0; g < groups.size(); ++g) {
    auto& passes = groups[g].second;
    std::vector<std::size_t> order(passes.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return ts[g][a] < ts[g][b]; });
    std::vector<StochasticPass> sorted;
    sorted.reserve(passes.size());
    for (std::size_t i : order) sorted.push_back(passes[i]);
    passes = std::move(sorted);
  }
  return groups;
}

}  // namespace uloc
