#pragma once

#include <cstdint>
#include <cstdio>
#include <string>

#include "uloc/core.hpp"
#include "uloc/linalg.hpp"

namespace uloc {

// One dataset record: a fixed-length image-feature vector, a scan vector of
// ray distances, the ground-truth pose and sequence bookkeeping.
struct SampleTuple {
  Vec image_feat;
  Vec scan;
  Pose2D pose;
  std::string sequence_id;
  std::int64_t index_in_sequence = 0;

  std::string sample_id() const {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "/%06lld", static_cast<long long>(index_in_sequence));
    return sequence_id + buf;
  }
};

}  // namespace uloc
