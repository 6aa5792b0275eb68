#pragma once

// UBS data model: timestamped multi-ID behavior events per user, JSONL
// persistence, time-window bucketing, and the synthetic generator with
// planted category structure.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "byb/errors.hpp"

namespace byb {

constexpr std::int64_t kSecondsPerDay = 86400;

struct BehaviorEvent {
    std::int64_t t = 0;              // seconds since dataset epoch
    std::vector<std::uint32_t> ids;  // 1..m_ids ids, each <= max id I

    bool operator==(const BehaviorEvent&) const = default;
};

struct UbsSample {
    std::string user_id;
    std::vector<BehaviorEvent> events;        // sorted ascending by t
    std::map<std::string, int> labels;        // task name -> class index

    bool operator==(const UbsSample&) const = default;
};

using Dataset = std::vector<UbsSample>;

struct WindowPlan {
    std::int64_t pool_window_seconds = kSecondsPerDay;        // dT1
    std::int64_t prediction_window_seconds = kSecondsPerDay;  // dT2
    std::int64_t observation_seconds = 0;                     // T, divisible by dT1

    std::int64_t num_buckets() const { return observation_seconds / pool_window_seconds; }
    void validate() const;
};

struct GeneratorConfig {
    int num_users = 1000;
    int num_days = 60;          // observation span
    int horizon_days = 30;      // extra generated days for labels/supervision
    double avg_events_per_day = 20.0;
    std::uint32_t vocab_size = 1000;  // maximum id I; ids are 0..I
    int num_categories = 10;
    int ids_min = 1;
    int ids_max = 4;
    double periodicity_strength = 0.0;  // [0,1]
    double drift_strength = 0.0;        // [0,1]
    std::uint64_t seed = 0;

    void validate() const;
};

// Deterministic contiguous-block category map over ids 0..I.
int category_of_id(std::uint32_t id, std::uint32_t max_id, int num_categories);

// Tasks emitted by the generator: modal future category over the first
// `horizon_days` of {5,10,15,30}. Names look like "modal-5d".
std::vector<std::pair<std::string, int>> generator_tasks(const GeneratorConfig& cfg);

Dataset generate_synthetic(const GeneratorConfig& cfg);

void write_jsonl(const Dataset& dataset, const std::string& path);
Dataset read_jsonl(const std::string& path);

// Bucket k holds indices of events with t in [k*dT1, (k+1)*dT1); events with
// t >= T are excluded. Events are sorted, so a bucket is a contiguous range.
struct EventBuckets {
    std::vector<std::pair<std::size_t, std::size_t>> ranges;  // [begin, end) into sample.events

    std::size_t size() const { return ranges.size(); }
    std::size_t count(std::size_t k) const { return ranges[k].second - ranges[k].first; }
    bool empty_bucket(std::size_t k) const { return count(k) == 0; }
};

EventBuckets bucketize(const UbsSample& sample, const WindowPlan& plan);

// Events with t in [k*dT1, k*dT1 + dT2), 1 <= k <= T/dT1. May be empty.
std::pair<std::size_t, std::size_t> prediction_events(const UbsSample& sample, std::int64_t k,
                                                      const WindowPlan& plan);

constexpr int kNoLabel = -1;

// Modal category over [horizon_start, horizon_start + horizon_seconds); ties
// break to the smallest category index; kNoLabel when the window is empty.
int derive_label(const UbsSample& sample, std::int64_t horizon_start, std::int64_t horizon_seconds,
                 const std::function<int(std::uint32_t)>& category_of);

// Events with t < observation_seconds (the model-visible prefix).
std::size_t observed_length(const UbsSample& sample, std::int64_t observation_seconds);

}  // namespace byb
