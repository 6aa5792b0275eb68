#include "byb/data.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "byb/rng.hpp"

namespace byb {

void WindowPlan::validate() const {
    if (pool_window_seconds <= 0 || prediction_window_seconds <= 0 || observation_seconds <= 0)
        throw ConfigError("window plan fields must be positive");
    if (observation_seconds % pool_window_seconds != 0)
        throw ConfigError("observation window " + std::to_string(observation_seconds) +
                          " not divisible by pool window " + std::to_string(pool_window_seconds));
}

void GeneratorConfig::validate() const {
    if (num_users <= 0 || num_days <= 0 || horizon_days <= 0)
        throw ConfigError("generator counts must be positive");
    if (avg_events_per_day <= 0.0) throw ConfigError("avg_events_per_day must be positive");
    if (num_categories <= 0) throw ConfigError("num_categories must be positive");
    if (vocab_size + 1 < static_cast<std::uint32_t>(num_categories))
        throw ConfigError("vocab of " + std::to_string(vocab_size + 1) + " ids cannot host " +
                          std::to_string(num_categories) + " categories");
    if (ids_min < 1 || ids_max < ids_min) throw ConfigError("invalid ids_per_event range");
    if (periodicity_strength < 0.0 || periodicity_strength > 1.0 || drift_strength < 0.0 ||
        drift_strength > 1.0)
        throw ConfigError("strengths must lie in [0,1]");
}

int category_of_id(std::uint32_t id, std::uint32_t max_id, int num_categories) {
    const std::uint64_t vocab = static_cast<std::uint64_t>(max_id) + 1;
    const std::uint64_t c = static_cast<std::uint64_t>(id) * static_cast<std::uint64_t>(num_categories) / vocab;
    return static_cast<int>(std::min<std::uint64_t>(c, static_cast<std::uint64_t>(num_categories - 1)));
}

namespace {

// First id of category c under the proportional block partition.
std::uint32_t category_block_begin(int c, std::uint32_t max_id, int num_categories) {
    const std::uint64_t vocab = static_cast<std::uint64_t>(max_id) + 1;
    return static_cast<std::uint32_t>(static_cast<std::uint64_t>(c) * vocab /
                                      static_cast<std::uint64_t>(num_categories));
}

std::uint32_t sample_id_in_category(Rng& rng, int c, std::uint32_t max_id, int num_categories) {
    const std::uint32_t lo = category_block_begin(c, max_id, num_categories);
    const std::uint32_t hi = category_block_begin(c + 1, max_id, num_categories);  // exclusive
    return lo + static_cast<std::uint32_t>(rng.uniform_int(0, static_cast<std::int64_t>(hi - lo) - 1));
}

}  // namespace

std::vector<std::pair<std::string, int>> generator_tasks(const GeneratorConfig& cfg) {
    std::vector<std::pair<std::string, int>> tasks;
    for (int h : {5, 10, 15, 30})
        if (h <= cfg.horizon_days) tasks.emplace_back("modal-" + std::to_string(h) + "d", h);
    if (tasks.empty()) tasks.emplace_back("modal-" + std::to_string(cfg.horizon_days) + "d", cfg.horizon_days);
    return tasks;
}

Dataset generate_synthetic(const GeneratorConfig& cfg) {
    cfg.validate();
    const int total_days = cfg.num_days + cfg.horizon_days;
    const double smoothing = 0.3;  // mass spread uniformly over all categories
    const auto tasks = generator_tasks(cfg);
    auto cat_of = [&cfg](std::uint32_t id) {
        return category_of_id(id, cfg.vocab_size, cfg.num_categories);
    };

    Dataset out;
    out.reserve(static_cast<std::size_t>(cfg.num_users));
    for (int u = 0; u < cfg.num_users; ++u) {
        Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(u)));
        const int anchor = static_cast<int>(rng.uniform_int(0, cfg.num_categories - 1));
        int drift_target = anchor;
        if (cfg.num_categories > 1)
            drift_target = static_cast<int>((anchor + 1 + rng.uniform_int(0, cfg.num_categories - 2)) %
                                            cfg.num_categories);
        const int periodic_cat = static_cast<int>(rng.uniform_int(0, cfg.num_categories - 1));
        const int phase = static_cast<int>(rng.uniform_int(0, 6));

        UbsSample sample;
        sample.user_id = "u" + std::to_string(u);
        for (int day = 0; day < total_days; ++day) {
            const double progress = total_days > 1 ? static_cast<double>(day) / (total_days - 1) : 0.0;
            const double alpha = cfg.drift_strength * progress;  // mixture weight toward drift_target
            const bool periodic_day = (day % 7) == phase;
            const std::int64_t n_events = rng.poisson(cfg.avg_events_per_day);
            for (std::int64_t e = 0; e < n_events; ++e) {
                int cat;
                if (periodic_day && rng.u01() < cfg.periodicity_strength) {
                    cat = periodic_cat;
                } else {
                    const int pref = rng.u01() < alpha ? drift_target : anchor;
                    cat = rng.u01() < smoothing
                              ? static_cast<int>(rng.uniform_int(0, cfg.num_categories - 1))
                              : pref;
                }
                BehaviorEvent ev;
                ev.t = static_cast<std::int64_t>(day) * kSecondsPerDay +
                       rng.uniform_int(0, kSecondsPerDay - 1);
                const int m = static_cast<int>(rng.uniform_int(cfg.ids_min, cfg.ids_max));
                ev.ids.reserve(static_cast<std::size_t>(m));
                for (int j = 0; j < m; ++j)
                    ev.ids.push_back(sample_id_in_category(rng, cat, cfg.vocab_size, cfg.num_categories));
                sample.events.push_back(std::move(ev));
            }
        }
        std::stable_sort(sample.events.begin(), sample.events.end(),
                         [](const BehaviorEvent& a, const BehaviorEvent& b) { return a.t < b.t; });

        const std::int64_t T = static_cast<std::int64_t>(cfg.num_days) * kSecondsPerDay;
        for (const auto& [name, horizon] : tasks) {
            const int label =
                derive_label(sample, T, static_cast<std::int64_t>(horizon) * kSecondsPerDay, cat_of);
            if (label != kNoLabel) sample.labels[name] = label;
        }
        out.push_back(std::move(sample));
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

void write_jsonl(const Dataset& dataset, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    for (const auto& s : dataset) {
        nlohmann::json j;
        j["user_id"] = s.user_id;
        auto& events = j["events"] = nlohmann::json::array();
        for (const auto& e : s.events) events.push_back({e.t, e.ids});
        j["labels"] = s.labels;
        os << j.dump() << '\n';
    }
    if (!os) throw IoError("write failed for " + path);
}

Dataset read_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    Dataset out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        UbsSample s;
        try {
            s.user_id = j.at("user_id").get<std::string>();
            for (const auto& ej : j.at("events")) {
                BehaviorEvent ev;
                ev.t = ej.at(0).get<std::int64_t>();
                ev.ids = ej.at(1).get<std::vector<std::uint32_t>>();
                if (ev.ids.empty())
                    throw ParseError(path + ":" + std::to_string(line_no) + ": event with no ids");
                s.events.push_back(std::move(ev));
            }
            if (j.contains("labels")) s.labels = j.at("labels").get<std::map<std::string, int>>();
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        for (std::size_t i = 1; i < s.events.size(); ++i)
            if (s.events[i].t < s.events[i - 1].t)
                throw ParseError(path + ":" + std::to_string(line_no) +
                                 ": timestamps decrease at event " + std::to_string(i));
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Windowing
// ---------------------------------------------------------------------------

namespace {

// Index of the first event with t >= threshold.
std::size_t lower_bound_time(const std::vector<BehaviorEvent>& events, std::int64_t threshold) {
    auto it = std::lower_bound(events.begin(), events.end(), threshold,
                               [](const BehaviorEvent& e, std::int64_t v) { return e.t < v; });
    return static_cast<std::size_t>(it - events.begin());
}

}  // namespace

EventBuckets bucketize(const UbsSample& sample, const WindowPlan& plan) {
    plan.validate();
    const std::int64_t K = plan.num_buckets();
    EventBuckets buckets;
    buckets.ranges.reserve(static_cast<std::size_t>(K));
    std::size_t begin = lower_bound_time(sample.events, 0);
    for (std::int64_t k = 0; k < K; ++k) {
        const std::size_t end =
            lower_bound_time(sample.events, (k + 1) * plan.pool_window_seconds);
        buckets.ranges.emplace_back(begin, end);
        begin = end;
    }
    return buckets;
}

std::pair<std::size_t, std::size_t> prediction_events(const UbsSample& sample, std::int64_t k,
                                                      const WindowPlan& plan) {
    plan.validate();
    if (k < 1 || k > plan.num_buckets())
        throw BoundsError("prediction window index " + std::to_string(k) + " out of [1," +
                          std::to_string(plan.num_buckets()) + "]");
    const std::int64_t start = k * plan.pool_window_seconds;
    return {lower_bound_time(sample.events, start),
            lower_bound_time(sample.events, start + plan.prediction_window_seconds)};
}

int derive_label(const UbsSample& sample, std::int64_t horizon_start, std::int64_t horizon_seconds,
                 const std::function<int(std::uint32_t)>& category_of) {
    const std::size_t b = lower_bound_time(sample.events, horizon_start);
    const std::size_t e = lower_bound_time(sample.events, horizon_start + horizon_seconds);
    if (b == e) return kNoLabel;
    std::map<int, std::size_t> counts;
    for (std::size_t i = b; i < e; ++i)
        for (std::uint32_t id : sample.events[i].ids) ++counts[category_of(id)];
    int best = kNoLabel;
    std::size_t best_count = 0;
    for (const auto& [cat, count] : counts) {
        if (count > best_count) {  // map iterates ascending, so ties keep the smaller index
            best = cat;
            best_count = count;
        }
    }
    return best;
}

std::size_t observed_length(const UbsSample& sample, std::int64_t observation_seconds) {
    return lower_bound_time(sample.events, observation_seconds);
}

}  // namespace byb
