#pragma once

// Line-delimited metric records {run_id, epoch, split, metric, value} and
// the per-run manifest.

#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace pcon {

struct MetricRecord {
  std::string run_id;
  long long epoch = -1;  // -1 for records not tied to an epoch
  std::string split;
  std::string metric;
  double value = 0.0;

  friend bool operator==(const MetricRecord&, const MetricRecord&) = default;
};

inline std::string to_json_line(const MetricRecord& r) {
  nlohmann::ordered_json j;
  j["run_id"] = r.run_id;
  j["epoch"] = r.epoch;
  j["split"] = r.split;
  j["metric"] = r.metric;
  j["value"] = r.value;
  return j.dump();
}

inline MetricRecord metric_from_json_line(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  return {j.at("run_id").get<std::string>(), j.at("epoch").get<long long>(), j.at("split").get<std::string>(),
          j.at("metric").get<std::string>(), j.at("value").get<double>()};
}

/// Collects records in memory and mirrors them to a JSONL file when one is open.
class MetricsStream {
 public:
  explicit MetricsStream(std::string run_id = "run") : run_id_(std::move(run_id)) {}

  void open(const std::filesystem::path& path) {
    file_.emplace(path, std::ios::app);
    if (!*file_) throw std::runtime_error("cannot write metrics file " + path.string());
  }

  void emit(long long epoch, const std::string& split, const std::string& metric, double value) {
    records_.push_back({run_id_, epoch, split, metric, value});
    if (file_) *file_ << to_json_line(records_.back()) << '\n' << std::flush;
  }

  const std::vector<MetricRecord>& records() const { return records_; }
  const std::string& run_id() const { return run_id_; }

  std::vector<double> series(const std::string& split, const std::string& metric) const {
    std::vector<double> out;
    for (const auto& r : records_)
      if (r.split == split && r.metric == metric) out.push_back(r.value);
    return out;
  }

 private:
  std::string run_id_;
  std::vector<MetricRecord> records_;
  std::optional<std::ofstream> file_;
};

/// Appends one JSON object per command invocation to <run_dir>/manifest.jsonl.
inline void append_manifest(const std::filesystem::path& run_dir, const std::string& run_id, const std::string& command,
                            const std::string& config_text, const std::vector<std::string>& artifacts) {
  nlohmann::ordered_json j;
  j["run_id"] = run_id;
  j["command"] = command;
  j["config"] = config_text;
  j["artifacts"] = artifacts;
  std::ofstream out(run_dir / "manifest.jsonl", std::ios::app);
  if (!out) throw std::runtime_error("cannot write manifest in " + run_dir.string());
  out << j.dump() << '\n';
}

}  // namespace pcon
