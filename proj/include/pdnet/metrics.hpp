#pragma once

#include "pdnet/geometry.hpp"
#include "pdnet/image.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace pdnet {

struct SegScores {
   double precision = 0.0;
   double recall = 0.0;
   double dice = 0.0;
};

/// Precision is defined as 1 when nothing is predicted (no false positives).
/// Throws std::invalid_argument on shape mismatch or empty ground truth.
SegScores seg_scores(const BinaryMask& pred, const BinaryMask& gt);

struct DiamErrors {
   double long_err_mm = 0.0;
   double short_err_mm = 0.0;
};

/// Absolute differences of the long and short diameter lengths in mm.
DiamErrors diam_errors(const RecistAnnotation& pred, const RecistAnnotation& gt);

struct LesionResult {
   std::string id;
   std::optional<SegScores> seg;
   std::optional<DiamErrors> diam;
};

struct MetricSummary {
   double mean = 0.0;
   double std = 0.0; ///< population standard deviation
   std::size_t count = 0;
};

struct Report {
   static constexpr int kSchemaVersion = 1;
   std::size_t lesions = 0;
   /// Keys: precision, recall, dice, long_err_mm, short_err_mm (those present in the inputs).
   std::map<std::string, MetricSummary> metrics;

   nlohmann::json to_json() const;
   std::string to_text() const;
};

MetricSummary summarize(const std::vector<double>& values);

/// Throws std::invalid_argument on empty input.
Report aggregate(const std::vector<LesionResult>& results);

} // namespace pdnet
