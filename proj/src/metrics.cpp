#include "pdnet/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace pdnet {

SegScores seg_scores(const BinaryMask& pred, const BinaryMask& gt)
{
   require_same_shape(pred, gt, "seg_scores");
   std::size_t tp = 0;
   std::size_t fp = 0;
   std::size_t fn = 0;
   for (std::size_t i = 0; i < gt.size(); ++i) {
      const bool p = pred[i] != 0;
      const bool g = gt[i] != 0;
      tp += p && g;
      fp += p && !g;
      fn += !p && g;
   }
   if (tp + fn == 0) {
      throw std::invalid_argument("seg_scores: empty ground truth");
   }
   SegScores s;
   s.precision = tp + fp == 0 ? 1.0 : double(tp) / double(tp + fp);
   s.recall = double(tp) / double(tp + fn);
   s.dice = 2.0 * double(tp) / double(2 * tp + fp + fn);
   return s;
}

DiamErrors diam_errors(const RecistAnnotation& pred, const RecistAnnotation& gt)
{
   if (pred.spacing_mm != gt.spacing_mm) {
      throw std::invalid_argument("diam_errors: spacing mismatch");
   }
   return {std::abs(pred.long_px() - gt.long_px()) * gt.spacing_mm,
           std::abs(pred.short_px() - gt.short_px()) * gt.spacing_mm};
}

MetricSummary summarize(const std::vector<double>& values)
{
   if (values.empty()) {
      throw std::invalid_argument("summarize: no values");
   }
   MetricSummary m;
   m.count = values.size();
   double sum = 0.0;
   for (double v : values) {
      sum += v;
   }
   m.mean = sum / double(values.size());
   double sq = 0.0;
   for (double v : values) {
      sq += (v - m.mean) * (v - m.mean);
   }
   m.std = std::sqrt(sq / double(values.size()));
   return m;
}

Report aggregate(const std::vector<LesionResult>& results)
{
   if (results.empty()) {
      throw std::invalid_argument("aggregate: no results");
   }
   std::map<std::string, std::vector<double>> columns;
   for (const auto& r : results) {
      if (r.seg) {
         columns["precision"].push_back(r.seg->precision);
         columns["recall"].push_back(r.seg->recall);
         columns["dice"].push_back(r.seg->dice);
      }
      if (r.diam) {
         columns["long_err_mm"].push_back(r.diam->long_err_mm);
         columns["short_err_mm"].push_back(r.diam->short_err_mm);
      }
   }
   Report report;
   report.lesions = results.size();
   for (const auto& [name, values] : columns) {
      report.metrics[name] = summarize(values);
   }
   return report;
}

nlohmann::json Report::to_json() const
{
   nlohmann::json j;
   j["schema_version"] = kSchemaVersion;
   j["std_kind"] = "population";
   j["lesions"] = lesions;
   for (const auto& [name, m] : metrics) {
      j["metrics"][name] = {{"mean", m.mean}, {"std", m.std}, {"count", m.count}};
   }
   return j;
}

std::string Report::to_text() const
{
   static const char* kOrder[] = {"precision", "recall", "dice", "long_err_mm", "short_err_mm"};
   std::ostringstream out;
   out << "lesions: " << lesions << "  (mean +- population std)\n";
   out << std::left << std::setw(14) << "metric" << std::right << std::setw(12) << "mean" << std::setw(12) << "std"
       << std::setw(8) << "n" << '\n';
   out << std::fixed << std::setprecision(4);
   for (const char* name : kOrder) {
      const auto it = metrics.find(name);
      if (it == metrics.end()) {
         continue;
      }
      out << std::left << std::setw(14) << name << std::right << std::setw(12) << it->second.mean << std::setw(12)
          << it->second.std << std::setw(8) << it->second.count << '\n';
   }
   return out.str();
}

} // namespace pdnet
