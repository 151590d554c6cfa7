#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "popcal/calibration.hpp"
#include "popcal/core_model.hpp"
#include "popcal/metrics.hpp"

namespace popcal {

// One (dataset, model) combination with everything measured for it.
struct ReportUnit {
  std::string dataset;
  std::string model;
  std::vector<AnalysisRecord> records;
  std::optional<CorrelationReport> correlation;
  std::optional<ProtocolResult> protocol;
};

std::string unit_id(const std::string& dataset, const std::string& model);

// Flip groups between PC and PC+ALL on one seed's test split.
//   Overc.  label 0, PC says 1, PC+ALL says 0
//   Conse.  label 1, PC says 0, PC+ALL says 1
//   Miscal. PC right, PC+ALL wrong
struct FlipRow {
  std::size_t record_index = 0;  // into the unit's record list
  std::string subject;
  std::string group;
  int label = 0;
  int pc_prediction = 0;
  int pcall_prediction = 0;
  double pc = 0.0;
  std::optional<double> pop_q;
  std::optional<double> pop_ge;
  std::optional<double> rpop_ge;
};

std::vector<FlipRow> calibration_flips(const std::vector<AnalysisRecord>& records,
                                       const ProtocolResult& protocol, std::size_t run = 0);

inline constexpr const char* kCorrelationHeader =
    "dataset,model,samples,accuracy,confidence,alignment";
inline constexpr const char* kAccuracyHeader = "features";
inline constexpr const char* kAccuracySeedsHeader = "dataset,model,features,seed,accuracy";
inline constexpr const char* kFlipHeader =
    "dataset,model,record,subject,group,label,pc_prediction,pcall_prediction,pc,pop_q,pop_ge,"
    "rpop_ge";
inline constexpr const char* kFlipSummaryHeader = "dataset,model,group,count,pc,pop_q,pop_ge,rpop_ge";

// Accuracy / confidence / alignment (percent) and rho for every signal x outcome.
std::string correlation_table_csv(const std::vector<ReportUnit>& units);
// Mean test accuracy per feature row (one column per unit, then the average).
std::string accuracy_table_csv(const std::vector<ReportUnit>& units);
std::string accuracy_seeds_csv(const std::vector<ReportUnit>& units);
std::string flips_csv(const std::vector<ReportUnit>& units);
std::string flip_summary_csv(const std::vector<ReportUnit>& units);

// Writes every report file into `dir` and returns the paths written.
std::vector<std::filesystem::path> write_report(const std::filesystem::path& dir,
                                                const std::vector<ReportUnit>& units,
                                                std::size_t n_bins = 10);

}  // namespace popcal
