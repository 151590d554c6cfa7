#include "popcal/report.hpp"

#include <algorithm>
#include <map>

namespace popcal {

namespace {

std::string cell(const std::optional<double>& v, int precision = 4) {
  return v ? fmt_fixed(*v, precision) : "";
}

// Quotes a CSV field when needed.
std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  return out + "\"";
}

std::string signal_slug(PopSignal s) { return std::string(signal_name(s)); }

}  // namespace

std::string unit_id(const std::string& dataset, const std::string& model) {
  return dataset + "__" + model;
}

std::vector<FlipRow> calibration_flips(const std::vector<AnalysisRecord>& records,
                                       const ProtocolResult& protocol, std::size_t run) {
  std::vector<FlipRow> out;
  if (run >= protocol.runs.size()) return out;
  const auto& r = protocol.runs[run];
  auto pc = r.predictions.find("PC");
  auto all = r.predictions.find("PC+ALL");
  if (pc == r.predictions.end() || all == r.predictions.end()) return out;
  for (std::size_t k = 0; k < r.test_indices.size(); ++k) {
    const int a = pc->second[k];
    const int b = all->second[k];
    if (a == b) continue;
    const std::size_t idx = protocol.used_indices.at(r.test_indices[k]);
    const auto& rec = records.at(idx);
    FlipRow f;
    f.record_index = idx;
    f.subject = rec.qa.triple.subject;
    f.label = rec.qa.correct;
    f.pc_prediction = a;
    f.pcall_prediction = b;
    f.pc = rec.qa.confidence;
    f.pop_q = rec.pop.pop_q;
    f.pop_ge = rec.pop.pop_ge;
    f.rpop_ge = rec.pop.rpop_ge;
    if (f.label == 0 && a == 1) {
      f.group = "Overc.";
    } else if (f.label == 1 && a == 0) {
      f.group = "Conse.";
    } else {
      f.group = "Miscal.";
    }
    out.push_back(std::move(f));
  }
  return out;
}

std::string correlation_table_csv(const std::vector<ReportUnit>& units) {
  std::string out = kCorrelationHeader;
  for (auto o : kAllOutcomes)
    for (auto s : kAllSignals)
      out += ",rho_" + std::string(outcome_name(o)) + "_" + signal_slug(s);
  out += "\n";
  for (const auto& u : units) {
    if (!u.correlation) continue;
    const auto& c = *u.correlation;
    out += csv_field(u.dataset) + "," + csv_field(u.model) + "," + std::to_string(c.samples) + "," +
           fmt_fixed(c.accuracy_pct, 2) + "," + fmt_fixed(c.confidence_pct, 2) + "," +
           fmt_fixed(c.alignment_pct, 2);
    for (auto o : kAllOutcomes)
      for (auto s : kAllSignals) out += "," + cell(c.at(s, o), 3);
    out += "\n";
  }
  return out;
}

std::string accuracy_table_csv(const std::vector<ReportUnit>& units) {
  std::vector<const ReportUnit*> with;
  for (const auto& u : units)
    if (u.protocol) with.push_back(&u);
  std::vector<std::string> rows;
  for (const auto* u : with)
    for (const auto& r : u->protocol->rows)
      if (std::find(rows.begin(), rows.end(), r.name) == rows.end()) rows.push_back(r.name);

  std::string out = kAccuracyHeader;
  for (const auto* u : with) out += "," + csv_field(u->dataset + "/" + u->model);
  out += ",avg\n";
  for (const auto& name : rows) {
    out += csv_field(name);
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto* u : with) {
      const auto* r = u->protocol->row(name);
      if (r && r->available) {
        out += "," + fmt_fixed(r->mean_accuracy, 2);
        sum += r->mean_accuracy;
        ++n;
      } else {
        out += ",";
      }
    }
    out += "," + (n == with.size() && n > 0 ? fmt_fixed(sum / static_cast<double>(n), 2) : "") + "\n";
  }
  return out;
}

std::string accuracy_seeds_csv(const std::vector<ReportUnit>& units) {
  std::string out = std::string(kAccuracySeedsHeader) + "\n";
  for (const auto& u : units) {
    if (!u.protocol) continue;
    for (const auto& r : u.protocol->rows) {
      if (!r.available) continue;
      for (std::size_t s = 0; s < r.seed_accuracy.size() && s < u.protocol->runs.size(); ++s)
        out += csv_field(u.dataset) + "," + csv_field(u.model) + "," + csv_field(r.name) + "," +
               std::to_string(u.protocol->runs[s].seed) + "," + fmt_fixed(r.seed_accuracy[s], 2) +
               "\n";
    }
  }
  return out;
}

std::string flips_csv(const std::vector<ReportUnit>& units) {
  std::string out = std::string(kFlipHeader) + "\n";
  for (const auto& u : units) {
    if (!u.protocol) continue;
    for (const auto& f : calibration_flips(u.records, *u.protocol)) {
      out += csv_field(u.dataset) + "," + csv_field(u.model) + "," +
             std::to_string(f.record_index) + "," + csv_field(f.subject) + "," + f.group + "," +
             std::to_string(f.label) + "," + std::to_string(f.pc_prediction) + "," +
             std::to_string(f.pcall_prediction) + "," + fmt_fixed(f.pc, 4) + "," +
             cell(f.pop_q, 2) + "," + cell(f.pop_ge, 2) + "," + cell(f.rpop_ge, 2) + "\n";
    }
  }
  return out;
}

std::string flip_summary_csv(const std::vector<ReportUnit>& units) {
  std::string out = std::string(kFlipSummaryHeader) + "\n";
  for (const auto& u : units) {
    if (!u.protocol) continue;
    const auto flips = calibration_flips(u.records, *u.protocol);
    for (const char* group : {"Overc.", "Conse.", "Miscal."}) {
      std::size_t n = 0;
      double pc = 0.0;
      std::array<double, 3> pop{};
      std::array<std::size_t, 3> have{};
      for (const auto& f : flips) {
        if (f.group != group) continue;
        ++n;
        pc += f.pc;
        const std::array<std::optional<double>, 3> v = {f.pop_q, f.pop_ge, f.rpop_ge};
        for (std::size_t k = 0; k < 3; ++k)
          if (v[k]) {
            pop[k] += *v[k];
            ++have[k];
          }
      }
      out += csv_field(u.dataset) + "," + csv_field(u.model) + "," + group + "," +
             std::to_string(n) + "," + (n ? fmt_fixed(pc / static_cast<double>(n), 4) : "");
      for (std::size_t k = 0; k < 3; ++k)
        out += "," + (have[k] ? fmt_fixed(pop[k] / static_cast<double>(have[k]), 2) : "");
      out += "\n";
    }
  }
  return out;
}

std::vector<std::filesystem::path> write_report(const std::filesystem::path& dir,
                                                const std::vector<ReportUnit>& units,
                                                std::size_t n_bins) {
  std::filesystem::create_directories(dir / "curves");
  std::vector<std::filesystem::path> written;
  auto emit = [&](const std::filesystem::path& p, const std::string& content) {
    write_file_atomic(p, content);
    written.push_back(p);
  };
  emit(dir / "correlations.csv", correlation_table_csv(units));
  emit(dir / "accuracy.csv", accuracy_table_csv(units));
  emit(dir / "accuracy_seeds.csv", accuracy_seeds_csv(units));
  emit(dir / "flips.csv", flips_csv(units));
  emit(dir / "flip_summary.csv", flip_summary_csv(units));

  for (const auto& u : units) {
    for (auto s : kAllSignals) {
      std::vector<BinPoint> points;
      for (const auto& r : u.records) {
        auto v = signal_value(r.pop, s);
        if (!v) continue;
        points.push_back({*v, r.qa.correct, r.qa.confidence, r.qa.alignment});
      }
      if (points.size() < n_bins) continue;
      auto curve = bin_by_popularity(points, n_bins);
      curve.signal = signal_slug(s);
      const auto stem = unit_id(u.dataset, u.model) + "_" + signal_slug(s);
      emit(dir / "curves" / (stem + ".csv"), binned_curve_csv(curve));
      emit(dir / "curves" / (stem + ".svg"),
           binned_curve_svg(curve, u.dataset + " / " + u.model + " / " + signal_slug(s)));
    }
  }
  return written;
}

}  // namespace popcal
