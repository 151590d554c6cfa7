#include "popcal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "json.hpp"
#include "popcal/core_model.hpp"

namespace popcal {

double mean_token_confidence(std::span<const double> token_probs) {
  if (token_probs.empty()) throw std::invalid_argument("mean_token_confidence: no tokens");
  double sum = 0.0;
  for (double p : token_probs) sum += p;
  return sum / static_cast<double>(token_probs.size());
}

double alignment(int correct, double confidence) {
  if (!(confidence >= 0.0 && confidence <= 1.0))
    throw std::invalid_argument("alignment: confidence outside [0,1]");
  if (correct != 0 && correct != 1) throw std::invalid_argument("alignment: correct must be 0/1");
  return 1.0 - std::fabs(static_cast<double>(correct) - confidence);
}

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && values[order[j]] == values[order[i]]) ++j;
    // positions i..j-1 hold 1-based ranks i+1..j
    const double r = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = r;
    i = j;
  }
  return ranks;
}

double spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("spearman: length mismatch");
  if (xs.size() < 2) throw std::invalid_argument("spearman: need at least two points");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  const double n = static_cast<double>(rx.size());
  // Mean rank is (n+1)/2 regardless of ties.
  const double mean = 0.5 * (n + 1.0);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double dx = rx[i] - mean;
    const double dy = ry[i] - mean;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw std::domain_error("spearman: constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double nmi(std::span<const PairProbability> pairs) {
  auto plogp = [](double p) { return p > 0.0 ? p * std::log(p) : 0.0; };
  double mi = 0.0, hx = 0.0, hy = 0.0;
  bool any_joint = false;
  for (const auto& p : pairs) {
    for (double v : {p.p_subject, p.p_object, p.p_joint})
      if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("nmi: probability outside [0,1]");
    hx -= plogp(p.p_subject);
    hy -= plogp(p.p_object);
    if (p.p_joint > 0.0) {
      any_joint = true;
      if (p.p_subject <= 0.0 || p.p_object <= 0.0)
        throw std::invalid_argument("nmi: joint mass on a zero marginal");
      mi += p.p_joint * std::log(p.p_joint / (p.p_subject * p.p_object));
    }
  }
  if (!any_joint) throw std::invalid_argument("nmi: all joint probabilities are zero");
  if (hx <= 0.0 || hy <= 0.0) throw std::domain_error("nmi: degenerate marginal entropy");
  return mi / std::sqrt(hx * hy);
}

double consistency_score(const std::string& greedy, std::span<const std::string> samples,
                         const EquivalenceJudge& judge) {
  if (samples.empty()) throw std::invalid_argument("consistency_score: no samples");
  std::size_t agree = 0;
  for (const auto& s : samples) agree += judge(greedy, s) ? 1 : 0;
  return static_cast<double>(agree) / static_cast<double>(samples.size());
}

std::string_view signal_name(PopSignal s) {
  switch (s) {
    case PopSignal::PopQ: return "Pop_Q";
    case PopSignal::PopGT: return "Pop_GT";
    case PopSignal::RPopGT: return "RPop_GT";
    case PopSignal::PopGe: return "Pop_Ge";
    case PopSignal::RPopGe: return "RPop_Ge";
  }
  return "?";
}

std::optional<double> signal_value(const PopularityVector& p, PopSignal s) {
  switch (s) {
    case PopSignal::PopQ: return p.pop_q;
    case PopSignal::PopGT: return p.pop_gt;
    case PopSignal::RPopGT: return p.rpop_gt;
    case PopSignal::PopGe: return p.pop_ge;
    case PopSignal::RPopGe: return p.rpop_ge;
  }
  return std::nullopt;
}

std::string_view outcome_name(Outcome o) {
  switch (o) {
    case Outcome::Accuracy: return "accuracy";
    case Outcome::Confidence: return "confidence";
    case Outcome::Alignment: return "alignment";
  }
  return "?";
}

BinnedCurve bin_by_popularity(std::span<const BinPoint> points, std::size_t n_bins) {
  if (n_bins < 2) throw std::invalid_argument("bin_by_popularity: need at least two bins");
  if (points.size() < n_bins)
    throw std::invalid_argument("bin_by_popularity: fewer records than bins");

  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return points[a].popularity < points[b].popularity;
  });

  BinnedCurve curve;
  curve.requested_bins = n_bins;
  const std::size_t n = points.size();
  auto pop_at = [&](std::size_t k) { return points[order[k]].popularity; };

  if (pop_at(0) == pop_at(n - 1)) {
    spdlog::warn("bin_by_popularity: all {} records share one popularity value; using one bin", n);
    curve.degenerate = true;
  }

  std::size_t begin = 0;
  for (std::size_t b = 1; b <= n_bins && begin < n; ++b) {
    std::size_t end = curve.degenerate ? n : (b == n_bins ? n : b * n / n_bins);
    if (end <= begin) continue;
    // Keep ties together.
    while (end < n && pop_at(end) == pop_at(end - 1)) ++end;
    Bin bin;
    bin.pop_min = pop_at(begin);
    bin.pop_max = pop_at(end - 1);
    bin.count = end - begin;
    for (std::size_t k = begin; k < end; ++k) {
      const auto& p = points[order[k]];
      bin.mean_accuracy += p.correct;
      bin.mean_confidence += p.confidence;
      bin.mean_alignment += p.alignment;
    }
    const double c = static_cast<double>(bin.count);
    bin.mean_accuracy /= c;
    bin.mean_confidence /= c;
    bin.mean_alignment /= c;
    curve.bins.push_back(bin);
    begin = end;
  }
  return curve;
}

std::string binned_curve_csv(const BinnedCurve& curve) {
  std::ostringstream out;
  out << "signal,bin,pop_min,pop_max,count,accuracy,confidence,alignment\n";
  for (std::size_t i = 0; i < curve.bins.size(); ++i) {
    const auto& b = curve.bins[i];
    out << curve.signal << ',' << i + 1 << ',' << fmt_fixed(b.pop_min, 4) << ','
        << fmt_fixed(b.pop_max, 4) << ',' << b.count << ',' << fmt_fixed(b.mean_accuracy) << ','
        << fmt_fixed(b.mean_confidence) << ',' << fmt_fixed(b.mean_alignment) << '\n';
  }
  return out.str();
}

std::string binned_curve_svg(const BinnedCurve& curve, std::string_view title) {
  constexpr double W = 640, H = 400, L = 60, R = 130, T = 40, B = 50;
  const double pw = W - L - R, ph = H - T - B;
  const std::size_t n = curve.bins.size();
  auto x_of = [&](std::size_t i) {
    return n <= 1 ? L + pw / 2 : L + pw * static_cast<double>(i) / static_cast<double>(n - 1);
  };
  auto y_of = [&](double v) { return T + ph * (1.0 - v); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" viewBox=\"0 0 " << W << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title
    << "</text>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T + ph << "\" x2=\"" << L + pw << "\" y2=\"" << T + ph
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << T + ph
    << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 5; ++k) {
    const double v = k / 5.0;
    s << "<text x=\"" << L - 8 << "\" y=\"" << fmt_fixed(y_of(v) + 4, 1)
      << "\" text-anchor=\"end\">" << fmt_fixed(v, 1) << "</text>\n";
    s << "<line x1=\"" << L << "\" y1=\"" << fmt_fixed(y_of(v), 1) << "\" x2=\"" << L + pw
      << "\" y2=\"" << fmt_fixed(y_of(v), 1) << "\" stroke=\"#ddd\"/>\n";
  }
  for (std::size_t i = 0; i < n; ++i) {
    s << "<text x=\"" << fmt_fixed(x_of(i), 1) << "\" y=\"" << T + ph + 18
      << "\" text-anchor=\"middle\">" << i + 1 << "</text>\n";
  }
  s << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">"
    << curve.signal << " bin (low to high)</text>\n";

  struct Series {
    const char* name;
    const char* color;
    double Bin::*field;
  };
  const Series series[] = {{"accuracy", "#1f77b4", &Bin::mean_accuracy},
                           {"confidence", "#d62728", &Bin::mean_confidence},
                           {"alignment", "#2ca02c", &Bin::mean_alignment}};
  int legend = 0;
  for (const auto& ser : series) {
    s << "<polyline fill=\"none\" stroke=\"" << ser.color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < n; ++i) {
      s << (i ? " " : "") << fmt_fixed(x_of(i), 1) << ','
        << fmt_fixed(y_of(curve.bins[i].*(ser.field)), 1);
    }
    s << "\"/>\n";
    for (std::size_t i = 0; i < n; ++i) {
      s << "<circle cx=\"" << fmt_fixed(x_of(i), 1) << "\" cy=\""
        << fmt_fixed(y_of(curve.bins[i].*(ser.field)), 1) << "\" r=\"3\" fill=\"" << ser.color
        << "\"/>\n";
    }
    const double ly = T + 10 + 20 * legend++;
    s << "<line x1=\"" << L + pw + 15 << "\" y1=\"" << ly << "\" x2=\"" << L + pw + 35
      << "\" y2=\"" << ly << "\" stroke=\"" << ser.color << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << L + pw + 40 << "\" y=\"" << ly + 4 << "\">" << ser.name << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

CorrelationReport correlation_report(std::span<const AnalysisRecord> records,
                                     bool use_self_popularity) {
  if (records.size() < 2) throw std::invalid_argument("correlation_report: need >= 2 records");
  CorrelationReport rep;
  rep.samples = records.size();

  std::array<std::vector<double>, 3> outcomes;
  for (auto& v : outcomes) v.reserve(records.size());
  for (const auto& r : records) {
    outcomes[0].push_back(r.qa.correct);
    outcomes[1].push_back(r.qa.confidence);
    outcomes[2].push_back(r.qa.alignment);
  }
  const double n = static_cast<double>(records.size());
  rep.accuracy_pct = 100.0 * std::accumulate(outcomes[0].begin(), outcomes[0].end(), 0.0) / n;
  rep.confidence_pct = 100.0 * std::accumulate(outcomes[1].begin(), outcomes[1].end(), 0.0) / n;
  rep.alignment_pct = 100.0 * std::accumulate(outcomes[2].begin(), outcomes[2].end(), 0.0) / n;

  for (auto s : kAllSignals) {
    std::vector<double> xs;
    xs.reserve(records.size());
    bool complete = true;
    for (const auto& r : records) {
      const PopularityVector* pv = &r.pop;
      if (use_self_popularity) {
        if (!r.self_pop) {
          complete = false;
          break;
        }
        pv = &*r.self_pop;
      }
      auto v = signal_value(*pv, s);
      if (!v) {
        complete = false;
        break;
      }
      xs.push_back(*v);
    }
    if (!complete) continue;
    for (auto o : kAllOutcomes) {
      try {
        rep.rho[static_cast<int>(s)][static_cast<int>(o)] =
            spearman(xs, outcomes[static_cast<int>(o)]);
      } catch (const std::domain_error&) {
        // constant column: leave the cell absent
      }
    }
  }
  return rep;
}

std::string correlation_cells_csv(const CorrelationReport& report) {
  std::ostringstream out;
  out << "signal,outcome,rho\n";
  for (auto s : kAllSignals) {
    for (auto o : kAllOutcomes) {
      auto v = report.at(s, o);
      out << signal_name(s) << ',' << outcome_name(o) << ',' << (v ? fmt_fixed(*v, 3) : "") << '\n';
    }
  }
  return out.str();
}

std::string correlation_report_json(const CorrelationReport& report) {
  nlohmann::ordered_json j;
  j["samples"] = report.samples;
  j["Acc."] = report.accuracy_pct;
  j["Conf."] = report.confidence_pct;
  j["Align."] = report.alignment_pct;
  nlohmann::ordered_json cells = nlohmann::ordered_json::object();
  for (auto s : kAllSignals) {
    nlohmann::ordered_json row = nlohmann::ordered_json::object();
    for (auto o : kAllOutcomes) {
      auto v = report.at(s, o);
      row[std::string(outcome_name(o))] = v ? nlohmann::ordered_json(*v) : nullptr;
    }
    cells[std::string(signal_name(s))] = row;
  }
  j["rho"] = cells;
  return j.dump(2) + "\n";
}

CorrelationReport parse_correlation_report_json(std::string_view text) {
  const auto j = nlohmann::json::parse(text);
  CorrelationReport r;
  r.samples = j.at("samples").get<std::size_t>();
  r.accuracy_pct = j.at("Acc.").get<double>();
  r.confidence_pct = j.at("Conf.").get<double>();
  r.alignment_pct = j.at("Align.").get<double>();
  for (auto s : kAllSignals) {
    const auto& row = j.at("rho").at(std::string(signal_name(s)));
    for (auto o : kAllOutcomes) {
      const auto& v = row.at(std::string(outcome_name(o)));
      if (!v.is_null()) r.rho[static_cast<int>(s)][static_cast<int>(o)] = v.get<double>();
    }
  }
  return r;
}

}  // namespace popcal
