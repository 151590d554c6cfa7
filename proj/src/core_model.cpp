#include "popcal/core_model.hpp"

#include <cmath>

#include "json.hpp"
#include "popcal/metrics.hpp"

namespace popcal {

using nlohmann::json;

namespace {

std::optional<std::string> optional_string(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<std::string>();
}

json triple_json(const KnowledgeTriple& t) {
  json j;
  j["dataset"] = std::string(to_string(t.dataset));
  j["subject"] = t.subject;
  j["subject_qid"] = t.subject_entity ? json(*t.subject_entity) : json(nullptr);
  j["relation"] = t.relation;
  j["object"] = t.object;
  j["object_qid"] = t.object_entity ? json(*t.object_entity) : json(nullptr);
  return j;
}

std::size_t count_occurrences(std::string_view haystack, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = haystack.find(needle); pos != std::string_view::npos;
       pos = haystack.find(needle, pos + needle.size()))
    ++n;
  return n;
}

}  // namespace

std::string_view to_string(DatasetId id) {
  switch (id) {
    case DatasetId::Movies: return "Movies";
    case DatasetId::Songs: return "Songs";
    case DatasetId::Basketball: return "Basketball";
    case DatasetId::Custom: return "Custom";
  }
  return "Custom";
}

DatasetId parse_dataset_id(std::string_view s) {
  auto l = ascii_lower(s);
  if (l == "movies") return DatasetId::Movies;
  if (l == "songs") return DatasetId::Songs;
  if (l == "basketball") return DatasetId::Basketball;
  return DatasetId::Custom;
}

std::optional<std::string> default_template(DatasetId id) {
  switch (id) {
    case DatasetId::Movies: return "Who is the director of the movie {s}?";
    case DatasetId::Songs: return "Who is the performer of the song {s}?";
    case DatasetId::Basketball: return "Where was the basketball player {s} born?";
    case DatasetId::Custom: return std::nullopt;
  }
  return std::nullopt;
}

std::string render_question(const KnowledgeTriple& triple, std::string_view question_template) {
  const auto n = count_occurrences(question_template, kSubjectPlaceholder);
  if (n != 1)
    throw ConfigError("question template must contain exactly one {s} placeholder, found " +
                      std::to_string(n));
  const auto pos = question_template.find(kSubjectPlaceholder);
  std::string out;
  out.reserve(question_template.size() + triple.subject.size());
  out.append(question_template.substr(0, pos));
  out.append(triple.subject);
  out.append(question_template.substr(pos + kSubjectPlaceholder.size()));
  return out;
}

TripleLoadResult parse_triples(std::string_view jsonl, DatasetId dataset,
                               std::string_view question_template) {
  TripleLoadResult result;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= jsonl.size()) {
    auto end = jsonl.find('\n', start);
    if (end == std::string_view::npos) end = jsonl.size();
    auto line = jsonl.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) {
      if (end == jsonl.size()) break;
      continue;
    }
    auto j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      result.errors.push_back({line_no, "not a JSON object"});
      continue;
    }
    std::string missing;
    for (const char* key : {"subject", "relation", "object"}) {
      if (!j.contains(key) || !j.at(key).is_string() || j.at(key).get<std::string>().empty()) {
        missing = key;
        break;
      }
    }
    if (!missing.empty()) {
      result.errors.push_back({line_no, "missing or empty field \"" + missing + "\""});
      continue;
    }
    try {
      KnowledgeTriple t;
      t.dataset = dataset;
      t.subject = j.at("subject").get<std::string>();
      t.subject_entity = optional_string(j, "subject_qid");
      t.relation = j.at("relation").get<std::string>();
      t.object = j.at("object").get<std::string>();
      t.object_entity = optional_string(j, "object_qid");
      t.question = render_question(t, question_template);
      result.triples.push_back(std::move(t));
    } catch (const json::exception& ex) {
      result.errors.push_back({line_no, ex.what()});
    }
    if (end == jsonl.size()) break;
  }
  return result;
}

TripleLoadResult load_triples(const std::filesystem::path& path, DatasetId dataset,
                              std::string_view question_template) {
  return parse_triples(read_file(path), dataset, question_template);
}

std::string serialize_triples(const std::vector<KnowledgeTriple>& triples) {
  std::string out;
  for (const auto& t : triples) {
    out += triple_json(t).dump();
    out += '\n';
  }
  return out;
}

int judge_correctness(std::string_view generated_answer, std::string_view ground_truth) {
  auto gt = normalize_text(ground_truth);
  if (gt.empty()) throw std::invalid_argument("judge_correctness: empty ground truth");
  return normalize_text(generated_answer).find(gt) != std::string::npos ? 1 : 0;
}

QARecord make_qa_record(KnowledgeTriple triple, std::string answer, std::vector<double> token_probs,
                        std::optional<std::string> generated_entity) {
  QARecord r;
  r.correct = judge_correctness(answer, triple.object);
  r.confidence = token_probs.empty() ? 0.0 : mean_token_confidence(token_probs);
  r.alignment = alignment(r.correct, r.confidence);
  r.triple = std::move(triple);
  r.generated_answer = std::move(answer);
  r.generated_entity = std::move(generated_entity);
  r.token_probs = std::move(token_probs);
  return r;
}

namespace {

json qa_record_json(const QARecord& r) {
  auto j = triple_json(r.triple);
  j["question"] = r.triple.question;
  j["answer"] = r.generated_answer;
  j["generated_qid"] = r.generated_entity ? json(*r.generated_entity) : json(nullptr);
  j["token_probs"] = r.token_probs;
  j["correct"] = r.correct;
  j["confidence"] = r.confidence;
  return j;
}

QARecord qa_record_from_json(const json& j, std::size_t line_no) {
  QARecord r;
  r.triple.dataset = parse_dataset_id(j.at("dataset").get<std::string>());
  r.triple.subject = j.at("subject").get<std::string>();
  r.triple.subject_entity = optional_string(j, "subject_qid");
  r.triple.relation = j.at("relation").get<std::string>();
  r.triple.object = j.at("object").get<std::string>();
  r.triple.object_entity = optional_string(j, "object_qid");
  r.triple.question = j.at("question").get<std::string>();
  r.generated_answer = j.at("answer").get<std::string>();
  r.generated_entity = optional_string(j, "generated_qid");
  r.token_probs = j.at("token_probs").get<std::vector<double>>();
  r.correct = j.at("correct").get<int>();
  r.confidence = j.at("confidence").get<double>();
  if (r.correct != 0 && r.correct != 1) throw ParseError(line_no, "correct must be 0 or 1");
  if (!(r.confidence >= 0.0 && r.confidence <= 1.0))
    throw ParseError(line_no, "confidence outside [0,1]");
  r.alignment = alignment(r.correct, r.confidence);
  return r;
}

json optional_number(const std::optional<double>& v) {
  return v ? json(*v) : json(nullptr);
}

std::optional<double> read_optional_number(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

json popularity_json(const PopularityVector& p) {
  return json{{"source", p.source == PopularitySource::Corpus ? "corpus" : "self"},
              {"Pop_Q", optional_number(p.pop_q)},
              {"Pop_GT", optional_number(p.pop_gt)},
              {"Pop_Ge", optional_number(p.pop_ge)},
              {"RPop_GT", optional_number(p.rpop_gt)},
              {"RPop_Ge", optional_number(p.rpop_ge)}};
}

PopularityVector popularity_from_json(const json& j) {
  PopularityVector p;
  p.source = j.value("source", std::string("corpus")) == "self" ? PopularitySource::SelfEstimated
                                                                : PopularitySource::Corpus;
  p.pop_q = read_optional_number(j, "Pop_Q");
  p.pop_gt = read_optional_number(j, "Pop_GT");
  p.pop_ge = read_optional_number(j, "Pop_Ge");
  p.rpop_gt = read_optional_number(j, "RPop_GT");
  p.rpop_ge = read_optional_number(j, "RPop_Ge");
  return p;
}

template <typename F>
void for_each_line(std::string_view jsonl, F&& f) {
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < jsonl.size()) {
    auto end = jsonl.find('\n', start);
    if (end == std::string_view::npos) end = jsonl.size();
    auto line = jsonl.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    f(line, line_no);
  }
}

}  // namespace

std::string serialize_qa_records(const std::vector<QARecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += qa_record_json(r).dump();
    out += '\n';
  }
  return out;
}

std::vector<QARecord> parse_qa_records(std::string_view jsonl) {
  std::vector<QARecord> out;
  for_each_line(jsonl, [&](std::string_view line, std::size_t line_no) {
    try {
      out.push_back(qa_record_from_json(json::parse(line), line_no));
    } catch (const json::exception& ex) {
      throw ParseError(line_no, std::string("qa record: ") + ex.what());
    }
  });
  return out;
}

std::string serialize_analysis_records(const std::vector<AnalysisRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    auto j = qa_record_json(r.qa);
    j["pop"] = popularity_json(r.pop);
    j["self_pop"] = r.self_pop ? popularity_json(*r.self_pop) : json(nullptr);
    j["verb"] = r.verb ? json(*r.verb) : json(nullptr);
    j["consis"] = optional_number(r.consis);
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<AnalysisRecord> parse_analysis_records(std::string_view jsonl) {
  std::vector<AnalysisRecord> out;
  for_each_line(jsonl, [&](std::string_view line, std::size_t line_no) {
    try {
      auto j = json::parse(line);
      AnalysisRecord r;
      r.qa = qa_record_from_json(j, line_no);
      r.pop = popularity_from_json(j.at("pop"));
      if (j.contains("self_pop") && !j.at("self_pop").is_null())
        r.self_pop = popularity_from_json(j.at("self_pop"));
      if (j.contains("verb") && !j.at("verb").is_null()) r.verb = j.at("verb").get<int>();
      r.consis = read_optional_number(j, "consis");
      out.push_back(std::move(r));
    } catch (const json::exception& ex) {
      throw ParseError(line_no, std::string("analysis record: ") + ex.what());
    }
  });
  return out;
}

bool default_apply_cap(DatasetId id) {
  return id == DatasetId::Movies || id == DatasetId::Songs;
}

FilterResult filter_dataset(const std::vector<std::vector<QARecord>>& by_model,
                            const OccurrenceIndex& index, const FilterOptions& options) {
  FilterResult result;
  result.report.docfreq_cap = options.cap;
  result.by_model.resize(by_model.size());
  if (by_model.empty()) return result;

  const std::size_t questions = by_model.front().size();
  for (const auto& m : by_model)
    if (m.size() != questions)
      throw std::invalid_argument("filter_dataset: models cover different question counts");
  result.report.input_count = questions;

  auto over_cap = [&](const std::optional<std::string>& entity) {
    return entity && doc_count(index, *entity) > options.cap;
  };

  for (std::size_t q = 0; q < questions; ++q) {
    bool empty = false;
    bool unresolved = false;
    bool capped = false;
    for (const auto& model : by_model) {
      const auto& r = model[q];
      if (normalize_text(r.generated_answer).empty()) empty = true;
      if (!r.generated_entity || !index.contains(*r.generated_entity)) unresolved = true;
    }
    if (options.apply_cap) {
      const auto& t = by_model.front()[q].triple;
      capped = over_cap(t.subject_entity) || over_cap(t.object_entity);
      for (const auto& model : by_model) capped = capped || over_cap(model[q].generated_entity);
    }
    if (empty) {
      ++result.report.removed_empty;
    } else if (unresolved) {
      ++result.report.removed_unresolved_entity;
    } else if (capped) {
      ++result.report.removed_docfreq_over_cap;
    } else {
      for (std::size_t m = 0; m < by_model.size(); ++m) result.by_model[m].push_back(by_model[m][q]);
    }
  }
  result.report.output_count = result.by_model.front().size();
  return result;
}

}  // namespace popcal
