#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "popcal/corpus_index.hpp"
#include "popcal/util.hpp"

namespace popcal {

enum class DatasetId { Movies, Songs, Basketball, Custom };

std::string_view to_string(DatasetId id);
DatasetId parse_dataset_id(std::string_view s);

struct KnowledgeTriple {
  DatasetId dataset = DatasetId::Custom;
  std::string subject;
  std::optional<std::string> subject_entity;
  std::string relation;
  std::string object;
  std::optional<std::string> object_entity;
  std::string question;

  bool operator==(const KnowledgeTriple&) const = default;
};

struct QARecord {
  KnowledgeTriple triple;
  std::string generated_answer;
  std::optional<std::string> generated_entity;
  std::vector<double> token_probs;
  int correct = 0;
  double confidence = 0.0;
  double alignment = 0.0;

  bool operator==(const QARecord&) const = default;
};

// Builds a record from a generation: judges correctness against the triple's
// object and derives confidence (token mean) and alignment. An empty
// generation gets confidence 0.
QARecord make_qa_record(KnowledgeTriple triple, std::string answer, std::vector<double> token_probs,
                        std::optional<std::string> generated_entity = std::nullopt);

enum class PopularitySource { Corpus, SelfEstimated };

// The five popularity signals. Absent values stay unset so downstream
// reports can mark the cell unavailable.
struct PopularityVector {
  std::optional<double> pop_q;
  std::optional<double> pop_gt;
  std::optional<double> pop_ge;
  std::optional<double> rpop_gt;
  std::optional<double> rpop_ge;
  PopularitySource source = PopularitySource::Corpus;

  bool operator==(const PopularityVector&) const = default;
};

// A filtered QA record joined with everything measured about it: corpus
// popularity, optional self-estimated popularity, and baseline signals.
struct AnalysisRecord {
  QARecord qa;
  PopularityVector pop;
  std::optional<PopularityVector> self_pop;
  std::optional<int> verb;        // verbalized "can answer" judgment
  std::optional<double> consis;   // self-consistency score in [0,1]

  bool operator==(const AnalysisRecord&) const = default;
};

std::string serialize_analysis_records(const std::vector<AnalysisRecord>& records);
std::vector<AnalysisRecord> parse_analysis_records(std::string_view jsonl);

inline constexpr std::string_view kSubjectPlaceholder = "{s}";

// Built-in templates for the three standard datasets; Custom has none.
std::optional<std::string> default_template(DatasetId id);

// Replaces the single "{s}" placeholder with the subject in one pass.
std::string render_question(const KnowledgeTriple& triple, std::string_view question_template);

struct TripleLoadResult {
  std::vector<KnowledgeTriple> triples;
  std::vector<RecordIssue> errors;
};

// Dataset JSONL. A record missing a required field is reported with its
// line number and skipped; an unreadable file throws IoError.
TripleLoadResult load_triples(const std::filesystem::path& path, DatasetId dataset,
                              std::string_view question_template);
TripleLoadResult parse_triples(std::string_view jsonl, DatasetId dataset,
                               std::string_view question_template);
std::string serialize_triples(const std::vector<KnowledgeTriple>& triples);

// 1 iff normalize(answer) contains normalize(ground_truth).
int judge_correctness(std::string_view generated_answer, std::string_view ground_truth);

// QARecord JSONL: dataset fields plus question, answer, generated_qid,
// token_probs, correct, confidence. Alignment is re-derived on load.
std::string serialize_qa_records(const std::vector<QARecord>& records);
std::vector<QARecord> parse_qa_records(std::string_view jsonl);

struct FilterReport {
  std::size_t input_count = 0;
  std::size_t removed_empty = 0;
  std::size_t removed_unresolved_entity = 0;
  std::size_t removed_docfreq_over_cap = 0;
  std::size_t output_count = 0;
  std::uint64_t docfreq_cap = 6000;

  bool operator==(const FilterReport&) const = default;
};

struct FilterOptions {
  std::uint64_t cap = 6000;
  bool apply_cap = false;
};

// Default cap switch per dataset: on for Movies and Songs.
bool default_apply_cap(DatasetId id);

struct FilterResult {
  // by_model[m][q]: same shape as the input minus removed questions.
  std::vector<std::vector<QARecord>> by_model;
  FilterReport report;
};

// Cross-model filtering. by_model[m][q] is model m's record for question q;
// all models must cover the same questions in the same order. A question is
// dropped for every model when any model's generation is empty, any
// generated entity is missing from the index, or (with apply_cap) any of the
// question / ground-truth / generated entities occurs in more than `cap`
// documents. Each dropped question is counted under the first rule it hits.
FilterResult filter_dataset(const std::vector<std::vector<QARecord>>& by_model,
                            const OccurrenceIndex& index, const FilterOptions& options);

}  // namespace popcal
