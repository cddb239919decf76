#pragma once

// Corpus ingestion, the JSONL session event log, and result export.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "annoteer/core.hpp"
#include "annoteer/samplease.hpp"
#include "annoteer/stats.hpp"

namespace annoteer::io {

class IoError : public Error {
public:
    using Error::Error;
};

class CsvError : public Error {
public:
    enum class Kind { MissingColumn, EmptyFile, DuplicateId, RowParseError };
    CsvError(Kind kind, const std::string& what, std::vector<long> rows = {})
        : Error(what), kind_(kind), rows_(std::move(rows)) {}
    Kind kind() const { return kind_; }
    // Row numbers count the header as row 1.
    const std::vector<long>& rows() const { return rows_; }

private:
    Kind kind_;
    std::vector<long> rows_;
};

// ---- CSV ---------------------------------------------------------------------

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    // Index of the named column, or nullopt.
    std::optional<std::size_t> column(std::string_view name) const;
};

// RFC 4180: quoted fields may contain commas, quotes ("") and line breaks;
// CRLF and LF line endings are both accepted. A UTF-8 BOM is skipped.
CsvTable parse_csv(std::string_view text);
CsvTable read_csv_file(const std::filesystem::path& path);

std::string csv_field(std::string_view value);
std::string csv_line(const std::vector<std::string>& fields);  // CRLF-terminated

struct CorpusColumns {
    std::string text_column;
    std::optional<std::string> id_column;
    std::vector<std::string> metadata_columns;
};

Corpus corpus_from_csv(const CsvTable& table, const CorpusColumns& columns, std::string source_name);
Corpus load_corpus_csv(const std::filesystem::path& path, const CorpusColumns& columns);

// Two-column label file (record id, class), header required. Column names
// default to the first two columns.
std::map<std::string, std::string> load_label_csv(const std::filesystem::path& path,
                                                  const std::string& id_column = {},
                                                  const std::string& label_column = {});

// ---- event log --------------------------------------------------------------

class CorruptLog : public Error {
public:
    CorruptLog(const std::string& what, long line) : Error(what), line_(line) {}
    long line() const { return line_; }  // 1-based

private:
    long line_;
};

class VersionMismatch : public Error {
public:
    using Error::Error;
};

nlohmann::json to_json(const samplease::Event& event, long seq);
samplease::Event event_from_json(const nlohmann::json& line);

nlohmann::json to_json(const PromptVersion& p);
nlohmann::json to_json(const ClassificationOutcome& o);
nlohmann::json to_json(const samplease::SampleBatch& b);
nlohmann::json session_summary_json(const samplease::Session& s);

nlohmann::json to_json(const stats::MetricsReport& r);
nlohmann::json to_json(const stats::CIResult& ci, bool with_distribution = false);
nlohmann::json to_json(const stats::PermutationResult& p);
nlohmann::json to_json(const stats::MannWhitneyResult& m);
nlohmann::json to_json(const std::map<std::string, stats::SliceReport>& slices);

// Append-only writer. Each append writes all lines of the group, then flushes.
class EventLog {
public:
    explicit EventLog(std::filesystem::path path);

    void append(const std::vector<samplease::Event>& events);
    const std::filesystem::path& path() const { return path_; }
    long size() const { return next_seq_; }

    samplease::EventSink sink();

private:
    std::filesystem::path path_;
    long next_seq_ = 0;
};

void save_session(const std::filesystem::path& path, const std::vector<samplease::Event>& events);

struct LoadedSession {
    samplease::Session session;
    std::vector<samplease::Event> events;
    std::optional<long> corrupt_line;  // set when salvage mode dropped a bad tail
};

// Replays the log. Without salvage, the first bad line raises CorruptLog; with
// salvage, events before it are kept and the rest dropped.
LoadedSession load_session(const std::filesystem::path& path, bool salvage = false);

// ---- export -----------------------------------------------------------------

struct ExportPaths {
    std::filesystem::path results_csv;
    std::filesystem::path prompts_json;
    std::filesystem::path labels_csv;
};

std::string format_double(double v);  // %.17g, round-trips

std::string results_csv_text(const std::vector<ClassificationOutcome>& outcomes, int prompt_version);
std::string labels_csv_text(const std::vector<LabeledExample>& labeled_data);
nlohmann::json prompts_json(const std::vector<PromptVersion>& prompt_history);

ExportPaths export_results(const std::vector<ClassificationOutcome>& outcomes, int prompt_version,
                           const std::vector<LabeledExample>& labeled_data,
                           const std::vector<PromptVersion>& prompt_history, const std::filesystem::path& dir);

ExportPaths export_session(const samplease::Session& session, const std::filesystem::path& dir);

struct ResultRow {
    std::string record_id;
    std::string predicted_class;
    double confidence = 0.0;
    int prompt_version = 0;
};

std::vector<ResultRow> load_results_csv(const std::filesystem::path& path);

}  // namespace annoteer::io
