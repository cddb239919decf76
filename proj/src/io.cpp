#include "annoteer/io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace annoteer::io {

using nlohmann::json;
namespace fs = std::filesystem;
using namespace annoteer::samplease;

// ---- CSV ---------------------------------------------------------------------

std::optional<std::size_t> CsvTable::column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == name) return i;
    }
    return std::nullopt;
}

CsvTable parse_csv(std::string_view text) {
    if (text.substr(0, 3) == "\xEF\xBB\xBF") text.remove_prefix(3);
    std::vector<std::vector<std::string>> records;
    std::vector<bool> blank_records;
    std::vector<std::string> row;
    std::string field;
    bool in_quotes = false;
    bool field_started = false;
    long record_no = 1;
    std::size_t i = 0;
    auto end_field = [&] {
        row.push_back(std::move(field));
        field.clear();
        field_started = false;
    };
    auto end_record = [&] {
        blank_records.push_back(row.empty() && field.empty() && !field_started);
        end_field();
        records.push_back(std::move(row));
        row.clear();
        ++record_no;
    };
    while (i < text.size()) {
        const char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    i += 2;
                    continue;
                }
                in_quotes = false;
                ++i;
                if (i < text.size() && text[i] != ',' && text[i] != '\n' && text[i] != '\r') {
                    throw CsvError(CsvError::Kind::RowParseError,
                                   "row " + std::to_string(record_no) + ": characters after closing quote",
                                   {record_no});
                }
                continue;
            }
            field.push_back(c);
            ++i;
            continue;
        }
        if (c == '"' && !field_started && field.empty()) {
            in_quotes = true;
            field_started = true;
            ++i;
        } else if (c == ',') {
            end_field();
            ++i;
        } else if (c == '\r' || c == '\n') {
            end_record();
            i += (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ? 2 : 1;
        } else {
            if (c == '"') {
                throw CsvError(CsvError::Kind::RowParseError,
                               "row " + std::to_string(record_no) + ": quote inside unquoted field", {record_no});
            }
            field.push_back(c);
            field_started = true;
            ++i;
        }
    }
    if (in_quotes) {
        throw CsvError(CsvError::Kind::RowParseError, "row " + std::to_string(record_no) + ": unterminated quote",
                       {record_no});
    }
    if (field_started || !field.empty() || !row.empty()) end_record();

    CsvTable table;
    if (records.empty()) throw CsvError(CsvError::Kind::EmptyFile, "CSV has no header row");
    table.header = std::move(records.front());
    for (std::size_t r = 1; r < records.size(); ++r) {
        auto& rec = records[r];
        if (blank_records[r]) continue;
        if (rec.size() != table.header.size()) {
            const long row_no = static_cast<long>(r + 1);
            throw CsvError(CsvError::Kind::RowParseError,
                           "row " + std::to_string(row_no) + ": expected " + std::to_string(table.header.size()) +
                               " fields, found " + std::to_string(rec.size()),
                           {row_no});
        }
        table.rows.push_back(std::move(rec));
    }
    return table;
}

namespace {

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << content;
    if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

CsvTable read_csv_file(const fs::path& path) { return parse_csv(slurp(path)); }

std::string csv_field(std::string_view value) {
    if (value.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(value);
    std::string out = "\"";
    for (char c : value) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out += '"';
    return out;
}

std::string csv_line(const std::vector<std::string>& fields) {
    std::string out;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) out.push_back(',');
        out += csv_field(fields[i]);
    }
    out += "\r\n";
    return out;
}

Corpus corpus_from_csv(const CsvTable& table, const CorpusColumns& columns, std::string source_name) {
    auto require = [&](const std::string& name) {
        auto idx = table.column(name);
        if (!idx) throw CsvError(CsvError::Kind::MissingColumn, "missing column: " + name);
        return *idx;
    };
    const auto text_idx = require(columns.text_column);
    std::optional<std::size_t> id_idx;
    if (columns.id_column && !columns.id_column->empty()) id_idx = require(*columns.id_column);
    std::vector<std::pair<std::string, std::size_t>> meta;
    for (const auto& m : columns.metadata_columns) meta.emplace_back(m, require(m));
    if (table.rows.empty()) throw CsvError(CsvError::Kind::EmptyFile, "CSV has a header but no data rows");

    std::vector<Record> records;
    records.reserve(table.rows.size());
    std::map<std::string, long> first_row;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        const long row_no = static_cast<long>(r + 2);
        Record rec;
        if (id_idx) {
            rec.id = trim(row[*id_idx]);
        } else {
            char buf[32];
            std::snprintf(buf, sizeof buf, "r%06zu", r + 1);
            rec.id = buf;
        }
        auto [it, inserted] = first_row.emplace(rec.id, row_no);
        if (!inserted) {
            throw CsvError(CsvError::Kind::DuplicateId,
                           "duplicate id " + rec.id + " in rows " + std::to_string(it->second) + " and " +
                               std::to_string(row_no),
                           {it->second, row_no});
        }
        rec.text = row[text_idx];
        for (const auto& [name, idx] : meta) rec.metadata[name] = row[idx];
        records.push_back(std::move(rec));
    }
    return Corpus(std::move(source_name), std::move(records));
}

Corpus load_corpus_csv(const fs::path& path, const CorpusColumns& columns) {
    const auto content = slurp(path);
    if (trim(content).empty()) throw CsvError(CsvError::Kind::EmptyFile, "empty file: " + path.string());
    return corpus_from_csv(parse_csv(content), columns, path.filename().string());
}

std::map<std::string, std::string> load_label_csv(const fs::path& path, const std::string& id_column,
                                                  const std::string& label_column) {
    const auto table = read_csv_file(path);
    if (table.header.size() < 2) throw CsvError(CsvError::Kind::MissingColumn, "label file needs two columns");
    auto col = [&](const std::string& name, std::size_t fallback) {
        if (name.empty()) return fallback;
        auto idx = table.column(name);
        if (!idx) throw CsvError(CsvError::Kind::MissingColumn, "missing column: " + name);
        return *idx;
    };
    const auto id_idx = col(id_column, 0);
    const auto label_idx = col(label_column, 1);
    std::map<std::string, std::string> out;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto id = trim(table.rows[r][id_idx]);
        if (!out.emplace(id, trim(table.rows[r][label_idx])).second) {
            throw CsvError(CsvError::Kind::DuplicateId, "duplicate id " + id + " in " + path.string(),
                           {static_cast<long>(r + 2)});
        }
    }
    return out;
}

// ---- JSON conversions ----------------------------------------------------------

namespace {

json number_or_tag(double v) {
    if (std::isfinite(v)) return v;
    if (std::isnan(v)) return "nan";
    return v > 0 ? "inf" : "-inf";
}

double number_from(const json& j) {
    if (j.is_number()) return j.get<double>();
    const auto s = j.get<std::string>();
    if (s == "nan") return std::nan("");
    if (s == "inf") return INFINITY;
    if (s == "-inf") return -INFINITY;
    throw json::type_error::create(302, "expected number", &j);
}

json numbers(const std::vector<double>& v) {
    json a = json::array();
    for (double x : v) a.push_back(number_or_tag(x));
    return a;
}

std::vector<double> numbers_from(const json& j) {
    std::vector<double> out;
    out.reserve(j.size());
    for (const auto& x : j) out.push_back(number_from(x));
    return out;
}

json record_json(const Record& r) { return {{"id", r.id}, {"text", r.text}, {"metadata", r.metadata}}; }

Record record_from(const json& j) {
    return {j.at("id").get<std::string>(), j.at("text").get<std::string>(),
            j.at("metadata").get<std::map<std::string, std::string>>()};
}

PromptVersion prompt_from(const json& j) {
    PromptVersion p;
    p.version_index = j.at("version_index").get<int>();
    p.text = j.at("text").get<std::string>();
    if (!j.at("parent_version").is_null()) p.parent_version = j.at("parent_version").get<int>();
    p.fewshot_ids = j.at("fewshot_ids").get<std::vector<std::string>>();
    p.created_at_ms = j.at("created_at_ms").get<std::int64_t>();
    return p;
}

ClassificationOutcome outcome_from(const json& j) {
    ClassificationOutcome o;
    o.record_id = j.at("record_id").get<std::string>();
    o.predicted_class = j.at("predicted_class").get<std::string>();
    o.token_logprobs = numbers_from(j.at("token_logprobs"));
    o.confidence = number_from(j.at("confidence"));
    o.raw_completion = j.at("raw_completion").get<std::string>();
    if (j.contains("error") && !j.at("error").is_null()) o.error = j.at("error").get<std::string>();
    return o;
}

json outcomes_json(const std::vector<ClassificationOutcome>& v) {
    json a = json::array();
    for (const auto& o : v) a.push_back(to_json(o));
    return a;
}

std::vector<ClassificationOutcome> outcomes_from(const json& j) {
    std::vector<ClassificationOutcome> out;
    out.reserve(j.size());
    for (const auto& o : j) out.push_back(outcome_from(o));
    return out;
}

SampleBatch batch_from(const json& j) {
    SampleBatch b;
    b.iteration = j.at("iteration").get<int>();
    b.created_from_prompt = j.at("created_from_prompt").get<int>();
    for (const auto& i : j.at("items")) {
        b.items.push_back({i.at("record_id").get<std::string>(), i.at("text").get<std::string>(),
                           i.at("model_label").get<std::string>(), number_from(i.at("confidence")),
                           i.at("class_bucket").get<std::string>()});
    }
    return b;
}

json labeled_json(const LabeledExample& l) {
    return {{"record_id", l.record_id},
            {"expert_label", l.expert_label},
            {"model_label_at_sampling", l.model_label_at_sampling},
            {"confidence_at_sampling", number_or_tag(l.confidence_at_sampling)},
            {"iteration_labeled", l.iteration_labeled}};
}

LabeledExample labeled_from(const json& j) {
    return {j.at("record_id").get<std::string>(), j.at("expert_label").get<std::string>(),
            j.at("model_label_at_sampling").get<std::string>(), number_from(j.at("confidence_at_sampling")),
            j.at("iteration_labeled").get<int>()};
}

json params_json(const SamplingParams& p) {
    return {{"sample_fraction", p.sample_fraction},
            {"per_class_quota", p.per_class_quota},
            {"strategy", std::string(to_string(p.strategy))}};
}

SamplingParams params_from(const json& j) {
    SamplingParams p;
    p.sample_fraction = j.at("sample_fraction").get<double>();
    p.per_class_quota = j.at("per_class_quota").get<int>();
    p.strategy = sampling_strategy_from_string(j.at("strategy").get<std::string>());
    return p;
}

struct PayloadWriter {
    json operator()(const SessionStarted& e) const {
        json records = json::array();
        for (const auto& r : e.corpus->records()) records.push_back(record_json(r));
        return {{"session_id", e.session_id},
                {"corpus", {{"source_name", e.corpus->source_name()}, {"records", std::move(records)}}},
                {"task", {{"classes", e.task.classes()}, {"request", e.task.request()}}},
                {"rng_seed", e.rng_seed},
                {"sampling_params", params_json(e.params)},
                {"initial_prompt", to_json(e.initial_prompt)}};
    }
    json operator()(const BatchBuilt& e) const {
        return {{"iteration", e.iteration},          {"draw_index", e.draw_index},
                {"subsample_ids", e.subsample_ids},  {"outcomes", outcomes_json(e.outcomes)},
                {"batch", to_json(e.batch)},         {"warnings", e.warnings}};
    }
    json operator()(const LabelsSubmitted& e) const {
        json labels = json::array();
        for (const auto& l : e.labels) labels.push_back(labeled_json(l));
        return {{"iteration", e.iteration}, {"labels", std::move(labels)}, {"fewshot_ids", e.fewshot_ids}};
    }
    json operator()(const PromptAdvanced& e) const {
        return {{"version", to_json(e.version)}, {"carried_over", e.carried_over}};
    }
    json operator()(const Finalized& e) const {
        return {{"prompt_version", e.prompt_version}, {"outcomes", outcomes_json(e.outcomes)}};
    }
};

}  // namespace

json to_json(const PromptVersion& p) {
    return {{"version_index", p.version_index},
            {"parent_version", p.parent_version ? json(*p.parent_version) : json(nullptr)},
            {"text", p.text},
            {"fewshot_ids", p.fewshot_ids},
            {"created_at_ms", p.created_at_ms}};
}

json to_json(const ClassificationOutcome& o) {
    return {{"record_id", o.record_id},
            {"predicted_class", o.predicted_class},
            {"token_logprobs", numbers(o.token_logprobs)},
            {"confidence", number_or_tag(o.confidence)},
            {"raw_completion", o.raw_completion},
            {"error", o.error ? json(*o.error) : json(nullptr)}};
}

json to_json(const SampleBatch& b) {
    json items = json::array();
    for (const auto& i : b.items) {
        items.push_back({{"record_id", i.record_id},
                         {"text", i.text},
                         {"model_label", i.model_label},
                         {"confidence", number_or_tag(i.confidence)},
                         {"class_bucket", i.class_bucket}});
    }
    return {{"iteration", b.iteration}, {"created_from_prompt", b.created_from_prompt}, {"items", std::move(items)}};
}

json to_json(const Event& event, long seq) {
    return {{"schema_version", kSchemaVersion},
            {"seq", seq},
            {"type", std::string(event_type_name(event))},
            {"payload", std::visit(PayloadWriter{}, event)}};
}

Event event_from_json(const json& line) {
    const auto version = line.at("schema_version").get<int>();
    if (version != kSchemaVersion) {
        throw VersionMismatch("event log schema version " + std::to_string(version) + ", expected " +
                              std::to_string(kSchemaVersion));
    }
    const auto type = line.at("type").get<std::string>();
    const auto& p = line.at("payload");
    if (type == "SessionStarted") {
        SessionStarted e;
        e.session_id = p.at("session_id").get<std::string>();
        std::vector<Record> records;
        for (const auto& r : p.at("corpus").at("records")) records.push_back(record_from(r));
        e.corpus = std::make_shared<const Corpus>(p.at("corpus").at("source_name").get<std::string>(),
                                                  std::move(records));
        e.task = ClassificationTask(p.at("task").at("classes").get<std::vector<std::string>>(),
                                    p.at("task").at("request").get<std::string>());
        e.rng_seed = p.at("rng_seed").get<std::uint64_t>();
        e.params = params_from(p.at("sampling_params"));
        e.initial_prompt = prompt_from(p.at("initial_prompt"));
        return e;
    }
    if (type == "BatchBuilt") {
        BatchBuilt e;
        e.iteration = p.at("iteration").get<int>();
        e.draw_index = p.at("draw_index").get<std::uint64_t>();
        e.subsample_ids = p.at("subsample_ids").get<std::vector<std::string>>();
        e.outcomes = outcomes_from(p.at("outcomes"));
        e.batch = batch_from(p.at("batch"));
        e.warnings = p.at("warnings").get<std::vector<std::string>>();
        return e;
    }
    if (type == "LabelsSubmitted") {
        LabelsSubmitted e;
        e.iteration = p.at("iteration").get<int>();
        for (const auto& l : p.at("labels")) e.labels.push_back(labeled_from(l));
        e.fewshot_ids = p.at("fewshot_ids").get<std::vector<std::string>>();
        return e;
    }
    if (type == "PromptAdvanced") {
        return PromptAdvanced{prompt_from(p.at("version")), p.at("carried_over").get<bool>()};
    }
    if (type == "Finalized") {
        return Finalized{p.at("prompt_version").get<int>(), outcomes_from(p.at("outcomes"))};
    }
    throw json::other_error::create(501, "unknown event type " + type, &line);
}

json to_json(const stats::MetricsReport& r) {
    json per_class = json::object();
    for (const auto& c : r.classes) {
        const auto& m = r.per_class.at(c);
        per_class[c] = {{"precision", m.precision},
                        {"recall", m.recall},
                        {"f1", m.f1},
                        {"support", m.support},
                        {"precision_undefined", m.precision_undefined},
                        {"recall_undefined", m.recall_undefined},
                        {"f1_undefined", m.f1_undefined}};
    }
    return {{"classes", r.classes},
            {"per_class", std::move(per_class)},
            {"macro", {{"precision", r.macro.precision}, {"recall", r.macro.recall}, {"f1", r.macro.f1}}},
            {"accuracy", r.accuracy},
            {"n_evaluated", r.n_evaluated},
            {"parse_failures", r.parse_failures},
            {"flags", r.flags}};
}

json to_json(const stats::CIResult& ci, bool with_distribution) {
    json j = {{"point_estimate", ci.point_estimate},
              {"lower_95", ci.lower_95},
              {"upper_95", ci.upper_95},
              {"n_resamples", ci.n_resamples},
              {"method", ci.method == stats::CIMethod::Pooled ? "pooled" : "stratified"}};
    if (with_distribution) j["distribution"] = ci.distribution;
    return j;
}

json to_json(const stats::PermutationResult& p) {
    return {{"statistic", p.statistic}, {"p_value", p.p_value}, {"n_perms", p.n_perms}};
}

json to_json(const stats::MannWhitneyResult& m) {
    return {{"u", m.u}, {"p_two_sided", m.p_two_sided}, {"exact", m.exact}};
}

json to_json(const std::map<std::string, stats::SliceReport>& slices) {
    json j = json::object();
    for (const auto& [group, s] : slices) j[group] = {{"n", s.n}, {"low_n", s.low_n}, {"report", to_json(s.report)}};
    return j;
}

json session_summary_json(const Session& s) {
    json prompts = json::array();
    for (const auto& p : s.prompt_history()) prompts.push_back(to_json(p));
    return {{"session_id", s.id()},
            {"status", std::string(to_string(s.status()))},
            {"iteration", s.iteration()},
            {"labeled_count", s.labeled_data().size()},
            {"corpus_size", s.corpus().size()},
            {"classes", s.task().classes()},
            {"request", s.task().request()},
            {"sampling_params", params_json(s.sampling_params())},
            {"current_prompt_version", s.current_prompt().version_index},
            {"pending_batch_size", s.pending_batch() ? s.pending_batch()->items.size() : 0},
            {"warnings", s.warnings()}};
}

// ---- event log ----------------------------------------------------------------

EventLog::EventLog(fs::path path) : path_(std::move(path)) {
    if (fs::exists(path_)) {
        std::ifstream in(path_);
        std::string line;
        while (std::getline(in, line)) {
            if (!trim(line).empty()) ++next_seq_;
        }
    }
}

void EventLog::append(const std::vector<Event>& events) {
    std::string chunk;
    long seq = next_seq_;
    for (const auto& e : events) chunk += to_json(e, seq++).dump() + "\n";
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    if (!out) throw IoError("cannot open event log " + path_.string());
    out << chunk;
    out.flush();
    if (!out) throw IoError("write to event log failed: " + path_.string());
    next_seq_ = seq;
}

EventSink EventLog::sink() {
    return [this](const std::vector<Event>& events) { append(events); };
}

void save_session(const fs::path& path, const std::vector<Event>& events) {
    std::string content;
    long seq = 0;
    for (const auto& e : events) content += to_json(e, seq++).dump() + "\n";
    write_file(path, content);
}

LoadedSession load_session(const fs::path& path, bool salvage) {
    const auto content = slurp(path);
    LoadedSession loaded;
    std::size_t start = 0;
    long line_no = 0;
    while (start < content.size()) {
        auto nl = content.find('\n', start);
        const bool terminated = nl != std::string::npos;
        if (!terminated) nl = content.size();
        const auto line = std::string_view(content).substr(start, nl - start);
        start = nl + 1;
        ++line_no;
        if (trim(line).empty()) continue;
        try {
            if (!terminated) throw CorruptLog("truncated last line", line_no);
            auto ev = event_from_json(json::parse(line));
            loaded.session.apply(ev);
            loaded.events.push_back(std::move(ev));
        } catch (const VersionMismatch&) {
            throw;
        } catch (const std::exception& e) {
            if (!salvage) {
                throw CorruptLog("event log " + path.string() + " line " + std::to_string(line_no) + ": " + e.what(),
                                 line_no);
            }
            loaded.corrupt_line = line_no;
            break;
        }
    }
    if (!loaded.session.started()) {
        throw CorruptLog("event log " + path.string() + " has no SessionStarted event", 1);
    }
    return loaded;
}

// ---- export ---------------------------------------------------------------------

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string results_csv_text(const std::vector<ClassificationOutcome>& outcomes, int prompt_version) {
    std::string results = csv_line({"record_id", "predicted_class", "confidence", "prompt_version"});
    for (const auto& o : outcomes) {
        results += csv_line({o.record_id, o.predicted_class, format_double(o.confidence), std::to_string(prompt_version)});
    }
    return results;
}

std::string labels_csv_text(const std::vector<LabeledExample>& labeled_data) {
    std::string labels =
        csv_line({"record_id", "expert_label", "model_label_at_sampling", "confidence_at_sampling", "iteration_labeled"});
    for (const auto& l : labeled_data) {
        labels += csv_line({l.record_id, l.expert_label, l.model_label_at_sampling,
                            format_double(l.confidence_at_sampling), std::to_string(l.iteration_labeled)});
    }
    return labels;
}

json prompts_json(const std::vector<PromptVersion>& prompt_history) {
    json prompts = json::array();
    for (const auto& p : prompt_history) prompts.push_back(to_json(p));
    return prompts;
}

ExportPaths export_results(const std::vector<ClassificationOutcome>& outcomes, int prompt_version,
                           const std::vector<LabeledExample>& labeled_data,
                           const std::vector<PromptVersion>& prompt_history, const fs::path& dir) {
    ExportPaths paths{dir / "results.csv", dir / "prompts.json", dir / "labels.csv"};
    fs::create_directories(dir);
    write_file(paths.results_csv, results_csv_text(outcomes, prompt_version));
    write_file(paths.prompts_json, prompts_json(prompt_history).dump(2) + "\n");
    write_file(paths.labels_csv, labels_csv_text(labeled_data));
    return paths;
}

ExportPaths export_session(const Session& session, const fs::path& dir) {
    if (session.status() != SessionStatus::Finalized || !session.final_outcomes()) {
        throw StateError("export requires a finalized session");
    }
    return export_results(*session.final_outcomes(), session.final_prompt_version(), session.labeled_data(),
                          session.prompt_history(), dir);
}

std::vector<ResultRow> load_results_csv(const fs::path& path) {
    const auto table = read_csv_file(path);
    auto col = [&](const char* name) {
        auto idx = table.column(name);
        if (!idx) throw CsvError(CsvError::Kind::MissingColumn, std::string("missing column: ") + name);
        return *idx;
    };
    const auto id = col("record_id");
    const auto pred = col("predicted_class");
    const auto conf = col("confidence");
    const auto ver = col("prompt_version");
    std::vector<ResultRow> rows;
    rows.reserve(table.rows.size());
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        try {
            rows.push_back({row[id], row[pred], std::stod(row[conf]), std::stoi(row[ver])});
        } catch (const std::logic_error&) {
            throw CsvError(CsvError::Kind::RowParseError, "row " + std::to_string(r + 2) + ": bad number",
                           {static_cast<long>(r + 2)});
        }
    }
    return rows;
}

}  // namespace annoteer::io
