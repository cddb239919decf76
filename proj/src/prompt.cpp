#include "annoteer/prompt.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

#include "annoteer/default_templates.hpp"
#include "annoteer/rng.hpp"

namespace annoteer::prompt {

namespace {

struct SlotOccurrence {
    std::string name;
    std::size_t begin;
    std::size_t end;
};

std::vector<SlotOccurrence> scan_slots(const std::string& text) {
    std::vector<SlotOccurrence> out;
    std::size_t pos = 0;
    while ((pos = text.find("{{", pos)) != std::string::npos) {
        const auto close = text.find("}}", pos + 2);
        if (close == std::string::npos) break;
        out.push_back({trim(text.substr(pos + 2, close - pos - 2)), pos, close + 2});
        pos = close + 2;
    }
    return out;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open template file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

std::string bullet_list(const std::vector<std::string>& items) {
    std::string out;
    for (const auto& i : items) out += "- " + i + "\n";
    if (!out.empty()) out.pop_back();
    return out;
}

std::string clip(const std::string& text) {
    if (text.size() <= kFewShotMaxChars) return text;
    return text.substr(0, kFewShotMaxChars) + std::string(kTruncationMarker);
}

std::string display_label(const std::string& label) {
    return is_parse_failure(label) ? std::string("(no readable answer)") : label;
}

// Strips decoration models like to put around the answer value.
std::string clean_answer_value(std::string v) {
    v = trim(v);
    auto strip = [](std::string& s, std::string_view chars) {
        while (!s.empty() && chars.find(s.front()) != std::string_view::npos) s.erase(s.begin());
        while (!s.empty() && chars.find(s.back()) != std::string_view::npos) s.pop_back();
    };
    strip(v, "*_`\"'");
    v = trim(v);
    while (!v.empty() && v.back() == '.') v.pop_back();
    return trim(v);
}

// Value after "ANSWER:" when the line is an answer line.
std::optional<std::string> answer_line_value(std::string_view line) {
    std::string t = trim(line);
    std::size_t i = 0;
    while (i < t.size() && std::string_view("*_`#> -").find(t[i]) != std::string_view::npos) ++i;
    t = t.substr(i);
    static constexpr std::string_view kKey = "answer";
    if (t.size() < kKey.size() || to_lower(t.substr(0, kKey.size())) != kKey) return std::nullopt;
    std::size_t j = kKey.size();
    while (j < t.size() && (t[j] == '*' || t[j] == ' ')) ++j;
    if (j >= t.size() || t[j] != ':') return std::nullopt;
    return clean_answer_value(t.substr(j + 1));
}

}  // namespace

SlotTemplate::SlotTemplate(std::string text, std::vector<std::string> slots)
    : text_(std::move(text)), slots_(std::move(slots)) {
    std::map<std::string, int> counts;
    for (const auto& occ : scan_slots(text_)) ++counts[occ.name];
    for (const auto& s : slots_) {
        const auto n = counts[s];
        if (n != 1) {
            throw ValidationError("template slot {{" + s + "}} must occur exactly once, found " + std::to_string(n));
        }
    }
    for (const auto& [name, n] : counts) {
        if (std::find(slots_.begin(), slots_.end(), name) == slots_.end()) {
            throw ValidationError("template contains undeclared slot {{" + name + "}}");
        }
    }
}

std::string SlotTemplate::render(const std::map<std::string, std::string>& values) const {
    std::string out;
    std::size_t cursor = 0;
    for (const auto& occ : scan_slots(text_)) {
        auto it = values.find(occ.name);
        if (it == values.end()) throw ValidationError("no value for template slot {{" + occ.name + "}}");
        out.append(text_, cursor, occ.begin - cursor);
        out += it->second;
        cursor = occ.end;
    }
    out.append(text_, cursor, std::string::npos);
    return out;
}

MetaPromptTemplates MetaPromptTemplates::defaults() {
    return {SlotTemplate(std::string(kDefaultInitialTemplate), {"classes", "request", "corpus_sample"}),
            SlotTemplate(std::string(kDefaultUpdateTemplate), {"previous_prompt", "fewshot_block"})};
}

MetaPromptTemplates MetaPromptTemplates::load(const std::string& initial_path, const std::string& update_path) {
    auto t = defaults();
    if (!initial_path.empty()) {
        t.initial_generation = SlotTemplate(read_file(initial_path), {"classes", "request", "corpus_sample"});
    }
    if (!update_path.empty()) {
        t.update = SlotTemplate(read_file(update_path), {"previous_prompt", "fewshot_block"});
    }
    return t;
}

std::int64_t system_clock_ms() {
    using namespace std::chrono;
    return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

Clock logical_clock() {
    auto counter = std::make_shared<std::atomic<std::int64_t>>(0);
    return [counter] { return counter->fetch_add(1); };
}

std::vector<std::size_t> corpus_sample_indices(const Corpus& corpus, std::uint64_t rng_seed) {
    Rng rng({rng_seed, stream_tag("initial-prompt-corpus-sample")});
    return rng.choose(corpus.size(), std::min(kCorpusSampleSize, corpus.size()));
}

llm::CompletionRequest initial_prompt_request(const PromptEngine& engine, const ClassificationTask& task,
                                              const Corpus& corpus, std::uint64_t rng_seed) {
    if (corpus.empty()) throw ValidationError("cannot generate an initial prompt from an empty corpus");
    std::ostringstream sample;
    int n = 0;
    for (auto idx : corpus_sample_indices(corpus, rng_seed)) {
        if (n) sample << "\n\n";
        sample << "Record " << ++n << ":\n" << clip(corpus.records()[idx].text);
    }
    llm::CompletionRequest req;
    req.system_text = "You are an expert prompt engineer for text classification.";
    req.user_text = engine.templates.initial_generation.render(
        {{"classes", bullet_list(task.classes())}, {"request", task.request()}, {"corpus_sample", sample.str()}});
    req.max_tokens = llm::kMetaPromptMaxTokens;
    req.purpose = llm::CallPurpose::GenerateInitialPrompt;
    return req;
}

void check_generated_prompt(const std::string& text, const ClassificationTask& task) {
    if (trim(text).empty()) throw GenerationRejected("generated prompt is empty");
    const auto lower = to_lower(text);
    for (const auto& c : task.classes()) {
        if (lower.find(to_lower(c)) == std::string::npos) {
            throw GenerationRejected("generated prompt does not mention class \"" + c + "\"");
        }
    }
    if (text.find("ANSWER:") == std::string::npos) {
        throw GenerationRejected("generated prompt does not require the ANSWER: line");
    }
}

PromptVersion generate_initial_prompt(const PromptEngine& engine, const ClassificationTask& task,
                                      const Corpus& corpus, const llm::Gateway& gateway, std::uint64_t rng_seed) {
    const auto resp = gateway.complete(initial_prompt_request(engine, task, corpus, rng_seed));
    check_generated_prompt(resp.text, task);
    PromptVersion p;
    p.version_index = 0;
    p.text = resp.text;
    p.created_at_ms = engine.clock();
    return p;
}

std::string render_fewshot_block(const std::vector<FewShotExample>& few_shots) {
    std::ostringstream out;
    for (std::size_t i = 0; i < few_shots.size(); ++i) {
        const auto& fs = few_shots[i];
        if (i) out << "\n\n";
        out << "Example " << (i + 1) << "\n"
            << "Text: " << clip(fs.text) << "\n"
            << "Model's label (wrong): " << display_label(fs.wrong_model_label) << "\n"
            << "Expert's label (correct): " << fs.correct_expert_label;
    }
    return out.str();
}

llm::CompletionRequest update_prompt_request(const PromptEngine& engine, const PromptVersion& previous,
                                             const std::vector<FewShotExample>& few_shots) {
    llm::CompletionRequest req;
    req.system_text = "You are an expert prompt engineer for text classification.";
    req.user_text = engine.templates.update.render(
        {{"previous_prompt", previous.text}, {"fewshot_block", render_fewshot_block(few_shots)}});
    req.max_tokens = llm::kMetaPromptMaxTokens;
    req.purpose = llm::CallPurpose::UpdatePrompt;
    return req;
}

PromptVersion update_prompt(const PromptEngine& engine, const PromptVersion& previous,
                            const std::vector<FewShotExample>& few_shots, const ClassificationTask& task,
                            const llm::Gateway& gateway) {
    if (few_shots.empty()) throw ValidationError("update_prompt needs at least one misclassified example");
    const auto resp = gateway.complete(update_prompt_request(engine, previous, few_shots));
    check_generated_prompt(resp.text, task);
    PromptVersion p;
    p.version_index = previous.version_index + 1;
    p.parent_version = previous.version_index;
    p.text = resp.text;
    for (const auto& fs : few_shots) p.fewshot_ids.push_back(fs.record_id);
    p.created_at_ms = engine.clock();
    return p;
}

llm::CompletionRequest render_classification_messages(const PromptVersion& prompt, const Record& record) {
    llm::CompletionRequest req;
    req.system_text = prompt.text;
    req.user_text = record.text;
    req.temperature = 0.0;
    req.top_p = 1.0;
    req.want_logprobs = true;
    req.max_tokens = llm::kClassifyMaxTokens;
    req.purpose = llm::CallPurpose::Classify;
    return req;
}

llm::CompletionRequest render_repair_messages(const PromptVersion& prompt, const Record& record,
                                              const ClassificationTask& task) {
    auto req = render_classification_messages(prompt, record);
    std::string names;
    for (const auto& c : task.classes()) names += (names.empty() ? "" : ", ") + c;
    req.system_text += "\n\nYour previous response did not end with a readable answer. Respond with only one line "
                       "of the form\nANSWER: <class>\nwhere <class> is exactly one of: " +
                       names + ".";
    req.purpose = llm::CallPurpose::RepairAnswer;
    return req;
}

std::string parse_answer(std::string_view completion, const ClassificationTask& task) {
    std::vector<std::string_view> lines;
    std::size_t start = 0;
    while (start <= completion.size()) {
        auto nl = completion.find('\n', start);
        if (nl == std::string_view::npos) nl = completion.size();
        lines.push_back(completion.substr(start, nl - start));
        start = nl + 1;
    }
    for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
        if (auto value = answer_line_value(*it)) {
            if (auto c = task.canonical(*value)) return *c;
            break;
        }
    }

    // Fallback: exactly one class mentioned anywhere, as a whole word sequence,
    // ignoring mentions that sit inside a mention of a longer class.
    const auto hay = to_lower(completion);
    struct Span {
        std::size_t begin, end, cls;
    };
    std::vector<Span> spans;
    for (std::size_t ci = 0; ci < task.classes().size(); ++ci) {
        const auto needle = to_lower(task.classes()[ci]);
        for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) {
            const auto end = pos + needle.size();
            const bool left_ok = pos == 0 || !is_word_char(hay[pos - 1]);
            const bool right_ok = end == hay.size() || !is_word_char(hay[end]);
            if (left_ok && right_ok) spans.push_back({pos, end, ci});
        }
    }
    std::set<std::size_t> mentioned;
    for (const auto& s : spans) {
        const bool nested = std::any_of(spans.begin(), spans.end(), [&](const Span& o) {
            return o.cls != s.cls && o.begin <= s.begin && s.end <= o.end && (o.end - o.begin) > (s.end - s.begin);
        });
        if (!nested) mentioned.insert(s.cls);
    }
    if (mentioned.size() == 1) return task.classes()[*mentioned.begin()];
    return std::string(kParseFailure);
}

}  // namespace annoteer::prompt
