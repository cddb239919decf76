#include "annoteer/sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "annoteer/hash.hpp"
#include "annoteer/mock_backend.hpp"
#include "annoteer/rng.hpp"

namespace annoteer::sim {

using nlohmann::json;

namespace {

constexpr std::string_view kMarkerOpen = "[sim-exemplar:";

const char* const kActivities[] = {"riding an electric scooter", "riding a bicycle", "on a hoverboard",
                                   "riding a moped",             "on an e-bike",      "skateboarding"};
const char* const kInjuries[] = {"fell and struck head",      "collided with a car",   "lost control on gravel",
                                 "hit a pothole and fell",    "was thrown over handlebars",
                                 "fell turning a corner"};
const char* const kDiagnoses[] = {"head contusion", "concussion", "forearm fracture",
                                  "facial laceration", "wrist sprain", "scalp abrasion"};
const char* const kRaces[] = {"White", "Black", "Asian", "Other", ""};

std::string cue_for(const std::string& label, Rng& rng, bool hard) {
    const auto l = to_lower(label);
    if (l.find("no ") == 0 || l.find("without") != std::string::npos) {
        return hard ? (rng.coin() ? "helmet found at scene, not on pt" : "pt states helmet was in bag")
                    : (rng.coin() ? "no helmet" : "unhelmeted");
    }
    if (l.find("not mentioned") != std::string::npos) {
        return hard ? (rng.coin() ? "protective gear unk" : "hlmt status not documented") : "";
    }
    return hard ? (rng.coin() ? "helmet cracked" : "had hlmt on, strap loose")
                : (rng.coin() ? "wearing helmet" : "+helmet");
}

double clamp(double v, double lo, double hi) { return std::max(lo, std::min(hi, v)); }

}  // namespace

SimWorld SimWorld::generate(const WorldSpec& spec) {
    if (spec.classes.size() < 2 || spec.class_weights.size() != spec.classes.size()) {
        throw ValidationError("simulation world needs >=2 classes with one weight each");
    }
    SimWorld w;
    w.classes_ = spec.classes;
    Rng rng({spec.seed, stream_tag("sim-world")});

    struct Cluster {
        std::size_t label;
        double hardness;
        bool hard;
    };
    std::vector<Cluster> clusters;
    const double weight_sum = std::accumulate(spec.class_weights.begin(), spec.class_weights.end(), 0.0);
    for (int k = 0; k < spec.n_clusters; ++k) {
        double x = rng.unit() * weight_sum;
        std::size_t label = 0;
        while (label + 1 < spec.classes.size() && x >= spec.class_weights[label]) x -= spec.class_weights[label++];
        const bool hard = rng.unit() < spec.hard_cluster_fraction;
        const double hardness = hard ? 0.55 + 0.35 * rng.unit() : 0.02 + 0.23 * rng.unit();
        clusters.push_back({label, hardness, hard});
    }

    w.records_.reserve(spec.n_records);
    for (std::size_t i = 0; i < spec.n_records; ++i) {
        const auto k = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.n_clusters)));
        const auto& c = clusters[static_cast<std::size_t>(k)];
        SimRecord r;
        char id[32];
        std::snprintf(id, sizeof id, "s%06zu", i + 1);
        r.id = id;
        r.cluster = k;
        r.true_label = spec.classes[c.label];
        const auto wrong_offset = 1 + rng.below(spec.classes.size() - 1);
        r.wrong_label = spec.classes[(c.label + wrong_offset) % spec.classes.size()];
        r.difficulty = clamp(c.hardness + 0.16 * (rng.unit() - 0.5), 0.0, 1.0);
        r.error_draw = rng.unit();
        r.confidence_noise = 2.0 * rng.unit() - 1.0;
        const int age = 8 + static_cast<int>(rng.below(60));
        const bool male = rng.coin();
        r.metadata["Sex"] = male ? "Male" : "Female";
        r.metadata["Race"] = kRaces[rng.below(5)];
        std::string text = std::to_string(age) + "YO" + (male ? "M" : "F") + " " +
                           kActivities[(static_cast<std::size_t>(k) * 7 + rng.below(2)) % 6] + ", " +
                           kInjuries[rng.below(6)];
        const auto cue = cue_for(r.true_label, rng, c.hard);
        if (!cue.empty()) text += ", " + cue;
        text += ". DX: " + std::string(kDiagnoses[rng.below(6)]) + ". pattern " + std::to_string(k) + " ref #" + r.id;
        r.text = std::move(text);
        w.records_.push_back(std::move(r));
    }
    w.index();
    return w;
}

void SimWorld::index() {
    by_hash_.clear();
    by_id_.clear();
    for (std::size_t i = 0; i < records_.size(); ++i) {
        by_hash_[sha256_hex(records_[i].text)] = i;
        by_id_[records_[i].id] = i;
    }
}

json SimWorld::to_json() const {
    json recs = json::array();
    for (const auto& r : records_) {
        recs.push_back({{"id", r.id},
                        {"text", r.text},
                        {"true_label", r.true_label},
                        {"wrong_label", r.wrong_label},
                        {"cluster", r.cluster},
                        {"difficulty", r.difficulty},
                        {"error_draw", r.error_draw},
                        {"confidence_noise", r.confidence_noise},
                        {"metadata", r.metadata}});
    }
    return {{"classes", classes_},
            {"model",
             {{"error_scale", model_.error_scale},
              {"max_error", model_.max_error},
              {"exemplar_decay", model_.exemplar_decay},
              {"noise_amplitude", model_.noise_amplitude}}},
            {"records", std::move(recs)}};
}

SimWorld SimWorld::from_json(const json& j) {
    SimWorld w;
    w.classes_ = j.at("classes").get<std::vector<std::string>>();
    if (j.contains("model")) {
        const auto& m = j.at("model");
        w.model_.error_scale = m.value("error_scale", w.model_.error_scale);
        w.model_.max_error = m.value("max_error", w.model_.max_error);
        w.model_.exemplar_decay = m.value("exemplar_decay", w.model_.exemplar_decay);
        w.model_.noise_amplitude = m.value("noise_amplitude", w.model_.noise_amplitude);
    }
    for (const auto& r : j.at("records")) {
        SimRecord s;
        s.id = r.at("id").get<std::string>();
        s.text = r.at("text").get<std::string>();
        s.true_label = r.at("true_label").get<std::string>();
        s.wrong_label = r.at("wrong_label").get<std::string>();
        s.cluster = r.at("cluster").get<int>();
        s.difficulty = r.at("difficulty").get<double>();
        s.error_draw = r.at("error_draw").get<double>();
        s.confidence_noise = r.at("confidence_noise").get<double>();
        s.metadata = r.value("metadata", std::map<std::string, std::string>{});
        w.records_.push_back(std::move(s));
    }
    w.index();
    return w;
}

SimWorld SimWorld::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open simulation world: " + path);
    json j;
    in >> j;
    return from_json(j);
}

void SimWorld::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write simulation world: " + path);
    out << to_json().dump() << "\n";
}

Corpus SimWorld::corpus() const {
    std::vector<Record> recs;
    recs.reserve(records_.size());
    for (const auto& r : records_) recs.push_back({r.id, r.text, r.metadata});
    return Corpus("simulated", std::move(recs));
}

std::map<std::string, std::string> SimWorld::truth() const {
    std::map<std::string, std::string> out;
    for (const auto& r : records_) out[r.id] = r.true_label;
    return out;
}

const SimRecord* SimWorld::by_text(const std::string& text) const {
    auto it = by_hash_.find(sha256_hex(text));
    return it == by_hash_.end() ? nullptr : &records_[it->second];
}

const SimRecord* SimWorld::by_id(const std::string& id) const {
    auto it = by_id_.find(id);
    return it == by_id_.end() ? nullptr : &records_[it->second];
}

double SimWorld::error_probability(const SimRecord& r, int exemplars_in_cluster) const {
    const double base = std::min(model_.max_error, model_.error_scale * r.difficulty * r.difficulty);
    return base * std::pow(model_.exemplar_decay, exemplars_in_cluster);
}

double SimWorld::confidence(const SimRecord& r, int exemplars_in_cluster) const {
    const double effective = r.difficulty * std::pow(model_.exemplar_decay, exemplars_in_cluster);
    return clamp(1.0 - effective + model_.noise_amplitude * r.confidence_noise, 0.02, 0.999);
}

std::string exemplar_marker(const std::string& record_id) { return std::string(kMarkerOpen) + record_id + "]"; }

std::vector<std::string> exemplar_ids(const std::string& prompt_text) {
    std::vector<std::string> ids;
    std::size_t pos = 0;
    while ((pos = prompt_text.find(kMarkerOpen, pos)) != std::string::npos) {
        const auto start = pos + kMarkerOpen.size();
        const auto close = prompt_text.find(']', start);
        if (close == std::string::npos) break;
        ids.push_back(prompt_text.substr(start, close - start));
        pos = close + 1;
    }
    return ids;
}

SimBackend::SimBackend(std::shared_ptr<const SimWorld> world) : world_(std::move(world)) {
    if (!world_) throw Error("simulation backend needs a world");
}

llm::CompletionResponse SimBackend::complete(const llm::CompletionRequest& request) {
    switch (request.purpose) {
        case llm::CallPurpose::GenerateInitialPrompt: {
            llm::CompletionResponse resp;
            resp.text = llm::ScriptedBackend::default_prompt(world_->classes(), "");
            resp.model_id = "simulator";
            return resp;
        }
        case llm::CallPurpose::UpdatePrompt: return refine(request);
        default: return classify(request);
    }
}

llm::CompletionResponse SimBackend::refine(const llm::CompletionRequest& request) const {
    std::set<std::string> ids;
    for (auto& id : exemplar_ids(request.user_text)) ids.insert(std::move(id));
    for (const auto& r : world_->records()) {
        if (request.user_text.find(r.text) != std::string::npos) ids.insert(r.id);
    }
    llm::CompletionResponse resp;
    resp.text = llm::ScriptedBackend::default_prompt(world_->classes(), "");
    if (!ids.empty()) {
        resp.text += "Worked examples from expert review:\n";
        for (const auto& id : ids) {
            const auto* r = world_->by_id(id);
            resp.text += exemplar_marker(id) + (r ? " -> " + r->true_label : std::string{}) + "\n";
        }
    }
    resp.model_id = "simulator";
    return resp;
}

llm::CompletionResponse SimBackend::classify(const llm::CompletionRequest& request) const {
    const auto* rec = world_->by_text(request.user_text);
    if (!rec) throw llm::RequestRejected("simulator does not know this record");
    int m = 0;
    for (const auto& id : exemplar_ids(request.system_text)) {
        const auto* ex = world_->by_id(id);
        if (ex && ex->cluster == rec->cluster) ++m;
    }
    const bool wrong = rec->error_draw < world_->error_probability(*rec, m);
    const auto& label = wrong ? rec->wrong_label : rec->true_label;
    const double conf = world_->confidence(*rec, m);

    llm::CompletionResponse resp;
    resp.model_id = "simulator";
    const std::string reasoning = "The record describes the mechanism of injury and protective equipment. ";
    resp.text = reasoning + "\nANSWER: " + label;

    // Logprobs whose mean is exactly log(conf): pairs of (base + delta, base - delta).
    const double base = std::log(conf);
    const double delta = 0.3 * -base;
    const std::size_t n = 12 + (sha256_u64(rec->id) % 20);
    std::vector<double> lps;
    lps.reserve(n);
    for (std::size_t i = 0; i + 1 < n; i += 2) {
        lps.push_back(base + delta);
        lps.push_back(base - delta);
    }
    if (lps.size() < n) lps.push_back(base);
    const std::size_t k = n - 2;
    const std::size_t chunk = (reasoning.size() + 1 + k - 1) / k;
    const std::string head = reasoning + "\n";
    for (std::size_t i = 0; i < k; ++i) resp.tokens.push_back(head.substr(std::min(head.size(), i * chunk), chunk));
    resp.tokens.push_back("ANSWER:");
    resp.tokens.push_back(" " + label);
    resp.token_logprobs = std::move(lps);
    resp.usage.completion_tokens = static_cast<int>(n);
    return resp;
}

}  // namespace annoteer::sim
