#pragma once

// Experiment orchestration: datasets, model construction, per-sample
// attribution, metrics, and on-disk outputs.
//
// Output directory layout:
//   results.jsonl        one record per sample x method, sorted by (id, method)
//   summary.csv          faithfulness table (methods x Soft-NS/Soft-NC/log ratios)
//   answerability.jsonl  per-sample judge records (when a judge is used)
//   answerability.csv    rate/score per method
//   heatmaps.html        per-token attribution heatmaps
//   manifest.json        run configuration, hash, status and timestamps

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "noiser/answerability.hpp"
#include "noiser/baselines.hpp"
#include "noiser/bridge.hpp"
#include "noiser/faithfulness.hpp"
#include "noiser/heatmap.hpp"
#include "noiser/judge_http.hpp"
#include "noiser/noiser.hpp"
#include "noiser/toy_transformer.hpp"

namespace noiser {

inline constexpr std::string_view kToolVersion = "0.1.0";

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Datasets

struct Sample {
  std::string id;
  std::string prompt;
  std::optional<std::string> gold;
  std::optional<std::string> category;

  friend bool operator==(const Sample&, const Sample&) = default;
};

enum class DatasetFormat { KnownJson, PromptJsonl };

inline DatasetFormat parse_format(std::string_view s) {
  if (s == "known") return DatasetFormat::KnownJson;
  if (s == "jsonl") return DatasetFormat::PromptJsonl;
  throw Error("unknown dataset format: " + std::string(s));
}

inline std::string_view to_string(DatasetFormat f) {
  return f == DatasetFormat::KnownJson ? "known" : "jsonl";
}

inline std::optional<std::string> optional_string(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  const auto& v = j.at(key);
  return v.is_string() ? v.get<std::string>() : v.dump();
}

/// Known-style files are a JSON array of {prompt, attribute, known_id?, ...};
/// prompt JSONL files carry one {id?, prompt, gold?, category?} per line.
inline std::vector<Sample> load_dataset(const fs::path& path, DatasetFormat format,
                                        std::ostream& warnings = std::cerr) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  std::vector<Sample> out;
  if (trim(text).empty()) {
    warnings << "warning: dataset " << path.string() << " is empty\n";
    return out;
  }

  if (format == DatasetFormat::KnownJson) {
    json doc;
    try {
      doc = json::parse(text);
    } catch (const json::parse_error& e) {
      throw Error("malformed Known dataset " + path.string() + ": " + e.what());
    }
    require(doc.is_array(), "Known dataset must be a JSON array");
    for (std::size_t i = 0; i < doc.size(); ++i) {
      const auto& rec = doc[i];
      const auto where = "record " + std::to_string(i + 1);
      if (!rec.is_object()) throw Error(where + ": not an object");
      auto prompt = optional_string(rec, "prompt");
      auto gold = optional_string(rec, "attribute");
      if (!gold) gold = optional_string(rec, "gold");
      if (!prompt || prompt->empty()) throw Error(where + ": missing prompt");
      if (!gold) throw Error(where + ": missing attribute");
      Sample s;
      s.id = optional_string(rec, "known_id").value_or(std::to_string(i));
      s.prompt = *prompt;
      s.gold = *gold;
      s.category = optional_string(rec, "relation_id");
      out.push_back(std::move(s));
    }
    return out;
  }

  std::istringstream lines(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto where = "line " + std::to_string(lineno);
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw Error(where + ": malformed JSON: " + e.what());
    }
    if (!rec.is_object()) throw Error(where + ": not an object");
    auto prompt = optional_string(rec, "prompt");
    if (!prompt || prompt->empty()) throw Error(where + ": missing prompt");
    Sample s;
    s.id = optional_string(rec, "id").value_or(std::to_string(lineno));
    s.prompt = *prompt;
    s.gold = optional_string(rec, "gold");
    s.category = optional_string(rec, "category");
    out.push_back(std::move(s));
  }
  return out;
}

/// Keeps samples whose greedy next token matches the first token of the gold
/// text (trimmed, case-folded).
inline std::vector<Sample> filter_correct(const LanguageModel& model, const std::vector<Sample>& samples) {
  std::vector<Sample> kept;
  for (const auto& s : samples) {
    require(s.gold.has_value(), "sample " + s.id + " has no gold answer");
    const auto gold = trim(*s.gold);
    if (gold.empty()) continue;
    const auto gold_first = model.tokenize(gold)[0];
    const auto pred = greedy_next(model, model.tokenize(s.prompt));
    if (casefold(trim(model.token_text(pred.token))) == casefold(trim(model.token_text(gold_first)))) {
      kept.push_back(s);
    }
  }
  return kept;
}

// ---------------------------------------------------------------------------
// Models

/// "toy:<seed>" or "bridge:<host:port | stdio:command>".
inline std::unique_ptr<LanguageModel> make_model(const std::string& spec) {
  if (spec.rfind("toy:", 0) == 0) {
    std::uint64_t seed = 0;
    try {
      seed = std::stoull(spec.substr(4));
    } catch (const std::exception&) {
      throw Error("invalid toy seed in model spec: " + spec);
    }
    return std::make_unique<ToyTransformer>(seed);
  }
  if (spec.rfind("bridge:", 0) == 0) return std::make_unique<RemoteModel>(spec.substr(7));
  throw Error("unknown model spec: " + spec + " (expected toy:<seed> or bridge:<addr>)");
}

// ---------------------------------------------------------------------------
// Result records

struct ResultRecord {
  std::string id;
  std::string prompt;
  std::vector<std::string> tokens;
  std::vector<TokenId> token_ids;
  std::string target;
  TokenId target_id = 0;
  std::optional<std::string> gold;
  std::optional<std::string> category;
  Method method = Method::Noiser;
  Bounding bounding = Bounding::None;
  std::vector<double> scores;
  std::optional<std::vector<double>> k_values;
  std::optional<double> k_min;
  std::vector<bool> saturated;
  std::vector<std::uint64_t> seeds;
  std::optional<double> soft_ns;
  std::optional<double> soft_nc;
  std::optional<std::vector<StepMetrics>> per_step;

  friend bool operator==(const ResultRecord& a, const ResultRecord& b) {
    return to_json(a) == to_json(b);
  }

  static json to_json(const ResultRecord& r) {
    json j = {{"id", r.id},
              {"prompt", r.prompt},
              {"tokens", r.tokens},
              {"token_ids", r.token_ids},
              {"target", r.target},
              {"target_id", r.target_id},
              {"method", to_string(r.method)},
              {"bounding", to_string(r.bounding)},
              {"scores", r.scores},
              {"seeds", r.seeds}};
    if (r.gold) j["gold"] = *r.gold;
    if (r.category) j["category"] = *r.category;
    if (r.k_values) j["k_values"] = *r.k_values;
    if (r.k_min) j["k_min"] = *r.k_min;
    if (!r.saturated.empty()) j["saturated"] = r.saturated;
    if (r.soft_ns) j["soft_ns"] = *r.soft_ns;
    if (r.soft_nc) j["soft_nc"] = *r.soft_nc;
    if (r.per_step) {
      json steps = json::array();
      for (const auto& s : *r.per_step) {
        steps.push_back({{"soft_ns", s.soft_ns}, {"soft_nc", s.soft_nc},
                         {"delta_p_zero", s.delta_p_zero}, {"next_token", s.next_token}});
      }
      j["per_step"] = std::move(steps);
    }
    return j;
  }

  static ResultRecord from_json(const json& j) {
    ResultRecord r;
    r.id = j.at("id").get<std::string>();
    r.prompt = j.at("prompt").get<std::string>();
    r.tokens = j.at("tokens").get<std::vector<std::string>>();
    r.token_ids = j.at("token_ids").get<std::vector<TokenId>>();
    r.target = j.at("target").get<std::string>();
    r.target_id = j.at("target_id").get<TokenId>();
    r.method = parse_method(j.at("method").get<std::string>());
    r.bounding = parse_bounding(j.at("bounding").get<std::string>());
    r.scores = j.at("scores").get<std::vector<double>>();
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    r.gold = optional_string(j, "gold");
    r.category = optional_string(j, "category");
    if (j.contains("k_values")) r.k_values = j.at("k_values").get<std::vector<double>>();
    if (j.contains("k_min")) r.k_min = j.at("k_min").get<double>();
    if (j.contains("saturated")) r.saturated = j.at("saturated").get<std::vector<bool>>();
    if (j.contains("soft_ns")) r.soft_ns = j.at("soft_ns").get<double>();
    if (j.contains("soft_nc")) r.soft_nc = j.at("soft_nc").get<double>();
    if (j.contains("per_step")) {
      std::vector<StepMetrics> steps;
      for (const auto& s : j.at("per_step")) {
        steps.push_back({s.at("soft_ns").get<double>(), s.at("soft_nc").get<double>(),
                         s.at("delta_p_zero").get<double>(), s.at("next_token").get<TokenId>()});
      }
      r.per_step = std::move(steps);
    }
    return r;
  }
};

inline void sort_records(std::vector<ResultRecord>& records) {
  std::sort(records.begin(), records.end(), [](const ResultRecord& a, const ResultRecord& b) {
    if (a.id != b.id) return a.id < b.id;
    return to_string(a.method) < to_string(b.method);
  });
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

inline void write_results(const fs::path& path, const std::vector<ResultRecord>& records) {
  std::string text;
  for (const auto& r : records) text += ResultRecord::to_json(r).dump() + "\n";
  write_text(path, text);
}

inline std::vector<ResultRecord> read_results(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open results: " + path.string());
  std::vector<ResultRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(ResultRecord::from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw Error(path.string() + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

struct RunManifest {
  std::string model = "toy:0";
  std::vector<Method> methods = {Method::Noiser};
  Bounding bounding = Bounding::KMin;
  std::uint64_t seed = 0;
  std::size_t noise_samples = 10;
  std::size_t bisect_steps = 10;
  std::size_t lime_samples = 200;
  std::string dataset;
  DatasetFormat format = DatasetFormat::PromptJsonl;
  bool filter_correct = false;
  bool faithfulness = false;
  std::size_t horizon = 1;
  std::size_t mask_draws = 10;
  bool answerability = false;
  double top_percent = 50.0;
  int top_n = 1;
  std::string judge_url;
  std::string judge_model = "Llama-3.3-70B-Instruct-Turbo";
  bool html = false;
  std::string out_dir = "out";
  std::size_t threads = 1;
  std::string tool_version = std::string(kToolVersion);

  json to_json() const {
    std::vector<std::string> m;
    for (auto x : methods) m.emplace_back(to_string(x));
    return {{"model", model},       {"methods", m},
            {"bounding", to_string(bounding)},
            {"seed", seed},         {"noise_samples", noise_samples},
            {"bisect_steps", bisect_steps},
            {"lime_samples", lime_samples},
            {"dataset", dataset},   {"format", to_string(format)},
            {"filter_correct", filter_correct},
            {"faithfulness", faithfulness},
            {"horizon", horizon},   {"mask_draws", mask_draws},
            {"answerability", answerability},
            {"top_percent", top_percent},
            {"top_n", top_n},       {"judge_url", judge_url},
            {"judge_model", judge_model},
            {"html", html},         {"out_dir", out_dir},
            {"threads", threads},   {"tool_version", tool_version}};
  }

  static RunManifest from_json(const json& j) {
    RunManifest m;
    m.model = j.value("model", m.model);
    if (j.contains("methods")) {
      m.methods.clear();
      for (const auto& s : j.at("methods")) m.methods.push_back(parse_method(s.get<std::string>()));
    }
    m.bounding = parse_bounding(j.value("bounding", std::string(to_string(m.bounding))));
    m.seed = j.value("seed", m.seed);
    m.noise_samples = j.value("noise_samples", m.noise_samples);
    m.bisect_steps = j.value("bisect_steps", m.bisect_steps);
    m.lime_samples = j.value("lime_samples", m.lime_samples);
    m.dataset = j.value("dataset", m.dataset);
    m.format = parse_format(j.value("format", std::string(to_string(m.format))));
    m.filter_correct = j.value("filter_correct", m.filter_correct);
    m.faithfulness = j.value("faithfulness", m.faithfulness);
    m.horizon = j.value("horizon", m.horizon);
    m.mask_draws = j.value("mask_draws", m.mask_draws);
    m.answerability = j.value("answerability", m.answerability);
    m.top_percent = j.value("top_percent", m.top_percent);
    m.top_n = j.value("top_n", m.top_n);
    m.judge_url = j.value("judge_url", m.judge_url);
    m.judge_model = j.value("judge_model", m.judge_model);
    m.html = j.value("html", m.html);
    m.out_dir = j.value("out_dir", m.out_dir);
    m.threads = j.value("threads", m.threads);
    m.tool_version = j.value("tool_version", m.tool_version);
    return m;
  }

  void validate() const {
    require(!methods.empty(), "no attribution method selected");
    require(noise_samples >= 1 && bisect_steps >= 1, "noise_samples and bisect_steps must be >= 1");
    require(horizon >= 1, "horizon must be >= 1");
    require(mask_draws >= 1, "mask_draws must be >= 1");
    require(top_percent > 0.0 && top_percent <= 100.0, "top_percent must lie in (0, 100]");
    require(top_n == 1 || top_n == 5, "top_n must be 1 or 5");
  }
};

/// FNV-1a 64-bit digest, hex encoded.
inline std::string fnv1a_hex(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline std::string manifest_hash(const RunManifest& m) { return fnv1a_hex(m.to_json().dump()); }

inline void write_manifest_sidecar(const RunManifest& m, const fs::path& dir, const std::string& status,
                                   const std::string& error = {}) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::ostringstream ts;
  ts << std::put_time(std::gmtime(&now), "%Y-%m-%dT%H:%M:%SZ");
  char host[256] = {};
  ::gethostname(host, sizeof host - 1);
  json j = {{"manifest", m.to_json()},
            {"hash", manifest_hash(m)},
            {"status", status},
            {"timestamp", ts.str()},
            {"host", host}};
  if (!error.empty()) j["error"] = error;
  write_text(dir / "manifest.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Attribution over a dataset

/// Seed for (run seed, sample id); independent of sample order.
inline std::uint64_t sample_seed(std::uint64_t run_seed, const std::string& id) {
  return derive_seed(run_seed, std::stoull(fnv1a_hex(id), nullptr, 16));
}

inline AttributionResult run_method(const LanguageModel& model, const TokenSequence& tokens, Method method,
                                    const RunManifest& m, std::uint64_t seed) {
  switch (method) {
    case Method::Noiser: {
      NoiserConfig cfg;
      cfg.n_noise = m.noise_samples;
      cfg.bisect_steps = m.bisect_steps;
      cfg.bounding = m.bounding;
      cfg.base_seed = seed;
      return attribute(model, tokens, cfg);
    }
    case Method::Occlusion: return occlusion(model, tokens);
    case Method::Lime: {
      LimeConfig cfg;
      cfg.n_samples = std::max(m.lime_samples, tokens.size() + 1);
      cfg.seed = seed;
      return lime(model, tokens, cfg);
    }
    case Method::Random: {
      const auto pred = greedy_next(model, tokens);
      return random_attribution(tokens.size(), seed, pred.token);
    }
  }
  throw Error("unknown method");
}

inline ResultRecord make_record(const LanguageModel& model, const Sample& s, const TokenSequence& tokens,
                                const AttributionResult& r) {
  r.validate(tokens.size());
  ResultRecord rec;
  rec.id = s.id;
  rec.prompt = s.prompt;
  for (TokenId id : tokens.ids()) rec.tokens.push_back(model.token_text(id));
  rec.token_ids = tokens.vec();
  rec.target_id = r.target_token;
  rec.target = model.token_text(r.target_token);
  rec.gold = s.gold;
  rec.category = s.category;
  rec.method = r.method;
  rec.bounding = r.bounding;
  rec.scores = r.scores;
  rec.k_values = r.k_values;
  rec.k_min = r.k_min;
  rec.saturated = r.saturated;
  rec.seeds = r.noise_seeds;
  return rec;
}

inline std::vector<ResultRecord> attribute_samples(const LanguageModel& model, const std::vector<Sample>& samples,
                                                   const RunManifest& m) {
  std::vector<ResultRecord> records(samples.size() * m.methods.size());
  const std::size_t workers = model.is_serial() ? 1 : m.threads;
  parallel_for(samples.size(), workers, [&](std::size_t i) {
    const auto& s = samples[i];
    const auto tokens = model.tokenize(s.prompt);
    const auto seed = sample_seed(m.seed, s.id);
    for (std::size_t k = 0; k < m.methods.size(); ++k) {
      records[i * m.methods.size() + k] = make_record(model, s, tokens, run_method(model, tokens, m.methods[k], m, seed));
    }
  });
  sort_records(records);
  return records;
}

inline void add_faithfulness(const LanguageModel& model, std::vector<ResultRecord>& records, std::size_t horizon,
                             std::size_t mask_draws, std::uint64_t run_seed, std::size_t threads = 1) {
  const std::size_t workers = model.is_serial() ? 1 : threads;
  parallel_for(records.size(), workers, [&](std::size_t i) {
    auto& r = records[i];
    SoftMetricConfig cfg;
    cfg.n_mask_draws = mask_draws;
    // Same masks for every method on a sample, so methods differ only by scores.
    cfg.seed = derive_seed(sample_seed(run_seed, r.id), 0x66616974);
    const TokenSequence tokens(r.token_ids, model.info().vocab_size);
    const auto rec = faithfulness_generation(model, tokens, r.scores, horizon, cfg);
    r.soft_ns = rec.soft_ns;
    r.soft_nc = rec.soft_nc;
    r.per_step = rec.per_step;
  });
}

// ---------------------------------------------------------------------------
// Summary tables

struct SummaryRow {
  Method method;
  std::size_t samples = 0;
  double soft_ns = 0.0;
  double soft_nc = 0.0;
  std::optional<double> log_ratio_ns;
  std::optional<double> log_ratio_nc;
  std::optional<double> faithfulness;
};

/// Per-method means of Soft-NS/Soft-NC and log ratios against the random
/// method (when present and positive).
inline std::vector<SummaryRow> summarize_faithfulness(const std::vector<ResultRecord>& records) {
  std::map<std::string, SummaryRow> rows;
  for (const auto& r : records) {
    if (!r.soft_ns || !r.soft_nc) continue;
    auto [it, fresh] = rows.try_emplace(std::string(to_string(r.method)), SummaryRow{r.method});
    it->second.samples += 1;
    it->second.soft_ns += *r.soft_ns;
    it->second.soft_nc += *r.soft_nc;
  }
  for (auto& [_, row] : rows) {
    row.soft_ns /= static_cast<double>(row.samples);
    row.soft_nc /= static_cast<double>(row.samples);
  }
  const auto rnd = rows.find(std::string(to_string(Method::Random)));
  std::vector<SummaryRow> out;
  for (auto& [_, row] : rows) {
    if (rnd != rows.end()) {
      const auto& base = rnd->second;
      if (row.soft_ns > 0 && base.soft_ns > 0) row.log_ratio_ns = log_ratio_score(row.soft_ns, base.soft_ns);
      if (row.soft_nc > 0 && base.soft_nc > 0) row.log_ratio_nc = log_ratio_score(row.soft_nc, base.soft_nc);
      if (row.log_ratio_ns && row.log_ratio_nc) row.faithfulness = *row.log_ratio_ns + *row.log_ratio_nc;
    }
    out.push_back(row);
  }
  return out;
}

inline std::string format_number(std::optional<double> v) {
  if (!v) return "NA";
  std::ostringstream os;
  os << std::setprecision(17) << *v;
  return os.str();
}

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::string out = "method,samples,soft_ns,soft_nc,log_ratio_ns,log_ratio_nc,faithfulness\n";
  for (const auto& r : rows) {
    out += std::string(to_string(r.method)) + "," + std::to_string(r.samples) + "," + format_number(r.soft_ns) + "," +
           format_number(r.soft_nc) + "," + format_number(r.log_ratio_ns) + "," + format_number(r.log_ratio_nc) +
           "," + format_number(r.faithfulness) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Answerability over records

inline AnswerabilitySample answerability_sample(const ResultRecord& r) {
  require(r.gold.has_value(), "record " + r.id + " has no gold answer");
  AttributionResult res;
  res.scores = r.scores;
  return {r.id, aggregate_to_words(r.tokens.size(), split_words(r.tokens), res), *r.gold};
}

struct MethodAnswerability {
  Method method;
  AnswerabilityReport report;
};

inline std::vector<MethodAnswerability> answerability_by_method(const std::vector<ResultRecord>& records,
                                                                const Judge& judge,
                                                                const AnswerabilityOptions& opt) {
  std::map<std::string, std::pair<Method, std::vector<AnswerabilitySample>>> grouped;
  for (const auto& r : records) {
    if (!r.gold) continue;
    auto& g = grouped[std::string(to_string(r.method))];
    g.first = r.method;
    g.second.push_back(answerability_sample(r));
  }
  std::vector<MethodAnswerability> out;
  for (auto& [_, g] : grouped) out.push_back({g.first, evaluate_answerability(g.second, judge, opt)});
  return out;
}

inline std::string answerability_csv(const std::vector<MethodAnswerability>& results) {
  std::string out = "method,rate,score,score_defined,correct,evaluated,judge_errors\n";
  for (const auto& m : results) {
    const auto& r = m.report;
    out += std::string(to_string(m.method)) + "," + format_number(r.rate) + "," + format_number(r.score) + "," +
           (r.score_defined ? "true" : "false") + "," + std::to_string(r.n_correct) + "," +
           std::to_string(r.n_evaluated) + "," + std::to_string(r.n_judge_errors) + "\n";
  }
  return out;
}

inline std::string answerability_jsonl(const std::vector<MethodAnswerability>& results) {
  std::string out;
  for (const auto& m : results) {
    for (const auto& rec : m.report.records) {
      json j = {{"id", rec.id},
                {"method", to_string(m.method)},
                {"selected_words", rec.selected_words},
                {"judge_answers", rec.judge_answers},
                {"correct", rec.correct},
                {"judge_error", rec.judge_error}};
      if (rec.contribution) j["contribution"] = *rec.contribution;
      if (!rec.error.empty()) j["error"] = rec.error;
      out += j.dump() + "\n";
    }
  }
  return out;
}

inline std::string render_records_html(const std::vector<ResultRecord>& records) {
  std::vector<HeatmapRow> rows;
  for (const auto& r : records) {
    rows.push_back({r.id + " / " + std::string(to_string(r.method)), r.tokens, r.scores, r.target});
  }
  return render_heatmap_page(rows);
}

// ---------------------------------------------------------------------------
// Full pipeline

inline JudgeConfig judge_config_from(const RunManifest& m) {
  JudgeConfig cfg;
  cfg.endpoint = m.judge_url;
  cfg.model_name = m.judge_model;
  cfg.top_n = m.top_n;
  cfg.max_tokens = m.top_n == 5 ? 64 : 16;
  if (const char* key = std::getenv("NOISER_JUDGE_API_KEY")) cfg.api_key = key;
  return cfg;
}

/// Runs attribution and the requested metrics, writing every output file to
/// m.out_dir. `judge` overrides the HTTP judge built from the manifest.
/// Failures leave manifest.json with status "incomplete" and rethrow.
inline void run_experiment(const RunManifest& m, const Judge* judge = nullptr) {
  const fs::path dir = m.out_dir;
  fs::create_directories(dir);
  try {
    m.validate();
    const auto model = make_model(m.model);
    auto samples = load_dataset(m.dataset, m.format);
    if (m.filter_correct) samples = filter_correct(*model, samples);

    auto records = attribute_samples(*model, samples, m);
    if (m.faithfulness) {
      add_faithfulness(*model, records, m.horizon, m.mask_draws, m.seed, m.threads);
      write_text(dir / "summary.csv", summary_csv(summarize_faithfulness(records)));
    }
    write_results(dir / "results.jsonl", records);

    if (m.answerability) {
      std::unique_ptr<HttpJudge> http;
      if (judge == nullptr) {
        http = std::make_unique<HttpJudge>(judge_config_from(m));
        judge = http.get();
      }
      AnswerabilityOptions opt;
      opt.percent = m.top_percent;
      opt.top_n = m.top_n;
      opt.max_concurrency = m.threads;
      const auto results = answerability_by_method(records, *judge, opt);
      write_text(dir / "answerability.csv", answerability_csv(results));
      write_text(dir / "answerability.jsonl", answerability_jsonl(results));
    }
    if (m.html) write_text(dir / "heatmaps.html", render_records_html(records));
    write_manifest_sidecar(m, dir, "complete");
  } catch (const std::exception& e) {
    write_manifest_sidecar(m, dir, "incomplete", e.what());
    throw;
  }
}

}  // namespace noiser
