#pragma once

// Answerability: can a judge model recover the prediction from only the
// top-k% attributed words of the prompt, and how much attribution mass do
// those words carry.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "noiser/core.hpp"
#include "noiser/parallel.hpp"

namespace noiser {

struct WordSpan {
  std::string text;
  std::size_t first_token = 0;
  std::size_t last_token = 0;  // inclusive
};

struct Word {
  std::string text;
  std::size_t first_token = 0;
  std::size_t last_token = 0;
  double score = 0.0;
};

struct WordAttribution {
  std::vector<Word> words;
  bool normalized = false;

  std::size_t size() const noexcept { return words.size(); }
};

inline std::string trim(std::string_view s) {
  const auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && is_space(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline std::string casefold(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

/// Groups token surface texts into words. A token that starts with
/// whitespace opens a new word once the current word has visible text, so
/// leading spaces attach to the following word.
inline std::vector<WordSpan> split_words(const std::vector<std::string>& token_texts) {
  std::vector<WordSpan> spans;
  std::string current;
  std::size_t first = 0;
  auto has_visible = [](const std::string& s) { return !trim(s).empty(); };
  for (std::size_t i = 0; i < token_texts.size(); ++i) {
    const auto& tok = token_texts[i];
    const bool starts_space = !tok.empty() && std::isspace(static_cast<unsigned char>(tok.front()));
    if (i > 0 && starts_space && has_visible(current)) {
      spans.push_back({trim(current), first, i - 1});
      current.clear();
      first = i;
    }
    current += tok;
  }
  if (!token_texts.empty()) spans.push_back({trim(current), first, token_texts.size() - 1});
  return spans;
}

/// Sums sub-token scores per word, shifts by the minimum and normalizes to
/// sum 1. A degenerate (all-equal) vector becomes uniform.
inline WordAttribution aggregate_to_words(std::size_t n_tokens,
                                          const std::vector<WordSpan>& spans,
                                          const AttributionResult& result) {
  require(result.scores.size() == n_tokens, "score count differs from token count");
  require(!spans.empty(), "no words");
  std::size_t expected = 0;
  for (const auto& s : spans) {
    require(s.first_token == expected && s.last_token >= s.first_token,
            "word spans must partition the tokens without gaps or overlaps");
    expected = s.last_token + 1;
  }
  require(expected == n_tokens, "word spans must cover every token");

  WordAttribution wa;
  for (const auto& s : spans) {
    double sum = 0.0;
    for (std::size_t t = s.first_token; t <= s.last_token; ++t) sum += result.scores[t];
    wa.words.push_back({s.text, s.first_token, s.last_token, sum});
  }
  const double lo = std::min_element(wa.words.begin(), wa.words.end(),
                                     [](const Word& a, const Word& b) { return a.score < b.score; })
                        ->score;
  double total = 0.0;
  for (auto& w : wa.words) {
    w.score -= lo;
    total += w.score;
  }
  for (auto& w : wa.words) {
    w.score = total > 0.0 ? w.score / total : 1.0 / static_cast<double>(wa.words.size());
  }
  wa.normalized = true;
  return wa;
}

/// Word indices ordered by descending score, ties toward earlier words.
inline std::vector<std::size_t> rank_words(const WordAttribution& wa) {
  std::vector<std::size_t> order(wa.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return wa.words[a].score > wa.words[b].score;
  });
  return order;
}

/// Indices of the ceil(percent% * W) highest-scoring words, in prompt order.
inline std::vector<std::size_t> select_top_percent(const WordAttribution& wa, double percent = 50.0) {
  require(percent > 0.0 && percent <= 100.0, "percent must lie in (0, 100]");
  const double exact = percent * static_cast<double>(wa.size()) / 100.0;
  auto count = static_cast<std::size_t>(std::ceil(exact - 1e-9));
  count = std::clamp<std::size_t>(count, 1, wa.size());
  auto order = rank_words(wa);
  order.resize(count);
  std::sort(order.begin(), order.end());
  return order;
}

inline double selected_mass(const WordAttribution& wa, const std::vector<std::size_t>& selected) {
  double mass = 0.0;
  for (auto i : selected) mass += wa.words[i].score;
  return mass;
}

// ---------------------------------------------------------------------------
// Judge prompt

inline constexpr std::string_view kJudgeTask =
    "# Task:\n"
    "Given a set of words extracted from a prompt for a completion task, return a single word "
    "as the most probable completion for the unseen prompt WITHOUT providing any explanation.";

inline constexpr std::string_view kTopFiveInstruction =
    "Return your five most probable single-word completions as a comma-separated list, "
    "most probable first.";

inline std::string build_judge_prompt(const std::vector<std::string>& words, int top_n = 1) {
  require(!words.empty(), "empty word selection");
  require(top_n == 1 || top_n == 5, "top_n must be 1 or 5");
  std::string prompt(kJudgeTask);
  prompt += "\n\n# Words:\n";
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) prompt += ' ';
    prompt += words[i];
  }
  if (top_n == 5) {
    prompt += "\n\n";
    prompt += kTopFiveInstruction;
  }
  return prompt;
}

/// Case-folded, whitespace-trimmed answer with surrounding quotes and
/// sentence punctuation removed.
inline std::string normalize_answer(std::string_view s) {
  std::string t = trim(s);
  constexpr std::string_view strip = ".,;:!?\"'`*";
  while (!t.empty() && strip.find(t.back()) != std::string_view::npos) t.pop_back();
  std::size_t b = 0;
  while (b < t.size() && strip.find(t[b]) != std::string_view::npos) ++b;
  return casefold(trim(std::string_view(t).substr(b)));
}

/// Splits a judge completion into at most `top_n` candidate answers.
inline std::vector<std::string> parse_judge_answers(std::string_view completion, int top_n) {
  std::vector<std::string> out;
  if (top_n == 1) {
    const auto line = completion.substr(0, completion.find('\n'));
    const auto ans = normalize_answer(line);
    if (!ans.empty()) out.push_back(ans);
    return out;
  }
  std::string item;
  auto flush = [&] {
    auto ans = normalize_answer(item);
    if (!ans.empty() && out.size() < static_cast<std::size_t>(top_n)) out.push_back(std::move(ans));
    item.clear();
  };
  for (char c : completion) {
    if (c == ',' || c == '\n') {
      flush();
    } else {
      item.push_back(c);
    }
  }
  flush();
  return out;
}

// ---------------------------------------------------------------------------
// Judges

class JudgeError : public Error {
 public:
  using Error::Error;
};

class Judge {
 public:
  virtual ~Judge() = default;
  /// Raw completion text for `prompt`. Throws JudgeError when unreachable.
  virtual std::string complete(const std::string& prompt) const = 0;
  virtual bool is_serial() const { return false; }
};

struct AnswerabilitySample {
  std::string id;
  WordAttribution words;
  std::string gold;
};

struct AnswerabilityRecord {
  std::string id;
  std::vector<std::string> selected_words;
  std::vector<std::string> judge_answers;
  bool correct = false;
  std::optional<double> contribution;
  bool judge_error = false;
  std::string error;
};

struct AnswerabilityReport {
  double rate = 0.0;
  double score = 0.0;
  /// False when no sample was answered correctly; score is then 0.
  bool score_defined = false;
  std::size_t n_correct = 0;
  std::size_t n_evaluated = 0;
  std::size_t n_judge_errors = 0;
  std::vector<AnswerabilityRecord> records;
};

struct AnswerabilityOptions {
  double percent = 50.0;
  int top_n = 1;
  std::size_t max_concurrency = 1;
};

inline std::vector<std::string> words_at(const WordAttribution& wa,
                                         const std::vector<std::size_t>& idx) {
  std::vector<std::string> out;
  for (auto i : idx) out.push_back(wa.words[i].text);
  return out;
}

inline bool judge_says(const Judge& judge, const std::vector<std::string>& words,
                       const std::string& gold, int top_n,
                       std::vector<std::string>* answers = nullptr) {
  auto parsed = parse_judge_answers(judge.complete(build_judge_prompt(words, top_n)), top_n);
  const auto target = normalize_answer(gold);
  const bool hit = std::find(parsed.begin(), parsed.end(), target) != parsed.end();
  if (answers) *answers = std::move(parsed);
  return hit;
}

inline AnswerabilityReport evaluate_answerability(const std::vector<AnswerabilitySample>& samples,
                                                  const Judge& judge,
                                                  const AnswerabilityOptions& opt = {}) {
  require(opt.top_n == 1 || opt.top_n == 5, "top_n must be 1 or 5");
  AnswerabilityReport report;
  report.records.resize(samples.size());
  const std::size_t workers = judge.is_serial() ? 1 : opt.max_concurrency;
  parallel_for(samples.size(), workers, [&](std::size_t s) {
    const auto& sample = samples[s];
    auto& rec = report.records[s];
    rec.id = sample.id;
    const auto selected = select_top_percent(sample.words, opt.percent);
    rec.selected_words = words_at(sample.words, selected);
    try {
      rec.correct = judge_says(judge, rec.selected_words, sample.gold, opt.top_n, &rec.judge_answers);
    } catch (const JudgeError& e) {
      rec.judge_error = true;
      rec.error = e.what();
      return;
    }
    if (rec.correct) rec.contribution = std::min(1.0, selected_mass(sample.words, selected));
  });

  double mass = 0.0;
  for (const auto& rec : report.records) {
    if (rec.judge_error) {
      ++report.n_judge_errors;
      continue;
    }
    ++report.n_evaluated;
    if (rec.correct) {
      ++report.n_correct;
      mass += *rec.contribution;
    }
  }
  if (report.n_evaluated > 0) {
    report.rate = static_cast<double>(report.n_correct) / static_cast<double>(report.n_evaluated);
  }
  if (report.n_correct > 0) {
    report.score = mass / static_cast<double>(report.n_correct);
    report.score_defined = true;
  }
  return report;
}

struct MinTopPercent {
  double fraction = 1.0;
  bool unanswerable = false;
  bool judge_error = false;
  std::size_t queries = 0;
};

/// Drops the lowest-ranked remaining word one at a time while the judge
/// still answers correctly; returns the retained fraction at the last
/// correct query.
inline MinTopPercent min_top_percent(const AnswerabilitySample& sample, const Judge& judge,
                                     int top_n = 1) {
  MinTopPercent out;
  const auto ranking = rank_words(sample.words);
  const std::size_t W = ranking.size();
  require(W >= 1, "no words");
  auto query = [&](std::size_t keep) {
    std::vector<std::size_t> idx(ranking.begin(), ranking.begin() + static_cast<std::ptrdiff_t>(keep));
    std::sort(idx.begin(), idx.end());
    ++out.queries;
    return judge_says(judge, words_at(sample.words, idx), sample.gold, top_n);
  };
  try {
    if (!query(W)) {
      out.unanswerable = true;
      return out;
    }
    std::size_t last_correct = W;
    while (last_correct > 1 && query(last_correct - 1)) --last_correct;
    out.fraction = static_cast<double>(last_correct) / static_cast<double>(W);
  } catch (const JudgeError&) {
    out.judge_error = true;
    out.fraction = 1.0;
  }
  return out;
}

}  // namespace noiser
