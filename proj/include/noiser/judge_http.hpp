#pragma once

// Chat-completion judge client.
//
// Request:  POST <endpoint> {"model", "messages":[{"role":"user","content"}],
//                            "temperature", "max_tokens"}
// Response: the first choice's message content (or legacy "text").

#include <chrono>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "noiser/answerability.hpp"

namespace noiser {

struct JudgeConfig {
  std::string endpoint;
  std::string model_name = "Llama-3.3-70B-Instruct-Turbo";
  double temperature = 0.0;
  int top_n = 1;
  std::chrono::milliseconds timeout{30000};
  int max_retries = 3;
  std::chrono::milliseconds backoff{500};
  int max_tokens = 32;
  std::string api_key;

  void validate() const {
    require(top_n == 1 || top_n == 5, "top_n must be 1 or 5");
    require(temperature >= 0.0, "temperature must be non-negative");
    require(max_retries >= 0, "max_retries must be non-negative");
  }
};

struct ParsedUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

inline ParsedUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  require(scheme_end != std::string::npos, "judge URL needs a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

class HttpJudge final : public Judge {
 public:
  explicit HttpJudge(JudgeConfig cfg) : cfg_(std::move(cfg)), url_(split_url(cfg_.endpoint)) {
    cfg_.validate();
  }

  const JudgeConfig& config() const noexcept { return cfg_; }

  nlohmann::json request_body(const std::string& prompt) const {
    return {{"model", cfg_.model_name},
            {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
            {"temperature", cfg_.temperature},
            {"max_tokens", cfg_.max_tokens}};
  }

  std::string complete(const std::string& prompt) const override {
    const std::string body = request_body(prompt).dump();
    std::string last_error = "no attempt made";
    auto delay = cfg_.backoff;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(delay);
        delay *= 2;
      }
      httplib::Client client(url_.origin);
      const auto secs = std::chrono::duration_cast<std::chrono::seconds>(cfg_.timeout);
      const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(cfg_.timeout - secs);
      client.set_connection_timeout(secs.count(), usecs.count());
      client.set_read_timeout(secs.count(), usecs.count());
      httplib::Headers headers;
      if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);

      auto res = client.Post(url_.path, headers, body, "application/json");
      if (!res) {
        last_error = "connection error: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status != 200) {
        last_error = "HTTP status " + std::to_string(res->status);
        continue;
      }
      try {
        return extract_text(nlohmann::json::parse(res->body));
      } catch (const std::exception& e) {
        last_error = std::string("malformed judge response: ") + e.what();
      }
    }
    throw JudgeError("judge request failed after retries: " + last_error);
  }

  static std::string extract_text(const nlohmann::json& response) {
    const auto& choice = response.at("choices").at(0);
    if (choice.contains("message")) return choice.at("message").at("content").get<std::string>();
    return choice.at("text").get<std::string>();
  }

 private:
  JudgeConfig cfg_;
  ParsedUrl url_;
};

}  // namespace noiser
