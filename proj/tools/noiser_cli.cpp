// noiser: command-line front end for attribution runs and their metrics.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "noiser/harness.hpp"

namespace {

using namespace noiser;

std::vector<Method> parse_methods(const std::vector<std::string>& raw) {
  std::vector<Method> out;
  for (const auto& item : raw) {
    std::stringstream ss(item);
    std::string part;
    while (std::getline(ss, part, ',')) {
      if (!trim(part).empty()) out.push_back(parse_method(trim(part)));
    }
  }
  return out;
}

int attribute_cmd(RunManifest m, const std::vector<std::string>& methods, const std::string& bounding,
                  const std::string& format) {
  m.methods = parse_methods(methods);
  m.bounding = parse_bounding(bounding);
  m.format = parse_format(format);
  run_experiment(m);
  std::cout << "wrote " << (fs::path(m.out_dir) / "results.jsonl").string() << "\n";
  return 0;
}

int faithfulness_cmd(const std::string& model_spec, const std::string& out_dir, std::size_t horizon,
                     std::size_t mask_draws, std::uint64_t seed, std::size_t threads) {
  const fs::path dir = out_dir;
  auto records = read_results(dir / "results.jsonl");
  const auto model = make_model(model_spec);
  add_faithfulness(*model, records, horizon, mask_draws, seed, threads);
  write_results(dir / "results.jsonl", records);
  const auto summary = summary_csv(summarize_faithfulness(records));
  write_text(dir / "summary.csv", summary);
  std::cout << summary;
  return 0;
}

int answerability_cmd(const std::string& out_dir, const JudgeConfig& judge_cfg, double percent,
                      std::size_t threads, bool with_min_top) {
  const fs::path dir = out_dir;
  const auto records = read_results(dir / "results.jsonl");
  HttpJudge judge(judge_cfg);
  AnswerabilityOptions opt;
  opt.percent = percent;
  opt.top_n = judge_cfg.top_n;
  opt.max_concurrency = threads;
  const auto results = answerability_by_method(records, judge, opt);
  const auto table = answerability_csv(results);
  write_text(dir / "answerability.csv", table);
  write_text(dir / "answerability.jsonl", answerability_jsonl(results));
  std::cout << table;

  if (with_min_top) {
    std::string csv = "id,method,min_top_fraction,unanswerable,judge_error\n";
    for (const auto& r : records) {
      if (!r.gold) continue;
      const auto res = min_top_percent(answerability_sample(r), judge, judge_cfg.top_n);
      csv += r.id + "," + std::string(to_string(r.method)) + "," + format_number(res.fraction) + "," +
             (res.unanswerable ? "true" : "false") + "," + (res.judge_error ? "true" : "false") + "\n";
    }
    write_text(dir / "min_top_percent.csv", csv);
  }
  return 0;
}

int render_cmd(const std::string& out_dir) {
  const fs::path dir = out_dir;
  write_text(dir / "heatmaps.html", render_records_html(read_results(dir / "results.jsonl")));
  std::cout << "wrote " << (dir / "heatmaps.html").string() << "\n";
  return 0;
}

int serve_cmd(const std::string& model_spec, int port) {
  const auto model = make_model(model_spec);
  if (port > 0) {
    BridgeTcpServer server(*model, port);
    std::cerr << "serving " << model->info().name << " on 127.0.0.1:" << server.port() << "\n";
    for (;;) std::this_thread::sleep_for(std::chrono::hours(1));
  }
  FdChannel channel(STDIN_FILENO, STDOUT_FILENO, false);
  serve_bridge(*model, channel);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noise-based feature attribution and attribution evaluation"};
  app.require_subcommand(1);

  // attribute
  RunManifest am;
  std::vector<std::string> methods{"noiser"};
  std::string bounding = "kmin", format = "jsonl";
  auto* attr = app.add_subcommand("attribute", "Attribute every sample of a dataset");
  attr->add_option("--model", am.model, "toy:<seed> or bridge:<host:port|stdio:command>")->required();
  attr->add_option("--dataset", am.dataset, "Dataset path")->required()->check(CLI::ExistingFile);
  attr->add_option("--format", format, "Dataset format")->check(CLI::IsMember({"known", "jsonl"}));
  attr->add_option("--method", methods, "noiser, occlusion, lime, random (repeat or comma-separate)");
  attr->add_option("--bounding", bounding, "Noiser bounding")
      ->check(CLI::IsMember({"kmin", "kmax", "kmax-per-token", "norm-l2", "norm-linf", "random-k", "none"}));
  attr->add_option("--noise-samples", am.noise_samples, "Noise vectors per prompt")->capture_default_str();
  attr->add_option("--bisect-steps", am.bisect_steps, "Bisection steps")->capture_default_str();
  attr->add_option("--lime-samples", am.lime_samples, "LIME mask samples")->capture_default_str();
  attr->add_option("--seed", am.seed, "Run seed")->capture_default_str();
  attr->add_option("--out", am.out_dir, "Output directory")->required();
  attr->add_option("--threads", am.threads, "Worker threads")->capture_default_str();
  attr->add_flag("--filter-correct", am.filter_correct, "Keep samples the model answers correctly");
  attr->add_flag("--html", am.html, "Also write heatmaps.html");

  // faithfulness
  std::string f_model, f_out;
  std::size_t horizon = 1, mask_draws = 10, f_threads = 1;
  std::uint64_t f_seed = 0;
  auto* faith = app.add_subcommand("faithfulness", "Soft-NS/Soft-NC for an attribution run");
  faith->add_option("--model", f_model, "Model used for the run")->required();
  faith->add_option("--out", f_out, "Run directory containing results.jsonl")->required();
  faith->add_option("--horizon", horizon, "Generated tokens to evaluate")->capture_default_str();
  faith->add_option("--mask-draws", mask_draws, "Bernoulli mask draws per step")->capture_default_str();
  faith->add_option("--seed", f_seed, "Mask seed")->capture_default_str();
  faith->add_option("--threads", f_threads, "Worker threads")->capture_default_str();

  // answerability
  std::string a_out;
  JudgeConfig judge_cfg;
  double percent = 50.0;
  std::size_t a_threads = 1;
  int timeout_ms = 30000;
  bool min_top = false;
  auto* ans = app.add_subcommand("answerability", "Judge-based answerability of an attribution run");
  ans->add_option("--out", a_out, "Run directory containing results.jsonl")->required();
  ans->add_option("--judge-url", judge_cfg.endpoint, "Chat-completion endpoint URL")->required();
  ans->add_option("--judge-model", judge_cfg.model_name, "Judge model name")->capture_default_str();
  ans->add_option("--top-percent", percent, "Share of words shown to the judge")->capture_default_str();
  ans->add_option("--top-n", judge_cfg.top_n, "Judge candidates")->check(CLI::IsMember({1, 5}));
  ans->add_option("--max-retries", judge_cfg.max_retries, "Retries per request")->capture_default_str();
  ans->add_option("--timeout-ms", timeout_ms, "Request timeout")->capture_default_str();
  ans->add_option("--threads", a_threads, "Concurrent judge requests")->capture_default_str();
  ans->add_flag("--min-top-percent", min_top, "Also compute the minimum answerable top-k%");

  // render
  std::string r_out;
  bool html = false;
  auto* render = app.add_subcommand("render", "Render attribution heatmaps");
  render->add_option("--out", r_out, "Run directory containing results.jsonl")->required();
  render->add_flag("--html", html, "Write heatmaps.html")->required();

  // run
  std::string manifest_path, run_out;
  auto* run = app.add_subcommand("run", "Run a full experiment from a manifest file");
  run->add_option("--manifest", manifest_path, "Manifest JSON")->required()->check(CLI::ExistingFile);
  run->add_option("--out", run_out, "Override the manifest's output directory");

  // serve-bridge
  std::string s_model;
  int port = 0;
  auto* serve = app.add_subcommand("serve-bridge", "Serve a built-in model over the bridge protocol");
  serve->add_option("--model", s_model, "toy:<seed>")->required();
  serve->add_option("--port", port, "TCP port (default: stdio)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*attr) return attribute_cmd(am, methods, bounding, format);
    if (*faith) return faithfulness_cmd(f_model, f_out, horizon, mask_draws, f_seed, f_threads);
    if (*ans) {
      judge_cfg.timeout = std::chrono::milliseconds(timeout_ms);
      judge_cfg.max_tokens = judge_cfg.top_n == 5 ? 64 : 16;
      if (const char* key = std::getenv("NOISER_JUDGE_API_KEY")) judge_cfg.api_key = key;
      return answerability_cmd(a_out, judge_cfg, percent, a_threads, min_top);
    }
    if (*render) return render_cmd(r_out);
    if (*run) {
      std::ifstream in(manifest_path);
      auto m = RunManifest::from_json(json::parse(in));
      if (!run_out.empty()) m.out_dir = run_out;
      run_experiment(m);
      std::cout << "wrote " << m.out_dir << "\n";
      return 0;
    }
    if (*serve) return serve_cmd(s_model, port);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
