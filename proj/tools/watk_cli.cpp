#include "watk_cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "watk/analysis.hpp"
#include "watk/checkpoint.hpp"
#include "watk/fixture.hpp"
#include "watk/report.hpp"
#include "watk/sweep.hpp"

namespace watk::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

// Values recorded into the RunConfig of one subcommand, in declaration order.
struct Recorder {
  std::vector<std::pair<std::string, std::function<Json()>>> fields;

  template <typename T>
  CLI::Option* add(CLI::App* app, const std::string& key, T& var, const std::string& help) {
    fields.emplace_back(key, [&var] { return Json(var); });
    return app->add_option("--" + key, var, help);
  }
  CLI::Option* flag(CLI::App* app, const std::string& key, bool& var, const std::string& help) {
    fields.emplace_back(key, [&var] { return Json(var); });
    return app->add_flag("--" + key, var, help);
  }
};

struct Globals {
  std::uint64_t seed = 0;
  int jobs = 1;
  std::string config;
};

struct Command {
  CLI::App* app = nullptr;
  Recorder rec;
  std::string out;
  std::function<void(Command&)> run;
  // Filled in before run.
  fs::path out_dir;
  std::string config_json;
  const Globals* globals = nullptr;

  std::uint64_t seed() const { return globals->seed; }
};

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

fs::path resolve_out(const std::string& out) {
  fs::path p(out);
  if (p.is_absolute()) return p;
  const char* root = std::getenv("ATTRIB_OUT");
  return (root && *root) ? fs::path(root) / p : p;
}

std::string build_config(const Command& c) {
  Json j;
  j["command"] = c.app->get_name();
  for (const auto& [k, f] : c.rec.fields) j[k] = f();
  j["seed"] = c.globals->seed;
  j["jobs"] = c.globals->jobs;
  j["out"] = c.out_dir.generic_string();
  return j.dump();
}

// key=value lines; '#' starts a comment line.
std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open config file " + path);
  std::vector<std::pair<std::string, std::string>> kv;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError(path + ":" + std::to_string(lineno) + ": expected key=value");
    std::string key = trim(line.substr(0, eq));
    std::replace(key.begin(), key.end(), '_', '-');
    kv.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return kv;
}

bool flag_given(const std::vector<std::string>& args, const std::string& key) {
  const std::string f = "--" + key;
  return std::any_of(args.begin(), args.end(),
                     [&](const std::string& a) { return a == f || a.rfind(f + "=", 0) == 0; });
}

// Appends config-file entries not already given as flags. Unknown keys are
// rejected against the chosen subcommand and the global options.
std::vector<std::string> merge_config(const std::vector<std::string>& args, const CLI::App& top) {
  std::string cfg_path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) cfg_path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) cfg_path = args[i].substr(9);
  }
  if (cfg_path.empty()) return args;
  const CLI::App* sub = nullptr;
  for (const auto& a : args)
    if (!sub && a.rfind("-", 0) != 0) sub = top.get_subcommand_no_throw(a);
  std::vector<std::string> merged = args;
  for (const auto& [key, value] : read_config_file(cfg_path)) {
    const bool known = (sub && sub->get_option_no_throw("--" + key)) ||
                       (key != "config" && top.get_option_no_throw("--" + key));
    if (!known) throw ValidationError("unknown config key '" + key + "' in " + cfg_path);
    if (!flag_given(args, key)) merged.push_back("--" + key + "=" + value);
  }
  return merged;
}

ModelCheckpoint read_model(const std::string& path) { return load_checkpoint(path); }

CalibDataset read_data(const std::string& path, Role role, const ModelCheckpoint& m, std::size_t cap = 128) {
  LoadReport rep;
  CalibDataset ds = load_dataset(path, role, m.config.max_seq, &rep);
  ds.sample_cap = cap;
  if (rep.rejected) std::cerr << "warning: " << path << ": skipped " << rep.rejected << " invalid records\n";
  return ds;
}

std::set<LayerAddress> all_layers(const ModelCheckpoint& m) {
  const auto v = m.linear_addresses();
  return {v.begin(), v.end()};
}

void save_model(ModelCheckpoint m, const fs::path& path, const std::string& cfg) {
  m.run_config = cfg;
  save_checkpoint(m, path);
}

void save_tensors(std::vector<NamedTensor> tensors, const fs::path& path, const std::string& cfg) {
  TensorFile f;
  f.run_config = cfg;
  f.tensors = std::move(tensors);
  write_tensor_file(path, f);
}

std::map<LayerAddress, ScoreMatrix> score_layers(const ModelCheckpoint& m, std::span<const CalibExample> ex,
                                                 ScoreMethod method, Role role) {
  return method == ScoreMethod::kWanda ? wanda_scores(m, ex, all_layers(m), role)
                                       : snip_score(m, ex, all_layers(m), role);
}

std::vector<report::Point> scatter_points(const std::vector<SweepRow>& rows) {
  std::vector<report::Point> pts;
  for (const auto& r : rows) pts.push_back({r.metrics.utility_accuracy, r.metrics.asr_vanilla, r.pareto});
  return pts;
}

// Harmful prompts paired with the answer a compliant model would give.
std::vector<CalibExample> attack_examples(const std::vector<CalibExample>& safety, const FixtureGrammar& g,
                                          std::size_t max_seq) {
  std::vector<CalibExample> out;
  for (const auto& ex : safety) {
    const auto tag = ex.prompt.find(g.harmful_tag);
    const auto eq = ex.prompt.rfind('=');
    if (tag == std::string::npos || eq == std::string::npos || eq <= tag) continue;
    CalibExample a;
    a.prompt = ex.prompt;
    a.response = ex.prompt.substr(tag + g.harmful_tag.size(), eq - tag - g.harmful_tag.size()) + "\n";
    out.push_back(tokenize(std::move(a), max_seq));
  }
  return out;
}

// ---------------------------------------------------------------------------

void add_train_fixture(CLI::App& top, std::vector<std::unique_ptr<Command>>& cmds) {
  auto c = std::make_unique<Command>();
  auto a = std::make_shared<FixtureConfig>();
  c->app = top.add_subcommand("train-fixture", "Train the synthetic fixture model and write its datasets");
  auto& r = c->rec;
  r.add(c->app, "max-steps", a->max_steps, "Step budget");
  r.add(c->app, "min-steps", a->min_steps, "Steps before gates are checked");
  r.add(c->app, "batch", a->batch, "Examples per step");
  r.add(c->app, "lr", a->lr, "Peak learning rate");
  r.add(c->app, "warmup", a->warmup, "Linear warmup steps");
  r.add(c->app, "weight-decay", a->weight_decay, "AdamW weight decay");
  r.add(c->app, "d-model", a->model.d_model, "Residual width");
  r.add(c->app, "blocks", a->model.n_blocks, "Decoder blocks");
  r.add(c->app, "heads", a->model.n_heads, "Attention heads");
  r.add(c->app, "d-ff", a->model.d_ff, "MLP width");
  r.add(c->app, "max-seq", a->model.max_seq, "Context length");
  r.add(c->app, "calib-size", a->calib_size, "Examples per calibration set");
  r.add(c->app, "harmful-eval", a->harmful_eval, "Held-out harmful prompts");
  r.add(c->app, "utility-eval", a->utility_eval, "Held-out utility items");
  r.add(c->app, "harmful-tag", a->grammar.harmful_tag, "Prefix marking harmful prompts");
  c->out = "fixture";
  c->run = [a](Command& cmd) {
    FixtureConfig cfg = *a;
    cfg.model.validate();
    cfg.seed = cmd.seed();

    std::vector<std::pair<std::size_t, std::vector<double>>> curve;
    const std::vector<std::string> cols{"loss", "asr_vanilla", "utility_accuracy"};
    auto log = [&](const TrainPoint& p) {
      std::cerr << "step " << p.step << " loss " << report::num(p.loss) << " asr " << report::num(p.asr_vanilla)
                << " utility " << report::num(p.utility_accuracy) << "\n";
    };
    auto to_rows = [&](const std::vector<TrainPoint>& pts) {
      curve.clear();
      for (const auto& p : pts) curve.push_back({p.step, {p.loss, p.asr_vanilla, p.utility_accuracy}});
    };
    FixtureResult res;
    try {
      res = train_fixture(cfg, log);
    } catch (const TrainingError& e) {
      to_rows(e.curve());
      report::write_text(cmd.out_dir / "train_curve.csv", report::train_curve_csv(cmd.config_json, curve, cols));
      throw;
    }
    to_rows(res.curve);
    const auto& d = res.data;
    fs::create_directories(cmd.out_dir);
    save_model(res.model, cmd.out_dir / "model.watk", cmd.config_json);
    write_dataset(cmd.out_dir / "safety_full.jsonl", d.safety_full, cmd.config_json);
    write_dataset(cmd.out_dir / "safety_short.jsonl", d.safety_short, cmd.config_json);
    write_dataset(cmd.out_dir / "utility.jsonl", d.utility, cmd.config_json);
    write_dataset(cmd.out_dir / "attack.jsonl", attack_examples(d.safety_full, cfg.grammar, cfg.model.max_seq),
                  cmd.config_json);
    report::write_text(cmd.out_dir / "suite.json", report::suite_json(cmd.config_json, d.suite));
    report::write_text(cmd.out_dir / "train_curve.csv", report::train_curve_csv(cmd.config_json, curve, cols));
  };
  cmds.push_back(std::move(c));
}

struct ScoreArgs {
  std::string method, model, data, role;
  std::size_t sample_cap = 128;
};

void add_score(CLI::App& top, std::vector<std::unique_ptr<Command>>& cmds) {
  auto c = std::make_unique<Command>();
  auto a = std::make_shared<ScoreArgs>();
  c->app = top.add_subcommand("score", "Per-entry importance scores for every linear layer");
  auto& r = c->rec;
  r.add(c->app, "method", a->method, "wanda or snip")->required()->check(CLI::IsMember({"wanda", "snip"}));
  r.add(c->app, "model", a->model, "Checkpoint")->required();
  r.add(c->app, "data", a->data, "Calibration JSONL")->required();
  r.add(c->app, "role", a->role, "safety or utility")->required()->check(CLI::IsMember({"safety", "utility"}));
  r.add(c->app, "sample-cap", a->sample_cap, "Calibration examples drawn");
  c->out = "scores";
  c->run = [a](Command& cmd) {
    const auto m = read_model(a->model);
    const Role role = parse_role(a->role);
    const auto ex = sampled_examples(read_data(a->data, role, m, a->sample_cap), cmd.seed());
    const auto scores = score_layers(m, ex, parse_score_method(a->method), role);
    fs::create_directories(cmd.out_dir);
    for (const auto& [addr, s] : scores)
      save_tensors({NamedTensor::from_matrix(addr.str() + ".score." + a->method + "." + a->role, s.scores)},
                   cmd.out_dir / (addr.str() + ".watk"), cmd.config_json);
  };
  cmds.push_back(std::move(c));
}

struct IsolateArgs {
  std::string method = "snip", model, safety, utility;
  double p = 0.0, q = 0.0;
  std::size_t sample_cap = 128;
};

void add_isolate(CLI::App& top, std::vector<std::unique_ptr<Command>>& cmds) {
  auto c = std::make_unique<Command>();
  auto a = std::make_shared<IsolateArgs>();
  c->app = top.add_subcommand("isolate", "Safety-only neurons: top-q% safety minus top-p% utility");
  auto& r = c->rec;
  r.add(c->app, "method", a->method, "wanda or snip")->check(CLI::IsMember({"wanda", "snip"}));
  r.add(c->app, "model", a->model, "Checkpoint")->required();
  r.add(c->app, "safety", a->safety, "Safety JSONL")->required();
  r.add(c->app, "utility", a->utility, "Utility JSONL")->required();
  r.add(c->app, "p", a->p, "Utility fraction (percent)")->required()->check(CLI::Range(0.0, 100.0));
  r.add(c->app, "q", a->q, "Safety fraction (percent)")->required()->check(CLI::Range(0.0, 100.0));
  r.add(c->app, "sample-cap", a->sample_cap, "Calibration examples drawn");
  c->out = "isolate";
  c->run = [a](Command& cmd) {
    const auto m = read_model(a->model);
    const auto method = parse_score_method(a->method);
    const auto s_ex = sampled_examples(read_data(a->safety, Role::kSafety, m, a->sample_cap), cmd.seed());
    const auto u_ex = sampled_examples(read_data(a->utility, Role::kUtility, m, a->sample_cap), cmd.seed());
    const auto ss = score_layers(m, s_ex, method, Role::kSafety);
    const auto us = score_layers(m, u_ex, method, Role::kUtility);
    std::vector<NeuronSet> sets;
    std::ostringstream csv;
    csv << report::csv_header(cmd.config_json) << "layer,safety,utility,isolated\n";
    for (const auto& addr : m.linear_addresses()) {
      const NeuronSet s = top_fraction_per_row(ss.at(addr), a->q);
      const NeuronSet u = top_fraction_per_row(us.at(addr), a->p);
      sets.push_back(set_difference(s, u));
      csv << addr.str() << "," << s.size() << "," << u.size() << "," << sets.back().size() << "\n";
    }
    report::write_text(cmd.out_dir / "neuron_sets.txt",
                       "# config: " + cmd.config_json + "\n" + format_neuron_sets(sets));
    report::write_text(cmd.out_dir / "isolate.csv", csv.str());
  };
  cmds.push_back(std::move(c));
}

struct PruneArgs {
  std::string method = "snip-setdiff", model, safety, utility;
  double p = 0.0, q = 0.0;
  std::size_t sample_cap = 128;
};

void add_prune(CLI::App& top, std::vector<std::unique_ptr<Command>>& cmds) {
  auto c = std::make_unique<Command>();
  auto a = std::make_shared<PruneArgs>();
  c->app = top.add_subcommand("prune", "Block-wise neuron pruning");
  auto& r = c->rec;
  r.add(c->app, "method", a->method, "wanda-top, snip-top, wanda-setdiff, snip-setdiff, wanda-bottom, snip-bottom");
  r.add(c->app, "model", a->model, "Checkpoint")->required();
  r.add(c->app, "safety", a->safety, "Safety JSONL")->required();
  r.add(c->app, "utility", a->utility, "Utility JSONL (set-difference methods)");
  r.add(c->app, "p", a->p, "Utility fraction, or the fraction for top/bottom (percent)")
      ->check(CLI::Range(0.0, 100.0));
  r.add(c->app, "q", a->q, "Safety fraction for set difference (percent)")->check(CLI::Range(0.0, 100.0));
  r.add(c->app, "sample-cap", a->sample_cap, "Calibration examples drawn");
  c->out = "prune";
  c->run = [a](Command& cmd) {
    const auto method = parse_prune_method(a->method);
    if (needs_utility(method) && a->utility.empty()) throw ValidationError("--utility is required for " + a->method);
    const auto m = read_model(a->model);
    const auto s_ex = sampled_examples(read_data(a->safety, Role::kSafety, m, a->sample_cap), cmd.seed());
    std::vector<CalibExample> u_ex;
    if (needs_utility(method))
      u_ex = sampled_examples(read_data(a->utility, Role::kUtility, m, a->sample_cap), cmd.seed());
    const PruneResult pr = blockwise_prune(m, s_ex, u_ex, method, {a->p, a->q});
    fs::create_directories(cmd.out_dir);
    save_model(pr.model, cmd.out_dir / "model.watk", cmd.config_json);
    report::write_text(cmd.out_dir / "neuron_sets.txt",
                       "# config: " + cmd.config_json + "\n" + format_neuron_sets(pr.sets));
    report::write_text(cmd.out_dir / "sparsity.csv",
                       report::sparsity_csv(cmd.config_json, a->method, a->p, a->q, pr.actual_sparsity()));
  };
  cmds.push_back(std::move(c));
}

struct RankBasisArgs {
  std::string method = "actsvd", model, data, role = "safety", asvd_mode = "mean";
  std::size_t rank = 0, sample_cap = 128;
  double alpha = 0.5;
};

void add_rank_basis(CLI::App& top, std::vector<std::unique_ptr<Command>>& cmds) {
  auto c = std::make_unique<Command>();
  auto a = std::make_shared<RankBasisArgs>();
  c->app = top.add_subcommand("rank-basis", "Top-r left singular bases for every linear layer");
  auto& r = c->rec;
  r.add(c->app, "method", a->method, "actsvd, asvd or fwsvd")->check(CLI::IsMember({"actsvd", "asvd", "fwsvd"}));
  r.add(c->app, "model", a->model, "Checkpoint")->required();
  r.add(c->app, "data", a->data, "Calibration JSONL")->required();
  r.add(c->app, "role", a->role, "safety or utility")->check(CLI::IsMember({"safety", "utility"}));
  r.add(c->app, "rank", a->rank, "Ranks kept")->required()->check(CLI::PositiveNumber);
  r.add(c->app, "alpha", a->alpha, "ASVD exponent");
  r.add(c->app, "asvd-mode", a->asvd_mode, "ASVD scaling: mean or max")->check(CLI::IsMember({"mean", "max"}));
  r.add(c->app, "sample-cap", a->sample_cap, "Calibration examples drawn");
  c->out = "bases";
  c->run = [a](Command& cmd) {
    const auto m = read_model(a->model);
    const Role role = parse_role(a->role);
    const auto ex = sampled_examples(read_data(a->data, role, m, a->sample_cap), cmd.seed());
    std::map<LayerAddress, ActivationMatrix> acts;
    std::map<LayerAddress, FisherDiagonal> fisher;
    if (a->method == "fwsvd")
      fisher = fisher_diagonal(m, ex, all_layers(m));
    else
      acts = capture_examples(m, ex, all_layers(m));
    std::vector<NamedTensor> tensors;
    for (const auto& addr : m.linear_addresses()) {
      const Matrix& w = m.weight(addr);
      ProjectionBasis b;
      if (a->method == "actsvd")
        b = actsvd_basis(w, acts.at(addr), a->rank, role);
      else if (a->method == "asvd")
        b = asvd_basis(w, acts.at(addr), a->rank, a->alpha, parse_asvd_mode(a->asvd_mode), role);
      else
        b = fwsvd_basis(w, fisher.at(addr), a->rank, role);
      b.address = addr;
      for (auto& t : basis_tensors(b)) tensors.push_back(std::move(t));
    }
    fs::create_directories(cmd.out_dir);
    save_tensors(std::move(tensors), cmd.out_dir / "bases.watk", cmd.config_json);
  };
  cmds.push_back(std::move(c));
}

std::string rank_layers_csv(const std::string& cfg, const std::vector<RankLayerRecord>& layers) {
  std::ostringstream os;
  os << report::csv_header(cfg) << "layer,R,keep_u,keep_s,bound,delta_rank\n";
  for (const auto& l : layers)
    os << l.address.str() << "," << l.big_r << "," << l.keep_u << "," << l.keep_s << "," << l.bound << ","
       << l.delta_rank << "\n";
  return os.str();
}

struct RankIsolateArgs {
  std::string model, safety, utility;
  std::size_t r_u = 0, r_s = 0, sample_cap = 128;
  bool lora = false;
};

void add_rank_isolate(CLI::App& top, std::vector<std::unique_ptr<Command>>& cmds) {
  auto c = std::make_unique<Command>();
  auto a = std::make_shared<RankIsolateArgs>();
  c->app = top.add_subcommand("rank-isolate", "Subtract the safety ranks orthogonal to utility ranks");
  auto& r = c->rec;
  r.add(c->app, "model", a->model, "Checkpoint")->required();
  r.add(c->app, "safety", a->safety, "Safety JSONL")->required();
  r.add(c->app, "utility", a->utility, "Utility JSONL")->required();
  r.add(c->app, "ru", a->r_u, "Utility ranks discarded")->required();
  r.add(c->app, "rs", a->r_s, "Safety ranks discarded")->required();
  r.flag(c->app, "lora", a->lora, "Store deltas as low-rank factors");
  r.add(c->app, "sample-cap", a->sample_cap, "Calibration examples drawn");
  c->out = "rank_isolate";
  c->run = [a](Command& cmd) {
    const auto m = read_model(a->model);
    const auto s_ex = sampled_examples(read_data(a->safety, Role::kSafety, m, a->sample_cap), cmd.seed());
    const auto u_ex = sampled_examples(read_data(a->utility, Role::kUtility, m, a->sample_cap), cmd.seed());
    const auto res = blockwise_rank_isolate(m, u_ex, s_ex, {a->r_u, a->r_s});
    std::vector<NamedTensor> tensors;
    for (const auto& d : res.deltas)
      for (auto& t : delta_tensors(a->lora ? lora_factorize(d) : d)) tensors.push_back(std::move(t));
    fs::create_directories(cmd.out_dir);
    save_model(res.model, cmd.out_dir / "model.watk", cmd.config_json);
    save_tensors(std::move(tensors), cmd.out_dir / "deltas.watk", cmd.config_json);
    report::write_text(cmd.out_dir / "ranks.csv", rank_layers_csv(cmd.config_json, res.layers));
  };
  cmds.push_back(std::move(c));
}

struct RankRemoveArgs {
  std::string model, data, role = "safety";
  std::size_t remove = 0, sample_cap = 128;
};

void add_rank_remove(CLI::App& top, std::vector<std::unique_ptr<Command>>& cmds) {
  auto c = std::make_unique<Command>();
  auto a = std::make_shared<RankRemoveArgs>();
  c->app = top.add_subcommand("rank-remove", "Drop the least important ActSVD ranks of every layer");
  auto& r = c->rec;
  r.add(c->app, "model", a->model, "Checkpoint")->required();
  r.add(c->app, "data", a->data, "Calibration JSONL")->required();
  r.add(c->app, "role", a->role, "safety or utility")->check(CLI::IsMember({"safety", "utility"}));
  r.add(c->app, "remove", a->remove, "Ranks removed per layer")->required();
  r.add(c->app, "sample-cap", a->sample_cap, "Calibration examples drawn");
  c->out = "rank_remove";
  c->run = [a](Command& cmd) {
    const auto m = read_model(a->model);
    const Role role = parse_role(a->role);
    const auto ex = sampled_examples(read_data(a->data, role, m, a->sample_cap), cmd.seed());
    const auto res = blockwise_rank_remove(m, ex, a->remove, role);
    std::vector<NamedTensor> tensors;
    for (const auto& b : res.bases)
      for (auto& t : basis_tensors(b)) tensors.push_back(std::move(t));
    fs::create_directories(cmd.out_dir);
    save_model(res.model, cmd.out_dir / "model.watk", cmd.config_json);
    save_tensors(std::move(tensors), cmd.out_dir / "bases.watk", cmd.config_json);
  };
  cmds.push_back(std::move(c));
}

struct OverlapArgs {
  std::string kind = "neurons", method = "snip", model, safety, utility;
  double p = 5.0, q = 5.0;
  std::size_t r_u = 0, r_s = 0, sample_cap = 128;
};

void add_analyze_overlap(CLI::App& top, std::vector<std::unique_ptr<Command>>& cmds) {
  auto c = std::make_unique<Command>();
  auto a = std::make_shared<OverlapArgs>();
  c->app = top.add_subcommand("analyze-overlap", "Per-layer overlap of safety and utility attributions");
  auto& r = c->rec;
  r.add(c->app, "kind", a->kind, "neurons (Jaccard) or ranks (subspace similarity)")
      ->check(CLI::IsMember({"neurons", "ranks"}));
  r.add(c->app, "method", a->method, "Neuron score: wanda or snip")->check(CLI::IsMember({"wanda", "snip"}));
  r.add(c->app, "model", a->model, "Checkpoint")->required();
  r.add(c->app, "safety", a->safety, "Safety JSONL")->required();
  r.add(c->app, "utility", a->utility, "Utility JSONL")->required();
  r.add(c->app, "p", a->p, "Utility fraction (percent)")->check(CLI::Range(0.0, 100.0));
  r.add(c->app, "q", a->q, "Safety fraction (percent)")->check(CLI::Range(0.0, 100.0));
  r.add(c->app, "ru", a->r_u, "Utility ranks discarded");
  r.add(c->app, "rs", a->r_s, "Safety ranks discarded");
  r.add(c->app, "sample-cap", a->sample_cap, "Calibration examples drawn");
  c->out = "overlap";
  c->run = [a](Command& cmd) {
    const auto m = read_model(a->model);
    const auto s_ex = sampled_examples(read_data(a->safety, Role::kSafety, m, a->sample_cap), cmd.seed());
    const auto u_ex = sampled_examples(read_data(a->utility, Role::kUtility, m, a->sample_cap), cmd.seed());
    std::vector<std::pair<std::size_t, report::LabeledValue>> rows;
    std::vector<report::LabeledValue> bars;
    const bool neurons = a->kind == "neurons";
    if (neurons) {
      const auto method = parse_score_method(a->method);
      const auto ss = score_layers(m, s_ex, method, Role::kSafety);
      const auto us = score_layers(m, u_ex, method, Role::kUtility);
      for (const auto& addr : m.linear_addresses()) {
        const double v = jaccard(top_fraction_per_row(ss.at(addr), a->q), top_fraction_per_row(us.at(addr), a->p));
        rows.push_back({addr.block, {std::string(to_string(addr.layer)), v}});
      }
    } else {
      const auto sa = capture_examples(m, s_ex, all_layers(m));
      const auto ua = capture_examples(m, u_ex, all_layers(m));
      for (const auto& addr : m.linear_addresses()) {
        const Matrix& w = m.weight(addr);
        const std::size_t big_r = weight_rank(w);
        if (a->r_u >= big_r || a->r_s >= big_r)
          throw ValidationError("--ru and --rs must be below the rank " + std::to_string(big_r) + " of " +
                                addr.str());
        const std::size_t keep_u = std::min(big_r - a->r_u, activation_rank(w, ua.at(addr)));
        const std::size_t keep_s = std::min(big_r - a->r_s, activation_rank(w, sa.at(addr)));
        const double v = subspace_similarity(actsvd_basis(w, ua.at(addr), keep_u, Role::kUtility),
                                             actsvd_basis(w, sa.at(addr), keep_s, Role::kSafety));
        rows.push_back({addr.block, {std::string(to_string(addr.layer)), v}});
      }
    }
    for (const auto& [b, lv] : rows) bars.push_back({std::to_string(b) + "." + lv.label, lv.value});
    const std::string key = neurons ? "jaccard" : "subspace_similarity";
    report::write_text(cmd.out_dir / "overlap.csv", report::block_value_csv(cmd.config_json, "layer", rows));
    report::write_text(cmd.out_dir / "overlap.svg", report::svg_bars(cmd.config_json, key, key, bars));
  };
  cmds.push_back(std::move(c));
}

struct ProbeArgs {
  std::string model, harmful, harmless;
  std::size_t prune_top = 0;
};

void add_probe(CLI::App& top, std::vector<std::unique_ptr<Command>>& cmds) {
  auto c = std::make_unique<Command>();
  auto a = std::make_shared<ProbeArgs>();
  c->app = top.add_subcommand("probe", "Linear probes on every attention head");
  auto& r = c->rec;
  r.add(c->app, "model", a->model, "Checkpoint")->required();
  r.add(c->app, "harmful", a->harmful, "JSONL whose prompts are harmful")->required();
  r.add(c->app, "harmless", a->harmless, "JSONL whose prompts are harmless")->required();
  r.add(c->app, "prune-top", a->prune_top, "Also write a model with the k most accurate heads removed");
  c->out = "probe";
  c->run = [a](Command& cmd) {
    const auto m = read_model(a->model);
    auto prompts = [&](const std::string& path, Role role) {
      std::vector<std::string> out;
      for (const auto& e : read_data(path, role, m).examples) out.push_back(e.prompt);
      return out;
    };
    const ProbeResult res =
        probe_heads(m, prompts(a->harmful, Role::kSafety), prompts(a->harmless, Role::kUtility), cmd.seed());
    std::vector<report::LabeledValue> bars;
    for (const auto& h : res.heads)
      bars.push_back({std::to_string(h.block) + "." + std::to_string(h.head), h.accuracy});
    report::write_text(cmd.out_dir / "probe.csv", report::probe_csv(cmd.config_json, res));
    report::write_text(cmd.out_dir / "probe.svg",
                       report::svg_bars(cmd.config_json, "probe accuracy", "accuracy", bars));
    if (a->prune_top) {
      if (a->prune_top > res.heads.size()) throw ValidationError("--prune-top exceeds the number of heads");
      auto ranked = res.heads;
      std::stable_sort(ranked.begin(), ranked.end(),
                       [](const HeadProbe& x, const HeadProbe& y) { return x.accuracy > y.accuracy; });
      std::vector<std::pair<std::size_t, std::size_t>> heads;
      for (std::size_t i = 0; i < a->prune_top; ++i) heads.emplace_back(ranked[i].block, ranked[i].head);
      save_model(prune_heads(m, heads), cmd.out_dir / "model.watk", cmd.config_json);
    }
  };
  cmds.push_back(std::move(c));
}

struct EvalArgs {
  std::string model, suite;
  bool no_adv = false;
};

void add_eval(CLI::App& top, std::vector<std::unique_ptr<Command>>& cmds) {
  auto c = std::make_unique<Command>();
  auto a = std::make_shared<EvalArgs>();
  c->app = top.add_subcommand("eval", "Attack success rates and utility of a checkpoint");
  auto& r = c->rec;
  r.add(c->app, "model", a->model, "Checkpoint")->required();
  r.add(c->app, "suite", a->suite, "Evaluation suite JSON")->required();
  r.flag(c->app, "no-adv", a->no_adv, "Skip sampled-decoding ASR");
  c->out = "eval";
  c->run = [a](Command& cmd) {
    const auto rep = evaluate(read_model(a->model), report::read_suite(a->suite), !a->no_adv);
    report::write_text(cmd.out_dir / "eval.json", report::eval_json(cmd.config_json, rep));
  };
  cmds.push_back(std::move(c));
}

struct SweepArgs {
  std::string method = "snip-setdiff", model, safety, utility, suite;
  std::vector<double> p, q;
  std::vector<std::size_t> r_u, r_s;
  std::size_t sample_cap = 128;
  bool no_adv = false;
};

void write_sweep(const Command& cmd, const std::string& csv, const std::vector<SweepRow>& rows, bool ranks,
                 const EvalReport& base) {
  report::write_text(cmd.out_dir / "sweep.csv", csv);
  report::write_text(cmd.out_dir / "sweep.json", report::sweep_json(cmd.config_json, rows, ranks, base));
  report::write_text(cmd.out_dir / "sweep.svg", report::svg_scatter(cmd.config_json, cmd.app->get_name(),
                                                                    "utility_accuracy", "asr_vanilla",
                                                                    scatter_points(rows)));
}

void add_sweep_neurons(CLI::App& top, std::vector<std::unique_ptr<Command>>& cmds) {
  auto c = std::make_unique<Command>();
  auto a = std::make_shared<SweepArgs>();
  a->p = default_fraction_grid();
  a->q = default_fraction_grid();
  c->app = top.add_subcommand("sweep-neurons", "Prune and evaluate over a (p, q) grid");
  auto& r = c->rec;
  r.add(c->app, "method", a->method, "Pruning method");
  r.add(c->app, "model", a->model, "Checkpoint")->required();
  r.add(c->app, "safety", a->safety, "Safety JSONL")->required();
  r.add(c->app, "utility", a->utility, "Utility JSONL")->required();
  r.add(c->app, "suite", a->suite, "Evaluation suite JSON")->required();
  r.add(c->app, "p", a->p, "Utility fractions (percent, comma separated)")->delimiter(',');
  r.add(c->app, "q", a->q, "Safety fractions (percent, comma separated)")->delimiter(',');
  r.add(c->app, "sample-cap", a->sample_cap, "Calibration examples drawn");
  r.flag(c->app, "no-adv", a->no_adv, "Skip sampled-decoding ASR");
  c->out = "sweep_neurons";
  c->run = [a](Command& cmd) {
    const auto method = parse_prune_method(a->method);
    const auto m = read_model(a->model);
    const auto s_ex = sampled_examples(read_data(a->safety, Role::kSafety, m, a->sample_cap), cmd.seed());
    const auto u_ex = sampled_examples(read_data(a->utility, Role::kUtility, m, a->sample_cap), cmd.seed());
    const EvalSuite suite = report::read_suite(a->suite);
    const auto rows = sweep_neurons(m, s_ex, u_ex, suite, method, a->p, a->q, {!a->no_adv, cmd.globals->jobs});
    const EvalReport base = evaluate(m, suite, !a->no_adv);
    write_sweep(cmd, report::neuron_sweep_csv(cmd.config_json, a->method, rows), rows, false, base);
  };
  cmds.push_back(std::move(c));
}

void add_sweep_ranks(CLI::App& top, std::vector<std::unique_ptr<Command>>& cmds) {
  auto c = std::make_unique<Command>();
  auto a = std::make_shared<SweepArgs>();
  c->app = top.add_subcommand("sweep-ranks", "Rank isolation and evaluation over an (r_u, r_s) grid");
  auto& r = c->rec;
  r.add(c->app, "model", a->model, "Checkpoint")->required();
  r.add(c->app, "safety", a->safety, "Safety JSONL")->required();
  r.add(c->app, "utility", a->utility, "Utility JSONL")->required();
  r.add(c->app, "suite", a->suite, "Evaluation suite JSON")->required();
  r.add(c->app, "ru", a->r_u, "Utility ranks discarded (comma separated)")->delimiter(',');
  r.add(c->app, "rs", a->r_s, "Safety ranks discarded (comma separated)")->delimiter(',');
  r.add(c->app, "sample-cap", a->sample_cap, "Calibration examples drawn");
  r.flag(c->app, "no-adv", a->no_adv, "Skip sampled-decoding ASR");
  c->out = "sweep_ranks";
  c->run = [a](Command& cmd) {
    const auto m = read_model(a->model);
    const auto s_ex = sampled_examples(read_data(a->safety, Role::kSafety, m, a->sample_cap), cmd.seed());
    const auto u_ex = sampled_examples(read_data(a->utility, Role::kUtility, m, a->sample_cap), cmd.seed());
    const EvalSuite suite = report::read_suite(a->suite);
    const auto grid = default_rank_grid(m.config.d_model);
    const auto rows = sweep_ranks(m, s_ex, u_ex, suite, a->r_u.empty() ? grid : a->r_u,
                                  a->r_s.empty() ? grid : a->r_s, {!a->no_adv, cmd.globals->jobs});
    const EvalReport base = evaluate(m, suite, !a->no_adv);
    write_sweep(cmd, report::rank_sweep_csv(cmd.config_json, rows), rows, true, base);
  };
  cmds.push_back(std::move(c));
}

struct FinetuneArgs {
  std::string model, safety, data, suite, frozen;
  std::vector<double> q{0, 1, 3, 5, 10};
  std::vector<std::size_t> n{10, 50, 100};
  std::size_t steps = 100, batch = 4, sample_cap = 128;
  double lr = 1e-2;
};

void add_finetune_frozen(CLI::App& top, std::vector<std::unique_ptr<Command>>& cmds) {
  auto c = std::make_unique<Command>();
  auto a = std::make_shared<FinetuneArgs>();
  c->app = top.add_subcommand("finetune-frozen", "Fine-tune with safety neurons frozen");
  auto& r = c->rec;
  r.add(c->app, "model", a->model, "Checkpoint")->required();
  r.add(c->app, "data", a->data, "Fine-tuning JSONL")->required();
  r.add(c->app, "frozen", a->frozen, "Neuron-set file: fine-tune once and write the model");
  r.add(c->app, "safety", a->safety, "Safety JSONL (grid mode)");
  r.add(c->app, "suite", a->suite, "Evaluation suite JSON (grid mode)");
  r.add(c->app, "q", a->q, "Frozen safety fractions (percent, comma separated)")->delimiter(',');
  r.add(c->app, "n", a->n, "Fine-tuning set sizes (comma separated)")->delimiter(',');
  r.add(c->app, "steps", a->steps, "SGD steps");
  r.add(c->app, "batch", a->batch, "Examples per step");
  r.add(c->app, "lr", a->lr, "Learning rate");
  r.add(c->app, "sample-cap", a->sample_cap, "Safety calibration examples drawn");
  c->out = "finetune";
  c->run = [a](Command& cmd) {
    const auto m = read_model(a->model);
    const auto data = read_data(a->data, Role::kUtility, m).examples;
    FinetuneOptions o;
    o.steps = a->steps;
    o.batch = a->batch;
    o.lr = a->lr;
    o.seed = cmd.seed();
    if (!a->frozen.empty()) {
      std::ifstream is(a->frozen);
      if (!is) throw ValidationError("cannot open " + a->frozen);
      std::stringstream ss;
      ss << is.rdbuf();
      const auto sets = parse_neuron_sets(ss.str(), m);
      fs::create_directories(cmd.out_dir);
      save_model(finetune_frozen(m, data, sets, o), cmd.out_dir / "model.watk", cmd.config_json);
      return;
    }
    if (a->safety.empty()) throw ValidationError("--safety is required without --frozen");
    if (a->suite.empty()) throw ValidationError("--suite is required without --frozen");
    const auto s_ex = sampled_examples(read_data(a->safety, Role::kSafety, m, a->sample_cap), cmd.seed());
    const auto rep = freeze_experiment(m, s_ex, data, report::read_suite(a->suite), a->q, a->n, o);
    report::write_text(cmd.out_dir / "freeze.csv", report::freeze_csv(cmd.config_json, rep));
  };
  cmds.push_back(std::move(c));
}

}  // namespace

int run(const std::vector<std::string>& argv, std::ostream& err) {
  CLI::App top{"Safety attribution toolkit"};
  top.require_subcommand(1);
  top.fallthrough();
  Globals g;
  top.add_option("--seed", g.seed, "Seed for sampling, splits and training");
  top.add_option("--jobs", g.jobs, "Parallel grid points in sweeps")->check(CLI::PositiveNumber);
  top.add_option("--config", g.config, "key=value file standing in for flags");

  std::vector<std::unique_ptr<Command>> cmds;
  add_train_fixture(top, cmds);
  add_score(top, cmds);
  add_isolate(top, cmds);
  add_prune(top, cmds);
  add_rank_basis(top, cmds);
  add_rank_isolate(top, cmds);
  add_rank_remove(top, cmds);
  add_analyze_overlap(top, cmds);
  add_probe(top, cmds);
  add_eval(top, cmds);
  add_sweep_neurons(top, cmds);
  add_sweep_ranks(top, cmds);
  add_finetune_frozen(top, cmds);
  for (auto& c : cmds) {
    c->rec.add(c->app, "out", c->out, "Output directory (under $ATTRIB_OUT when relative)");
    c->globals = &g;
  }

  try {
    std::vector<std::string> args(argv.begin() + (argv.empty() ? 0 : 1), argv.end());
    args = merge_config(args, top);
    std::reverse(args.begin(), args.end());
    top.parse(args);
    for (auto& c : cmds) {
      if (!c->app->parsed()) continue;
      c->out_dir = resolve_out(c->out);
      c->config_json = build_config(*c);
      c->run(*c);
    }
    return 0;
  } catch (const CLI::CallForHelp&) {
    std::cout << top.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << top.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return 1;
  } catch (const ValidationError& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "internal error: " << one_line(e.what()) << "\n";
    return 2;
  }
}

}  // namespace watk::cli
