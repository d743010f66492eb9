#include "watk/fixture.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace watk {

namespace {

std::vector<std::span<double>> buffers(ModelCheckpoint& m) {
  std::vector<std::span<double>> out;
  m.for_each_buffer([&](const std::string&, std::span<double> b) { out.push_back(b); });
  return out;
}

std::vector<std::span<const double>> buffers(const ModelCheckpoint& m) {
  std::vector<std::span<const double>> out;
  m.for_each_buffer([&](const std::string&, std::span<const double> b) { out.push_back(b); });
  return out;
}

void add_into(ModelCheckpoint& acc, const ModelCheckpoint& g) {
  auto a = buffers(acc);
  const auto b = buffers(g);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a[i].size(); ++k) a[i][k] += b[i][k];
}

std::string random_word(const FixtureGrammar& g, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> len(g.min_len, g.max_len);
  std::uniform_int_distribution<std::size_t> ch(0, g.alphabet.size() - 1);
  std::string s(len(rng), ' ');
  for (char& c : s) c = g.alphabet[ch(rng)];
  return s;
}

FixtureTask draw_task(double harmful_fraction, std::mt19937_64& rng) {
  if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) < harmful_fraction)
    return FixtureTask::kHarmful;
  return static_cast<FixtureTask>(std::uniform_int_distribution<int>(0, 2)(rng));
}

bool with_preamble(double prob, std::mt19937_64& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < prob;
}

CalibExample make_example(const std::string& prompt, const std::string& response,
                          std::size_t max_seq) {
  CalibExample ex;
  ex.prompt = prompt;
  ex.response = response;
  ex = tokenize(std::move(ex), max_seq);
  if (ex.oversized) throw ValidationError("fixture example exceeds max_seq: " + prompt);
  return ex;
}

// Training never sees evaluation prompts; addition is exempt (see header).
bool held_out(const FixtureSample& s, const std::set<std::string>& eval_prompts) {
  return s.task != FixtureTask::kAdd && eval_prompts.count(s.prompt) > 0;
}

}  // namespace

FixtureSample draw_sample(const FixtureGrammar& g, FixtureTask task, std::mt19937_64& rng) {
  FixtureSample s;
  s.task = task;
  switch (task) {
    case FixtureTask::kCopy: {
      const auto w = random_word(g, rng);
      s.prompt = "c:" + w + "=";
      s.answer = w;
      break;
    }
    case FixtureTask::kReverse: {
      const auto w = random_word(g, rng);
      s.prompt = "r:" + w + "=";
      s.answer = std::string(w.rbegin(), w.rend());
      break;
    }
    case FixtureTask::kAdd: {
      std::uniform_int_distribution<int> digit(0, 9);
      const int x = digit(rng), y = digit(rng);
      s.prompt = "a:" + std::to_string(x) + "+" + std::to_string(y) + "=";
      s.answer = std::to_string(x + y);
      break;
    }
    case FixtureTask::kHarmful:
      s.prompt = g.harmful_tag + random_word(g, rng) + "=";
      break;
  }
  return s;
}

FixtureData make_fixture_data(const FixtureConfig& cfg) {
  const auto& g = cfg.grammar;
  std::mt19937_64 rng(cfg.seed ^ 0x5eedda7aULL);
  FixtureData d;
  d.suite.preamble = g.preamble;
  d.suite.patterns = g.patterns;
  d.suite.max_new = cfg.max_new;
  d.suite.adv_seed = cfg.seed;

  std::set<std::string> used;
  const std::size_t max_tries = 1000000;
  std::size_t tries = 0;
  while (d.suite.harmful_prompts.size() < cfg.harmful_eval) {
    if (++tries > max_tries) throw ValidationError("fixture grammar too small for harmful eval set");
    auto s = draw_sample(g, FixtureTask::kHarmful, rng);
    if (used.insert(s.prompt).second) d.suite.harmful_prompts.push_back(s.prompt);
  }
  tries = 0;
  while (d.suite.utility_items.size() < cfg.utility_eval) {
    if (++tries > max_tries) throw ValidationError("fixture grammar too small for utility eval set");
    const auto task = static_cast<FixtureTask>(d.suite.utility_items.size() % 3);
    auto s = draw_sample(g, task, rng);
    if (task == FixtureTask::kAdd || used.insert(s.prompt).second)
      d.suite.utility_items.push_back({s.prompt, s.answer});
  }

  while (d.safety_full.size() < cfg.calib_size) {
    auto s = draw_sample(g, FixtureTask::kHarmful, rng);
    if (used.count(s.prompt)) continue;
    const std::string prompt = (with_preamble(cfg.preamble_prob, rng) ? g.preamble : "") + s.prompt;
    d.safety_full.push_back(make_example(prompt, g.refusal_full, cfg.model.max_seq));
    d.safety_short.push_back(make_example(prompt, g.refusal_short, cfg.model.max_seq));
  }
  while (d.utility.size() < cfg.calib_size) {
    const auto task = static_cast<FixtureTask>(d.utility.size() % 3);
    auto s = draw_sample(g, task, rng);
    if (held_out(s, used)) continue;
    const std::string prompt = (with_preamble(cfg.preamble_prob, rng) ? g.preamble : "") + s.prompt;
    d.utility.push_back(make_example(prompt, s.answer + "\n", cfg.model.max_seq));
  }
  return d;
}

AdamW::AdamW(const ModelCheckpoint& shape, double beta1, double beta2, double eps)
    : m_(ModelCheckpoint::zeros(shape.config)),
      v_(ModelCheckpoint::zeros(shape.config)),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {}

void AdamW::step(ModelCheckpoint& params, const ModelCheckpoint& grad, double lr,
                 double weight_decay) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  std::vector<std::pair<std::string, std::span<double>>> p;
  params.for_each_buffer([&](const std::string& n, std::span<double> b) { p.emplace_back(n, b); });
  const auto g = buffers(grad);
  auto m = buffers(m_);
  auto v = buffers(v_);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool decay = p[i].first.find("norm") == std::string::npos;
    auto w = p[i].second;
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[i][k] = beta1_ * m[i][k] + (1.0 - beta1_) * g[i][k];
      v[i][k] = beta2_ * v[i][k] + (1.0 - beta2_) * g[i][k] * g[i][k];
      const double upd = (m[i][k] / c1) / (std::sqrt(v[i][k] / c2) + eps_);
      w[k] -= lr * (upd + (decay ? weight_decay * w[k] : 0.0));
    }
  }
}

double gradient_norm(const ModelCheckpoint& grad) {
  double s = 0.0;
  for (const auto& b : buffers(grad))
    for (double x : b) s += x * x;
  return std::sqrt(s);
}

void scale_gradient(ModelCheckpoint& grad, double s) {
  for (auto& b : buffers(grad))
    for (double& x : b) x *= s;
}

FixtureResult train_fixture(const FixtureConfig& cfg, const TrainLog& log) {
  cfg.model.validate();
  if (cfg.batch == 0 || cfg.eval_every == 0) throw ValidationError("train_fixture: batch and eval_every must be positive");
  const auto& g = cfg.grammar;
  FixtureResult res;
  res.data = make_fixture_data(cfg);
  const auto& suite = res.data.suite;
  std::set<std::string> eval_prompts(suite.harmful_prompts.begin(), suite.harmful_prompts.end());
  for (const auto& it : suite.utility_items) eval_prompts.insert(it.prompt);

  res.model = ModelCheckpoint::random(cfg.model, cfg.seed);
  ModelCheckpoint& model = res.model;
  AdamW opt(model);
  std::mt19937_64 rng(cfg.seed);
  const RefusalPatternList patterns(g.patterns);

  double loss_acc = 0.0;
  std::size_t loss_n = 0;
  std::vector<ScoredSequence> batch(cfg.batch);
  std::vector<LossAndGrad> grads(cfg.batch);
  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    for (auto& seq : batch) {
      FixtureSample s;
      do {
        s = draw_sample(g, draw_task(cfg.harmful_fraction, rng), rng);
      } while (held_out(s, eval_prompts));
      const std::string prompt = (with_preamble(cfg.preamble_prob, rng) ? g.preamble : "") + s.prompt;
      const std::string response = s.task == FixtureTask::kHarmful ? g.refusal_full : s.answer + "\n";
      seq = make_example(prompt, response, cfg.model.max_seq).scored();
    }
    const auto nb = static_cast<std::ptrdiff_t>(cfg.batch);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < nb; ++i)
      grads[static_cast<std::size_t>(i)] = sequence_loss_and_grad(model, batch[static_cast<std::size_t>(i)]);
    ModelCheckpoint total = std::move(grads[0].grad);
    double loss = grads[0].loss;
    for (std::size_t i = 1; i < cfg.batch; ++i) {
      add_into(total, grads[i].grad);
      loss += grads[i].loss;
    }
    scale_gradient(total, 1.0 / static_cast<double>(cfg.batch));
    const double norm = gradient_norm(total);
    if (!std::isfinite(norm)) throw TrainingError("train_fixture: non-finite gradient at step " + std::to_string(step), res.curve);
    if (norm > cfg.clip) scale_gradient(total, cfg.clip / norm);
    const double lr = cfg.lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(std::max<std::size_t>(cfg.warmup, 1)));
    opt.step(model, total, lr, cfg.weight_decay);
    loss_acc += loss / static_cast<double>(cfg.batch);
    ++loss_n;

    if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
      ModelCheckpoint stored = model;
      stored.round_to_storage();
      TrainPoint pt;
      pt.step = step;
      pt.loss = loss_acc / static_cast<double>(loss_n);
      pt.asr_vanilla = asr_vanilla(stored, suite.harmful_prompts, patterns, suite.preamble, suite.max_new);
      pt.utility_accuracy = utility_eval(stored, suite.utility_items, suite.preamble, suite.max_new).accuracy;
      loss_acc = 0.0;
      loss_n = 0;
      res.curve.push_back(pt);
      if (log) log(pt);
      if (step >= cfg.min_steps && pt.asr_vanilla <= cfg.gate_asr && pt.utility_accuracy >= cfg.gate_utility) {
        res.model = std::move(stored);
        res.steps = step;
        return res;
      }
    }
  }
  std::ostringstream msg;
  msg << "train_fixture: gates (asr_vanilla <= " << cfg.gate_asr << ", utility >= " << cfg.gate_utility
      << ") not reached in " << cfg.max_steps << " steps; curve:";
  for (const auto& p : res.curve)
    msg << " [" << p.step << " loss=" << p.loss << " asr=" << p.asr_vanilla << " util=" << p.utility_accuracy << "]";
  throw TrainingError(msg.str(), res.curve);
}

}  // namespace watk
