#include "watk/calib.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>

#include "json.hpp"

namespace watk {

TokenSeq byte_tokenize(std::string_view text) {
  TokenSeq out;
  out.reserve(text.size());
  for (unsigned char ch : text) out.push_back(ch);
  return out;
}

std::string detokenize(std::span<const Token> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (Token t : tokens) {
    if (t > 255) throw ValidationError("detokenize: token " + std::to_string(t) + " is not a byte");
    out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

ScoredSequence CalibExample::scored() const {
  ScoredSequence s;
  s.tokens.reserve(1 + prompt_tokens.size() + response_tokens.size());
  s.tokens.push_back(kBosToken);
  s.tokens.insert(s.tokens.end(), prompt_tokens.begin(), prompt_tokens.end());
  s.tokens.insert(s.tokens.end(), response_tokens.begin(), response_tokens.end());
  s.response_begin = response_begin();
  return s;
}

CalibExample tokenize(CalibExample example, std::size_t max_seq) {
  if (example.response.empty()) throw ValidationError("empty response");
  example.prompt_tokens = byte_tokenize(example.prompt);
  example.response_tokens = byte_tokenize(example.response);
  example.oversized = 1 + example.prompt_tokens.size() + example.response_tokens.size() > max_seq;
  return example;
}

double conditional_loss(const ModelCheckpoint& model, const CalibExample& example) {
  if (example.response_tokens.empty()) throw ValidationError("conditional_loss: empty response span");
  return sequence_loss(model, example.scored());
}

GradientSet grad_loss(const ModelCheckpoint& model, const CalibExample& example) {
  if (example.response_tokens.empty()) throw ValidationError("grad_loss: empty response span");
  return linear_gradients(sequence_loss_and_grad(model, example.scored()).grad);
}

std::string_view to_string(Role role) { return role == Role::kSafety ? "safety" : "utility"; }

Role parse_role(std::string_view s) {
  if (s == "safety") return Role::kSafety;
  if (s == "utility") return Role::kUtility;
  throw ValidationError("unknown dataset role '" + std::string(s) + "' (expected safety|utility)");
}

CalibDataset load_dataset(const std::filesystem::path& path, Role role, std::size_t max_seq,
                          LoadReport* report) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open dataset " + path.string());
  CalibDataset ds;
  ds.name = path.stem().string();
  ds.role = role;
  LoadReport local;
  LoadReport& rep = report ? *report : local;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    auto reject = [&](const std::string& why) {
      ++rep.rejected;
      rep.messages.push_back("line " + std::to_string(lineno) + ": " + why);
    };
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      reject("not a JSON object");
      continue;
    }
    if (j.size() == 1 && j.contains("run_config")) continue;
    if (!j.contains("prompt") || !j["prompt"].is_string() || !j.contains("response") ||
        !j["response"].is_string()) {
      reject("missing string field prompt/response");
      continue;
    }
    CalibExample ex;
    ex.prompt = j["prompt"].get<std::string>();
    ex.response = j["response"].get<std::string>();
    if (ex.response.empty()) {
      reject("empty response");
      continue;
    }
    ex = tokenize(std::move(ex), max_seq);
    if (ex.oversized) {
      reject("example exceeds max_seq");
      continue;
    }
    ds.examples.push_back(std::move(ex));
    ++rep.accepted;
  }
  if (ds.examples.empty())
    throw ValidationError("dataset " + path.string() + " has no valid records (" +
                          std::to_string(rep.rejected) + " rejected)");
  return ds;
}

void write_dataset(const std::filesystem::path& path, const std::vector<CalibExample>& examples,
                   const std::string& run_config) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ValidationError("cannot open " + path.string() + " for writing");
  if (!run_config.empty()) {
    nlohmann::ordered_json h;
    h["run_config"] = nlohmann::ordered_json::parse(run_config);
    os << h.dump() << '\n';
  }
  for (const auto& ex : examples) {
    nlohmann::ordered_json j;
    j["prompt"] = ex.prompt;
    j["response"] = ex.response;
    os << j.dump() << '\n';
  }
  if (!os) throw ValidationError("I/O failure writing " + path.string());
}

std::vector<std::size_t> sample_indices(const CalibDataset& dataset, std::uint64_t seed) {
  std::vector<std::size_t> idx(dataset.examples.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (idx.size() > dataset.sample_cap) {
    std::mt19937_64 rng(seed);
    // Fisher-Yates with explicit draws so the order does not depend on the
    // standard library's shuffle implementation.
    for (std::size_t i = idx.size() - 1; i > 0; --i) std::swap(idx[i], idx[rng() % (i + 1)]);
    idx.resize(dataset.sample_cap);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

std::vector<CalibExample> sampled_examples(const CalibDataset& dataset, std::uint64_t seed) {
  std::vector<CalibExample> out;
  for (std::size_t i : sample_indices(dataset, seed)) out.push_back(dataset.examples[i]);
  return out;
}

std::map<LayerAddress, ActivationMatrix> capture_examples(const ModelCheckpoint& model,
                                                          std::span<const CalibExample> examples,
                                                          const std::set<LayerAddress>& addresses) {
  std::map<LayerAddress, std::vector<Matrix>> parts;
  std::size_t total = 0;
  for (const auto& ex : examples) {
    const ScoredSequence seq = ex.scored();
    CaptureSpec spec;
    spec.addresses = addresses;
    spec.pos_begin = seq.response_begin;
    spec.pos_end = seq.tokens.size();
    spec.stop_after_last_capture = true;
    ForwardResult fr = forward(model, seq.tokens, &spec);
    for (auto& [addr, m] : fr.captures) parts[addr].push_back(std::move(m));
    total += seq.tokens.size() - seq.response_begin;
  }
  if (total == 0) throw ValidationError("capture_activations: no response tokens");
  std::map<LayerAddress, ActivationMatrix> out;
  for (auto& [addr, list] : parts) {
    const std::size_t d_in = list.front().rows();
    Matrix data(d_in, total);
    std::size_t col = 0;
    for (const Matrix& m : list) {
      for (std::size_t r = 0; r < d_in; ++r)
        std::copy(m.row(r).begin(), m.row(r).end(), data.row(r).begin() + static_cast<std::ptrdiff_t>(col));
      col += m.cols();
    }
    out.emplace(addr, ActivationMatrix{addr, std::move(data)});
  }
  return out;
}

std::map<LayerAddress, ActivationMatrix> capture_activations(const ModelCheckpoint& model,
                                                             const CalibDataset& dataset,
                                                             const std::set<LayerAddress>& addresses,
                                                             std::uint64_t seed) {
  const auto examples = sampled_examples(dataset, seed);
  return capture_examples(model, examples, addresses);
}

}  // namespace watk
