#include "watk/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace watk::report {

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// "--" is not allowed inside an XML comment.
std::string comment_safe(std::string s) {
  for (std::size_t i = s.find("--"); i != std::string::npos; i = s.find("--", i)) s.replace(i, 2, "- -");
  return s;
}

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : "not computed"; }

nlohmann::ordered_json metrics_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["asr_vanilla"] = r.asr_vanilla;
  j["asr_adv_decoding"] = r.asr_adv_decoding ? nlohmann::ordered_json(*r.asr_adv_decoding)
                                             : nlohmann::ordered_json("not computed");
  j["asr_adv_suffix"] = "not computed";
  j["utility_accuracy"] = r.utility_accuracy;
  j["utility_nll"] = r.utility_nll;
  return j;
}

std::string svg_open(const std::string& config_json, int w, int h) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<!-- config: " << comment_safe(config_json) << " -->\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  return os.str();
}

}  // namespace

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw ValidationError("write failed for " + path.string());
}

std::string csv_header(const std::string& config_json) { return "# config: " + config_json + "\n"; }

std::string sparsity_csv(const std::string& config_json, const std::string& method, double p, double q,
                         double actual_sparsity) {
  return csv_header(config_json) + "method,p,q,actual_sparsity\n" + method + "," + num(p) + "," + num(q) +
         "," + num(actual_sparsity) + "\n";
}

std::string neuron_sweep_csv(const std::string& config_json, const std::string& method,
                             const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << csv_header(config_json)
     << "method,p,q,actual_sparsity,asr_vanilla,asr_adv_decoding,asr_adv_suffix,utility_accuracy,utility_nll,pareto\n";
  for (const auto& r : rows)
    os << method << "," << num(r.p) << "," << num(r.q) << "," << num(r.actual_sparsity) << ","
       << num(r.metrics.asr_vanilla) << "," << opt_num(r.metrics.asr_adv_decoding) << ","
       << opt_num(r.metrics.asr_adv_suffix) << "," << num(r.metrics.utility_accuracy) << ","
       << num(r.metrics.utility_nll) << "," << (r.pareto ? 1 : 0) << "\n";
  return os.str();
}

std::string rank_sweep_csv(const std::string& config_json, const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << csv_header(config_json)
     << "r_u,r_s,rank_bound,delta_rank,asr_vanilla,asr_adv_decoding,asr_adv_suffix,utility_accuracy,utility_nll,pareto\n";
  for (const auto& r : rows)
    os << r.r_u << "," << r.r_s << "," << r.rank_bound << "," << r.delta_rank << ","
       << num(r.metrics.asr_vanilla) << "," << opt_num(r.metrics.asr_adv_decoding) << ","
       << opt_num(r.metrics.asr_adv_suffix) << "," << num(r.metrics.utility_accuracy) << ","
       << num(r.metrics.utility_nll) << "," << (r.pareto ? 1 : 0) << "\n";
  return os.str();
}

std::string sweep_json(const std::string& config_json, const std::vector<SweepRow>& rows, bool ranks,
                       const EvalReport& baseline) {
  nlohmann::ordered_json j;
  j["config"] = nlohmann::ordered_json::parse(config_json);
  j["baseline"] = metrics_json(baseline);
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json e;
    if (ranks) {
      e["r_u"] = r.r_u;
      e["r_s"] = r.r_s;
      e["rank_bound"] = r.rank_bound;
      e["delta_rank"] = r.delta_rank;
    } else {
      e["p"] = r.p;
      e["q"] = r.q;
      e["actual_sparsity"] = r.actual_sparsity;
    }
    e["metrics"] = metrics_json(r.metrics);
    e["pareto"] = r.pareto;
    arr.push_back(std::move(e));
  }
  j["rows"] = std::move(arr);
  return j.dump(2) + "\n";
}

std::string eval_json(const std::string& config_json, const EvalReport& r) {
  nlohmann::ordered_json j;
  j["config"] = nlohmann::ordered_json::parse(config_json);
  j["metrics"] = metrics_json(r);
  return j.dump(2) + "\n";
}

std::string suite_json(const std::string& config_json, const EvalSuite& suite) {
  nlohmann::ordered_json j;
  j["config"] = nlohmann::ordered_json::parse(config_json);
  j["preamble"] = suite.preamble;
  j["patterns"] = suite.patterns;
  j["max_new"] = suite.max_new;
  j["adv_samples"] = suite.adv_samples;
  j["adv_temperature"] = suite.adv_temperature;
  j["adv_seed"] = suite.adv_seed;
  j["harmful_prompts"] = suite.harmful_prompts;
  auto& items = j["utility_items"] = nlohmann::ordered_json::array();
  for (const auto& it : suite.utility_items) items.push_back({{"prompt", it.prompt}, {"answer", it.answer}});
  return j.dump(2) + "\n";
}

EvalSuite read_suite(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open suite " + path.string());
  const nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ValidationError(path.string() + ": not a JSON object");
  EvalSuite s;
  try {
    s.preamble = j.value("preamble", std::string());
    s.patterns = j.at("patterns").get<std::vector<std::string>>();
    s.max_new = j.value("max_new", s.max_new);
    s.adv_samples = j.value("adv_samples", s.adv_samples);
    s.adv_temperature = j.value("adv_temperature", s.adv_temperature);
    s.adv_seed = j.value("adv_seed", s.adv_seed);
    s.harmful_prompts = j.at("harmful_prompts").get<std::vector<std::string>>();
    for (const auto& it : j.at("utility_items"))
      s.utility_items.push_back({it.at("prompt").get<std::string>(), it.at("answer").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  if (s.harmful_prompts.empty() || s.utility_items.empty())
    throw ValidationError(path.string() + ": suite needs harmful prompts and utility items");
  RefusalPatternList check(s.patterns);
  return s;
}

std::string block_value_csv(const std::string& config_json, const std::string& key,
                            const std::vector<std::pair<std::size_t, LabeledValue>>& rows) {
  std::ostringstream os;
  os << csv_header(config_json) << "block," << key << ",value\n";
  for (const auto& [b, lv] : rows) os << b << "," << lv.label << "," << num(lv.value) << "\n";
  return os.str();
}

std::string probe_csv(const std::string& config_json, const ProbeResult& r) {
  std::ostringstream os;
  os << csv_header(config_json) << "# split: train=" << r.n_train << " validation=" << r.n_validation
     << "\nblock,head,value\n";
  for (const auto& h : r.heads) os << h.block << "," << h.head << "," << num(h.accuracy) << "\n";
  return os.str();
}

std::string freeze_csv(const std::string& config_json, const FreezeReport& r) {
  std::ostringstream os;
  os << csv_header(config_json) << "q,frozen_percent";
  for (std::size_t n : r.n_grid) os << ",asr_vanilla_n" << n;
  os << "\n";
  for (const auto& row : r.rows) {
    os << num(row.q) << "," << num(100.0 * row.frozen_fraction);
    for (double a : row.asr) os << "," << num(a);
    os << "\n";
  }
  return os.str();
}

std::string train_curve_csv(const std::string& config_json,
                            const std::vector<std::pair<std::size_t, std::vector<double>>>& rows,
                            const std::vector<std::string>& columns) {
  std::ostringstream os;
  os << csv_header(config_json) << "step";
  for (const auto& c : columns) os << "," << c;
  os << "\n";
  for (const auto& [step, vals] : rows) {
    os << step;
    for (double v : vals) os << "," << num(v);
    os << "\n";
  }
  return os.str();
}

std::string svg_scatter(const std::string& config_json, const std::string& title, const std::string& x_label,
                        const std::string& y_label, const std::vector<Point>& points) {
  const int w = 480, h = 360, l = 60, r = 20, t = 36, b = 50;
  std::ostringstream os;
  os << svg_open(config_json, w, h);
  os << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
  os << "<rect x=\"" << l << "\" y=\"" << t << "\" width=\"" << w - l - r << "\" height=\"" << h - t - b
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  // Both axes span [0, 1]: rates.
  for (int i = 0; i <= 4; ++i) {
    const double v = i / 4.0;
    const double x = l + v * (w - l - r);
    const double y = h - b - v * (h - t - b);
    os << "<text x=\"" << x << "\" y=\"" << h - b + 14 << "\" text-anchor=\"middle\">" << num(v) << "</text>\n";
    os << "<text x=\"" << l - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << num(v) << "</text>\n";
  }
  os << "<text x=\"" << (l + w - r) / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\">" << xml_escape(x_label) << "</text>\n";
  os << "<text transform=\"translate(16," << (t + h - b) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
     << xml_escape(y_label) << "</text>\n";
  for (const auto& p : points) {
    const double x = l + std::clamp(p.x, 0.0, 1.0) * (w - l - r);
    const double y = h - b - std::clamp(p.y, 0.0, 1.0) * (h - t - b);
    os << "<circle cx=\"" << num(x) << "\" cy=\"" << num(y) << "\" r=\"4\" fill=\""
       << (p.highlight ? "#d62728" : "#1f77b4") << "\" fill-opacity=\"0.7\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string svg_bars(const std::string& config_json, const std::string& title, const std::string& y_label,
                     const std::vector<LabeledValue>& bars) {
  const int bw = 18, l = 60, r = 20, t = 36, b = 110, plot_h = 220;
  const int w = l + r + std::max<int>(1, static_cast<int>(bars.size())) * bw;
  const int h = t + plot_h + b;
  double top = 1.0;
  for (const auto& v : bars) top = std::max(top, v.value);
  std::ostringstream os;
  os << svg_open(config_json, w, h);
  os << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
  os << "<text transform=\"translate(16," << t + plot_h / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
     << xml_escape(y_label) << "</text>\n";
  os << "<line x1=\"" << l << "\" y1=\"" << t + plot_h << "\" x2=\"" << w - r << "\" y2=\"" << t + plot_h
     << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << l - 6 << "\" y=\"" << t + 4 << "\" text-anchor=\"end\">" << num(top) << "</text>\n";
  os << "<text x=\"" << l - 6 << "\" y=\"" << t + plot_h + 4 << "\" text-anchor=\"end\">0</text>\n";
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double hh = std::max(0.0, bars[i].value) / top * plot_h;
    const int x = l + static_cast<int>(i) * bw;
    os << "<rect x=\"" << x + 2 << "\" y=\"" << num(t + plot_h - hh) << "\" width=\"" << bw - 4
       << "\" height=\"" << num(hh) << "\" fill=\"#1f77b4\"/>\n";
    os << "<text transform=\"translate(" << x + bw / 2 + 3 << "," << t + plot_h + 8
       << ") rotate(90)\" font-size=\"9\">" << xml_escape(bars[i].label) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace watk::report
