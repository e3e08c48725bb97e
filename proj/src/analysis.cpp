#include "anchor/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>

#include <json.hpp>

#include "anchor/kernels.hpp"
#include "anchor/wire.hpp"

namespace anchor {

double attention_ratio(const Logits& attention_row, int prompt_length) {
  if (prompt_length < 0 || prompt_length > attention_row.size()) {
    throw ArgumentError("prompt length exceeds attention row length");
  }
  if ((attention_row.array() < 0.0).any()) throw ArgumentError("attention row has negative entries");
  if (std::abs(attention_row.sum() - 1.0) > 1e-6) throw ArgumentError("attention row is not normalized");
  const double prompt_mass = attention_row.head(prompt_length).sum();
  const double generated_mass = attention_row.tail(attention_row.size() - prompt_length).sum();
  const double total = prompt_mass + generated_mass;
  return total > 0.0 ? prompt_mass / total : 0.0;
}

DilutionCurve dilution_curve(const GenerationTrace& trace) {
  DilutionCurve curve;
  curve.prompt_length = static_cast<int>(trace.prompt_tokens.size());
  curve.alpha.reserve(trace.steps.size());
  for (std::size_t i = 0; i < trace.steps.size(); ++i) {
    const auto& attention = trace.steps[i].score.attention;
    if (!attention) throw ArgumentError("step " + std::to_string(i) + " has no attention row");
    curve.alpha.push_back(attention_ratio(*attention, curve.prompt_length));
  }
  return curve;
}

std::vector<double> gradient_attention(const Backend& backend, const Tokens& context, double delta) {
  const auto* model = dynamic_cast<const EmbeddingModel*>(&backend);
  if (!model) throw UnsupportedError("gradient attention needs a backend with embedding access");
  if (context.empty()) throw ArgumentError("empty context");
  if (!(delta > 0.0)) throw ArgumentError("delta must be positive");

  const Matrix<double> base = model->input_embeddings(context);
  const auto target = kernels::argmax(model->logits_from_embeddings(base));

  std::vector<double> out(context.size());
  Matrix<double> probe = base;
  for (Eigen::Index i = 0; i < base.rows(); ++i) {
    double sq = 0.0;
    for (Eigen::Index d = 0; d < base.cols(); ++d) {
      probe(i, d) = base(i, d) + delta;
      const double up = model->logits_from_embeddings(probe)[target];
      probe(i, d) = base(i, d) - delta;
      const double down = model->logits_from_embeddings(probe)[target];
      probe(i, d) = base(i, d);
      const double g = (up - down) / (2.0 * delta);
      sq += g * g;
    }
    out[static_cast<std::size_t>(i)] = std::sqrt(sq);
  }
  return out;
}

const LengthCell* LengthStats::find(const std::string& group, bool passed) const {
  for (const auto& c : cells) {
    if (c.group == group && c.passed == passed) return &c;
  }
  return nullptr;
}

namespace {

LengthCell summarize(std::string group, bool passed, std::vector<std::size_t> lengths) {
  LengthCell cell{std::move(group), passed, 0.0, 0.0, lengths.size()};
  if (lengths.empty()) return cell;
  std::sort(lengths.begin(), lengths.end());
  double sum = 0.0;
  for (auto l : lengths) sum += static_cast<double>(l);
  cell.mean = sum / static_cast<double>(lengths.size());
  const std::size_t mid = lengths.size() / 2;
  cell.median = lengths.size() % 2 ? static_cast<double>(lengths[mid])
                                   : 0.5 * (static_cast<double>(lengths[mid - 1]) + static_cast<double>(lengths[mid]));
  return cell;
}

}  // namespace

LengthStats length_stats(const std::vector<LengthSample>& samples) {
  if (samples.empty()) throw ArgumentError("no results to summarize");
  std::map<std::pair<std::string, bool>, std::vector<std::size_t>> groups;
  std::vector<std::size_t> overall[2];
  for (const auto& s : samples) {
    groups[{s.group, s.passed}].push_back(s.tokens);
    overall[s.passed].push_back(s.tokens);
  }
  LengthStats stats;
  for (auto& [key, lengths] : groups) stats.cells.push_back(summarize(key.first, key.second, std::move(lengths)));
  stats.cells.push_back(summarize("overall", true, std::move(overall[1])));
  stats.cells.push_back(summarize("overall", false, std::move(overall[0])));
  return stats;
}

void write_dilution_csv(std::ostream& out, const DilutionCurve& curve) {
  out << "step,alpha\n";
  for (std::size_t i = 0; i < curve.alpha.size(); ++i) out << i + 1 << ',' << wire::format_decimal(curve.alpha[i]) << '\n';
}

void write_length_csv(std::ostream& out, const LengthStats& stats) {
  out << "group,status,mean,median,count\n";
  for (const auto& c : stats.cells) {
    out << c.group << ',' << (c.passed ? "passed" : "failed") << ',' << wire::format_decimal(c.mean) << ','
        << wire::format_decimal(c.median) << ',' << c.count << '\n';
  }
}

namespace {

nlohmann::ordered_json scores_json(const Scores& s) {
  auto arr = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto value = wire::format_decimal(s.values[static_cast<Eigen::Index>(i)]);
    if (s.dense()) {
      arr.push_back(value);
    } else {
      arr.push_back({std::to_string(s.ids[i]), value});
    }
  }
  return arr;
}

}  // namespace

void write_trace_ndjson(std::ostream& out, const GenerationTrace& trace) {
  const int prompt_length = static_cast<int>(trace.prompt_tokens.size());
  for (std::size_t i = 0; i < trace.steps.size(); ++i) {
    const auto& step = trace.steps[i];
    nlohmann::ordered_json j;
    j["step"] = i;
    j["token"] = step.token;
    j["orig"] = scores_json(step.score.original);
    j["masked"] = step.score.masked ? scores_json(*step.score.masked) : nlohmann::ordered_json(nullptr);
    j["aug"] = step.score.augmented ? scores_json(*step.score.augmented) : nlohmann::ordered_json(nullptr);
    j["alpha"] = step.score.attention ? nlohmann::ordered_json(attention_ratio(*step.score.attention, prompt_length))
                                      : nlohmann::ordered_json(nullptr);
    out << j.dump() << '\n';
  }
}

DilutionCurve read_trace_alphas(std::istream& in) {
  DilutionCurve curve;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.at("alpha").is_null()) curve.alpha.push_back(j["alpha"].get<double>());
    } catch (const nlohmann::json::exception& e) {
      throw ArgumentError("trace line " + std::to_string(number) + ": " + e.what());
    }
  }
  return curve;
}

}  // namespace anchor
