#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "anchor/decoding.hpp"

namespace anchor {

/// Share of a normalized attention row that falls on the first
/// `prompt_length` positions.
double attention_ratio(const Logits& attention_row, int prompt_length);

struct DilutionCurve {
  std::vector<double> alpha;
  int prompt_length = 0;
};

/// Per-step attention-to-prompt ratio of a trace decoded with attention.
DilutionCurve dilution_curve(const GenerationTrace& trace);

/// Central-difference step for gradient_attention.
constexpr double kGradientStep = 1e-3;

/// Sensitivity of the next-token argmax logit to each input embedding: the
/// Euclidean norm of its central-difference gradient. Requires a backend
/// implementing EmbeddingModel.
std::vector<double> gradient_attention(const Backend& backend, const Tokens& context, double delta = kGradientStep);

struct LengthSample {
  std::size_t tokens = 0;
  bool passed = false;
  std::string group;
};

struct LengthCell {
  std::string group;
  bool passed = false;
  double mean = 0.0;
  double median = 0.0;
  std::size_t count = 0;
};

/// Mean/median generated length per (group, passed) cell. Cells for the
/// aggregate over all groups use the group name "overall".
struct LengthStats {
  std::vector<LengthCell> cells;

  const LengthCell* find(const std::string& group, bool passed) const;
};

LengthStats length_stats(const std::vector<LengthSample>& samples);

/// `step,alpha` rows, steps numbered from 1.
void write_dilution_csv(std::ostream& out, const DilutionCurve& curve);
/// `group,status,mean,median,count` rows.
void write_length_csv(std::ostream& out, const LengthStats& stats);

/// One JSON object per step: step, token, orig, masked, aug, alpha.
void write_trace_ndjson(std::ostream& out, const GenerationTrace& trace);
/// Reads the alpha column of an exported trace (null entries are skipped).
DilutionCurve read_trace_alphas(std::istream& in);

}  // namespace anchor
