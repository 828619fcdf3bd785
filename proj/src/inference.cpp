#include "mdcap/inference.hpp"

#include <stdexcept>

namespace mdcap {

const char* method_name(ScoreMethod method) {
  switch (method) {
    case ScoreMethod::kArc: return "arc";
    case ScoreMethod::kElboMc: return "elbo_mc";
    case ScoreMethod::kElboExact: return "elbo_exact";
    case ScoreMethod::kHeuristic: return "heuristic";
  }
  throw std::logic_error("unknown score method");
}

ScoreMethod parse_method(const std::string& name) {
  if (name == "arc") return ScoreMethod::kArc;
  if (name == "elbo_mc") return ScoreMethod::kElboMc;
  if (name == "elbo_exact") return ScoreMethod::kElboExact;
  if (name == "heuristic") return ScoreMethod::kHeuristic;
  throw std::invalid_argument("invalid method '" + name +
                              "'; valid: arc | elbo_mc | elbo_exact | heuristic");
}

RevealChoice pick_reveal(const std::vector<std::vector<double>>& probs,
                         const std::vector<uint8_t>& revealed) {
  if (probs.size() != revealed.size())
    throw std::invalid_argument("pick_reveal: probs and revealed flags disagree in length");
  RevealChoice best;
  for (size_t pos = 0; pos < probs.size(); ++pos) {
    if (revealed[pos]) continue;
    const auto& row = probs[pos];
    int arg = 0;
    for (size_t j = 1; j < row.size(); ++j)
      if (row[j] > row[arg]) arg = static_cast<int>(j);
    // strictly-greater keeps the lowest position on ties
    if (best.position < 0 || row[arg] > best.confidence) {
      best.position = static_cast<int>(pos);
      best.token = arg;
      best.confidence = row[arg];
    }
  }
  if (best.position < 0) throw std::invalid_argument("pick_reveal: no masked position left");
  return best;
}

}  // namespace mdcap
