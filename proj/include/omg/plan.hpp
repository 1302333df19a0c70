#pragma once

// Semantic-plan domain types: the [Entity, Action, Sentiment] triplet schema,
// JSON wire format, and the generator-derived ground-truth plans used to
// supervise the policy and label knowledge-base entries.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "omg/error.hpp"
#include "omg/mathutil.hpp"

namespace omg {

struct Schema {
  int entity_vocab = 16;
  int action_vocab = 16;
  int sentiment_vocab = 7;
  int triplets = 3;  // L

  int vocab_of_slot(int slot) const {
    switch (slot) {
      case 0: return entity_vocab;
      case 1: return action_vocab;
      default: return sentiment_vocab;
    }
  }
};

struct Triplet {
  int entity = 0;
  int action = 0;
  int sentiment = 0;
  bool operator==(const Triplet&) const = default;
};

struct SemanticPlan {
  std::vector<Triplet> constraints;
  std::vector<double> token_logprobs;  // recorded at sampling time

  double logprob_sum() const {
    double s = 0;
    for (double lp : token_logprobs) s += lp;
    return s;
  }
  int token(int triplet, int slot) const {
    const Triplet& t = constraints[static_cast<size_t>(triplet)];
    return slot == 0 ? t.entity : slot == 1 ? t.action : t.sentiment;
  }
  bool operator==(const SemanticPlan& o) const { return constraints == o.constraints; }
};

inline bool schema_valid(const SemanticPlan& plan, const Schema& schema) {
  if (static_cast<int>(plan.constraints.size()) != schema.triplets) return false;
  for (const auto& t : plan.constraints) {
    if (t.entity < 0 || t.entity >= schema.entity_vocab) return false;
    if (t.action < 0 || t.action >= schema.action_vocab) return false;
    if (t.sentiment < 0 || t.sentiment >= schema.sentiment_vocab) return false;
  }
  return true;
}

// 0 for a well-formed plan, +inf otherwise; the hard pre-filter in re-ranking.
inline double schema_indicator(const SemanticPlan& plan, const Schema& schema) {
  return schema_valid(plan, schema) ? 0.0 : std::numeric_limits<double>::infinity();
}

// round-to-nearest (half away from zero), clamp to [-3,3], shift to 0..6
inline int score_to_class7(double score) {
  long r = std::llround(score);
  if (r < -3) r = -3;
  if (r > 3) r = 3;
  return static_cast<int>(r + 3);
}
inline double class7_to_score(int cls) { return static_cast<double>(cls - 3); }

// {"constraints": [["E3","A7","S5"], ...], "logprobs": [...]}
inline nlohmann::ordered_json plan_to_json(const SemanticPlan& plan) {
  nlohmann::ordered_json j;
  j["constraints"] = nlohmann::ordered_json::array();
  for (const auto& t : plan.constraints)
    j["constraints"].push_back({"E" + std::to_string(t.entity),
                                "A" + std::to_string(t.action),
                                "S" + std::to_string(t.sentiment)});
  j["logprobs"] = plan.token_logprobs;
  return j;
}

inline SemanticPlan plan_from_json(const nlohmann::ordered_json& j) {
  SemanticPlan plan;
  auto parse = [](const std::string& tok, char prefix) {
    if (tok.empty() || tok[0] != prefix)
      throw SchemaViolation("bad token: " + tok);
    return std::stoi(tok.substr(1));
  };
  for (const auto& trip : j.at("constraints")) {
    if (trip.size() != 3) throw SchemaViolation("triplet must have 3 tokens");
    plan.constraints.push_back({parse(trip[0].get<std::string>(), 'E'),
                                parse(trip[1].get<std::string>(), 'A'),
                                parse(trip[2].get<std::string>(), 'S')});
  }
  if (j.contains("logprobs"))
    plan.token_logprobs = j.at("logprobs").get<std::vector<double>>();
  return plan;
}

// Ground-truth plan of a generated sample: entity/action tokens hash the
// latent's sign pattern, the sentiment token bins the score.
inline SemanticPlan ground_truth_plan(const Vec& latent, double score,
                                      const Schema& schema) {
  SemanticPlan plan;
  int d = static_cast<int>(latent.size());
  for (int l = 0; l < schema.triplets; ++l) {
    int entity = 0, action = 0;
    for (int b = 0; b < 4; ++b) {
      if (latent[(4 * l + b) % d] > 0) entity |= 1 << b;
      if (latent[(4 * l + b + 2) % d] > 0) action |= 1 << b;
    }
    plan.constraints.push_back({entity % schema.entity_vocab,
                                action % schema.action_vocab,
                                score_to_class7(score) % schema.sentiment_vocab});
  }
  return plan;
}

}  // namespace omg
