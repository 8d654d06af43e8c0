#include "flowseg/membank.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "flowseg/errors.hpp"

namespace flowseg::membank {

void BankConfig::validate() const {
  if (capacity < 1) throw ConfigError("bank capacity must be at least 1");
  if (!(diversity_threshold > 0.0 && diversity_threshold <= 1.0)) {
    throw ConfigError("diversity threshold must lie in (0, 1]");
  }
  if (!(pickup_temperature > 0.0)) throw ConfigError("pick-up temperature must be positive");
}

MemoryBank::MemoryBank(BankConfig config) : config_(config) { config_.validate(); }

std::vector<const MemoryEntry*> MemoryBank::entries() const {
  std::vector<const MemoryEntry*> out;
  out.reserve(size());
  for (const auto& e : templates_) out.push_back(&e);
  for (const auto& e : candidates_) out.push_back(&e);
  return out;
}

void MemoryBank::record_weights(std::span<const double> weights) {
  if (weights.size() != size()) throw ShapeError("weights do not match bank size");
  last_pickup_.clear();
  std::size_t i = 0;
  for (auto* group : {&templates_, &candidates_}) {
    for (auto& e : *group) {
      e.last_weight = weights[i];
      last_pickup_.push_back({e.frame_index, weights[i]});
      ++i;
    }
  }
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine: length mismatch");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw NumericError("membank", "cosine similarity of a zero-norm vector");
  return ab / std::sqrt(aa * bb);
}

InsertOutcome MemoryBank::insert(MemoryEntry entry) {
  entry.sequence = next_sequence_++;
  entry.last_weight.reset();
  BankEvent ev{entry.frame_index, InsertOutcome::admitted, std::nullopt};
  auto record = [&](InsertOutcome o) {
    ev.outcome = o;
    events_.push_back(ev);
    return o;
  };

  if (entry.is_template) {
    templates_.push_back(std::move(entry));
    return record(InsertOutcome::template_added);
  }

  if (config_.mode == BankMode::fifo) {
    candidates_.push_back(std::move(entry));
    if (candidates_.size() > config_.capacity) {
      ev.evicted_frame = candidates_.front().frame_index;
      candidates_.erase(candidates_.begin());
      return record(InsertOutcome::admitted_with_eviction);
    }
    return record(InsertOutcome::admitted);
  }

  double max_sim = -1.0;
  if (config_.gate_against_templates) {
    for (const auto& t : templates_) max_sim = std::max(max_sim, cosine_similarity(entry.summary, t.summary));
  }
  for (const auto& c : candidates_) max_sim = std::max(max_sim, cosine_similarity(entry.summary, c.summary));
  if (max_sim > config_.diversity_threshold) return record(InsertOutcome::rejected_diversity);

  if (candidates_.size() < config_.capacity) {
    candidates_.push_back(std::move(entry));
    return record(InsertOutcome::admitted);
  }
  // Lowest confidence goes first; among equals, the oldest.
  auto weakest = std::min_element(candidates_.begin(), candidates_.end(),
                                  [](const MemoryEntry& a, const MemoryEntry& b) {
                                    if (a.confidence != b.confidence) return a.confidence < b.confidence;
                                    return a.sequence < b.sequence;
                                  });
  if (!(entry.confidence > weakest->confidence)) return record(InsertOutcome::rejected_confidence);
  ev.evicted_frame = weakest->frame_index;
  candidates_.erase(weakest);
  candidates_.push_back(std::move(entry));
  return record(InsertOutcome::admitted_with_eviction);
}

MemoryBank insert(MemoryBank bank, MemoryEntry entry) {
  bank.insert(std::move(entry));
  return bank;
}

std::vector<double> pickup_weights(const MemoryBank& bank, std::span<const double> query,
                                   double temperature) {
  if (bank.empty()) throw UsageError("pick-up weights requested from an empty bank");
  if (!(temperature > 0.0)) throw ArgumentError("pick-up temperature must be positive");
  const auto entries = bank.entries();
  std::vector<double> logits;
  logits.reserve(entries.size());
  for (const MemoryEntry* e : entries) logits.push_back(cosine_similarity(query, e->summary) / temperature);
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double& l : logits) {
    l = std::exp(l - mx);
    sum += l;
  }
  for (double& l : logits) l /= sum;
  return logits;
}

std::vector<double> uniform_weights(const MemoryBank& bank) {
  if (bank.empty()) throw UsageError("weights requested from an empty bank");
  return std::vector<double>(bank.size(), 1.0 / static_cast<double>(bank.size()));
}

BankSnapshot snapshot(const MemoryBank& bank) {
  BankSnapshot s;
  for (const MemoryEntry* e : bank.entries()) {
    s.entries.push_back({e->frame_index, e->confidence, e->is_template, e->last_weight});
  }
  s.last_pickup = bank.last_pickup();
  return s;
}

std::string_view to_string(BankMode mode) {
  return mode == BankMode::fifo ? "fifo" : "confidence_first";
}

std::string_view to_string(InsertOutcome outcome) {
  switch (outcome) {
    case InsertOutcome::template_added: return "template_added";
    case InsertOutcome::admitted: return "admitted";
    case InsertOutcome::admitted_with_eviction: return "admitted_with_eviction";
    case InsertOutcome::rejected_diversity: return "rejected_diversity";
    case InsertOutcome::rejected_confidence: return "rejected_confidence";
  }
  return "?";
}

BankMode parse_bank_mode(std::string_view text) {
  if (text == "fifo") return BankMode::fifo;
  if (text == "confidence_first" || text == "confidence") return BankMode::confidence_first;
  throw ArgumentError("unknown bank mode '" + std::string(text) + "'");
}

}  // namespace flowseg::membank
