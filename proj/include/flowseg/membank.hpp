#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "flowseg/tensor.hpp"

namespace flowseg::membank {

enum class BankMode { fifo, confidence_first };

struct BankConfig {
  std::size_t capacity = 8;
  BankMode mode = BankMode::fifo;
  /// Candidates whose summary cosine similarity to a stored entry exceeds
  /// this are rejected (confidence_first only).
  double diversity_threshold = 0.95;
  /// Softmax temperature of the similarity-weighted pick-up.
  double pickup_temperature = 0.1;
  /// Apply the diversity gate against templates as well as candidates.
  bool gate_against_templates = true;

  void validate() const;
};

/// Un-encoded inputs of a memory feature, kept so training can rebuild the
/// feature inside the consuming frame's graph.
struct MemorySource {
  Tensor embedding;     ///< (n_tokens x d) image-encoder output
  Tensor prob_patches;  ///< (n_tokens x patch^2) predicted probabilities per patch
};

struct MemoryEntry {
  std::size_t frame_index = 0;
  std::vector<double> summary;  ///< mean-pooled frame embedding, length d
  Tensor feature;               ///< (n_tokens x d); may be empty when `source` is set
  Tensor pointer;               ///< (1 x d) object pointer
  double confidence = 0.0;
  bool is_template = false;
  std::optional<MemorySource> source;
  std::optional<double> last_weight;
  std::uint64_t sequence = 0;  ///< insertion order, assigned by the bank
};

enum class InsertOutcome {
  template_added,
  admitted,
  admitted_with_eviction,
  rejected_diversity,
  rejected_confidence,
};

struct BankEvent {
  std::size_t frame_index = 0;
  InsertOutcome outcome = InsertOutcome::admitted;
  std::optional<std::size_t> evicted_frame;
};

class MemoryBank {
 public:
  explicit MemoryBank(BankConfig config);

  const BankConfig& config() const noexcept { return config_; }
  const std::vector<MemoryEntry>& templates() const noexcept { return templates_; }
  const std::vector<MemoryEntry>& candidates() const noexcept { return candidates_; }
  /// Templates first, then candidates, each in insertion order.
  std::vector<const MemoryEntry*> entries() const;
  std::size_t size() const noexcept { return templates_.size() + candidates_.size(); }
  bool empty() const noexcept { return size() == 0; }
  const std::vector<BankEvent>& events() const noexcept { return events_; }

  struct PickupRecord {
    std::size_t frame_index;
    double weight;
  };
  const std::vector<PickupRecord>& last_pickup() const noexcept { return last_pickup_; }
  /// Stores the weights used for the most recent read, aligned with entries().
  void record_weights(std::span<const double> weights);

  /// Applies the admission policy. A rejection is recorded in events().
  InsertOutcome insert(MemoryEntry entry);

 private:
  BankConfig config_;
  std::vector<MemoryEntry> templates_;
  std::vector<MemoryEntry> candidates_;
  std::vector<BankEvent> events_;
  std::vector<PickupRecord> last_pickup_;
  std::uint64_t next_sequence_ = 0;
};

/// Value-semantics form of MemoryBank::insert.
MemoryBank insert(MemoryBank bank, MemoryEntry entry);

/// softmax(cos(query, summary_i) / temperature) across entries().
/// Throws UsageError on an empty bank, NumericError on a zero-norm vector.
std::vector<double> pickup_weights(const MemoryBank& bank, std::span<const double> query,
                                   double temperature);

/// Equal weights across entries().
std::vector<double> uniform_weights(const MemoryBank& bank);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct EntryRecord {
  std::size_t frame_index = 0;
  double confidence = 0.0;
  bool is_template = false;
  std::optional<double> last_weight;
  friend bool operator==(const EntryRecord&, const EntryRecord&) = default;
};

struct BankSnapshot {
  std::vector<EntryRecord> entries;
  std::vector<MemoryBank::PickupRecord> last_pickup;
  friend bool operator==(const BankSnapshot& a, const BankSnapshot& b) {
    if (a.entries != b.entries || a.last_pickup.size() != b.last_pickup.size()) return false;
    for (std::size_t i = 0; i < a.last_pickup.size(); ++i) {
      if (a.last_pickup[i].frame_index != b.last_pickup[i].frame_index ||
          a.last_pickup[i].weight != b.last_pickup[i].weight) {
        return false;
      }
    }
    return true;
  }
};

BankSnapshot snapshot(const MemoryBank& bank);

std::string_view to_string(BankMode mode);
std::string_view to_string(InsertOutcome outcome);
BankMode parse_bank_mode(std::string_view text);

}  // namespace flowseg::membank
