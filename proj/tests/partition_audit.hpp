#pragma once

#include <string>
#include <vector>

#include "parabart/training.hpp"

namespace parabart::check {

struct PartitionAudit {
  std::size_t steps = 0;
  std::size_t inner_updates = 0;
  std::size_t outer_updates = 0;
  std::vector<std::string> violations;
};

inline bool is_discriminator(const std::string& name) { return name.rfind("dis.", 0) == 0; }

/// Runs `steps` trainer iterations and diffs every parameter tensor around
/// each optimizer update. Inner updates may touch only the discriminator;
/// outer updates must change every other trainable tensor and no
/// discriminator tensor.
inline PartitionAudit audit_partition(ParaBart<float>& model, Trainer<float>& trainer,
                                      const std::vector<EncodedPair>& pairs, std::size_t steps,
                                      std::size_t batch_size) {
  PartitionAudit audit;
  const auto& entries = model.params().entries();
  auto snapshot = [&] {
    std::vector<std::vector<float>> out;
    for (const auto& [name, t] : entries) out.emplace_back(t.data().begin(), t.data().end());
    return out;
  };
  auto before = snapshot();
  std::size_t current_step = 0;
  trainer.set_phase_hook([&](Trainer<float>::Phase phase) {
    const bool inner = phase == Trainer<float>::Phase::Inner;
    (inner ? audit.inner_updates : audit.outer_updates) += 1;
    auto after = snapshot();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& [name, t] = entries[i];
      const bool changed = after[i] != before[i];
      const bool should_change = t.requires_grad() && (inner == is_discriminator(name));
      if (changed != should_change) {
        audit.violations.push_back("step " + std::to_string(current_step) + (inner ? " inner: " : " outer: ") + name +
                                   (changed ? " changed" : " unchanged"));
      }
    }
    before = std::move(after);
  });
  std::vector<std::size_t> batch(batch_size);
  for (current_step = 1; current_step <= steps; ++current_step) {
    for (std::size_t k = 0; k < batch_size; ++k) batch[k] = ((current_step - 1) * batch_size + k) % pairs.size();
    trainer.step(pairs, batch);
    ++audit.steps;
  }
  trainer.set_phase_hook({});
  return audit;
}

}  // namespace parabart::check
