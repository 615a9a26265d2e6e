#pragma once

// Reference list model for report curation, plus a random edit generator
// that mixes valid and invalid edits.

#include <algorithm>
#include <optional>
#include <random>
#include <vector>

#include "matchscope/report.hpp"

namespace oracle {

using matchscope::ImageId;
namespace report = matchscope::report;

// nullopt when the edit must be rejected
inline std::optional<std::vector<ImageId>> model_apply(std::vector<ImageId> ids, const report::Edit& edit) {
  auto find = [&](ImageId id) { return std::find(ids.begin(), ids.end(), id); };
  if (auto* a = std::get_if<report::AddEntry>(&edit)) {
    if (find(a->entry.image_id) != ids.end()) return std::nullopt;
    std::size_t pos = a->position.value_or(ids.size());
    if (pos > ids.size()) return std::nullopt;
    ids.insert(ids.begin() + static_cast<std::ptrdiff_t>(pos), a->entry.image_id);
  } else if (auto* r = std::get_if<report::RemoveEntry>(&edit)) {
    auto it = find(r->image_id);
    if (it == ids.end()) return std::nullopt;
    ids.erase(it);
  } else if (auto* m = std::get_if<report::MoveEntry>(&edit)) {
    auto it = find(m->image_id);
    if (it == ids.end() || m->position >= ids.size()) return std::nullopt;
    ImageId id = *it;
    ids.erase(it);
    ids.insert(ids.begin() + static_cast<std::ptrdiff_t>(m->position), id);
  }
  return ids;
}

inline report::Edit random_edit(std::mt19937_64& rng, std::size_t current_size) {
  std::uniform_int_distribution<int> op(0, 3);
  std::uniform_int_distribution<ImageId> id(1, 12);  // small pool so duplicates and misses happen
  std::uniform_int_distribution<std::size_t> pos(0, current_size + 1);
  switch (op(rng)) {
    case 0: {
      report::ReportEntry e{id(rng), id(rng) % 4, 0.5, {}};
      std::optional<std::size_t> p;
      if (rng() % 2) p = pos(rng);
      return report::AddEntry{e, p};
    }
    case 1: return report::RemoveEntry{id(rng)};
    case 2: return report::MoveEntry{id(rng), pos(rng)};
    default: return report::SetNotes{rng() % 2 ? "note " + std::to_string(rng() % 100) : ""};
  }
}

inline std::vector<ImageId> ids_of(const report::Report& r) {
  std::vector<ImageId> out;
  for (const auto& e : r.entries) out.push_back(e.image_id);
  return out;
}

}  // namespace oracle
