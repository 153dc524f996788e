#include <algorithm>
#include <cmath>
#include <numeric>

#include "pfrouter/ingest.hpp"

namespace pfrouter {

namespace {

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Regime parse_regime(const std::string& text) {
  if (text == "all_correct") return Regime::kAllCorrect;
  if (text == "all_incorrect") return Regime::kAllIncorrect;
  if (text == "disagreement") return Regime::kDisagreement;
  throw DataError("unknown consensus regime '" + text + "'");
}

}  // namespace

std::vector<std::size_t> largest_remainder(std::size_t total, std::span<const double> fractions) {
  std::vector<std::size_t> counts(fractions.size());
  std::vector<double> remainders(fractions.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    const double quota = static_cast<double>(total) * fractions[i];
    counts[i] = static_cast<std::size_t>(std::floor(quota + 1e-9));
    remainders[i] = quota - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  std::vector<std::size_t> order(fractions.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainders[a] > remainders[b]; });
  for (std::size_t i = 0; assigned < total; i = (i + 1) % order.size()) {
    ++counts[order[i]];
    ++assigned;
  }
  return counts;
}

namespace {

// test share first, then the remainder between train and cal
std::vector<std::size_t> stratum_counts(std::size_t n, std::span<const double> fractions) {
  const double test = fractions.back();
  const std::vector<double> outer{1.0 - test, test};
  const auto head = largest_remainder(n, outer);
  if (fractions.size() == 2) return head;
  const double rest = fractions[0] + fractions[1];
  const std::vector<double> inner{fractions[0] / rest, fractions[1] / rest};
  const auto body = largest_remainder(head[0], inner);
  return {body[0], body[1], head[1]};
}

}  // namespace

SplitAssignment stratified_split(const LabelTable& labels, std::span<const double> fractions, std::uint64_t seed) {
  if (fractions.size() != 2 && fractions.size() != 3) {
    throw ConfigError("split fractions must be {train, test} or {train, cal, test}");
  }
  double sum = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw ConfigError("every split fraction must be > 0");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  if (labels.size() == 0) throw DataError("cannot split an empty label table");

  SplitAssignment split;
  std::map<std::pair<Regime, std::string>, std::vector<std::size_t>> strata;
  for (std::size_t row = 0; row < labels.size(); ++row) {
    auto key = std::make_pair(consensus_regime_of_row(labels, row), labels.benchmark(row));
    split.strata.emplace(labels.query_ids()[row], key);
    strata[key].push_back(row);
  }

  const bool has_cal = fractions.size() == 3;
  std::vector<int> destination(labels.size(), 0);  // 0 train, 1 cal, 2 test
  for (auto& [key, rows] : strata) {
    const std::string name = std::string(to_string(key.first)) + "/" + key.second;
    if (rows.size() < fractions.size()) {
      split.warnings.push_back("stratum " + name + " has " + std::to_string(rows.size()) +
                               " queries, fewer than the number of splits; assigned to train");
      continue;
    }
    Rng rng(derive_seed(seed, fnv1a(name)));
    rng.shuffle(rows);
    const auto counts = stratum_counts(rows.size(), fractions);
    std::size_t pos = 0;
    for (std::size_t part = 0; part < counts.size(); ++part) {
      const int dest = part == 0 ? 0 : (has_cal && part == 1 ? 1 : 2);
      for (std::size_t c = 0; c < counts[part]; ++c) destination[rows[pos++]] = dest;
    }
  }
  for (std::size_t row = 0; row < labels.size(); ++row) {
    const auto& id = labels.query_ids()[row];
    switch (destination[row]) {
      case 0:
        split.train_ids.push_back(id);
        break;
      case 1:
        split.cal_ids.push_back(id);
        break;
      default:
        split.test_ids.push_back(id);
    }
  }
  return split;
}

nlohmann::ordered_json SplitAssignment::to_json() const {
  nlohmann::ordered_json j;
  j["train_ids"] = train_ids;
  j["cal_ids"] = cal_ids;
  j["test_ids"] = test_ids;
  nlohmann::ordered_json strata_json = nlohmann::ordered_json::object();
  for (const auto& [id, key] : strata) {
    strata_json[id] = {std::string(to_string(key.first)), key.second};
  }
  j["strata"] = std::move(strata_json);
  j["warnings"] = warnings;
  return j;
}

SplitAssignment SplitAssignment::from_json(const nlohmann::json& j) {
  SplitAssignment split;
  try {
    split.train_ids = j.at("train_ids").get<std::vector<std::string>>();
    split.cal_ids = j.value("cal_ids", std::vector<std::string>{});
    split.test_ids = j.at("test_ids").get<std::vector<std::string>>();
    if (j.contains("strata")) {
      for (const auto& [id, v] : j.at("strata").items()) {
        split.strata.emplace(id, std::make_pair(parse_regime(v.at(0).get<std::string>()), v.at(1).get<std::string>()));
      }
    }
    split.warnings = j.value("warnings", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("split: ") + e.what());
  }
  return split;
}

}  // namespace pfrouter
