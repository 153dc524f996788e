#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace pfrouter {

/// Row-major single-precision matrix, the in-memory layout of activation dumps.
using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Error taxonomy. The CLI maps each family onto its own exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

enum class Pooling : std::uint8_t { kLastToken = 0, kMean = 1 };

std::string_view to_string(Pooling pooling);
Pooling parse_pooling(std::string_view text);

/// Deterministic random source. mt19937_64 output is fixed by the standard but
/// the std distributions are not, so the distributions are written out here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform on [0, 1).
  double uniform();
  /// Uniform integer on [0, bound).
  std::uint64_t below(std::uint64_t bound);
  double normal();

  template <class Container>
  void shuffle(Container& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      using std::swap;
      swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// splitmix64-style mixing of a parent seed with a stream index.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Runs fn(i) for i in [0, count) on up to `threads` workers. Results must be
/// written to per-index slots so that output does not depend on scheduling.
void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace pfrouter
