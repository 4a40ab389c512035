#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace mtil {

/// Deterministic source of uniform and standard-normal variates.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }

  Eigen::VectorXd normal_vector(Eigen::Index n);
  /// Filled row-major: row 0 first, then row 1, ...
  Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols);

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// A root seed plus a path of (label, index) pairs. Streams derived from
/// equal trees are identical; the path is hashed into the stream seed.
struct SeedTree {
  std::uint64_t root = 0;
  std::vector<std::pair<std::string, std::int64_t>> path;

  SeedTree child(std::string label, std::int64_t index) const;
  std::uint64_t seed() const;
  RandomStream stream() const { return RandomStream(seed()); }
};

/// Stream for tree/(label, index).
RandomStream derive_stream(const SeedTree& tree, const std::string& label,
                           std::int64_t index);

}  // namespace mtil
