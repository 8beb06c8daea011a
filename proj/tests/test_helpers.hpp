#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "xmc/rng.hpp"
#include "xmc/tensor.hpp"

namespace testutil {

inline xmc::Tensor random_tensor(std::vector<std::size_t> dims, xmc::Rng& rng,
                                 double lo = -1.5, double hi = 1.5) {
  xmc::Tensor t(std::move(dims));
  for (double& x : t.v) x = rng.uniform(lo, hi);
  return t;
}

// entries bounded away from zero, for kinked activations
inline xmc::Tensor random_tensor_away_from_zero(std::vector<std::size_t> dims,
                                                xmc::Rng& rng,
                                                double margin = 0.1,
                                                double hi = 2.0) {
  xmc::Tensor t(std::move(dims));
  for (double& x : t.v) {
    const double mag = rng.uniform(margin, hi);
    x = rng.bernoulli(0.5) ? mag : -mag;
  }
  return t;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("xmc_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
};

}  // namespace testutil
