// Shared helpers: scratch directories, CLI invocation, small configurations
// and hermetic training samples.
#pragma once

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lsirr/config.hpp"
#include "lsirr/dataset.hpp"

namespace fixtures {

namespace fs = std::filesystem;
using lsirr::dataset::Sample;

// Fresh, empty directory under the system temp dir.
inline fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("lsirr_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

inline std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

// Relative path -> file contents for every regular file below `dir` whose
// file name is not in `exclude`.
inline std::map<std::string, std::string> snapshot(const fs::path& dir, const std::vector<std::string>& exclude = {}) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto name = e.path().filename().string();
    if (std::find(exclude.begin(), exclude.end(), name) != exclude.end()) continue;
    out[fs::relative(e.path(), dir).string()] = read_bytes(e.path());
  }
  return out;
}

inline std::string quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

struct Process {
  int code = -1;
  std::string output;  // stdout and stderr
};

// Runs the command-line tool as a child process.
inline Process run_cli(const std::vector<std::string>& args, const std::map<std::string, std::string>& env = {}) {
  std::string cmd;
  for (const auto& [k, v] : env) cmd += k + "=" + quote(v) + " ";
  cmd += quote(LSIRR_CLI_PATH);
  for (const auto& a : args) cmd += " " + quote(a);
  cmd += " 2>&1";
  Process p;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return p;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) p.output.append(buf, n);
  const int status = ::pclose(pipe);
  p.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return p;
}

// A configuration small enough for second-scale training runs.
inline lsirr::config::RunConfig small_config(std::size_t base = 4, std::size_t crop = 32) {
  lsirr::config::RunConfig cfg;
  cfg.model.base_channels = base;
  cfg.model.n_iterations = 3;
  cfg.discriminator.base_channels = base;
  cfg.train.batch_size = 2;
  cfg.train.samples_per_epoch = 8;
  cfg.train.epochs = 1000;
  cfg.train.crop_size = crop;
  cfg.augment.crop_size = crop;
  return cfg;
}

// Fixed synthetic triples from procedural sources.
inline std::vector<Sample> hermetic_samples(std::size_t count, std::size_t size, std::uint64_t seed,
                                            const lsirr::synth::AugmentConfig& base = {}) {
  auto aug = base;
  aug.crop_size = size;
  const auto pool = lsirr::dataset::SourcePool::procedural(std::max<std::size_t>(count, 2), size, size,
                                                           lsirr::derive_seed(seed, 1), aug.gamma);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(Sample::from_triple(lsirr::dataset::sample_id(i), pool.make_triple(seed, i, aug, size)));
  return out;
}

}  // namespace fixtures
