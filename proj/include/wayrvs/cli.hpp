#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "wayrvs/envs.hpp"
#include "wayrvs/training.hpp"

namespace wayrvs {

enum class KeyType { kInt, kReal, kBool, kText, kIntList, kRealList, kTextList };

struct ConfigKey {
  std::string name;
  KeyType type = KeyType::kText;
  std::string desk;   // default under --profile desk
  std::string paper;  // default under --profile paper
  std::string help;
  std::vector<std::string> choices;  // empty = unrestricted
};

const std::vector<ConfigKey>& config_schema();

// A bad or unknown key; the CLI maps it to the usage exit code.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& key, const std::string& what)
      : std::runtime_error(key + ": " + what), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

// Fully resolved flat key=value configuration.
class RunConfig {
 public:
  const std::string& text(const std::string& key) const;
  long long integer(const std::string& key) const;
  std::size_t count(const std::string& key) const;  // non-negative integer
  double real(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<long long> integers(const std::string& key) const;
  std::vector<double> reals(const std::string& key) const;
  std::vector<std::string> texts(const std::string& key) const;

  const std::map<std::string, std::string>& values() const { return values_; }
  std::map<std::string, std::string>& values() { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

// Reads `key = value` lines; '#' starts a comment.
std::map<std::string, std::string> parse_config_text(const std::string& text);
// Defaults (by profile) < file < overrides. The profile itself may come from
// the file or the overrides. Every key is type-checked.
RunConfig resolve_config(const std::optional<std::filesystem::path>& file,
                         const std::map<std::string, std::string>& overrides);
std::string format_config(const RunConfig& config);  // the resolved.cfg text

// Builders from a resolved config.
PipelineConfig pipeline_config(const RunConfig& config);
Dataset dataset_from_config(const RunConfig& config);

// Exit codes: 0 success, 1 usage error, 2 runtime error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace wayrvs
