#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "wayrvs/tensor.hpp"

namespace wayrvs {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Container layout:
//   "WAYRVS-CKPT v1\n"
//   "<count>\n"
//   per tensor: "<name> <rank> <d0> ... <dn-1>\n" then numel little-endian
//   IEEE-754 doubles.
std::string encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

// Copies checkpoint values into parameters with matching names; throws if a
// name is missing or a shape differs.
void assign_parameters(const std::vector<NamedTensor>& source, const std::vector<NamedParam>& dest);
std::vector<NamedTensor> snapshot_parameters(const std::vector<NamedParam>& params);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace wayrvs
