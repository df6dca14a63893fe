#include "wayrvs/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace wayrvs {

namespace {

constexpr const char* kMagic = "WAYRVS-CKPT v1";

std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xFFu) << (8 * (7 - i));
    return r;
  } else {
    return v;
  }
}

std::string next_line(const std::string& bytes, std::size_t& pos) {
  const std::size_t end = bytes.find('\n', pos);
  if (end == std::string::npos) throw std::runtime_error("checkpoint: truncated header");
  std::string line = bytes.substr(pos, end - pos);
  pos = end + 1;
  return line;
}

}  // namespace

std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::string out = std::string(kMagic) + "\n" + std::to_string(tensors.size()) + "\n";
  for (const auto& nt : tensors) {
    if (nt.name.empty() || nt.name.find_first_of(" \n") != std::string::npos) {
      throw std::invalid_argument("checkpoint: invalid tensor name '" + nt.name + "'");
    }
    out += nt.name + " " + std::to_string(nt.tensor.rank());
    for (std::size_t d : nt.tensor.shape()) out += " " + std::to_string(d);
    out += "\n";
    for (double v : nt.tensor.values()) {
      const std::uint64_t bits = to_little(std::bit_cast<std::uint64_t>(v));
      char raw[8];
      std::memcpy(raw, &bits, 8);
      out.append(raw, 8);
    }
  }
  return out;
}

std::vector<NamedTensor> decode_checkpoint(const std::string& bytes) {
  std::size_t pos = 0;
  if (next_line(bytes, pos) != kMagic) throw std::runtime_error("checkpoint: bad header");
  const std::size_t count = std::stoul(next_line(bytes, pos));
  std::vector<NamedTensor> out;
  for (std::size_t k = 0; k < count; ++k) {
    std::istringstream head(next_line(bytes, pos));
    NamedTensor nt;
    std::size_t rank = 0;
    head >> nt.name >> rank;
    Shape shape(rank);
    for (auto& d : shape) head >> d;
    if (!head) throw std::runtime_error("checkpoint: malformed tensor header");
    const std::size_t n = shape_numel(shape);
    if (pos + 8 * n > bytes.size()) throw std::runtime_error("checkpoint: truncated payload");
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t bits = 0;
      std::memcpy(&bits, bytes.data() + pos + 8 * i, 8);
      values[i] = std::bit_cast<double>(to_little(bits));
    }
    pos += 8 * n;
    nt.tensor = Tensor(std::move(shape), std::move(values));
    out.push_back(std::move(nt));
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  write_file(path, encode_checkpoint(tensors));
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

void assign_parameters(const std::vector<NamedTensor>& source, const std::vector<NamedParam>& dest) {
  for (const auto& p : dest) {
    const NamedTensor* found = nullptr;
    for (const auto& s : source) {
      if (s.name == p.name) found = &s;
    }
    if (found == nullptr) throw std::runtime_error("checkpoint: missing tensor " + p.name);
    if (found->tensor.shape() != p.tensor->shape()) {
      throw ShapeError("checkpoint: shape mismatch for " + p.name + ": " +
                       shape_str(found->tensor.shape()) + " vs " + shape_str(p.tensor->shape()));
    }
    const bool rg = p.tensor->requires_grad();
    *p.tensor = found->tensor;
    p.tensor->set_requires_grad(rg);
  }
}

std::vector<NamedTensor> snapshot_parameters(const std::vector<NamedParam>& params) {
  std::vector<NamedTensor> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    NamedTensor nt{p.name, *p.tensor};
    nt.tensor.clear_grad();
    out.push_back(std::move(nt));
  }
  return out;
}

}  // namespace wayrvs
