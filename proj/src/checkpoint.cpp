// SPDX-License-Identifier: Apache-2.0
#include "calm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace calm {
namespace {

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::uint64_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) throw CheckpointError("checkpoint: truncated file");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const std::vector<const Tensor<double>*>& tensors) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_u64(out, kCheckpointVersion);
  put_u64(out, tensors.size());
  for (const auto* t : tensors) {
    put_u64(out, t->name.size());
    out.insert(out.end(), t->name.begin(), t->name.end());
    const auto shape = t->shape();
    put_u64(out, shape.size());
    for (auto d : shape) put_u64(out, static_cast<std::uint64_t>(d));
    const double* p = t->value.data();
    for (Eigen::Index i = 0; i < t->value.size(); ++i) put_f64(out, p[i]);
  }
  return out;
}

std::vector<Tensor<double>> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw CheckpointError("checkpoint: bad magic");
  }
  std::vector<std::uint8_t> body(bytes.begin() + 8, bytes.end());
  Reader r(body);
  const auto version = r.u64();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = r.u64();
  std::vector<Tensor<double>> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    Tensor<double> t;
    t.name = r.str(r.u64());
    const auto rank = r.u64();
    if (rank < 1 || rank > 2) throw CheckpointError("checkpoint: unsupported rank for '" + t.name + "'");
    std::vector<std::int64_t> dims;
    for (std::uint64_t k = 0; k < rank; ++k) dims.push_back(static_cast<std::int64_t>(r.u64()));
    t.rank = static_cast<int>(rank);
    const Eigen::Index rows = rank == 1 ? 1 : dims[0];
    const Eigen::Index cols = rank == 1 ? dims[0] : dims[1];
    t.value.resize(rows, cols);
    for (Eigen::Index k = 0; k < t.value.size(); ++k) t.value.data()[k] = r.f64();
    out.push_back(std::move(t));
  }
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes");
  return out;
}

void save_checkpoint(const std::filesystem::path& path,
                     const std::vector<const Tensor<double>*>& tensors) {
  const auto bytes = encode_checkpoint(tensors);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("checkpoint: cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("checkpoint: write failed for " + path.string());
}

std::vector<Tensor<double>> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("checkpoint: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void assign_checkpoint(const std::vector<Tensor<double>>& loaded,
                       const std::vector<Tensor<double>*>& targets) {
  std::map<std::string, const Tensor<double>*> by_name;
  for (const auto& t : loaded) by_name[t.name] = &t;
  for (auto* t : targets) {
    auto it = by_name.find(t->name);
    if (it == by_name.end()) throw CheckpointError("checkpoint: missing tensor '" + t->name + "'");
    if (it->second->shape() != t->shape()) {
      throw CheckpointError("checkpoint: shape mismatch for '" + t->name + "'");
    }
    t->value = it->second->value;
  }
}

std::uint64_t checksum(const std::vector<const Tensor<double>*>& tensors) {
  std::uint64_t h = 1469598103934665603ULL;
  for (auto b : encode_checkpoint(tensors)) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace calm
