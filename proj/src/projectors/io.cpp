#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "vlconn/projectors.hpp"

namespace vlc {

namespace {

constexpr char kMagic[8] = {'V', 'L', 'C', 'O', 'N', 'N', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& os, T value) {
  static_assert(std::is_integral_v<T>);
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(value >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw std::runtime_error("checkpoint truncated");
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(buf[i]) << (8 * i);
  return value;
}

std::string get_bytes(std::istream& is, std::size_t n) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw std::runtime_error("checkpoint truncated");
  return s;
}

void write_pgm(const std::string& path, std::size_t height, std::size_t width, const double* values) {
  double lo = values[0], hi = values[0];
  for (std::size_t i = 0; i < height * width; ++i) {
    lo = std::min(lo, values[i]);
    hi = std::max(hi, values[i]);
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "P5\n" << width << ' ' << height << "\n255\n";
  for (std::size_t i = 0; i < height * width; ++i) {
    const double t = hi > lo ? (values[i] - lo) / (hi - lo) : 0.0;
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0))));
  }
  if (!os) throw std::runtime_error("failed writing " + path);
}

}  // namespace

void save_checkpoint(const std::string& path, const std::string& spec_echo, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kVersion);
  put<std::uint64_t>(os, spec_echo.size());
  os.write(spec_echo.data(), static_cast<std::streamsize>(spec_echo.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.tensor.rank()));
    for (auto e : t.tensor.shape()) put<std::uint64_t>(os, e);
    for (double v : t.tensor.data()) put<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw std::runtime_error("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  if (get_bytes(is, sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    throw std::runtime_error(path + " is not a checkpoint (bad magic)");
  }
  const auto version = get<std::uint32_t>(is);
  if (version != kVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.spec_echo = get_bytes(is, get<std::uint64_t>(is));
  const auto count = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = get_bytes(is, get<std::uint32_t>(is));
    const auto rank = get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& e : shape) e = get<std::uint64_t>(is);
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = std::bit_cast<double>(get<std::uint64_t>(is));
    ckpt.tensors.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values))});
  }
  return ckpt;
}

void restore_parameters(const Checkpoint& ckpt, const std::vector<NamedTensor>& targets) {
  for (const auto& target : targets) {
    auto it = std::find_if(ckpt.tensors.begin(), ckpt.tensors.end(),
                           [&](const NamedTensor& t) { return t.name == target.name; });
    if (it == ckpt.tensors.end()) throw std::runtime_error("checkpoint has no tensor named " + target.name);
    if (it->tensor.shape() != target.tensor.shape()) {
      throw std::runtime_error("checkpoint tensor " + target.name + " has shape " + shape_str(it->tensor.shape()) +
                               ", expected " + shape_str(target.tensor.shape()));
    }
    Tensor dst = target.tensor;
    std::copy(it->tensor.data().begin(), it->tensor.data().end(), dst.mutable_data().begin());
  }
}

std::uint64_t parameter_checksum(const std::vector<NamedTensor>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : params) {
    mix(p.name.data(), p.name.size());
    mix(p.tensor.data().data(), p.tensor.numel() * sizeof(double));
  }
  return h;
}

std::vector<std::string> export_attention_trace(const AttentionTrace& trace, const std::string& directory) {
  if (trace.mass.size() != trace.layers * trace.queries * trace.height * trace.width || trace.mass.empty()) {
    throw std::invalid_argument("attention trace is malformed");
  }
  std::filesystem::create_directories(directory);
  std::vector<std::string> paths;
  const std::size_t hw = trace.height * trace.width;
  std::vector<double> aggregate(hw);
  for (std::size_t l = 0; l < trace.layers; ++l) {
    std::fill(aggregate.begin(), aggregate.end(), 0.0);
    for (std::size_t q = 0; q < trace.queries; ++q) {
      const double* slice = trace.mass.data() + (l * trace.queries + q) * hw;
      for (std::size_t i = 0; i < hw; ++i) aggregate[i] += slice[i];
      auto path = (std::filesystem::path(directory) /
                   ("layer" + std::to_string(l) + "_query" + std::to_string(q) + ".pgm")).string();
      write_pgm(path, trace.height, trace.width, slice);
      paths.push_back(std::move(path));
    }
    auto path = (std::filesystem::path(directory) / ("layer" + std::to_string(l) + "_aggregate.pgm")).string();
    write_pgm(path, trace.height, trace.width, aggregate.data());
    paths.push_back(std::move(path));
  }
  return paths;
}

}  // namespace vlc
