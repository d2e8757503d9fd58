#include "biasedit/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>

#include "biasedit/error.hpp"

namespace biasedit {

namespace {

constexpr std::string_view kModelMagic = "BEDM";

void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

void put_string(std::ostream& os, std::string_view s) {
  put_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  Reader(std::istream& is, std::string where) : is_(is), where_(std::move(where)) {}

  void bytes(char* dst, std::size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw DataError(where_ + ": truncated file");
  }
  std::uint64_t u64() {
    unsigned char b[8];
    bytes(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::string str(std::size_t limit = 1u << 28) {
    const auto n = u64();
    if (n > limit) throw DataError(where_ + ": implausible string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

 private:
  std::istream& is_;
  std::string where_;
};

}  // namespace

void write_named_arrays(const std::filesystem::path& path, std::string_view magic,
                        const NamedArrays& contents) {
  if (magic.size() != 4) throw ContractViolation("checkpoint magic must be 4 bytes");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os.write(magic.data(), 4);
  put_u32(os, kCheckpointVersion);
  put_string(os, contents.header.dump());
  put_u64(os, contents.arrays.size());
  for (const auto& [name, t] : contents.arrays) {
    put_string(os, name);
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u64(os, d);
    for (double v : t.data()) put_u64(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw DataError("write failed: " + path.string());
}

NamedArrays read_named_arrays(const std::filesystem::path& path, std::string_view magic) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  Reader r(is, path.string());
  char m[4];
  r.bytes(m, 4);
  if (std::string_view(m, 4) != magic)
    throw DataError(path.string() + ": wrong file type (expected magic " + std::string(magic) +
                    ")");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw DataError(path.string() + ": unsupported checkpoint version " +
                    std::to_string(version));
  NamedArrays out;
  try {
    out.header = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": corrupt header: " + e.what());
  }
  const auto count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str(1 << 16);
    const auto rank = r.u32();
    if (rank > 8) throw DataError(path.string() + ": implausible tensor rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = std::bit_cast<double>(r.u64());
    out.arrays.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

void save_model(const std::filesystem::path& path, const Model& model) {
  NamedArrays na;
  na.header = nlohmann::json{{"kind", "model"}, {"config", model.config()}};
  na.arrays = model.params();
  write_named_arrays(path, kModelMagic, na);
}

Model load_model(const std::filesystem::path& path) {
  NamedArrays na = read_named_arrays(path, kModelMagic);
  ModelConfig cfg;
  try {
    cfg = na.header.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": bad model header: " + e.what());
  }
  Model m = Model::zeros(cfg);
  if (na.arrays.size() != m.params().size())
    throw DataError(path.string() + ": parameter set does not match config topology");
  for (auto& [name, t] : na.arrays) {
    if (!m.has_param(name)) throw DataError(path.string() + ": unexpected parameter " + name);
    m.set_param(name, std::move(t));
  }
  return m;
}

}  // namespace biasedit
