#include "promoe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <type_traits>

#include "promoe/error.hpp"

namespace promoe {

namespace {

constexpr char kMagic[8] = {'P', 'R', 'O', 'M', 'O', 'E', 'C', 'K'};

template <typename U>
void put_le(std::string& buf, U v) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename T>
void put_values(std::string& buf, const std::vector<T>& v) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (const T& x : v) put_le(buf, std::bit_cast<U>(x));
}

class Reader {
 public:
  Reader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  std::vector<T> values(std::size_t n) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    if (n > (data_.size() - pos_) / sizeof(T)) fail("tensor data truncated");
    std::vector<T> v(n);
    for (auto& x : v) x = std::bit_cast<T>(get<U>());
    return v;
  }
  bool done() const { return pos_ == data_.size(); }
  [[noreturn]] void fail(const std::string& what) const {
    throw IoError("checkpoint '" + path_ + "': " + what + " at byte " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n) const {
    if (n > data_.size() - pos_) fail("unexpected end of file");
  }
  std::string data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

const Array<float>& Checkpoint::f32(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw IoError("checkpoint has no tensor '" + name + "'");
  if (!std::holds_alternative<Array<float>>(it->second)) throw IoError("checkpoint tensor '" + name + "' is not f32");
  return std::get<Array<float>>(it->second);
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string buf(kMagic, sizeof kMagic);
  put_le(buf, Checkpoint::kVersion);
  put_le(buf, ckpt.step);
  put_le(buf, static_cast<std::uint64_t>(ckpt.config_json.size()));
  buf += ckpt.config_json;
  put_le(buf, static_cast<std::uint64_t>(ckpt.tensors.size()));
  for (const auto& [name, tensor] : ckpt.tensors) {
    put_le(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    put_le(buf, static_cast<std::uint8_t>(tensor.index()));
    std::visit(
        [&](const auto& a) {
          put_le(buf, static_cast<std::uint32_t>(a.rank()));
          for (std::size_t d : a.shape()) put_le(buf, static_cast<std::uint64_t>(d));
          put_values(buf, a.vec());
        },
        tensor);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint '" + path + "' for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed for checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(data), path);
  if (r.bytes(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) r.fail("bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != Checkpoint::kVersion) r.fail("unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.step = r.get<std::uint64_t>();
  ckpt.config_json = r.bytes(r.get<std::uint64_t>());
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t t = 0; t < count; ++t) {
    std::string name = r.bytes(r.get<std::uint32_t>());
    const auto dtype = r.get<std::uint8_t>();
    const auto rank = r.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    const std::size_t n = shape_numel(shape);
    switch (dtype) {
      case 0: ckpt.tensors.emplace(name, Array<float>(shape, r.values<float>(n))); break;
      case 1: ckpt.tensors.emplace(name, Array<double>(shape, r.values<double>(n))); break;
      case 2: ckpt.tensors.emplace(name, Array<std::uint64_t>(shape, r.values<std::uint64_t>(n))); break;
      default: r.fail("unknown dtype " + std::to_string(dtype) + " for tensor '" + name + "'");
    }
  }
  if (!r.done()) r.fail("trailing bytes");
  return ckpt;
}

}  // namespace promoe
