#include "lift/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <iterator>

namespace lift {
namespace {

constexpr char kMagic[8] = {'L', 'I', 'F', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      out_.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
    }
  }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  void need(std::size_t n) const {
    if (pos_ + n > size_) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  template <typename U>
  U le() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const std::uint8_t* p = data_ + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return size_ - pos_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large files.
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const std::vector<StoredTensor>& tensors) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.le<std::uint32_t>(kVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xFFFF) throw CheckpointError("tensor name too long: " + t.name);
    if (t.dims.size() > 0xFF) throw CheckpointError("tensor rank too large: " + t.name);
    std::uint64_t count = 1;
    for (auto d : t.dims) count *= d;
    if (count != t.values.size()) {
      throw CheckpointError("tensor '" + t.name + "' dims disagree with its value count");
    }
    w.le<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.le<std::uint8_t>(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) w.le<std::uint64_t>(d);
    w.le<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
    for (double v : t.values) {
      if (t.dtype == DType::kFloat32) {
        const float f = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &f, sizeof(bits));
        w.le<std::uint32_t>(bits);
      } else {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        w.le<std::uint64_t>(bits);
      }
    }
  }
  auto& buf = w.buffer();
  w.le<std::uint32_t>(crc_of(buf.data(), buf.size()));
  return std::move(buf);
}

std::vector<StoredTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof(kMagic) + 12) throw CheckpointError("checkpoint truncated: checksum failure");
  const std::size_t body = bytes.size() - 4;
  Reader tail(bytes.data() + body, 4);
  if (tail.le<std::uint32_t>() != crc_of(bytes.data(), body)) {
    throw CheckpointError("checkpoint checksum failure");
  }
  Reader r(bytes.data(), body);
  if (std::memcmp(r.take(sizeof(kMagic)), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("checkpoint magic mismatch");
  }
  const auto version = r.le<std::uint32_t>();
  if (version != kVersion) {
    throw CheckpointError("checkpoint version mismatch: got " + std::to_string(version));
  }
  const auto count = r.le<std::uint32_t>();
  std::vector<StoredTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    const auto name_len = r.le<std::uint16_t>();
    const auto* name = r.take(name_len);
    t.name.assign(reinterpret_cast<const char*>(name), name_len);
    const auto rank = r.le<std::uint8_t>();
    std::uint64_t n = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      t.dims.push_back(r.le<std::uint64_t>());
      n *= t.dims.back();
    }
    const auto dtype = r.le<std::uint8_t>();
    if (dtype > 1) throw CheckpointError("tensor '" + t.name + "' has unknown dtype");
    t.dtype = static_cast<DType>(dtype);
    const std::size_t width = t.dtype == DType::kFloat32 ? 4 : 8;
    if (n > r.remaining() / width) throw CheckpointError("checkpoint truncated in tensor '" + t.name + "'");
    t.values.resize(n);
    for (std::uint64_t k = 0; k < n; ++k) {
      if (t.dtype == DType::kFloat32) {
        const auto bits = r.le<std::uint32_t>();
        float f;
        std::memcpy(&f, &bits, sizeof(f));
        t.values[k] = f;
      } else {
        const auto bits = r.le<std::uint64_t>();
        std::memcpy(&t.values[k], &bits, sizeof(double));
      }
    }
    out.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw CheckpointError("checkpoint has trailing bytes");
  return out;
}

void write_checkpoint_file(const std::filesystem::path& path, const std::vector<StoredTensor>& tensors) {
  const auto bytes = encode_checkpoint(tensors);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open '" + path.string() + "' for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw CheckpointError("write to '" + path.string() + "' failed");
}

std::vector<StoredTensor> read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace lift
