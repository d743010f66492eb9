#include "watk/tensor_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "watk/errors.hpp"

namespace watk {

namespace {

static_assert(std::endian::native == std::endian::little,
              "tensor container I/O assumes a little-endian host");

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}
  bool has(std::size_t n) const { return pos_ + n <= b_.size(); }
  template <typename T>
  T get(const std::string& what) {
    if (!has(sizeof(T))) throw ModelError("short read for " + what);
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void get_bytes(void* out, std::size_t n, const std::string& what) {
    if (!has(n)) throw ModelError("short read for " + what);
    std::memcpy(out, b_.data() + pos_, n);
    pos_ += n;
  }
  bool at_end() const { return pos_ == b_.size(); }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

void put_entry_header(Writer& w, const std::string& name, const std::vector<std::uint32_t>& dims) {
  if (name.size() > 0xFFFF) throw ValidationError("tensor name too long: " + name.substr(0, 40));
  if (dims.size() > 0xFF) throw ValidationError("too many dimensions for tensor " + name);
  w.put(static_cast<std::uint16_t>(name.size()));
  w.put_bytes(name.data(), name.size());
  w.put(static_cast<std::uint8_t>(dims.size()));
  for (auto d : dims) w.put(d);
}

}  // namespace

NamedTensor NamedTensor::from_matrix(std::string name, const Matrix& m) {
  NamedTensor t{std::move(name), {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())}, {}};
  t.data.reserve(m.size());
  for (double v : m.storage()) t.data.push_back(static_cast<float>(v));
  return t;
}

NamedTensor NamedTensor::from_vector(std::string name, std::span<const double> v) {
  NamedTensor t{std::move(name), {static_cast<std::uint32_t>(v.size())}, {}};
  t.data.reserve(v.size());
  for (double x : v) t.data.push_back(static_cast<float>(x));
  return t;
}

Matrix NamedTensor::to_matrix() const {
  if (dims.size() != 2) throw ModelError("tensor " + name + " is not a matrix");
  Matrix m(dims[0], dims[1]);
  for (std::size_t i = 0; i < data.size(); ++i) m.data()[i] = data[i];
  return m;
}

Vector NamedTensor::to_vector() const {
  if (dims.size() != 1) throw ModelError("tensor " + name + " is not a vector");
  return Vector(data.begin(), data.end());
}

const NamedTensor* TensorFile::find(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::vector<std::uint8_t> encode_tensor_file(const TensorFile& file) {
  for (const auto& t : file.tensors) {
    std::size_t n = 1;
    for (auto d : t.dims) n *= d;
    if (n != t.data.size()) throw ValidationError("tensor " + t.name + ": payload size does not match dims");
  }
  Writer w;
  w.put_bytes(kTensorMagic, sizeof(kTensorMagic));
  const std::size_t count = file.tensors.size() + (file.meta ? 1 : 0) + (file.run_config ? 1 : 0);
  w.put(static_cast<std::uint32_t>(count));
  if (file.meta) {
    put_entry_header(w, "__meta__", {7});
    for (auto v : *file.meta) w.put(v);
  }
  if (file.run_config) put_entry_header(w, std::string(kRunConfigPrefix) + *file.run_config, {0});
  for (const auto& t : file.tensors) {
    put_entry_header(w, t.name, t.dims);
    w.put_bytes(t.data.data(), t.data.size() * sizeof(float));
  }
  return w.take();
}

TensorFile decode_tensor_file(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[6];
  if (!r.has(sizeof(magic))) throw ModelError("malformed header: file too short");
  r.get_bytes(magic, sizeof(magic), "header");
  if (std::memcmp(magic, kTensorMagic, sizeof(magic)) != 0) throw ModelError("malformed header: bad magic");
  const auto count = r.get<std::uint32_t>("tensor count");
  TensorFile out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint16_t>("tensor name length");
    std::string name(name_len, '\0');
    r.get_bytes(name.data(), name_len, "tensor name");
    const auto ndims = r.get<std::uint8_t>("dims of tensor " + name);
    std::vector<std::uint32_t> dims(ndims);
    std::size_t n = 1;
    for (auto& d : dims) {
      d = r.get<std::uint32_t>("dims of tensor " + name);
      n *= d;
    }
    if (name == "__meta__") {
      if (dims != std::vector<std::uint32_t>{7}) throw ModelError("malformed __meta__ entry");
      std::array<std::uint32_t, 7> meta{};
      for (auto& v : meta) v = r.get<std::uint32_t>("tensor __meta__");
      out.meta = meta;
      continue;
    }
    if (name.starts_with(kRunConfigPrefix)) {
      if (n != 0) throw ModelError("malformed run config entry");
      out.run_config = name.substr(kRunConfigPrefix.size());
      continue;
    }
    NamedTensor t{name, std::move(dims), std::vector<float>(n)};
    if (!r.has(n * sizeof(float))) throw ModelError("short read for tensor " + name);
    r.get_bytes(t.data.data(), n * sizeof(float), "tensor " + name);
    out.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) throw ModelError("trailing bytes after last tensor");
  return out;
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  const auto bytes = encode_tensor_file(file);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ValidationError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw ValidationError("I/O failure writing " + path.string());
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ModelError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_tensor_file(bytes);
}

}  // namespace watk
