#include "ekp/array_io.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cstring>
#include <fstream>
#include <sstream>

#include "ekp/errors.hpp"

namespace ekp::io {

namespace {
constexpr char kArrMagic[8] = {'E', 'K', 'P', 'A', 'R', 'R', '1', '\n'};
}

void write_npy(const std::filesystem::path& path, const ad::Tensor& t) {
  std::ostringstream header;
  header << "{'descr': '<f8', 'fortran_order': False, 'shape': (";
  for (std::size_t i = 0; i < t.shape().size(); ++i) header << t.shape()[i] << ", ";
  if (t.shape().empty()) header << ") , }";
  else header << "), }";
  std::string h = header.str();
  // Pad so magic(6)+version(2)+len(2)+header is a multiple of 64.
  const std::size_t base = 10;
  const std::size_t total = ((base + h.size() + 1 + 63) / 64) * 64;
  h.append(total - base - h.size() - 1, ' ');
  h.push_back('\n');

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  const unsigned char magic[8] = {0x93, 'N', 'U', 'M', 'P', 'Y', 1, 0};
  f.write(reinterpret_cast<const char*>(magic), 8);
  const std::uint16_t len = static_cast<std::uint16_t>(h.size());
  f.write(reinterpret_cast<const char*>(&len), 2);
  f.write(h.data(), static_cast<std::streamsize>(h.size()));
  f.write(reinterpret_cast<const char*>(t.data()),
          static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!f) throw IoError("short write: " + path.string());
}

ad::Tensor read_npy(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  unsigned char magic[8];
  f.read(reinterpret_cast<char*>(magic), 8);
  if (!f || magic[0] != 0x93 || std::memcmp(magic + 1, "NUMPY", 5) != 0)
    throw IoError("not an npy file: " + path.string());
  std::uint16_t len = 0;
  f.read(reinterpret_cast<char*>(&len), 2);
  std::string h(len, '\0');
  f.read(h.data(), len);
  if (h.find("'<f8'") == std::string::npos)
    throw IoError("npy dtype must be <f8: " + path.string());
  if (h.find("'fortran_order': False") == std::string::npos)
    throw IoError("npy must be C order: " + path.string());
  const auto lp = h.find('(');
  const auto rp = h.find(')', lp);
  if (lp == std::string::npos || rp == std::string::npos)
    throw IoError("bad npy header: " + path.string());
  std::vector<int> shape;
  std::string dims = h.substr(lp + 1, rp - lp - 1);
  std::stringstream ss(dims);
  std::string item;
  while (std::getline(ss, item, ',')) {
    bool digit = false;
    for (char c : item)
      if (c >= '0' && c <= '9') digit = true;
    if (digit) shape.push_back(std::stoi(item));
  }
  ad::Tensor t(shape);
  f.read(reinterpret_cast<char*>(t.data()),
         static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!f) throw IoError("truncated npy payload: " + path.string());
  return t;
}

void write_arr(const std::filesystem::path& path, const ad::Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(kArrMagic, 8);
  const std::uint64_t ndim = t.shape().size();
  f.write(reinterpret_cast<const char*>(&ndim), 8);
  for (int d : t.shape()) {
    const std::uint64_t v = static_cast<std::uint64_t>(d);
    f.write(reinterpret_cast<const char*>(&v), 8);
  }
  f.write(reinterpret_cast<const char*>(t.data()),
          static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!f) throw IoError("short write: " + path.string());
}

MappedArray::MappedArray(const std::filesystem::path& path) {
  const int fd = ::open(path.c_str(), O_RDONLY);
  if (fd < 0) throw IoError("cannot open " + path.string());
  struct stat st{};
  if (::fstat(fd, &st) != 0) {
    ::close(fd);
    throw IoError("cannot stat " + path.string());
  }
  length_ = static_cast<std::size_t>(st.st_size);
  base_ = ::mmap(nullptr, length_, PROT_READ, MAP_PRIVATE, fd, 0);
  ::close(fd);
  if (base_ == MAP_FAILED) {
    base_ = nullptr;
    throw IoError("mmap failed: " + path.string());
  }
  const char* p = static_cast<const char*>(base_);
  if (length_ < 16 || std::memcmp(p, kArrMagic, 8) != 0) {
    ::munmap(base_, length_);
    base_ = nullptr;
    throw IoError("not an arr file: " + path.string());
  }
  std::uint64_t ndim = 0;
  std::memcpy(&ndim, p + 8, 8);
  std::size_t off = 16;
  std::size_t count = 1;
  for (std::uint64_t i = 0; i < ndim; ++i) {
    std::uint64_t d = 0;
    std::memcpy(&d, p + off, 8);
    off += 8;
    shape_.push_back(static_cast<int>(d));
    count *= d;
  }
  if (length_ < off + count * sizeof(double)) {
    ::munmap(base_, length_);
    base_ = nullptr;
    throw IoError("truncated arr payload: " + path.string());
  }
  data_ = std::span<const double>(reinterpret_cast<const double*>(p + off), count);
}

MappedArray::~MappedArray() {
  if (base_) ::munmap(base_, length_);
}

MappedArray::MappedArray(MappedArray&& o) noexcept
    : base_(o.base_), length_(o.length_), shape_(std::move(o.shape_)), data_(o.data_) {
  o.base_ = nullptr;
  o.data_ = {};
}

MappedArray& MappedArray::operator=(MappedArray&& o) noexcept {
  if (this != &o) {
    if (base_) ::munmap(base_, length_);
    base_ = o.base_;
    length_ = o.length_;
    shape_ = std::move(o.shape_);
    data_ = o.data_;
    o.base_ = nullptr;
    o.data_ = {};
  }
  return *this;
}

}  // namespace ekp::io
