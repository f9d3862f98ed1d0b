#include "losa/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace losa {

namespace {

static_assert(std::endian::native == std::endian::little, "tensor files are little-endian");

constexpr char kTensorMagic[4] = {'L', 'S', 'T', 'N'};
constexpr char kCheckpointMagic[4] = {'L', 'S', 'C', 'K'};

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("truncated stream");
  return v;
}

void expect_magic(std::istream& in, const char (&magic)[4], const char* what) {
  char m[4];
  in.read(m, 4);
  if (!in || std::memcmp(m, magic, 4) != 0) throw IoError(std::string("bad magic for ") + what);
}

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor<float>& t) {
  out.write(kTensorMagic, 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  put<std::uint64_t>(out, t.size());
  for (auto d : t.shape()) put<std::uint64_t>(out, d);
  out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
}

Tensor<float> read_tensor(std::istream& in) {
  expect_magic(in, kTensorMagic, "tensor");
  const auto rank = get<std::uint32_t>(in);
  const auto count = get<std::uint64_t>(in);
  if (rank > 16) throw IoError("tensor rank too large");
  Shape shape(rank);
  for (auto& d : shape) d = get<std::uint64_t>(in);
  if (numel(shape) != count) throw IoError("tensor header element count disagrees with dims");
  std::vector<float> data(count);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (!in) throw IoError("truncated tensor data");
  return Tensor<float>(std::move(shape), std::move(data));
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  const auto parent = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  if (!std::filesystem::is_directory(parent)) throw IoError("directory does not exist: " + parent.string());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw IoError("write failed for " + path.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

void save_tensor(const std::filesystem::path& path, const Tensor<float>& t) {
  std::ostringstream ss;
  write_tensor(ss, t);
  write_file_atomic(path, ss.str());
}

Tensor<float> load_tensor(const std::filesystem::path& path) {
  std::istringstream in(read_all(path));
  return read_tensor(in);
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ostringstream ss;
  ss.write(kCheckpointMagic, 4);
  const std::string meta = ck.meta.dump();
  put<std::uint64_t>(ss, meta.size());
  ss.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  put<std::uint64_t>(ss, ck.tensors.size());
  for (const auto& [name, t] : ck.tensors) {
    put<std::uint64_t>(ss, name.size());
    ss.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(ss, t);
  }
  write_file_atomic(path, ss.str());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::istringstream in(read_all(path));
  expect_magic(in, kCheckpointMagic, "checkpoint");
  Checkpoint ck;
  const auto meta_len = get<std::uint64_t>(in);
  std::string meta(meta_len, '\0');
  in.read(meta.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw IoError("truncated checkpoint metadata");
  ck.meta = Json::parse(meta);
  const auto count = get<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get<std::uint64_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(len));
    if (!in) throw IoError("truncated checkpoint entry name");
    ck.tensors.emplace(std::move(name), read_tensor(in));
  }
  return ck;
}

}  // namespace losa
