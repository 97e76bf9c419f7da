#include <rgm/checkpoint.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace rgm {
namespace {

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + at_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    at_ += sizeof(T);
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(at_, n);
    at_ += n;
    return s;
  }

  [[nodiscard]] bool done() const { return at_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - at_ < n) {
      throw CheckpointError("checkpoint truncated at byte " + std::to_string(at_));
    }
  }

  std::string_view bytes_;
  std::size_t at_ = 0;
};

}  // namespace

std::string encode_checkpoint(const std::vector<Parameter>& params) {
  std::string out(kCheckpointMagic);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put_le<std::uint32_t>(out, 2);
    put_le<std::uint64_t>(out, static_cast<std::uint64_t>(p.value.rows()));
    put_le<std::uint64_t>(out, static_cast<std::uint64_t>(p.value.cols()));
    for (Index i = 0; i < p.value.size(); ++i) put_le<double>(out, p.value.data()[i]);
  }
  return out;
}

std::vector<Parameter> decode_checkpoint(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(kCheckpointMagic.size()) != kCheckpointMagic) throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = in.get<std::uint32_t>();
  std::vector<Parameter> params;
  params.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    Parameter p;
    p.name = std::string(in.take(in.get<std::uint32_t>()));
    if (in.get<std::uint32_t>() != 2) throw CheckpointError("parameter '" + p.name + "' has unsupported rank");
    const auto rows = in.get<std::uint64_t>();
    const auto cols = in.get<std::uint64_t>();
    if (rows == 0 || cols == 0 || rows > (1u << 24) || cols > (1u << 24)) {
      throw CheckpointError("parameter '" + p.name + "' has invalid shape");
    }
    p.value.resize(static_cast<Index>(rows), static_cast<Index>(cols));
    for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = in.get<double>();
    params.push_back(std::move(p));
  }
  if (!in.done()) throw CheckpointError("trailing bytes after checkpoint payload");
  return params;
}

std::vector<Parameter> flatten_groups(const std::vector<ParameterGroup>& groups) {
  std::vector<Parameter> flat;
  for (const auto& [group, set] : groups) {
    for (const auto& p : *set) flat.push_back({group + "/" + p.name, p.value});
  }
  return flat;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<ParameterGroup>& groups) {
  const std::string bytes = encode_checkpoint(flatten_groups(groups));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

std::vector<Parameter> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return decode_checkpoint(buffer.str());
}

void restore_group(ParameterSet& target, const std::string& group, const std::vector<Parameter>& loaded) {
  for (auto& p : target) {
    const std::string key = group + "/" + p.name;
    auto it = std::find_if(loaded.begin(), loaded.end(), [&](const Parameter& q) { return q.name == key; });
    if (it == loaded.end()) throw CheckpointError("checkpoint lacks parameter '" + key + "'");
    if (it->value.rows() != p.value.rows() || it->value.cols() != p.value.cols()) {
      throw ShapeError("checkpoint parameter '" + key + "' is " + shape_string(it->value) + ", network expects " +
                       shape_string(p.value));
    }
    p.value = it->value;
  }
}

bool has_group(const std::vector<Parameter>& loaded, const std::string& group) {
  const std::string prefix = group + "/";
  return std::any_of(loaded.begin(), loaded.end(), [&](const Parameter& p) { return p.name.starts_with(prefix); });
}

}  // namespace rgm
