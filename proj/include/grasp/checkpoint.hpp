#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "grasp/error.hpp"
#include "grasp/lora.hpp"

namespace grasp {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O writes host doubles as little-endian");

// Adapter container:
//   8 bytes   magic "GRASPCK1"
//   u32       format version
//   u64       header length, then that many bytes of JSON header
//   records   per tensor: u32 name length, name, u64 rows, u64 cols,
//             rows*cols f64 values, row-major, little-endian
// The header lists sites (id, rank, alpha, scale), the checkpoint kind, the
// producing config hash, and free-form metadata.
inline constexpr char kCheckpointMagic[8] = {'G', 'R', 'A', 'S', 'P', 'C', 'K', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::string kind;
  std::string config_hash;
  nlohmann::json extra = nlohmann::json::object();
};

struct Checkpoint {
  CheckpointMeta meta;
  MergedAdapterSet params;
};

namespace detail {

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const noexcept { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw ParseError(std::string("checkpoint truncated while reading ") + what);
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline void put_tensor(std::string& out, const std::string& name, const Matrix& m) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put<std::uint64_t>(out, m.rows());
  put<std::uint64_t>(out, m.cols());
  out.append(reinterpret_cast<const char*>(m.values().data()), m.values().size_bytes());
}

inline Matrix get_tensor(Reader& in, const std::string& expected_name) {
  const auto len = in.get<std::uint32_t>("tensor name length");
  const std::string name(in.take(len, "tensor name"));
  if (name != expected_name) {
    throw ParseError("checkpoint: expected tensor '" + expected_name + "', found '" + name + "'");
  }
  const auto rows = in.get<std::uint64_t>("rows");
  const auto cols = in.get<std::uint64_t>("cols");
  if (cols != 0 && rows > (std::uint64_t{1} << 40) / cols) {
    throw ParseError("checkpoint: tensor '" + name + "' has implausible shape");
  }
  const auto raw = in.take(rows * cols * sizeof(double), "tensor values");
  std::vector<double> values(rows * cols);
  std::memcpy(values.data(), raw.data(), raw.size());
  try {
    return Matrix(rows, cols, std::move(values));
  } catch (const NumericalError&) {
    throw ParseError("checkpoint: tensor '" + name + "' holds non-finite values");
  }
}

}  // namespace detail

inline std::string encode_checkpoint(const MergedAdapterSet& params, const CheckpointMeta& meta) {
  nlohmann::json header;
  header["kind"] = meta.kind;
  header["config_hash"] = meta.config_hash;
  header["extra"] = meta.extra;
  header["sites"] = nlohmann::json::array();
  for (const auto& s : params.sites()) {
    header["sites"].push_back({{"site_id", s.site_id},
                               {"rank", s.rank()},
                               {"alpha", s.scale * static_cast<double>(s.rank())},
                               {"scale", s.scale}});
  }
  const std::string text = header.dump();

  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& s : params.sites()) {
    detail::put_tensor(out, s.site_id + ".A", s.a);
    detail::put_tensor(out, s.site_id + ".B", s.b);
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  detail::Reader in(bytes);
  if (in.take(sizeof kCheckpointMagic, "magic") !=
      std::string_view(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw ParseError("checkpoint: bad magic, not an adapter container");
  }
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw ParseError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto header_len = in.get<std::uint64_t>("header length");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.take(header_len, "header"));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: malformed header: ") + e.what());
  }

  Checkpoint out;
  std::vector<MergedSite> sites;
  try {
    out.meta.kind = header.at("kind").get<std::string>();
    out.meta.config_hash = header.at("config_hash").get<std::string>();
    out.meta.extra = header.at("extra");
    for (const auto& s : header.at("sites")) {
      const auto id = s.at("site_id").get<std::string>();
      const auto rank = s.at("rank").get<std::size_t>();
      MergedSite site;
      site.site_id = id;
      site.scale = s.at("scale").get<double>();
      site.a = detail::get_tensor(in, id + ".A");
      site.b = detail::get_tensor(in, id + ".B");
      if (site.a.rows() != rank || site.b.cols() != rank) {
        throw ParseError("checkpoint: site " + id + " factors disagree with header rank");
      }
      sites.push_back(std::move(site));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: header field error: ") + e.what());
  }
  if (!in.done()) throw ParseError("checkpoint: trailing bytes after last tensor");
  out.params = MergedAdapterSet(std::move(sites));
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path.string());
  return data;
}

// Writes through a temporary file and renames, so readers never see a
// partial file.
inline void write_file(const std::filesystem::path& path, std::string_view data) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp + " to " + path.string() + ": " + ec.message());
}

inline void write_checkpoint(const std::filesystem::path& path, const MergedAdapterSet& params,
                             const CheckpointMeta& meta) {
  write_file(path, encode_checkpoint(params, meta));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace grasp
