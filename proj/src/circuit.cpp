#include "circuit_lens/circuit.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "circuit_lens/io.hpp"

namespace circuit_lens {

static_assert(std::endian::native == std::endian::little, "table files are little-endian");

HeadSet HeadSet::parse(const std::string& text) {
  HeadSet out;
  std::set<Index> seen;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    long long h = 0;
    try {
      h = std::stoll(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) fail(ErrorCode::ConfigError, "bad head index '" + item + "'");
    if (!seen.insert(h).second) fail(ErrorCode::ConfigError, "head " + item + " listed twice");
    out.heads.push_back(static_cast<Index>(h));
  }
  return out;
}

void HeadSet::validate(const Dims& d) const {
  std::set<Index> seen;
  for (Index h : heads) {
    detail::check_head(h, d);
    if (!seen.insert(h).second) fail(ErrorCode::ConfigError, "head " + std::to_string(h) + " listed twice");
  }
}

std::string HeadSet::to_string() const {
  std::string s;
  for (Index h : heads) s += (s.empty() ? "" : ",") + std::to_string(h);
  return s;
}

namespace {

constexpr char kMagic[8] = {'C', 'L', 'T', 'A', 'B', 'L', 'E', '\0'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) fail(ErrorCode::UnreadableContainer, "truncated table header in " + path.string());
  return v;
}

struct Header {
  TableProvenance provenance;
  std::uint64_t d_mlp = 0, d_voc = 0;
};

Header read_header(std::istream& in, const std::filesystem::path& path) {
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0)
    fail(ErrorCode::UnreadableContainer, path.string() + " is not a contribution table");
  if (get<std::uint32_t>(in, path) != kVersion)
    fail(ErrorCode::UnreadableContainer, "unsupported table version in " + path.string());
  Header h;
  h.d_mlp = get<std::uint64_t>(in, path);
  h.d_voc = get<std::uint64_t>(in, path);
  h.provenance.position = static_cast<Index>(get<std::uint64_t>(in, path));
  h.provenance.token = get<std::int32_t>(in, path);
  const auto count = get<std::uint32_t>(in, path);
  if (count > 4096) fail(ErrorCode::UnreadableContainer, "implausible head count in " + path.string());
  for (std::uint32_t i = 0; i < count; ++i) h.provenance.heads.push_back(get<std::uint32_t>(in, path));
  const auto len = get<std::uint32_t>(in, path);
  if (len > 4096) fail(ErrorCode::UnreadableContainer, "implausible digest length in " + path.string());
  h.provenance.calibration_digest.resize(len);
  in.read(h.provenance.calibration_digest.data(), len);
  if (!in) fail(ErrorCode::UnreadableContainer, "truncated table header in " + path.string());
  return h;
}

}  // namespace

void write_table(const std::filesystem::path& path, const ContributionTable& table) {
  if (!table.values.allFinite()) fail(ErrorCode::NonFinite, "refusing to write a non-finite table");
  write_atomic(path, [&](std::ostream& out) {
    out.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kVersion);
    put<std::uint64_t>(out, static_cast<std::uint64_t>(table.neurons()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(table.vocab()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(table.provenance.position));
    put<std::int32_t>(out, table.provenance.token);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(table.provenance.heads.size()));
    for (Index h : table.provenance.heads) put<std::uint32_t>(out, static_cast<std::uint32_t>(h));
    const auto& digest = table.provenance.calibration_digest;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(digest.size()));
    out.write(digest.data(), static_cast<std::streamsize>(digest.size()));
    out.write(reinterpret_cast<const char*>(table.values.data()),
              static_cast<std::streamsize>(table.values.size() * sizeof(float)));
  });
}

TableProvenance read_table_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
  return read_header(in, path).provenance;
}

ContributionTable read_table(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
  const Header h = read_header(in, path);
  const auto header_end = static_cast<std::uint64_t>(in.tellg());
  const std::uint64_t expected = header_end + h.d_mlp * h.d_voc * sizeof(float);
  if (std::filesystem::file_size(path) != expected)
    fail(ErrorCode::UnreadableContainer, "table payload size mismatch in " + path.string());
  ContributionTable table;
  table.provenance = h.provenance;
  table.values.resize(static_cast<Index>(h.d_mlp), static_cast<Index>(h.d_voc));
  in.read(reinterpret_cast<char*>(table.values.data()),
          static_cast<std::streamsize>(table.values.size() * sizeof(float)));
  if (!in) fail(ErrorCode::UnreadableContainer, "truncated table payload in " + path.string());
  return table;
}

}  // namespace circuit_lens
