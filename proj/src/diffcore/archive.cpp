#include "iwm/diffcore/archive.hpp"

#include <fstream>

namespace iwm {

namespace {
constexpr char kMagic[9] = "IWMARCH1";
constexpr char kFooter[9] = "IWMAEND\0";
}  // namespace

const ArchiveEntry& Archive::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw CheckpointError("missing_entry", "archive has no entry " + name);
  return it->second;
}

void Archive::save(const std::filesystem::path& path) const {
  // Write to a sibling and rename so a crash never leaves a half-written file.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("io_error", "cannot write " + tmp.string());
    BinaryWriter w(out);
    w.bytes(kMagic, 8);
    w.pod(kVersion);
    w.pod(metadata.config_hash);
    w.pod(metadata.seed);
    w.pod(metadata.step);
    w.pod(static_cast<std::uint32_t>(metadata.extra.size()));
    for (const auto& [k, v] : metadata.extra) {
      w.str(k);
      w.str(v);
    }
    w.pod(static_cast<std::uint32_t>(entries_.size()));
    for (const auto& [name, e] : entries_) {
      w.str(name);
      w.pod(static_cast<std::uint8_t>(e.dtype));
      w.pod(static_cast<std::uint32_t>(e.shape.size()));
      for (Index d : e.shape) w.pod(static_cast<std::uint64_t>(d));
      w.pod(static_cast<std::uint64_t>(e.bytes.size()));
      w.bytes(e.bytes.data(), e.bytes.size());
    }
    w.bytes(kFooter, 8);
    if (!out) throw CheckpointError("io_error", "failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive Archive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("missing_file", "cannot open " + path.string());
  BinaryReader<CheckpointError> r(in, "archive " + path.string());
  r.expect_magic(kMagic);
  const auto version = r.pod<std::uint32_t>();
  if (version != kVersion) {
    throw CheckpointError("version_mismatch", "archive version " + std::to_string(version) + ", expected " +
                                                  std::to_string(kVersion));
  }
  Archive a;
  a.metadata.config_hash = r.pod<std::uint64_t>();
  a.metadata.seed = r.pod<std::uint64_t>();
  a.metadata.step = r.pod<std::int64_t>();
  const auto n_extra = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_extra; ++i) {
    std::string k = r.str();
    a.metadata.extra[k] = r.str();
  }
  const auto n = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    ArchiveEntry e;
    const auto tag = r.pod<std::uint8_t>();
    if (tag < 1 || tag > 3) throw CheckpointError("corrupt", "entry " + name + " has unknown dtype tag");
    e.dtype = static_cast<DType>(tag);
    const auto rank = r.pod<std::uint32_t>();
    if (rank > 16) throw CheckpointError("corrupt", "entry " + name + " has implausible rank");
    for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(static_cast<Index>(r.pod<std::uint64_t>()));
    const auto nbytes = r.pod<std::uint64_t>();
    if (nbytes != static_cast<std::uint64_t>(numel(e.shape)) * dtype_size(e.dtype)) {
      throw CheckpointError("corrupt", "entry " + name + " byte count does not match its shape");
    }
    e.bytes.resize(nbytes);
    r.read(e.bytes.data(), nbytes);
    a.entries_[name] = std::move(e);
  }
  char footer[8];
  r.read(footer, 8);
  if (std::memcmp(footer, kFooter, 8) != 0) throw CheckpointError("corrupt", "archive footer missing");
  return a;
}

}  // namespace iwm
