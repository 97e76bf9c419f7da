#pragma once

// Flat binary checkpoint, little-endian regardless of host:
//
//   bytes 0..7   magic "RGMCKPT\0"
//   u32          format version (1)
//   u32          parameter count N
//   N records:
//     u32        name length L, then L bytes of UTF-8 name
//     u32        rank (always 2)
//     u64 u64    rows, cols
//     f64 * rows*cols, row-major
//
// Parameters of several sets share one file by prefixing names with
// "<group>/", e.g. "policy/policy.layer0.weight".

#include <rgm/nn.hpp>

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace rgm {

inline constexpr std::string_view kCheckpointMagic{"RGMCKPT\0", 8};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using ParameterGroup = std::pair<std::string, const ParameterSet*>;

std::string encode_checkpoint(const std::vector<Parameter>& params);
std::vector<Parameter> decode_checkpoint(std::string_view bytes);

std::vector<Parameter> flatten_groups(const std::vector<ParameterGroup>& groups);

void save_checkpoint(const std::filesystem::path& path, const std::vector<ParameterGroup>& groups);
std::vector<Parameter> load_checkpoint(const std::filesystem::path& path);

/// Fills `target` from entries named "<group>/<param name>"; every target
/// parameter must be present with a matching shape.
void restore_group(ParameterSet& target, const std::string& group, const std::vector<Parameter>& loaded);

/// True when the checkpoint holds at least one entry for the group.
bool has_group(const std::vector<Parameter>& loaded, const std::string& group);

}  // namespace rgm
