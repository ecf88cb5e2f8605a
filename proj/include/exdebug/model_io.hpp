#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "exdebug/dataset.hpp"
#include "exdebug/model.hpp"

namespace exdebug {

// Model archive layout (all integers little-endian):
//
//   "EXDBGMDL"                         8-byte magic
//   repeated section:
//     tag        4 ASCII bytes         "MANI", "VOCB", "PARM" in that order
//     length     uint64                payload byte count
//     payload
//
//   MANI  compact JSON object {"C","V","d","format_version","h","labels",
//         "nonlinearity","normalization"} with keys in sorted order
//   VOCB  vocabulary tokens in id order, each terminated by '\n'
//   PARM  float64 row-major: embeddings (V x d), hidden weights (d x h),
//         hidden bias (h), output weights (h x C), output bias (C)
inline constexpr std::string_view kArchiveMagic = "EXDBGMDL";
inline constexpr int kArchiveFormatVersion = 1;

struct ModelArchive {
  TextClassifier model;
  Vocabulary vocab;
  std::vector<std::string> labels;
};

std::string serialize_model(const TextClassifier& model, const Vocabulary& vocab,
                            const std::vector<std::string>& labels = {});
/// Throws FormatError naming the missing or malformed section.
ModelArchive deserialize_model(std::string_view bytes);

void export_model(const TextClassifier& model, const Vocabulary& vocab,
                  const std::filesystem::path& path, const std::vector<std::string>& labels = {});
ModelArchive load_model(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
/// Writes to a temporary sibling and renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace exdebug
