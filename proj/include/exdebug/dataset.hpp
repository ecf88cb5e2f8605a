#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace exdebug {

using TokenId = std::int32_t;

/// Ordered token list with a reverse index. Ids 0 and 1 are reserved for the
/// padding and unknown tokens.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnknown = 1;
  static constexpr std::string_view kPadToken = "<pad>";
  static constexpr std::string_view kUnknownToken = "<unk>";

  Vocabulary();
  /// Rebuilds from a full ordered token list (as stored in a model archive).
  /// The first two entries must be the pad and unknown tokens.
  explicit Vocabulary(std::vector<std::string> tokens);

  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;
  bool contains(std::string_view token) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  void push(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Keeps tokens seen at least `min_count` times, ordered by descending count
/// then lexicographically. Throws IngestionError on an empty corpus.
Vocabulary build_vocabulary(std::span<const std::vector<std::string>> corpus, int min_count);

/// Whitespace split plus ASCII lowercasing.
std::vector<std::string> tokenize(std::string_view text);
std::string to_lower(std::string_view s);

struct Example {
  std::string id;
  std::vector<TokenId> token_ids;  // empty until encode()
  std::vector<std::string> raw_tokens;
  int label = 0;

  std::size_t length() const { return raw_tokens.size(); }
};

enum class Split { train, id_eval, ood_eval };

std::string_view to_string(Split s);

struct Manifest {
  int num_classes = 2;
  std::vector<std::string> labels;
};

struct Dataset {
  std::vector<Example> examples;
  int num_classes = 2;
  Split split = Split::train;

  bool empty() const { return examples.empty(); }
  std::size_t size() const { return examples.size(); }
  /// Index of the example with this id, if any. Linear scan.
  std::optional<std::size_t> find(std::string_view id) const;
  bool encoded() const;
  std::vector<std::vector<std::string>> token_stream() const;
};

/// Checks label range, id uniqueness and non-empty token lists.
void validate(const Dataset& data);

/// Fills token_ids of every example from the vocabulary (unknown words map to kUnknown).
void encode(Dataset& data, const Vocabulary& vocab);

Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);

/// Default manifest location for a dataset file: `<file>.manifest.json`, then
/// `manifest.json` in the same directory.
std::filesystem::path find_manifest(const std::filesystem::path& dataset_path);

/// Reads a JSONL dataset. Examples are returned in file order, not yet encoded.
Dataset load_dataset(const std::filesystem::path& path, const Manifest& manifest,
                     Split split = Split::train);
Dataset load_dataset(const std::filesystem::path& path, Split split = Split::train);

void save_dataset(const Dataset& data, const std::filesystem::path& path);

}  // namespace exdebug
