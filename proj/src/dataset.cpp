#include "exdebug/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "exdebug/errors.hpp"

namespace exdebug {

using nlohmann::json;

Vocabulary::Vocabulary() {
  push(std::string(kPadToken));
  push(std::string(kUnknownToken));
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) {
  if (tokens.size() < 2 || tokens[0] != kPadToken || tokens[1] != kUnknownToken) {
    throw FormatError("vocabulary must start with " + std::string(kPadToken) + " and " +
                      std::string(kUnknownToken));
  }
  for (auto& t : tokens) {
    if (index_.contains(t)) throw FormatError("duplicate vocabulary token '" + t + "'");
    push(std::move(t));
  }
}

void Vocabulary::push(std::string token) {
  index_.emplace(token, static_cast<TokenId>(tokens_.size()));
  tokens_.push_back(std::move(token));
}

TokenId Vocabulary::id(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnknown : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const {
  return index_.contains(std::string(token));
}

Vocabulary build_vocabulary(std::span<const std::vector<std::string>> corpus, int min_count) {
  std::map<std::string, long> counts;
  for (const auto& sentence : corpus) {
    for (const auto& tok : sentence) ++counts[tok];
  }
  if (counts.empty()) throw IngestionError("cannot build a vocabulary from an empty corpus");

  std::vector<std::pair<std::string, long>> kept;
  for (auto& [tok, n] : counts) {
    if (n >= min_count && tok != Vocabulary::kPadToken && tok != Vocabulary::kUnknownToken) {
      kept.emplace_back(tok, n);
    }
  }
  // std::map iteration is already lexicographic; stable sort keeps that as the tiebreak.
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  std::vector<std::string> tokens{std::string(Vocabulary::kPadToken),
                                  std::string(Vocabulary::kUnknownToken)};
  for (auto& [tok, n] : kept) tokens.push_back(std::move(tok));
  return Vocabulary(std::move(tokens));
}

std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) out.push_back(to_lower(tok));
  return out;
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::id_eval: return "id_eval";
    case Split::ood_eval: return "ood_eval";
  }
  return "?";
}

std::optional<std::size_t> Dataset::find(std::string_view id) const {
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (examples[i].id == id) return i;
  }
  return std::nullopt;
}

bool Dataset::encoded() const {
  return std::all_of(examples.begin(), examples.end(), [](const Example& e) {
    return e.token_ids.size() == e.raw_tokens.size();
  });
}

std::vector<std::vector<std::string>> Dataset::token_stream() const {
  std::vector<std::vector<std::string>> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(e.raw_tokens);
  return out;
}

void validate(const Dataset& data) {
  std::unordered_set<std::string> ids;
  for (const auto& e : data.examples) {
    if (!ids.insert(e.id).second) throw ValidationError("duplicate example id '" + e.id + "'");
    if (e.raw_tokens.empty()) throw ValidationError("example '" + e.id + "' has no tokens");
    if (e.label < 0 || e.label >= data.num_classes) {
      throw ValidationError("example '" + e.id + "' has label " + std::to_string(e.label) +
                            " outside [0, " + std::to_string(data.num_classes) + ")");
    }
    if (!e.token_ids.empty() && e.token_ids.size() != e.raw_tokens.size()) {
      throw ValidationError("example '" + e.id + "' has mismatched token ids");
    }
  }
}

void encode(Dataset& data, const Vocabulary& vocab) {
  for (auto& e : data.examples) {
    e.token_ids.clear();
    e.token_ids.reserve(e.raw_tokens.size());
    for (const auto& t : e.raw_tokens) e.token_ids.push_back(vocab.id(t));
  }
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& ex) {
    throw IngestionError("manifest " + path.string() + ": " + ex.what());
  }
  Manifest m;
  if (!j.contains("num_classes") || !j["num_classes"].is_number_integer()) {
    throw ValidationError("manifest " + path.string() + " lacks integer num_classes");
  }
  m.num_classes = j["num_classes"].get<int>();
  if (m.num_classes < 2) throw ValidationError("manifest declares fewer than two classes");
  if (j.contains("labels")) m.labels = j["labels"].get<std::vector<std::string>>();
  if (!m.labels.empty() && static_cast<int>(m.labels.size()) != m.num_classes) {
    throw ValidationError("manifest label names do not match num_classes");
  }
  return m;
}

void save_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path);
  out << json{{"num_classes", manifest.num_classes}, {"labels", manifest.labels}}.dump() << '\n';
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::filesystem::path find_manifest(const std::filesystem::path& dataset_path) {
  auto sidecar = dataset_path;
  sidecar += ".manifest.json";
  if (std::filesystem::exists(sidecar)) return sidecar;
  auto shared = dataset_path.parent_path() / "manifest.json";
  if (std::filesystem::exists(shared)) return shared;
  throw IngestionError("no manifest found for " + dataset_path.string());
}

Dataset load_dataset(const std::filesystem::path& path, const Manifest& manifest, Split split) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open dataset " + path.string());

  Dataset data;
  data.num_classes = manifest.num_classes;
  data.split = split;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = path.string() + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& ex) {
      throw IngestionError(where + ": malformed JSON (" + ex.what() + ")");
    }
    Example e;
    try {
      e.id = j.at("id").get<std::string>();
      e.label = j.at("label").get<int>();
      if (j.contains("tokens")) {
        for (const auto& t : j["tokens"]) e.raw_tokens.push_back(to_lower(t.get<std::string>()));
      } else {
        e.raw_tokens = tokenize(j.at("text").get<std::string>());
      }
    } catch (const json::exception& ex) {
      throw IngestionError(where + ": " + ex.what());
    }
    if (e.raw_tokens.empty()) throw ValidationError(where + ": example has no tokens");
    if (e.label < 0 || e.label >= data.num_classes) {
      throw ValidationError(where + ": label " + std::to_string(e.label) + " outside [0, " +
                            std::to_string(data.num_classes) + ")");
    }
    data.examples.push_back(std::move(e));
  }
  validate(data);
  return data;
}

Dataset load_dataset(const std::filesystem::path& path, Split split) {
  return load_dataset(path, load_manifest(find_manifest(path)), split);
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& e : data.examples) {
    out << json{{"id", e.id}, {"tokens", e.raw_tokens}, {"label", e.label}}.dump() << '\n';
  }
}

}  // namespace exdebug
