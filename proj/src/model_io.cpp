#include "exdebug/model_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "exdebug/errors.hpp"

namespace exdebug {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "archive I/O assumes a little-endian host");

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

void put_section(std::string& out, std::string_view tag, std::string_view payload) {
  out.append(tag);
  put_u64(out, payload.size());
  out.append(payload);
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view section(std::string_view tag) {
    if (pos_ + 12 > bytes_.size()) {
      throw FormatError("model archive truncated: missing section " + std::string(tag));
    }
    const auto found = bytes_.substr(pos_, 4);
    if (found != tag) {
      throw FormatError("model archive: expected section " + std::string(tag) + ", found '" +
                        std::string(found) + "'");
    }
    std::uint64_t len = 0;
    std::memcpy(&len, bytes_.data() + pos_ + 4, 8);
    pos_ += 12;
    if (len > bytes_.size() - pos_) {
      throw FormatError("model archive truncated inside section " + std::string(tag));
    }
    const auto payload = bytes_.substr(pos_, len);
    pos_ += len;
    return payload;
  }

  bool at_end() const { return pos_ == bytes_.size(); }
  void skip(std::size_t n) { pos_ += n; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_model(const TextClassifier& model, const Vocabulary& vocab,
                            const std::vector<std::string>& labels) {
  const auto& c = model.config();
  if (vocab.size() != c.vocab_size) {
    throw std::invalid_argument("vocabulary size does not match the model");
  }
  const json manifest{{"format_version", kArchiveFormatVersion},
                      {"d", c.embed_dim},
                      {"h", c.hidden_dim},
                      {"C", c.num_classes},
                      {"V", c.vocab_size},
                      {"nonlinearity", to_string(c.nonlinearity)},
                      {"normalization", "abs_max"},
                      {"labels", labels}};

  std::string vocab_bytes;
  for (const auto& t : vocab.tokens()) {
    vocab_bytes += t;
    vocab_bytes += '\n';
  }

  std::string params;
  params.reserve(model.params().size() * 8);
  for (auto g : kAllGroups) {
    const auto s = model.params().group(g);
    params.append(reinterpret_cast<const char*>(s.data()), s.size_bytes());
  }

  std::string out(kArchiveMagic);
  put_section(out, "MANI", manifest.dump());
  put_section(out, "VOCB", vocab_bytes);
  put_section(out, "PARM", params);
  return out;
}

ModelArchive deserialize_model(std::string_view bytes) {
  if (bytes.size() < kArchiveMagic.size() || bytes.substr(0, kArchiveMagic.size()) != kArchiveMagic) {
    throw FormatError("not a model archive (bad magic)");
  }
  Reader r(bytes);
  r.skip(kArchiveMagic.size());

  ModelConfig config;
  std::vector<std::string> labels;
  try {
    const auto j = json::parse(r.section("MANI"));
    if (j.at("format_version").get<int>() != kArchiveFormatVersion) {
      throw FormatError("unsupported archive format version");
    }
    config.embed_dim = j.at("d").get<std::size_t>();
    config.hidden_dim = j.at("h").get<std::size_t>();
    config.num_classes = j.at("C").get<int>();
    config.vocab_size = j.at("V").get<std::size_t>();
    config.nonlinearity = parse_nonlinearity(j.at("nonlinearity").get<std::string>());
    if (j.contains("labels")) labels = j["labels"].get<std::vector<std::string>>();
  } catch (const json::exception& ex) {
    throw FormatError(std::string("model archive: malformed section MANI: ") + ex.what());
  }

  std::vector<std::string> tokens;
  {
    std::istringstream in{std::string(r.section("VOCB"))};
    std::string line;
    while (std::getline(in, line)) tokens.push_back(line);
  }
  if (tokens.size() != config.vocab_size) {
    throw FormatError("model archive: section VOCB has " + std::to_string(tokens.size()) +
                      " tokens, manifest declares " + std::to_string(config.vocab_size));
  }

  Parameters params = Parameters::zeros(config);
  const auto raw = r.section("PARM");
  if (raw.size() != params.size() * 8) {
    throw FormatError("model archive: section PARM has " + std::to_string(raw.size()) +
                      " bytes, expected " + std::to_string(params.size() * 8));
  }
  std::size_t offset = 0;
  for (auto g : kAllGroups) {
    auto s = params.group(g);
    std::memcpy(s.data(), raw.data() + offset, s.size_bytes());
    offset += s.size_bytes();
  }
  if (!r.at_end()) throw FormatError("model archive: trailing bytes after section PARM");

  return {TextClassifier(config, std::move(params)), Vocabulary(std::move(tokens)),
          std::move(labels)};
}

void export_model(const TextClassifier& model, const Vocabulary& vocab,
                  const std::filesystem::path& path, const std::vector<std::string>& labels) {
  write_file_atomic(path, serialize_model(model, vocab, labels));
}

ModelArchive load_model(const std::filesystem::path& path) {
  return deserialize_model(read_file(path));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace exdebug
