#include "ets/train/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace ets::train {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written in host byte order");

constexpr char kMagic[4] = {'E', 'T', 'S', 'V'};

using model::EcgModel;
using nlohmann::json;

[[noreturn]] void fail(CheckpointErrorKind kind, const std::string& what) { throw CheckpointError(kind, what); }

template <class T>
void append_raw(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T read_raw(const std::string& in, std::size_t offset) {
  T value;
  std::memcpy(&value, in.data() + offset, sizeof(T));
  return value;
}

struct Block {
  std::string name;
  bool parameter = true;
  Tensor* value = nullptr;
  bool* frozen = nullptr;
};

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<Block> blocks_of(EcgModel& m) {
  std::vector<Block> out;
  m.visit_parameters([&](const std::string& name, nn::Parameter& p) { out.push_back({name, true, &p.value, &p.frozen}); });
  m.visit_buffers([&](const std::string& name, Tensor& t) { out.push_back({name, false, &t, nullptr}); });
  return out;
}

void require_keys(const json& doc, std::initializer_list<const char*> keys, const char* what) {
  if (!doc.is_object()) throw std::invalid_argument(std::string(what) + " must be a JSON object");
  std::set<std::string> known(keys.begin(), keys.end());
  for (const auto& [key, _] : doc.items()) {
    if (!known.count(key)) throw std::invalid_argument(std::string(what) + ": unknown key '" + key + "'");
  }
}

std::size_t get_size(const json& v, const char* key) {
  if (!v.is_number_unsigned()) throw std::invalid_argument(std::string(key) + " must be a non-negative integer");
  return v.get<std::size_t>();
}

}  // namespace

std::string to_string(CheckpointErrorKind kind) {
  switch (kind) {
    case CheckpointErrorKind::io:
      return "io";
    case CheckpointErrorKind::bad_magic:
      return "bad_magic";
    case CheckpointErrorKind::version_mismatch:
      return "version_mismatch";
    case CheckpointErrorKind::truncated:
      return "truncated";
    case CheckpointErrorKind::malformed_header:
      return "malformed_header";
    case CheckpointErrorKind::shape_mismatch:
      return "shape_mismatch";
    case CheckpointErrorKind::checksum_mismatch:
      return "checksum_mismatch";
  }
  return "unknown";
}

json encoder_config_to_json(const model::EncoderConfig& c) {
  json blocks = json::array();
  for (const auto& b : c.blocks) blocks.push_back({{"channels", b.channels}, {"stride", b.stride}});
  return {{"stem_channels", c.stem_channels}, {"stem_stride", c.stem_stride}, {"kernel", c.kernel},
          {"dropout", c.dropout},             {"blocks", blocks},             {"dense_units", c.dense_units},
          {"tabular_units", c.tabular_units}, {"isd_head", c.isd_head},       {"transfer_hidden", c.transfer_hidden}};
}

model::EncoderConfig encoder_config_from_json(const json& doc) {
  require_keys(doc,
               {"stem_channels", "stem_stride", "kernel", "dropout", "blocks", "dense_units", "tabular_units", "isd_head",
                "transfer_hidden"},
               "encoder config");
  model::EncoderConfig c;
  auto size_field = [&](const char* key, std::size_t& dst) {
    if (doc.contains(key)) dst = get_size(doc.at(key), key);
  };
  size_field("stem_channels", c.stem_channels);
  size_field("stem_stride", c.stem_stride);
  size_field("kernel", c.kernel);
  size_field("dense_units", c.dense_units);
  size_field("tabular_units", c.tabular_units);
  size_field("transfer_hidden", c.transfer_hidden);
  if (doc.contains("dropout")) {
    if (!doc.at("dropout").is_number()) throw std::invalid_argument("dropout must be a number");
    c.dropout = doc.at("dropout").get<double>();
  }
  if (doc.contains("blocks")) {
    const auto& blocks = doc.at("blocks");
    if (!blocks.is_array() || blocks.size() != c.blocks.size()) {
      throw std::invalid_argument("blocks must be an array of 4 {channels, stride} objects");
    }
    for (std::size_t i = 0; i < c.blocks.size(); ++i) {
      require_keys(blocks[i], {"channels", "stride"}, "block");
      c.blocks[i].channels = get_size(blocks[i].at("channels"), "channels");
      c.blocks[i].stride = get_size(blocks[i].at("stride"), "stride");
    }
  }
  if (doc.contains("isd_head")) {
    const auto& h = doc.at("isd_head");
    if (!h.is_array() || h.size() != 3) throw std::invalid_argument("isd_head must hold three widths");
    for (std::size_t i = 0; i < 3; ++i) c.isd_head[i] = get_size(h[i], "isd_head");
  }
  c.validate();
  return c;
}

json history_to_json(const History& history) {
  json out = json::array();
  for (const auto& r : history) {
    out.push_back({{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"tuning_loss", r.tuning_loss}, {"lr", r.lr}});
  }
  return out;
}

History history_from_json(const json& doc) {
  if (!doc.is_array()) throw std::invalid_argument("history must be an array");
  History out;
  for (const auto& r : doc) {
    require_keys(r, {"epoch", "train_loss", "tuning_loss", "lr"}, "history entry");
    out.push_back({get_size(r.at("epoch"), "epoch"), r.at("train_loss").get<double>(), r.at("tuning_loss").get<double>(),
                   r.at("lr").get<double>()});
  }
  return out;
}

std::string encode_checkpoint(EcgModel& m, const History& history) {
  json blocks = json::array();
  std::size_t offset = 0;
  const auto all = blocks_of(m);
  for (const auto& b : all) {
    blocks.push_back({{"name", b.name},
                      {"role", b.parameter ? "parameter" : "buffer"},
                      {"shape", b.value->shape()},
                      {"frozen", b.frozen ? *b.frozen : true},
                      {"offset", offset}});
    offset += b.value->size() * sizeof(double);
  }
  json header = {{"kind", model::to_string(m.kind())},
                 {"outputs", m.outputs()},
                 {"transferred", m.transferred()},
                 {"config", encoder_config_to_json(m.config())},
                 {"grid", m.grid() ? json(m.grid()->times()) : json(nullptr)},
                 {"blocks", blocks},
                 {"history", history_to_json(history)}};
  const std::string text = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  append_raw<std::uint32_t>(out, kCheckpointVersion);
  append_raw<std::uint64_t>(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& b : all) out.append(reinterpret_cast<const char*>(b.value->data()), b.value->size() * sizeof(double));
  append_raw<std::uint64_t>(out, fnv1a(out.data(), out.size()));
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic)) fail(CheckpointErrorKind::truncated, "file shorter than the magic bytes");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) fail(CheckpointErrorKind::bad_magic, "not a checkpoint");
  constexpr std::size_t kPrefix = sizeof(kMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (bytes.size() < kPrefix) fail(CheckpointErrorKind::truncated, "file ends inside the fixed prefix");
  const auto version = read_raw<std::uint32_t>(bytes, sizeof(kMagic));
  if (version != kCheckpointVersion) {
    fail(CheckpointErrorKind::version_mismatch,
         "file version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
  }
  const auto header_len = read_raw<std::uint64_t>(bytes, sizeof(kMagic) + sizeof(std::uint32_t));
  if (header_len > bytes.size() - kPrefix) fail(CheckpointErrorKind::truncated, "file ends inside the header");

  json header;
  std::optional<EcgModel> model;
  History history;
  try {
    header = json::parse(bytes.begin() + kPrefix, bytes.begin() + static_cast<std::ptrdiff_t>(kPrefix + header_len));
    require_keys(header, {"kind", "outputs", "transferred", "config", "grid", "blocks", "history"}, "header");
    const auto kind = model::kind_from_string(header.at("kind").get<std::string>());
    std::optional<mtlr::TimeGrid> grid;
    if (!header.at("grid").is_null()) grid = mtlr::TimeGrid(header.at("grid").get<std::vector<double>>());
    model.emplace(kind, encoder_config_from_json(header.at("config")), get_size(header.at("outputs"), "outputs"),
                  grid);
    if (header.at("transferred").get<bool>()) model->set_transferred_layout(true);
    history = history_from_json(header.at("history"));
    if (!header.at("blocks").is_array()) throw std::invalid_argument("blocks must be an array");
  } catch (const json::exception& e) {
    fail(CheckpointErrorKind::malformed_header, e.what());
  } catch (const std::invalid_argument& e) {
    fail(CheckpointErrorKind::malformed_header, e.what());
  }

  const auto blocks = blocks_of(*model);
  const auto& described = header.at("blocks");
  if (described.size() != blocks.size()) {
    fail(CheckpointErrorKind::shape_mismatch, "header lists " + std::to_string(described.size()) +
                                                  " blocks, model has " + std::to_string(blocks.size()));
  }
  const std::size_t payload = kPrefix + header_len;
  const std::size_t end = bytes.size() - payload < sizeof(std::uint64_t) ? payload : bytes.size() - sizeof(std::uint64_t);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& d = described[i];
    Shape shape;
    bool frozen = false;
    try {
      if (d.at("name").get<std::string>() != blocks[i].name) {
        fail(CheckpointErrorKind::shape_mismatch, "block " + std::to_string(i) + " is '" +
                                                      d.at("name").get<std::string>() + "', expected '" +
                                                      blocks[i].name + "'");
      }
      shape = d.at("shape").get<Shape>();
      frozen = d.at("frozen").get<bool>();
      if (d.at("offset").get<std::size_t>() != offset) throw std::invalid_argument("block offsets are not contiguous");
    } catch (const json::exception& e) {
      fail(CheckpointErrorKind::malformed_header, e.what());
    } catch (const std::invalid_argument& e) {
      fail(CheckpointErrorKind::malformed_header, e.what());
    }
    Tensor& t = *blocks[i].value;
    if (shape != t.shape()) {
      fail(CheckpointErrorKind::shape_mismatch,
           blocks[i].name + " has shape " + shape_to_string(shape) + ", model expects " + shape_to_string(t.shape()));
    }
    const std::size_t n = t.size() * sizeof(double);
    if (end - payload < offset + n) fail(CheckpointErrorKind::truncated, "payload ends inside " + blocks[i].name);
    std::memcpy(t.data(), bytes.data() + payload + offset, n);
    if (blocks[i].frozen) *blocks[i].frozen = frozen;
    offset += n;
  }
  if (bytes.size() - payload < offset + sizeof(std::uint64_t)) fail(CheckpointErrorKind::truncated, "checksum missing");
  if (end - payload != offset) {
    fail(CheckpointErrorKind::shape_mismatch, "payload holds " + std::to_string(end - payload) +
                                                  " bytes, header describes " + std::to_string(offset));
  }
  if (read_raw<std::uint64_t>(bytes, end) != fnv1a(bytes.data(), end)) {
    fail(CheckpointErrorKind::checksum_mismatch, "stored checksum does not match the contents");
  }
  return {std::move(*model), std::move(history)};
}

void save_checkpoint(EcgModel& m, const History& history, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(m, history);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(CheckpointErrorKind::io, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(CheckpointErrorKind::io, "write to " + path.string() + " failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(CheckpointErrorKind::io, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint(buf.str());
}

}  // namespace ets::train
