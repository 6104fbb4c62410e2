#include "pcadv/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include <json.hpp>

#include "pcadv/error.hpp"

namespace pcadv {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'P', 'C', 'A', 'D', 'V', 'C', 'K', '\n'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::uint64_t fnv1a(const char* data, std::size_t size, std::uint64_t h = 1469598103934665603ULL) {
  for (std::size_t i = 0; i < size; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

template <typename T>
void put(std::string& out, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.append(bytes, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& data, std::string path) : data_(data), path_(std::move(path)) {}

  template <typename T>
  T get() {
    T value;
    std::memcpy(&value, take(sizeof(T)), sizeof(T));
    return value;
  }

  const char* take(std::size_t n) {
    if (n > data_.size() - pos_) throw CheckpointError(path_ + ": truncated checkpoint");
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

void write_file(const std::filesystem::path& path, json header, const std::vector<const Matrix*>& arrays) {
  json shapes = json::array();
  for (const Matrix* m : arrays) shapes.push_back({m->rows(), m->cols()});
  header["arrays"] = shapes;
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out += text;
  for (const Matrix* m : arrays) {
    out.append(reinterpret_cast<const char*>(m->data()), static_cast<std::size_t>(m->size()) * sizeof(double));
  }
  put<std::uint64_t>(out, fnv1a(out.data(), out.size()));

  std::ofstream file(path, std::ios::binary);
  if (!file) throw CheckpointError("cannot write " + path.string());
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw CheckpointError("write failed for " + path.string());
}

struct Loaded {
  json header;
  std::vector<Matrix> arrays;
};

Loaded read_file(const std::filesystem::path& path, const std::string& expected_kind) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string data((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  const std::string name = path.string();

  Reader r(data, name);
  if (std::memcmp(r.take(sizeof(kMagic)), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(name + ": not a checkpoint file");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(name + ": checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  const auto header_len = r.get<std::uint64_t>();
  const char* header_text = r.take(header_len);

  Loaded out;
  try {
    out.header = json::parse(header_text, header_text + header_len);
  } catch (const json::exception& e) {
    throw CheckpointError(name + ": corrupt header: " + e.what());
  }
  if (out.header.value("kind", std::string()) != expected_kind) {
    throw CheckpointError(name + ": expected a '" + expected_kind + "' checkpoint");
  }
  for (const auto& shape : out.header.at("arrays")) {
    const Index rows = shape.at(0).get<Index>();
    const Index cols = shape.at(1).get<Index>();
    if (rows < 0 || cols < 0) throw CheckpointError(name + ": negative array shape");
    if (cols > 0 && static_cast<std::size_t>(rows) > r.remaining() / sizeof(double) / static_cast<std::size_t>(cols)) {
      throw CheckpointError(name + ": truncated checkpoint");
    }
    Matrix m(rows, cols);
    const std::size_t bytes = static_cast<std::size_t>(rows * cols) * sizeof(double);
    std::memcpy(m.data(), r.take(bytes), bytes);
    out.arrays.push_back(std::move(m));
  }
  const std::size_t payload_end = r.position();
  const auto checksum = r.get<std::uint64_t>();
  if (r.remaining() != 0) throw CheckpointError(name + ": trailing bytes after checkpoint");
  if (checksum != fnv1a(data.data(), payload_end)) throw CheckpointError(name + ": checksum mismatch");
  return out;
}

std::vector<DenseLayer> take_layers(std::vector<Matrix>& arrays, std::size_t& next, std::size_t count,
                                    const std::string& name) {
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i < count; ++i) {
    if (next + 2 > arrays.size()) throw CheckpointError(name + ": too few parameter arrays");
    layers.push_back({std::move(arrays[next]), std::move(arrays[next + 1])});
    next += 2;
  }
  return layers;
}

}  // namespace

void save_checkpoint(const AEModel& model, const std::filesystem::path& path) {
  const AEConfig& c = model.config();
  json header = {{"kind", "autoencoder"},        {"width_factor", c.width_factor},
                 {"latent", c.latent},           {"points", c.points},
                 {"seed", c.seed},               {"frozen", model.frozen()},
                 {"encoder_widths", encoder_widths(c)}, {"decoder_widths", decoder_widths(c)}};
  write_file(path, std::move(header), model.parameters());
}

AEModel load_checkpoint(const std::filesystem::path& path, std::optional<Index> expected_points) {
  Loaded l = read_file(path, "autoencoder");
  const std::string name = path.string();
  AEConfig c;
  try {
    c.width_factor = l.header.at("width_factor").get<double>();
    c.latent = l.header.at("latent").get<Index>();
    c.points = l.header.at("points").get<Index>();
    c.seed = l.header.at("seed").get<Seed>();
  } catch (const json::exception& e) {
    throw CheckpointError(name + ": incomplete header: " + e.what());
  }
  if (expected_points && *expected_points != c.points) {
    throw CheckpointError(name + ": checkpoint was trained for n=" + std::to_string(c.points) +
                          " points, experiment expects n=" + std::to_string(*expected_points));
  }
  std::size_t next = 0;
  auto encoder = take_layers(l.arrays, next, encoder_widths(c).size(), name);
  auto decoder = take_layers(l.arrays, next, decoder_widths(c).size(), name);
  if (next != l.arrays.size()) throw CheckpointError(name + ": unexpected extra parameter arrays");
  try {
    AEModel model(c, std::move(encoder), std::move(decoder));
    if (l.header.value("frozen", false)) model.freeze();
    return model;
  } catch (const Error& e) {
    throw CheckpointError(name + ": " + e.what());
  }
}

void save_classifier(const Classifier& classifier, const std::filesystem::path& path) {
  const ClassifierConfig& c = classifier.config();
  json header = {{"kind", "classifier"},
                 {"point_widths", c.point_widths},
                 {"head_widths", c.head_widths},
                 {"num_classes", c.num_classes},
                 {"seed", c.seed}};
  write_file(path, std::move(header), classifier.parameters());
}

Classifier load_classifier(const std::filesystem::path& path) {
  Loaded l = read_file(path, "classifier");
  const std::string name = path.string();
  ClassifierConfig c;
  try {
    c.point_widths = l.header.at("point_widths").get<std::vector<Index>>();
    c.head_widths = l.header.at("head_widths").get<std::vector<Index>>();
    c.num_classes = l.header.at("num_classes").get<int>();
    c.seed = l.header.at("seed").get<Seed>();
  } catch (const json::exception& e) {
    throw CheckpointError(name + ": incomplete header: " + e.what());
  }
  std::size_t next = 0;
  auto points = take_layers(l.arrays, next, c.point_widths.size(), name);
  auto head = take_layers(l.arrays, next, c.head_widths.size() + 1, name);
  if (next != l.arrays.size()) throw CheckpointError(name + ": unexpected extra parameter arrays");
  try {
    return Classifier(c, std::move(points), std::move(head));
  } catch (const Error& e) {
    throw CheckpointError(name + ": " + e.what());
  }
}

}  // namespace pcadv
