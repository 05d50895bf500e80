#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "curvelang/error.hpp"
#include "curvelang/model.hpp"

namespace curvelang::model {

namespace {

constexpr char kMagic[4] = {'S', 'C', 'L', 'M'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw Error(ErrorCode::IoError, "checkpoint truncated");
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_blob(std::ostream& os, const std::string& name, int rows, int cols,
              std::span<const double> values) {
  put_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(os, 2);
  put_u32(os, static_cast<std::uint32_t>(rows));
  put_u32(os, static_cast<std::uint32_t>(cols));
  for (double v : values) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

struct Blob {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;
};

Blob get_blob(std::istream& is) {
  Blob b;
  b.name.resize(get_u32(is));
  if (!is.read(b.name.data(), static_cast<std::streamsize>(b.name.size()))) {
    throw Error(ErrorCode::IoError, "checkpoint truncated in blob name");
  }
  const std::uint32_t rank = get_u32(is);
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    b.dims.push_back(get_u32(is));
    count *= b.dims.back();
  }
  b.values.resize(count);
  for (auto& v : b.values) v = std::bit_cast<float>(get_u32(is));
  return b;
}

}  // namespace

void save_checkpoint(const std::string& path, const SclmModel& model, const Checkpoint& meta) {
  const auto& params = model.params();
  nlohmann::json header = {
      {"config", to_json(model.config())},
      {"vocab", model.vocab().tokens()},
      {"schedule",
       {{"steps", model.schedule().steps}, {"kind", to_string(model.schedule().kind)}}},
      {"step", params.step()},
      {"seed", meta.seed},
      {"extra", meta.extra.is_null() ? nlohmann::json::object() : meta.extra},
  };
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorCode::IoError, "cannot write checkpoint " + path);
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto names = params.names();
  put_u32(os, static_cast<std::uint32_t>(names.size() * 3));
  for (const auto& name : names) {
    const ad::Tensor& t = params.get(name);
    const auto& mo = params.moments(name);
    put_blob(os, name, t.rows(), t.cols(), t.data());
    put_blob(os, "adam.m/" + name, t.rows(), t.cols(), mo.m);
    put_blob(os, "adam.v/" + name, t.rows(), t.cols(), mo.v);
  }
  if (!os) throw Error(ErrorCode::IoError, "failed writing checkpoint " + path);
}

SclmModel load_checkpoint(const std::string& path, Checkpoint* meta) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::IoError, "cannot open checkpoint " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw Error(ErrorCode::IoError, path + " is not a checkpoint");
  }
  const std::uint32_t version = get_u32(is);
  if (version != kVersion) {
    throw Error(ErrorCode::CheckpointVersionMismatch,
                "checkpoint version " + std::to_string(version) + ", expected " +
                    std::to_string(kVersion));
  }
  std::string text(get_u32(is), '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(text.size()))) {
    throw Error(ErrorCode::IoError, "checkpoint truncated in header");
  }
  const auto header = nlohmann::json::parse(text);
  const auto tokens = header.at("vocab").get<std::vector<std::string>>();
  if (tokens.size() < 2) throw Error(ErrorCode::IoError, "checkpoint vocabulary is missing reserved ids");
  const std::vector<std::string> symbols(tokens.begin() + 2, tokens.end());
  SclmModel model(model_config_from_json(header.at("config")), Vocab::from_symbols(symbols), 0);

  auto& params = model.params();
  const std::uint32_t blobs = get_u32(is);
  for (std::uint32_t i = 0; i < blobs; ++i) {
    Blob b = get_blob(is);
    std::vector<double>* target = nullptr;
    std::string name = b.name;
    if (name.starts_with("adam.m/")) {
      name = name.substr(7);
      target = &params.moments(name).m;
    } else if (name.starts_with("adam.v/")) {
      name = name.substr(7);
      target = &params.moments(name).v;
    }
    if (!params.contains(name)) throw Error(ErrorCode::IoError, "unexpected blob " + b.name);
    ad::Tensor& t = params.get(name);
    if (b.dims.size() != 2 || static_cast<int>(b.dims[0]) != t.rows() ||
        static_cast<int>(b.dims[1]) != t.cols()) {
      throw Error(ErrorCode::ShapeMismatch, "blob " + b.name + " has the wrong shape");
    }
    if (target) {
      *target = std::move(b.values);
    } else {
      std::copy(b.values.begin(), b.values.end(), t.data().begin());
    }
  }
  params.set_step(header.at("step").get<std::int64_t>());
  if (meta) {
    meta->step = params.step();
    meta->seed = header.at("seed").get<std::uint64_t>();
    meta->extra = header.at("extra");
  }
  return model;
}

}  // namespace curvelang::model
