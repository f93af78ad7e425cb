#include "implantformer/network.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "json.hpp"

namespace implantformer {

using nlohmann::json;

void NetConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
    throw InvalidArgumentError("patch size must divide the image size");
  if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
    throw InvalidArgumentError("embed dim must be divisible by the head count");
  if (layers <= 0) throw InvalidArgumentError("need at least one encoder layer");
  if (taps.empty() || taps.size() != ratios.size())
    throw InvalidArgumentError("taps and ratios must be non-empty and parallel");
  for (size_t i = 0; i < taps.size(); ++i) {
    if (taps[i] < 1 || taps[i] > layers)
      throw InvalidArgumentError("tap layers must lie in [1, layers]");
    if (i > 0 && taps[i] <= taps[i - 1])
      throw InvalidArgumentError("tap layers must be strictly increasing");
    const int s = ratios[i];
    if (s <= 0 || image_size % s != 0)
      throw InvalidArgumentError("each ratio must divide the image size");
    const int lo = std::min(s, patch_size), hi = std::max(s, patch_size);
    if (hi % lo != 0)
      throw InvalidArgumentError("ratios must relate to the patch size by an integer factor");
    if (i > 0 && ratios[i] != 2 * ratios[i - 1])
      throw InvalidArgumentError("consecutive ratios must differ by exactly 2x");
  }
  if (reassemble_dim <= 0 || decoder_dim <= 0 || (conv_stem && stem_width <= 0))
    throw InvalidArgumentError("channel widths must be positive");
}

std::string NetConfig::to_json() const {
  json j;
  j["image_size"] = image_size;
  j["patch_size"] = patch_size;
  j["embed_dim"] = embed_dim;
  j["heads"] = heads;
  j["layers"] = layers;
  j["taps"] = taps;
  j["ratios"] = ratios;
  j["reassemble_dim"] = reassemble_dim;
  j["decoder_dim"] = decoder_dim;
  j["stem_width"] = stem_width;
  j["conv_stem"] = conv_stem;
  j["fusion"] = fusion == FusionMode::concat ? "concat" : "add";
  j["readout"] = readout == ReadoutMode::ignore ? "ignore" : "add";
  return j.dump();
}

NetConfig NetConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad network config JSON: ") + e.what());
  }
  NetConfig cfg;
  cfg.image_size = j.value("image_size", cfg.image_size);
  cfg.patch_size = j.value("patch_size", cfg.patch_size);
  cfg.embed_dim = j.value("embed_dim", cfg.embed_dim);
  cfg.heads = j.value("heads", cfg.heads);
  cfg.layers = j.value("layers", cfg.layers);
  cfg.taps = j.value("taps", cfg.taps);
  cfg.ratios = j.value("ratios", cfg.ratios);
  cfg.reassemble_dim = j.value("reassemble_dim", cfg.reassemble_dim);
  cfg.decoder_dim = j.value("decoder_dim", cfg.decoder_dim);
  cfg.stem_width = j.value("stem_width", cfg.stem_width);
  cfg.conv_stem = j.value("conv_stem", cfg.conv_stem);
  const std::string fusion = j.value("fusion", std::string("concat"));
  if (fusion == "concat")
    cfg.fusion = FusionMode::concat;
  else if (fusion == "add")
    cfg.fusion = FusionMode::add;
  else
    throw FormatError("fusion must be 'concat' or 'add'");
  const std::string readout = j.value("readout", std::string("ignore"));
  if (readout == "ignore")
    cfg.readout = ReadoutMode::ignore;
  else if (readout == "add")
    cfg.readout = ReadoutMode::add;
  else
    throw FormatError("readout must be 'ignore' or 'add'");
  cfg.validate();
  return cfg;
}

namespace {

constexpr char kMagic[8] = {'I', 'M', 'P', 'F', '0', '0', '0', '1'};

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw FormatError("truncated checkpoint: " + path);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const std::string& path, const NetConfig& cfg,
                     const ParamSet<float>& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot create checkpoint: " + path);

  os.write(kMagic, 8);
  const std::string cfg_json = cfg.to_json();
  put_u32(os, static_cast<uint32_t>(cfg_json.size()));
  os.write(cfg_json.data(), static_cast<std::streamsize>(cfg_json.size()));

  std::map<std::string, const Tensor<float>*> sorted;
  for (size_t i = 0; i < params.size(); ++i) sorted[params.names[i]] = &params.tensors[i];

  for (const auto& [name, tensor] : sorted) {
    put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<uint32_t>(tensor->rank()));
    for (int d : tensor->shape) put_u32(os, static_cast<uint32_t>(d));
    for (float f : tensor->data) {
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(os, bits);
    }
  }
  if (!os) throw IoError("failed writing checkpoint: " + path);
}

std::pair<NetConfig, ParamSet<float>> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);

  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw FormatError("not a checkpoint file (bad magic): " + path);

  const uint32_t cfg_len = get_u32(is, path);
  std::string cfg_json(cfg_len, '\0');
  if (!is.read(cfg_json.data(), cfg_len)) throw FormatError("truncated checkpoint: " + path);
  const NetConfig cfg = NetConfig::from_json_text(cfg_json);

  ParamSet<float> params = make_params<float>(cfg);
  std::vector<bool> seen(params.size(), false);

  while (is.peek() != std::char_traits<char>::eof()) {
    const uint32_t name_len = get_u32(is, path);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw FormatError("truncated checkpoint: " + path);
    const uint32_t rank = get_u32(is, path);
    std::vector<int> shape(rank);
    for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int>(get_u32(is, path));

    const int idx = params.find(name);
    if (idx < 0) throw FormatError("checkpoint has unknown parameter '" + name + "'");
    Tensor<float>& dst = params.tensors[idx];
    if (shape != dst.shape)
      throw SizeMismatchError("checkpoint parameter '" + name + "' has the wrong shape");

    for (auto& f : dst.data) {
      const uint32_t bits = get_u32(is, path);
      std::memcpy(&f, &bits, 4);
    }
    seen[idx] = true;
  }
  for (size_t i = 0; i < seen.size(); ++i)
    if (!seen[i])
      throw SizeMismatchError("checkpoint is missing parameter '" + params.names[i] + "'");
  return {cfg, std::move(params)};
}

}  // namespace implantformer
