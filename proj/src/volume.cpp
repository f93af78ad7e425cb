#include "implantformer/volume.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

namespace implantformer {

namespace {

constexpr char kMagic[8] = {'I', 'V', 'O', 'L', 'v', '0', '0', '1'};

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

bool get_u32(std::istream& is, uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
      (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
  return true;
}

void put_f32(std::ostream& os, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(os, bits);
}

bool get_f32(std::istream& is, float& f) {
  uint32_t bits;
  if (!get_u32(is, bits)) return false;
  std::memcpy(&f, &bits, 4);
  return true;
}

}  // namespace

void Volume::validate() const {
  if (width == 0 || height == 0 || depth == 0)
    throw InvalidArgumentError("volume dimensions must be positive");
  if (width != height)
    throw InvalidArgumentError("axial slices must be square (width == height)");
  if (crown_boundary == 0 || crown_boundary >= depth)
    throw InvalidArgumentError("crown_boundary must lie strictly inside (0, depth)");
  const size_t expected = static_cast<size_t>(width) * height * depth;
  if (voxels.size() != expected)
    throw SizeMismatchError("voxel payload has " + std::to_string(voxels.size()) +
                            " samples, expected " + std::to_string(expected));
}

std::string region_name(Region r) { return r == Region::crown ? "crown" : "root"; }

Region region_from_name(const std::string& name) {
  if (name == "crown") return Region::crown;
  if (name == "root") return Region::root;
  throw InvalidArgumentError("unknown region '" + name + "'");
}

void KeypointTrack::validate() const {
  for (size_t i = 1; i < points.size(); ++i) {
    if (points[i].z <= points[i - 1].z)
      throw InvalidArgumentError("track z indices must be strictly increasing");
  }
}

Volume load_volume(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open volume file: " + path);

  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw FormatError("not an IVOL file (bad magic): " + path);

  Volume v;
  float sx, sy, sz;
  if (!get_u32(is, v.width) || !get_u32(is, v.height) || !get_u32(is, v.depth) ||
      !get_u32(is, v.crown_boundary) || !get_f32(is, sx) || !get_f32(is, sy) ||
      !get_f32(is, sz))
    throw FormatError("truncated IVOL header: " + path);
  v.voxel_spacing = {sx, sy, sz};

  if (v.width == 0 || v.height == 0 || v.depth == 0 || v.width != v.height)
    throw FormatError("invalid IVOL dimensions in header: " + path);
  if (v.crown_boundary == 0 || v.crown_boundary >= v.depth)
    throw InvalidArgumentError("IVOL crown_boundary out of range: " + path);

  const size_t n = static_cast<size_t>(v.width) * v.height * v.depth;
  v.voxels.resize(n);
  std::vector<unsigned char> raw(n * 2);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<size_t>(is.gcount()) != raw.size())
    throw SizeMismatchError("IVOL payload shorter than declared size: " + path);
  if (is.peek() != std::char_traits<char>::eof())
    throw SizeMismatchError("IVOL payload longer than declared size: " + path);

  for (size_t i = 0; i < n; ++i) {
    const uint16_t u =
        static_cast<uint16_t>(raw[2 * i]) | (static_cast<uint16_t>(raw[2 * i + 1]) << 8);
    v.voxels[i] = static_cast<int16_t>(u);
  }
  return v;
}

void save_volume(const Volume& v, const std::string& path) {
  v.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot create volume file: " + path);

  os.write(kMagic, 8);
  put_u32(os, v.width);
  put_u32(os, v.height);
  put_u32(os, v.depth);
  put_u32(os, v.crown_boundary);
  put_f32(os, v.voxel_spacing[0]);
  put_f32(os, v.voxel_spacing[1]);
  put_f32(os, v.voxel_spacing[2]);

  std::vector<unsigned char> raw(v.voxels.size() * 2);
  for (size_t i = 0; i < v.voxels.size(); ++i) {
    const uint16_t u = static_cast<uint16_t>(v.voxels[i]);
    raw[2 * i] = static_cast<unsigned char>(u & 0xff);
    raw[2 * i + 1] = static_cast<unsigned char>((u >> 8) & 0xff);
  }
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!os) throw IoError("failed writing volume file: " + path);
}

SliceImage slice_at(const Volume& v, uint32_t z, double window_lo, double window_hi) {
  if (z >= v.depth)
    throw InvalidArgumentError("slice index " + std::to_string(z) + " out of range [0, " +
                               std::to_string(v.depth) + ")");
  if (!(window_hi > window_lo)) throw InvalidArgumentError("empty intensity window");

  SliceImage img;
  img.width = static_cast<int>(v.width);
  img.height = static_cast<int>(v.height);
  const size_t plane = static_cast<size_t>(img.width) * img.height;
  img.values.resize(3 * plane);

  const double scale = 1.0 / (window_hi - window_lo);
  const int16_t* src = v.voxels.data() + static_cast<size_t>(z) * plane;
  for (size_t i = 0; i < plane; ++i) {
    double t = (static_cast<double>(src[i]) - window_lo) * scale;
    t = std::clamp(t, 0.0, 1.0);
    const float f = static_cast<float>(t);
    img.values[i] = f;
    img.values[plane + i] = f;
    img.values[2 * plane + i] = f;
  }
  return img;
}

std::pair<std::vector<uint32_t>, std::vector<uint32_t>> partition(const Volume& v) {
  v.validate();
  std::vector<uint32_t> crown, root;
  crown.reserve(v.depth - v.crown_boundary);
  root.reserve(v.crown_boundary);
  for (uint32_t z = 0; z < v.crown_boundary; ++z) root.push_back(z);
  for (uint32_t z = v.crown_boundary; z < v.depth; ++z) crown.push_back(z);
  return {crown, root};
}

}  // namespace implantformer
