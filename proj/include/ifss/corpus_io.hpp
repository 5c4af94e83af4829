#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ifss/error.hpp"
#include "ifss/synth.hpp"

// On-disk corpus layout (documented byte-exactly in docs/formats.md):
//   <dir>/manifest.txt            key = value lines, no timestamps
//   <dir>/scenes/scene_%05d.bin   16-byte header + f32 LE image + u8 mask
// Header: magic "PIFS", version u16, H u16, W u16, C u16, reserved u32 — all
// little-endian.

namespace ifss {

namespace detail {

inline void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

inline uint16_t get_u16(const unsigned char* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

inline uint32_t get_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

inline float get_f32(const unsigned char* p) {
  uint32_t bits = get_u32(p);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

inline std::string encode_scene(const Scene& scene) {
  const int H = scene.mask.extent(0), W = scene.mask.extent(1), C = scene.image.extent(2);
  std::string out;
  out.reserve(16 + scene.image.size() * 4 + scene.mask.size());
  out += "PIFS";
  detail::put_u16(out, 1);  // version
  detail::put_u16(out, static_cast<uint16_t>(H));
  detail::put_u16(out, static_cast<uint16_t>(W));
  detail::put_u16(out, static_cast<uint16_t>(C));
  detail::put_u32(out, 0);  // reserved
  for (size_t i = 0; i < scene.image.size(); ++i) detail::put_f32(out, scene.image[i]);
  for (size_t i = 0; i < scene.mask.size(); ++i) out.push_back(static_cast<char>(scene.mask[i]));
  return out;
}

inline Scene decode_scene(const std::string& bytes, int id, int primary_class) {
  if (bytes.size() < 16 || bytes.compare(0, 4, "PIFS") != 0) {
    throw Error::data("scene record is not a PIFS file");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const uint16_t version = detail::get_u16(p + 4);
  if (version != 1) throw Error::data("unsupported PIFS version " + std::to_string(version));
  const int H = detail::get_u16(p + 6);
  const int W = detail::get_u16(p + 8);
  const int C = detail::get_u16(p + 10);
  const size_t expect = 16 + static_cast<size_t>(H) * W * C * 4 + static_cast<size_t>(H) * W;
  if (bytes.size() != expect) {
    throw Error::data("scene record has " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(expect));
  }
  Scene s;
  s.id = id;
  s.primary_class = primary_class;
  s.image = Tensor<float>({H, W, C});
  s.mask = Tensor<uint8_t>({H, W});
  size_t off = 16;
  for (size_t i = 0; i < s.image.size(); ++i, off += 4) s.image[i] = detail::get_f32(p + off);
  for (size_t i = 0; i < s.mask.size(); ++i, ++off) s.mask[i] = static_cast<uint8_t>(p[off]);
  return s;
}

inline std::string scene_filename(int id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%05d.bin", id);
  return std::string("scenes/") + buf;
}

inline std::string corpus_manifest_text(const Corpus& corpus) {
  std::ostringstream os;
  os << "format = ifss-corpus\n";
  os << "version = 1\n";
  os << "seed = " << corpus.seed << "\n";
  os << "grid.h = " << corpus.height << "\n";
  os << "grid.w = " << corpus.width << "\n";
  os << "grid.c = " << corpus.channels << "\n";
  os << "scenes_per_class = " << corpus.scenes_per_class << "\n";
  os << "classes = " << corpus.catalog.size() << "\n";
  for (const auto& e : corpus.catalog.entries) {
    os << "class." << e.id << " = " << family_name(e.family) << " hue=" << e.hue
       << " hue_jitter=" << e.hue_jitter << " rot_jitter=" << e.rot_jitter << "\n";
  }
  for (const auto& s : corpus.scenes) {
    os << "scene." << s.id << " = " << scene_filename(s.id) << " class=" << s.primary_class
       << "\n";
  }
  return os.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error::data("cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error::data("short write to " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error::data("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "scenes", ec);
  if (ec) throw Error::data("cannot create corpus directory " + dir.string() + ": " + ec.message());
  for (const auto& s : corpus.scenes) {
    write_file(dir / scene_filename(s.id), encode_scene(s));
  }
  write_file(dir / "manifest.txt", corpus_manifest_text(corpus));
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.txt";
  if (!std::filesystem::exists(manifest_path)) {
    throw Error::data("corpus-not-found: no manifest at " + manifest_path.string());
  }
  std::istringstream in(read_file(manifest_path));
  Corpus corpus;
  std::map<int, std::string> scene_files;
  std::map<int, int> scene_class;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 3);
    if (key == "seed") corpus.seed = std::stoull(value);
    else if (key == "grid.h") corpus.height = std::stoi(value);
    else if (key == "grid.w") corpus.width = std::stoi(value);
    else if (key == "grid.c") corpus.channels = std::stoi(value);
    else if (key == "scenes_per_class") corpus.scenes_per_class = std::stoi(value);
    else if (key.rfind("class.", 0) == 0) {
      ClassSpec spec;
      spec.id = std::stoi(key.substr(6));
      std::istringstream vs(value);
      std::string fam, kv;
      vs >> fam;
      spec.family = family_from_name(fam);
      while (vs >> kv) {
        const auto p = kv.find('=');
        if (p == std::string::npos) continue;
        const std::string k = kv.substr(0, p);
        const double v = std::stod(kv.substr(p + 1));
        if (k == "hue") spec.hue = v;
        else if (k == "hue_jitter") spec.hue_jitter = v;
        else if (k == "rot_jitter") spec.rot_jitter = v;
      }
      corpus.catalog.entries.push_back(spec);
    } else if (key.rfind("scene.", 0) == 0) {
      const int id = std::stoi(key.substr(6));
      std::istringstream vs(value);
      std::string file, cls;
      vs >> file >> cls;
      scene_files[id] = file;
      scene_class[id] = std::stoi(cls.substr(cls.find('=') + 1));
    }
  }
  for (const auto& [id, file] : scene_files) {
    corpus.scenes.push_back(decode_scene(read_file(dir / file), id, scene_class[id]));
  }
  // scenes[i].id == i is relied on throughout
  for (size_t i = 0; i < corpus.scenes.size(); ++i) {
    if (corpus.scenes[i].id != static_cast<int>(i)) {
      throw Error::data("corpus manifest scene ids are not contiguous from 0");
    }
  }
  return corpus;
}

}  // namespace ifss
