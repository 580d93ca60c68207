#include "malsf/dataset_io.hpp"

#include <zlib.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace malsf {

using json = nlohmann::json;

const char* pair_source_name(PairSource s) {
  switch (s) {
    case PairSource::open_vocab: return "open_vocab";
    case PairSource::caption_anchored: return "caption_anchored";
    case PairSource::synthetic: return "synthetic";
  }
  return "synthetic";
}

PairSource pair_source_from(const std::string& name) {
  if (name == "open_vocab") return PairSource::open_vocab;
  if (name == "caption_anchored") return PairSource::caption_anchored;
  if (name == "synthetic") return PairSource::synthetic;
  throw std::invalid_argument("unknown pair source: " + name);
}

std::vector<int> rle_encode(const MaskBitmap& mask) {
  std::vector<int> runs;
  uint8_t current = 0;  // runs start with the zero run
  int len = 0;
  for (uint8_t b : mask.bits) {
    const uint8_t v = b ? 1 : 0;
    if (v == current) {
      ++len;
    } else {
      runs.push_back(len);
      current = v;
      len = 1;
    }
  }
  runs.push_back(len);
  return runs;
}

MaskBitmap rle_decode(const std::vector<int>& runs, int w, int h) {
  const int64_t total = static_cast<int64_t>(w) * h;
  int64_t sum = 0;
  for (int r : runs) {
    if (r < 0) throw std::invalid_argument("rle_decode: negative run length");
    sum += r;
  }
  if (sum != total) {
    throw std::invalid_argument("rle_decode: runs sum to " + std::to_string(sum) +
                                ", expected " + std::to_string(total));
  }
  MaskBitmap m = MaskBitmap::zeros(h, w);
  size_t pos = 0;
  uint8_t value = 0;
  for (int r : runs) {
    for (int i = 0; i < r; ++i) m.bits[pos++] = value;
    value = 1 - value;
  }
  return m;
}

namespace {
constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int b64_value(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  return -1;
}
}  // namespace

std::string base64_encode(const std::vector<uint8_t>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  size_t i = 0;
  while (i + 3 <= bytes.size()) {
    const uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out.push_back(kB64[(v >> 6) & 63]);
    out.push_back(kB64[v & 63]);
    i += 3;
  }
  const size_t rem = bytes.size() - i;
  if (rem == 1) {
    const uint32_t v = bytes[i] << 16;
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out.push_back('=');
    out.push_back('=');
  } else if (rem == 2) {
    const uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out.push_back(kB64[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

std::vector<uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw std::invalid_argument("base64: length not a multiple of 4");
  std::vector<uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (size_t i = 0; i < text.size(); i += 4) {
    int vals[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + static_cast<size_t>(k)];
      if (c == '=') {
        vals[k] = 0;
        ++pad;
      } else {
        vals[k] = b64_value(c);
        if (vals[k] < 0 || pad > 0) throw std::invalid_argument("base64: bad character");
      }
    }
    const uint32_t v = (static_cast<uint32_t>(vals[0]) << 18) |
                       (static_cast<uint32_t>(vals[1]) << 12) |
                       (static_cast<uint32_t>(vals[2]) << 6) | static_cast<uint32_t>(vals[3]);
    out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
    if (pad < 2) out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<uint8_t>(v & 0xff));
  }
  return out;
}

std::string sample_to_json(const Sample& s) {
  json j;
  j["id"] = s.id;
  j["caption"] = s.caption;
  j["image"]["width"] = s.image.w;
  j["image"]["height"] = s.image.h;
  j["image"]["data_b64"] = base64_encode(s.image.rgb);
  j["pairs"] = json::array();
  for (const auto& p : s.pairs) {
    json pj;
    pj["label"] = p.label;
    pj["mask_rle"] = rle_encode(p.mask);
    pj["source"] = pair_source_name(p.source);
    j["pairs"].push_back(pj);
  }
  if (s.gt) {
    json g;
    g["y_b"] = s.gt->y_b;
    g["y_m"] = s.gt->y_m;
    g["y_ig"] = s.gt->y_ig;
    g["y_tg"] = s.gt->y_tg;
    j["gt"] = g;
  }
  return j.dump();
}

Sample sample_from_json(const std::string& line) {
  json j = json::parse(line);
  Sample s;
  s.id = j.at("id").get<std::string>();
  s.caption = j.at("caption").get<std::string>();
  const auto& im = j.at("image");
  s.image.w = im.at("width").get<int>();
  s.image.h = im.at("height").get<int>();
  s.image.rgb = base64_decode(im.at("data_b64").get<std::string>());
  if (static_cast<int64_t>(s.image.rgb.size()) != static_cast<int64_t>(s.image.w) * s.image.h * 3) {
    throw std::invalid_argument("sample image payload size mismatch");
  }
  for (const auto& pj : j.at("pairs")) {
    SamplePair p;
    p.label = pj.at("label").get<std::string>();
    p.mask = rle_decode(pj.at("mask_rle").get<std::vector<int>>(), s.image.w, s.image.h);
    p.source = pair_source_from(pj.at("source").get<std::string>());
    s.pairs.push_back(std::move(p));
  }
  if (j.contains("gt") && !j["gt"].is_null()) {
    GroundTruth g;
    const auto& gj = j["gt"];
    g.y_b = gj.at("y_b").get<int>();
    auto ym = gj.at("y_m").get<std::vector<int>>();
    auto yig = gj.at("y_ig").get<std::vector<double>>();
    if (ym.size() != 4 || yig.size() != 4) throw std::invalid_argument("gt vectors must have 4 entries");
    std::copy(ym.begin(), ym.end(), g.y_m.begin());
    std::copy(yig.begin(), yig.end(), g.y_ig.begin());
    g.y_tg = gj.at("y_tg").get<std::vector<int>>();
    s.gt = std::move(g);
  }
  return s;
}

std::vector<std::string> validate_sample(const Sample& s, const Vocab& vocab, int l_max) {
  std::vector<std::string> out;
  if (s.image.w <= 0 || s.image.h <= 0 ||
      s.image.rgb.size() != static_cast<size_t>(s.image.w) * s.image.h * 3) {
    out.push_back("image payload does not match declared dimensions");
  }
  for (size_t i = 0; i < s.pairs.size(); ++i) {
    const auto& m = s.pairs[i].mask;
    if (m.w != s.image.w || m.h != s.image.h) {
      out.push_back("pair " + std::to_string(i) + ": mask dims " + std::to_string(m.h) + "x" +
                    std::to_string(m.w) + " differ from image");
    }
  }
  if (!s.gt) return out;
  const auto& g = *s.gt;
  const bool any_type = g.y_m[0] || g.y_m[1] || g.y_m[2] || g.y_m[3];
  const bool any_box = g.y_ig[0] != 0.0 || g.y_ig[1] != 0.0 || g.y_ig[2] != 0.0 || g.y_ig[3] != 0.0;
  bool any_token = false;
  for (int f : g.y_tg) any_token = any_token || (f != 0);

  if (g.y_b != 0 && g.y_b != 1) out.push_back("y_b must be 0 or 1");
  if (g.y_b == 0 && any_type) out.push_back("clean sample with type flag");
  if (g.y_b == 0 && any_box) out.push_back("clean sample with grounding box");
  if (g.y_b == 0 && any_token) out.push_back("clean sample with token flags");
  if (g.y_b == 1 && !any_type) out.push_back("fake sample without type flags");
  if (any_box && !(g.y_m[0] || g.y_m[1])) {
    out.push_back("grounding box present without image-manipulation flag");
  }
  if ((g.y_m[0] || g.y_m[1]) && !any_box) {
    out.push_back("image-manipulation flag without grounding box");
  }
  if (any_box) {
    if (g.y_ig[0] >= g.y_ig[2] || g.y_ig[1] >= g.y_ig[3]) {
      out.push_back("grounding box must be sorted with positive area");
    }
    for (double v : g.y_ig) {
      if (v < 0.0 || v > 1.0) {
        out.push_back("grounding box out of [0,1]");
        break;
      }
    }
  }
  const TokenSeq toks = tokenize(s.caption, vocab, l_max);
  if (g.y_tg.size() != toks.ids.size()) {
    out.push_back("y_tg length " + std::to_string(g.y_tg.size()) +
                  " != tokenizer output length " + std::to_string(toks.ids.size()));
  } else {
    for (size_t i = 0; i < g.y_tg.size(); ++i) {
      if (g.y_tg[i] != 0 && !toks.attn_mask[i]) {
        out.push_back("token flag set on pad position " + std::to_string(i));
        break;
      }
    }
  }
  if ((g.y_m[2] || g.y_m[3]) && !any_token) {
    out.push_back("text-manipulation flag without token flags");
  }
  return out;
}

std::vector<Sample> load_dataset(const std::string& path, const Vocab& vocab, int l_max,
                                 bool strict, DatasetLoadStats* stats) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file: " + path);
  std::vector<Sample> out;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::string problem;
    try {
      Sample s = sample_from_json(line);
      auto violations = validate_sample(s, vocab, l_max);
      if (violations.empty()) {
        out.push_back(std::move(s));
        if (stats) ++stats->accepted;
        continue;
      }
      problem = violations.front();
    } catch (const std::exception& e) {
      problem = e.what();
    }
    if (strict) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + problem);
    }
    std::cerr << "warning: " << path << ":" << line_no << ": skipped (" << problem << ")\n";
    if (stats) ++stats->skipped;
  }
  return out;
}

void write_dataset(const std::string& path, const std::vector<Sample>& samples) {
  std::ostringstream os;
  for (const auto& s : samples) os << sample_to_json(s) << "\n";
  write_file_atomic(path, os.str());
}

uint32_t crc32_of(const std::string& bytes) {
  return static_cast<uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()),
              static_cast<uInt>(bytes.size())));
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write file: " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace malsf
