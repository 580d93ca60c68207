#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "malsf/image.hpp"
#include "malsf/losses.hpp"
#include "malsf/vocab.hpp"

namespace malsf {

enum class PairSource { open_vocab, caption_anchored, synthetic };

const char* pair_source_name(PairSource s);
PairSource pair_source_from(const std::string& name);

struct SamplePair {
  std::string label;
  MaskBitmap mask;
  PairSource source = PairSource::synthetic;
};

// One media item: image, caption, local mask-label pairs and (for labeled
// records) the supervision block.
struct Sample {
  std::string id;
  Image image;
  std::string caption;
  std::vector<SamplePair> pairs;
  std::optional<GroundTruth> gt;
};

// Run-length encoding of a row-major bitmap: runs alternate zeros/ones
// starting with the zero run (possibly of length 0); runs sum to w*h.
std::vector<int> rle_encode(const MaskBitmap& mask);
MaskBitmap rle_decode(const std::vector<int>& runs, int w, int h);

std::string base64_encode(const std::vector<uint8_t>& bytes);
std::vector<uint8_t> base64_decode(const std::string& text);

// JSONL record form of a Sample (canonical key-sorted JSON, one per line).
std::string sample_to_json(const Sample& s);
Sample sample_from_json(const std::string& line);

// Content validation; returns human-readable violations instead of
// throwing. An empty result means the record satisfies every ground-truth
// consistency rule.
std::vector<std::string> validate_sample(const Sample& s, const Vocab& vocab, int l_max);

struct DatasetLoadStats {
  int64_t accepted = 0;
  int64_t skipped = 0;
};

// Reads a JSONL file in line order, validating every record. In strict mode
// the first invalid record aborts the load with its line number; otherwise
// invalid records are skipped with a warning on stderr.
std::vector<Sample> load_dataset(const std::string& path, const Vocab& vocab, int l_max,
                                 bool strict = true, DatasetLoadStats* stats = nullptr);

void write_dataset(const std::string& path, const std::vector<Sample>& samples);

uint32_t crc32_of(const std::string& bytes);
std::string read_file(const std::string& path);
void write_file_atomic(const std::string& path, const std::string& bytes);

}  // namespace malsf
