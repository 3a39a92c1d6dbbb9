#pragma once

#include <string>
#include <vector>

namespace fsdm::data {

// Interleaved 8-bit RGB rows, top to bottom. Output bytes are deterministic
// for fixed input (fixed compression settings, no ancillary chunks).
void write_rgb8(const std::string& path, int width, int height,
                const std::vector<unsigned char>& rgb);

// Reads any PNG color layout and normalizes it to 8-bit RGB.
std::vector<unsigned char> read_rgb8(const std::string& path, int& width, int& height);

}  // namespace fsdm::data
