#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "loft/tensor.hpp"

namespace loft::data {

// One labeled grayscale image; pixels row-major in [0,1].
struct Item {
    uint64_t id = 0;
    uint32_t label = 0;
    std::vector<float> pixels;
};

struct Dataset {
    int H = 0;
    int W = 0;
    std::vector<Item> items;

    size_t size() const { return items.size(); }
    int pixel_count() const { return H * W; }
    void validate() const;  // shape/range checks; throws on violation
};

// Binary dataset container.
void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);

// Sample-sheet export: 8-bit binary PGM, images tiled row-major into a grid
// with 1-pixel separators.
void save_pgm_grid(const std::filesystem::path& path, const Dataset& ds, int columns);

}  // namespace loft::data
