#pragma once

#include <array>
#include <string>
#include <vector>

#include "ttmg/rng.hpp"
#include "ttmg/tensor.hpp"

namespace ttmg::synth {

enum class Texture { Smooth, Speckle, Stripes };

// A synthetic "modality": a style family with its own channel statistics
// and background texture. Lesion geometry is shared across modalities.
struct ModalitySpec {
    int id = 0;
    std::array<double, 3> means{};
    std::array<double, 3> stds{};
    Texture texture = Texture::Smooth;
    double fg_contrast = 0.0; // intensity offset of lesion pixels
    bool invert = false;      // lesions darker instead of brighter
};

struct Sample {
    PlainTensor image;         // (3,H,W), values in [0,1]
    std::vector<uint8_t> mask; // H*W, {0,1}
    int modality = 0;

    int height() const { return image.shape[1]; }
    int width() const { return image.shape[2]; }
};

// Four fixed style families; ids 0..3.
std::vector<ModalitySpec> builtin_specs();

// 1-3 random ellipse lesions on a textured background. Foreground fraction
// lands in [0.02, 0.6] (rejection with a deterministic fallback).
Sample generate_sample(const ModalitySpec& spec, int h, int w, Rng& rng);

// Deterministic transform core shared by augment(); angle in degrees,
// nearest-neighbor, image fill = per-channel background mean, mask fill = 0.
Sample transform(const Sample& s, bool hflip, bool vflip, double angle_deg);

// 50% horizontal flip, 50% vertical flip, rotation uniform in [-5, 5] deg.
Sample augment(const Sample& s, Rng& rng);

// Nearest-neighbor resize of image and mask to (th, tw).
Sample resize(const Sample& s, int th, int tw);

// binary PPM (P6) / PGM (P5, values {0,255})
void write_ppm(const std::string& path, const PlainTensor& image);
PlainTensor read_ppm(const std::string& path);
void write_pgm(const std::string& path, const std::vector<uint8_t>& mask, int h, int w);
std::vector<uint8_t> read_pgm(const std::string& path, int& h, int& w);

// Writes images, masks and manifest.csv (header `path,modality,split`) into
// dir. Mask files sit next to images with the suffix `_mask.pgm`. Streams
// are derived per (modality, split, index): splits never share draws.
void generate_dataset(const std::vector<ModalitySpec>& specs, int n_train, int n_test,
                      int h, int w, uint64_t seed, const std::string& dir);

struct DatasetEntry {
    Sample sample;
    std::string split; // "train" or "test"
    std::string path;  // image path as listed in the manifest
};

std::vector<DatasetEntry> load_dataset(const std::string& dir);

} // namespace ttmg::synth
