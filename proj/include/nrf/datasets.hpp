#pragma once
// Dataset containers: MedMNIST-style NPZ loading and writing, resizing, and
// the synthetic planted-feature corpus.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nrf/archive.hpp"
#include "nrf/dataset.hpp"

namespace nrf {

struct DatasetSplits {
  ImageDataset train, val, test;
};

// Known MedMNIST flags by file stem (e.g. "pneumoniamnist" -> 2); -1 if unknown.
int medmnist_num_classes(const std::string& path);

// Reads <split>_images / <split>_labels from an NPZ archive.
//  u8 [N,H,W] -> [N,1,H,W];  u8 [N,H,W,C] -> [N,C,H,W];  both scaled by 1/255.
//  f32 [N,C,H,W] is taken as already in [0,1].
// Labels [N] or [N,1] of u8/i64. num_classes <= 0 uses the archive's
// metadata.json, then the file-name table, then max label + 1.
ImageDataset load_split(const ZipArchive& zip, const std::string& split, int num_classes = 0);
DatasetSplits load_medmnist(const std::string& path, int num_classes = 0);

// Writes splits (keys <split>_images as f32 [N,C,H,W], <split>_labels as i64)
// plus metadata.json carrying num_classes and the provenance maps. `extra`
// arrays are stored under their own keys.
std::vector<std::uint8_t> dataset_archive(const std::vector<const ImageDataset*>& splits,
                                          const std::map<std::string, NpyArray>& extra = {},
                                          const std::string& metadata_json = "");
void save_dataset(const std::string& path, const std::vector<const ImageDataset*>& splits,
                  const std::map<std::string, NpyArray>& extra = {}, const std::string& metadata_json = "");

enum class ResizeFilter { bilinear, nearest, bicubic };
std::string resize_filter_name(ResizeFilter f);
ResizeFilter parse_resize_filter(const std::string& name);

// Half-pixel-centre resampling with edge clamping. Bilinear at an exact 2x
// downscale is 2x2 block averaging.
Tensor resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w, ResizeFilter filter = ResizeFilter::bilinear);
ImageDataset resize(const ImageDataset& d, std::int64_t size, ResizeFilter filter = ResizeFilter::bilinear);

// Planted-feature corpus. Each image is
//   b + blob[k_r] + mid[k_m] + pattern[y] + N(0, noise^2), clipped to [0,1]
// where blob is a smooth class-positioned bump (robust), pattern a fixed
// near-Nyquist +-a_nr texture (nonrobust) and mid a period-4 +-a_mid texture.
// k_r equals y with probability p_r, else a uniformly drawn other class; k_m
// likewise with p_mid. The background b is base plus a per-image uniform
// offset in [-base_jitter, base_jitter].
struct SyntheticSpec {
  int classes = 2;
  int size = 16;
  int channels = 1;
  std::int64_t train_per_class = 1000;
  std::int64_t val_per_class = 250;
  std::int64_t test_per_class = 1000;
  float base = 0.5f;
  float a_r = 0.15f;
  float p_r = 0.8f;
  float a_mid = 0.0f;
  float p_mid = 0.9f;
  float a_nr = 2.0f / 255.0f;
  float noise = 0.03f;
  float base_jitter = 0.15f;  // per-image background drawn from base +- base_jitter
  std::uint64_t seed = 0;

  void validate() const;
};

enum class PlantedFeature { robust, mid, nonrobust };
// The un-scaled feature image [C,H,W] for class k (unit amplitude).
Tensor synthetic_feature(const SyntheticSpec& spec, PlantedFeature f, int k);

DatasetSplits make_synthetic(const SyntheticSpec& spec);

}  // namespace nrf
