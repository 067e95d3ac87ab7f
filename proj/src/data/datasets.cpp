#include "nrf/datasets.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "json.hpp"

#include "nrf/rng.hpp"

namespace nrf {

int medmnist_num_classes(const std::string& path) {
  static const std::map<std::string, int> table = {
      {"pathmnist", 9},   {"dermamnist", 7},   {"octmnist", 4},     {"pneumoniamnist", 2},
      {"retinamnist", 5}, {"breastmnist", 2},  {"bloodmnist", 8},   {"tissuemnist", 8},
      {"organamnist", 11}, {"organcmnist", 11}, {"organsmnist", 11},
  };
  std::string stem = std::filesystem::path(path).stem().string();
  std::transform(stem.begin(), stem.end(), stem.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (const auto& [flag, c] : table) {
    if (stem.starts_with(flag)) return c;
  }
  return -1;
}

namespace {

int metadata_classes(const ZipArchive& zip) {
  if (!zip.contains("metadata.json")) return -1;
  const auto bytes = zip.read("metadata.json");
  const auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded() || !j.contains("num_classes")) return -1;
  return j["num_classes"].get<int>();
}

Tensor images_from(const NpyArray& a, const std::string& what) {
  if (a.dtype == DType::u8) {
    Tensor raw = a.to_tensor();
    for (auto& v : raw.data()) v /= 255.0f;
    if (a.shape.size() == 3) return raw.reshaped({a.shape[0], 1, a.shape[1], a.shape[2]});
    if (a.shape.size() == 4) {
      const auto n = a.shape[0], h = a.shape[1], w = a.shape[2], c = a.shape[3];
      Tensor out({n, c, h, w});
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t x = 0; x < w; ++x)
            for (std::int64_t ch = 0; ch < c; ++ch) out.at(i, ch, y, x) = raw[((i * h + y) * w + x) * c + ch];
      return out;
    }
  } else if (a.dtype == DType::f32) {
    Tensor t = a.to_tensor();
    if (a.shape.size() == 4) return t;
    if (a.shape.size() == 3) return t.reshaped({a.shape[0], 1, a.shape[1], a.shape[2]});
  }
  throw DataError(what + ": unsupported image array " + dtype_descr(a.dtype) + " " + shape_str(a.shape) +
                  " (expected u8 [N,H,W] / [N,H,W,C] or f32 [N,C,H,W])");
}

}  // namespace

ImageDataset load_split(const ZipArchive& zip, const std::string& split, int num_classes) {
  const std::string ik = split + "_images", lk = split + "_labels";
  if (!zip.contains(ik + ".npy") || !zip.contains(lk + ".npy")) {
    throw DataError(zip.source() + ": missing '" + ik + "' or '" + lk +
                    "' (expected keys train_images, train_labels, val_images, val_labels, test_images, test_labels)");
  }
  ImageDataset d;
  d.split = split;
  d.images = images_from(read_npz_array(zip, ik), zip.source() + ":" + ik);
  const NpyArray la = read_npz_array(zip, lk);
  if (la.shape.empty() || la.shape[0] != d.images.size(0) || la.numel() != la.shape[0]) {
    throw DataError(zip.source() + ":" + lk + ": labels must be [N] or [N,1] matching the images, got " + shape_str(la.shape));
  }
  const auto raw = la.to_i64();
  d.labels.assign(raw.begin(), raw.end());
  if (num_classes <= 0) num_classes = metadata_classes(zip);
  if (num_classes <= 0) num_classes = medmnist_num_classes(zip.source());
  if (num_classes <= 0) {
    num_classes = 1 + static_cast<int>(raw.empty() ? 1 : *std::max_element(raw.begin(), raw.end()));
  }
  d.num_classes = num_classes;
  d.provenance["source"] = zip.source();
  d.validate();
  return d;
}

DatasetSplits load_medmnist(const std::string& path, int num_classes) {
  const auto zip = ZipArchive::open(path);
  DatasetSplits s;
  s.train = load_split(zip, "train", num_classes);
  s.val = load_split(zip, "val", s.train.num_classes);
  s.test = load_split(zip, "test", s.train.num_classes);
  return s;
}

std::vector<std::uint8_t> dataset_archive(const std::vector<const ImageDataset*>& splits,
                                          const std::map<std::string, NpyArray>& extra, const std::string& metadata_json) {
  Npz npz;
  nlohmann::json meta = metadata_json.empty() ? nlohmann::json::object() : nlohmann::json::parse(metadata_json);
  for (const ImageDataset* d : splits) {
    npz.arrays[d->split + "_images"] = NpyArray::from_tensor(d->images);
    std::vector<std::int64_t> labels(d->labels.begin(), d->labels.end());
    npz.arrays[d->split + "_labels"] = NpyArray::from_i64({static_cast<std::int64_t>(labels.size())}, labels);
    meta["num_classes"] = d->num_classes;
    meta["provenance"][d->split] = d->provenance;
  }
  for (const auto& [k, v] : extra) npz.arrays[k] = v;
  npz.texts["metadata.json"] = meta.dump(2);
  return write_npz(npz, true);
}

void save_dataset(const std::string& path, const std::vector<const ImageDataset*>& splits,
                  const std::map<std::string, NpyArray>& extra, const std::string& metadata_json) {
  write_file(path, dataset_archive(splits, extra, metadata_json));
}

std::string resize_filter_name(ResizeFilter f) {
  switch (f) {
    case ResizeFilter::bilinear: return "bilinear";
    case ResizeFilter::nearest: return "nearest";
    case ResizeFilter::bicubic: return "bicubic";
  }
  return "?";
}

ResizeFilter parse_resize_filter(const std::string& name) {
  if (name == "bilinear") return ResizeFilter::bilinear;
  if (name == "nearest") return ResizeFilter::nearest;
  if (name == "bicubic") return ResizeFilter::bicubic;
  throw std::invalid_argument("unknown resize filter '" + name + "' (expected bilinear, nearest or bicubic)");
}

namespace {

struct Tap {
  std::vector<std::int64_t> idx;
  std::vector<double> w;
};

double cubic(double t) {
  constexpr double a = -0.75;
  t = std::fabs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

std::vector<Tap> taps(std::int64_t in, std::int64_t out, ResizeFilter f) {
  std::vector<Tap> t(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  auto clampi = [&](std::int64_t i) { return std::clamp<std::int64_t>(i, 0, in - 1); };
  for (std::int64_t o = 0; o < out; ++o) {
    Tap& tp = t[static_cast<std::size_t>(o)];
    const double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (f == ResizeFilter::nearest) {
      tp.idx = {clampi(static_cast<std::int64_t>(std::floor((static_cast<double>(o) + 0.5) * scale)))};
      tp.w = {1.0};
    } else if (f == ResizeFilter::bilinear) {
      const double s = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::int64_t>(std::floor(s));
      const double fr = s - static_cast<double>(i0);
      tp.idx = {i0, clampi(i0 + 1)};
      tp.w = {1.0 - fr, fr};
    } else {
      const auto i0 = static_cast<std::int64_t>(std::floor(src));
      const double fr = src - static_cast<double>(i0);
      for (int k = -1; k <= 2; ++k) {
        tp.idx.push_back(clampi(i0 + k));
        tp.w.push_back(cubic(static_cast<double>(k) - fr));
      }
    }
  }
  return t;
}

}  // namespace

Tensor resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w, ResizeFilter filter) {
  if (x.dim() != 4) throw ShapeError("resize: expected [N,C,H,W], got " + shape_str(x.shape()));
  if (out_h < 1 || out_w < 1) throw ShapeError("resize: output size must be positive");
  const auto n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  const auto th = taps(h, out_h, filter), tw = taps(w, out_w, filter);
  Tensor out({n, c, out_h, out_w});
  for (std::int64_t p = 0; p < n * c; ++p) {
    const float* src = x.ptr() + p * h * w;
    float* dst = out.ptr() + p * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const Tap& ty = th[static_cast<std::size_t>(oy)];
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const Tap& tx = tw[static_cast<std::size_t>(ox)];
        double acc = 0.0;
        for (std::size_t a = 0; a < ty.idx.size(); ++a)
          for (std::size_t b = 0; b < tx.idx.size(); ++b) acc += ty.w[a] * tx.w[b] * src[ty.idx[a] * w + tx.idx[b]];
        dst[oy * out_w + ox] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

ImageDataset resize(const ImageDataset& d, std::int64_t size, ResizeFilter filter) {
  ImageDataset out = d;
  if (d.height() == size && d.width() == size) return out;
  out.images = resize(d.images, size, size, filter);
  if (filter == ResizeFilter::bicubic) {
    for (auto& v : out.images.data()) v = std::clamp(v, 0.0f, 1.0f);  // cubic overshoot
  }
  out.provenance["resize"] = resize_filter_name(filter) + " " + std::to_string(d.height()) + "x" + std::to_string(d.width()) +
                             " -> " + std::to_string(size) + "x" + std::to_string(size);
  return out;
}

void SyntheticSpec::validate() const {
  if (classes < 2) throw std::invalid_argument("synthetic: classes must be >= 2");
  if (size < 8 || size % 4 != 0) throw std::invalid_argument("synthetic: size must be a multiple of 4 and >= 8");
  if (channels < 1) throw std::invalid_argument("synthetic: channels must be >= 1");
  const auto blocks = (size / 4) * (size / 4);
  if (classes >= blocks) throw std::invalid_argument("synthetic: too many classes for the texture basis at this size");
  if (train_per_class < 1 || val_per_class < 1 || test_per_class < 1) throw std::invalid_argument("synthetic: split sizes must be >= 1");
  if (!(p_r >= 0.0f && p_r <= 1.0f) || !(p_mid >= 0.0f && p_mid <= 1.0f)) throw std::invalid_argument("synthetic: p_r and p_mid must be in [0,1]");
  if (!(base_jitter >= 0.0f && base_jitter < 0.5f)) throw std::invalid_argument("synthetic: base_jitter must be in [0, 0.5)");
  if (a_r < 0.0f || a_mid < 0.0f || a_nr < 0.0f || noise < 0.0f) throw std::invalid_argument("synthetic: amplitudes and noise must be >= 0");
}

Tensor synthetic_feature(const SyntheticSpec& spec, PlantedFeature f, int k) {
  const int s = spec.size;
  Tensor t({spec.channels, s, s});
  const int blocks_per_row = s / 4;
  for (int r = 0; r < s; ++r)
    for (int c = 0; c < s; ++c) {
      float v = 0.0f;
      if (f == PlantedFeature::robust) {
        const double theta = 2.0 * std::numbers::pi * k / spec.classes;
        const double cy = s / 2.0 - 0.5 + s / 4.0 * std::sin(theta);
        const double cx = s / 2.0 - 0.5 + s / 4.0 * std::cos(theta);
        const double sig = s / 8.0;
        v = static_cast<float>(std::exp(-((r - cy) * (r - cy) + (c - cx) * (c - cx)) / (2.0 * sig * sig)));
      } else {
        // Walsh row k+1 over 4x4 blocks times a carrier.
        const unsigned block = static_cast<unsigned>((r / 4) * blocks_per_row + c / 4);
        const float walsh = (std::popcount(static_cast<unsigned>(k + 1) & block) % 2) ? -1.0f : 1.0f;
        float carrier;
        if (f == PlantedFeature::nonrobust) {
          carrier = ((r + c) % 2) ? -1.0f : 1.0f;
        } else {
          const float sr = (r % 4) < 2 ? 1.0f : -1.0f, sc = (c % 4) < 2 ? 1.0f : -1.0f;
          carrier = sr * sc;
        }
        v = walsh * carrier;
      }
      for (int ch = 0; ch < spec.channels; ++ch) t[(ch * s + r) * s + c] = v;
    }
  return t;
}

DatasetSplits make_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const int C = spec.classes, S = spec.size, CH = spec.channels;
  std::vector<Tensor> blob, mid, nr;
  for (int k = 0; k < C; ++k) {
    blob.push_back(synthetic_feature(spec, PlantedFeature::robust, k));
    mid.push_back(synthetic_feature(spec, PlantedFeature::mid, k));
    nr.push_back(synthetic_feature(spec, PlantedFeature::nonrobust, k));
  }
  auto pick = [&](Rng& rng, int y, float p) {
    if (rng.uniform(0.0f, 1.0f) < p) return y;
    const int o = static_cast<int>(rng.below(static_cast<std::uint64_t>(C - 1)));
    return o >= y ? o + 1 : o;
  };
  auto build = [&](const std::string& split, std::int64_t per_class) {
    ImageDataset d;
    d.split = split;
    d.num_classes = C;
    const auto n = per_class * C;
    d.labels.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) d.labels[static_cast<std::size_t>(i)] = static_cast<int>(i % C);
    Rng order(spec.seed, "synthetic_order_" + split);
    std::shuffle(d.labels.begin(), d.labels.end(), order.engine());
    d.images = Tensor({n, CH, S, S});
    const auto plane = static_cast<std::int64_t>(CH) * S * S;
    for (std::int64_t i = 0; i < n; ++i) {
      Rng rng(spec.seed, "synthetic_" + split, static_cast<std::uint64_t>(i));
      const int y = d.labels[static_cast<std::size_t>(i)];
      const int kr = pick(rng, y, spec.p_r);
      const int km = pick(rng, y, spec.p_mid);
      const float b = spec.base + (spec.base_jitter > 0.0f ? rng.uniform(-spec.base_jitter, spec.base_jitter) : 0.0f);
      float* img = d.images.ptr() + i * plane;
      for (std::int64_t q = 0; q < plane; ++q) {
        const float v = b + spec.a_r * blob[static_cast<std::size_t>(kr)][q] + spec.a_mid * mid[static_cast<std::size_t>(km)][q] +
                        spec.a_nr * nr[static_cast<std::size_t>(y)][q] + spec.noise * rng.normal();
        img[q] = std::clamp(v, 0.0f, 1.0f);
      }
    }
    d.provenance = {{"generator", "synthetic"},
                    {"classes", std::to_string(C)},
                    {"size", std::to_string(S)},
                    {"a_r", std::to_string(spec.a_r)},
                    {"p_r", std::to_string(spec.p_r)},
                    {"a_mid", std::to_string(spec.a_mid)},
                    {"p_mid", std::to_string(spec.p_mid)},
                    {"a_nr", std::to_string(spec.a_nr)},
                    {"noise", std::to_string(spec.noise)},
                    {"base_jitter", std::to_string(spec.base_jitter)},
                    {"seed", std::to_string(spec.seed)}};
    return d;
  };
  return {build("train", spec.train_per_class), build("val", spec.val_per_class), build("test", spec.test_per_class)};
}

}  // namespace nrf
