// NPY/NPZ containers, dataset loading, resizing and the synthetic corpus.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "doctest.h"
#include "nrf/archive.hpp"
#include "nrf/datasets.hpp"
#include "nrf/npy.hpp"

using namespace nrf;

namespace {

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

std::vector<std::uint8_t> npy_with_header(const std::string& dict, std::span<const std::uint8_t> payload) {
  std::string h = dict;
  while ((10 + h.size() + 1) % 64 != 0) h += ' ';
  h += '\n';
  std::vector<std::uint8_t> b = bytes_of(std::string("\x93NUMPY\x01\x00", 8));
  b.push_back(static_cast<std::uint8_t>(h.size() & 0xFF));
  b.push_back(static_cast<std::uint8_t>(h.size() >> 8));
  b.insert(b.end(), h.begin(), h.end());
  b.insert(b.end(), payload.begin(), payload.end());
  return b;
}

std::vector<int> read_ints(std::istream& in) {
  std::string line;
  std::getline(in, line);
  std::istringstream ss(line);
  std::vector<int> v;
  for (int x; ss >> x;) v.push_back(x);
  return v;
}

std::string fixture(const std::string& name) { return std::string(NRF_TEST_DATA_DIR) + "/" + name; }

double phi(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace

TEST_CASE("npy: minimal u1 header parses to a [2,3] byte array") {
  const std::uint8_t payload[6] = {1, 2, 3, 4, 5, 250};
  const auto b = npy_with_header("{'descr': '|u1', 'fortran_order': False, 'shape': (2, 3), }", payload);
  const NpyArray a = parse_npy(b);
  CHECK(a.dtype == DType::u8);
  CHECK(a.shape == Shape{2, 3});
  CHECK_FALSE(a.fortran_order);
  REQUIRE(a.data.size() == 6);
  CHECK(a.data[5] == 250);
  const Tensor t = a.to_tensor();
  CHECK(t[5] == 250.0f);  // no rescaling at this layer
}

TEST_CASE("npy: malformed streams are rejected with a specific kind") {
  auto kind_of = [](std::span<const std::uint8_t> b) {
    try {
      parse_npy(b);
    } catch (const NpyError& e) {
      return e.kind;
    }
    FAIL("expected NpyError");
    return NpyError::Kind::bad_header;
  };
  const std::uint8_t payload[6] = {};
  auto good = npy_with_header("{'descr': '|u1', 'fortran_order': False, 'shape': (2, 3), }", payload);

  auto bad = good;
  bad[1] = 'X';
  CHECK(kind_of(bad) == NpyError::Kind::bad_magic);
  try {
    parse_npy(bad);
  } catch (const NpyError& e) {
    CHECK(std::string(e.what()).find("not an NPY stream") != std::string::npos);
  }

  auto v2 = good;
  v2[6] = 2;
  CHECK(kind_of(v2) == NpyError::Kind::unsupported_version);

  auto trunc = good;
  trunc.pop_back();
  CHECK(kind_of(trunc) == NpyError::Kind::truncated);
  CHECK(kind_of(std::span(good).first(8)) == NpyError::Kind::truncated);

  CHECK(kind_of(npy_with_header("{'descr': '|O', 'fortran_order': False, 'shape': (2, 3), }", payload)) ==
        NpyError::Kind::unsupported_dtype);
  CHECK(kind_of(npy_with_header("{'descr': '>f4', 'fortran_order': False, 'shape': (1,), }", payload)) ==
        NpyError::Kind::unsupported_dtype);
  CHECK(kind_of(npy_with_header("{'descr': '|u1', 'shape': (2, 3), }", payload)) == NpyError::Kind::bad_header);
  // NpyError is a DataError so callers can map it to the data exit code.
  CHECK_THROWS_AS(parse_npy(bad), DataError);
}

TEST_CASE("npy: round trip for every dtype and several ranks") {
  std::mt19937 rng(5);
  for (const Shape& shape : {Shape{7}, Shape{2, 3}, Shape{2, 1, 3, 4}, Shape{0, 3}}) {
    const auto n = shape_numel(shape);
    std::vector<float> f(static_cast<std::size_t>(n));
    for (auto& v : f) v = std::normal_distribution<float>()(rng);
    const Tensor t(shape, f);
    const NpyArray back = parse_npy(write_npy(NpyArray::from_tensor(t)));
    CHECK(back.shape == shape);
    CHECK(bitwise_equal(back.to_tensor(), t));

    std::vector<std::int64_t> iv(static_cast<std::size_t>(n));
    for (auto& v : iv) v = static_cast<std::int64_t>(rng()) - (1LL << 31);
    CHECK(parse_npy(write_npy(NpyArray::from_i64(shape, iv))).to_i64() == iv);

    std::vector<std::uint8_t> uv(static_cast<std::size_t>(n));
    for (auto& v : uv) v = static_cast<std::uint8_t>(rng());
    CHECK(parse_npy(write_npy(NpyArray::from_u8(shape, uv))).data == uv);
  }
  // header block is padded so the payload starts on a 64-byte boundary
  const auto b = write_npy(NpyArray::from_u8({3}, {1, 2, 3}));
  CHECK((b.size() - 3) % 64 == 0);
}

TEST_CASE("zip: stored and deflated round trips, deterministic bytes, CRC checks") {
  std::vector<std::uint8_t> big(20000);
  for (std::size_t i = 0; i < big.size(); ++i) big[i] = static_cast<std::uint8_t>((i * 7) % 13);
  for (bool compress : {false, true}) {
    ZipWriter w(compress);
    w.add("a.bin", big);
    w.add("empty", {});
    const auto bytes = w.finish();
    ZipWriter w2(compress);
    w2.add("a.bin", big);
    w2.add("empty", {});
    CHECK(w2.finish() == bytes);
    const auto z = ZipArchive::from_bytes(bytes);
    CHECK(z.names() == std::vector<std::string>{"a.bin", "empty"});
    CHECK(z.read("a.bin") == big);
    CHECK(z.read("empty").empty());
    CHECK_THROWS_AS(z.read("missing"), DataError);
    if (!compress) {
      auto corrupt = bytes;
      corrupt[40] ^= 0xFF;  // inside the first member's payload
      CHECK_THROWS_AS(ZipArchive::from_bytes(corrupt).read("a.bin"), DataError);
    } else {
      CHECK(bytes.size() < big.size() / 4);
    }
  }
  ZipWriter dup;
  dup.add("x", {});
  CHECK_THROWS_AS(dup.add("x", {}), std::invalid_argument);
  CHECK_THROWS_AS(ZipArchive::from_bytes(bytes_of("not a zip at all, clearly not")), DataError);
}

TEST_CASE("npz: files written by numpy load with the right values") {
  std::ifstream exp(fixture("fixture_expected.txt"));
  REQUIRE(exp.good());
  const auto gray = read_ints(exp);
  const auto rgb = read_ints(exp);

  const auto plain = load_medmnist(fixture("fixture_plain.npz"));
  CHECK(plain.train.images.shape() == Shape{5, 1, 4, 6});
  CHECK(plain.train.labels == std::vector<int>{0, 1, 1, 0, 1});
  CHECK(plain.train.num_classes == 2);
  for (std::size_t i = 0; i < gray.size(); ++i) CHECK(plain.train.images[static_cast<std::int64_t>(i)] == gray[i] / 255.0f);
  CHECK(plain.val.size() == 2);
  CHECK(plain.test.size() == 3);

  const auto comp = load_medmnist(fixture("fixture_compressed.npz"));
  CHECK(comp.train.images.shape() == Shape{3, 3, 2, 2});
  CHECK(comp.train.num_classes == 3);
  // numpy layout is [N,H,W,C]
  for (int n = 0; n < 3; ++n)
    for (int h = 0; h < 2; ++h)
      for (int w = 0; w < 2; ++w)
        for (int c = 0; c < 3; ++c)
          CHECK(comp.train.images.at(n, c, h, w) == rgb[static_cast<std::size_t>(((n * 2 + h) * 2 + w) * 3 + c)] / 255.0f);

  const auto z = ZipArchive::open(fixture("fixture_compressed.npz"));
  const NpyArray f = read_npz_array(z, "f");
  CHECK(f.to_tensor() == Tensor::from({2, 3}, {0, 1, 2, 3, 4, 5}));
  const NpyArray fo = read_npz_array(z, "fo");
  CHECK(fo.fortran_order);
  CHECK(fo.to_i64() == std::vector<std::int64_t>{0, 1, 2, 3, 4, 5});
}

TEST_CASE("dataset loading reports missing keys and bad labels") {
  Npz npz;
  npz.arrays["train_images"] = NpyArray::from_u8({2, 2, 2}, std::vector<std::uint8_t>(8, 255));
  npz.arrays["train_labels"] = NpyArray::from_i64({2}, std::vector<std::int64_t>{0, 5});
  const auto z = ZipArchive::from_bytes(write_npz(npz), "toy.npz");
  try {
    load_split(z, "val");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("val_images") != std::string::npos);
  }
  CHECK_THROWS_AS(load_split(z, "train", 2), DataError);  // label 5 >= 2 classes
  const auto d = load_split(z, "train");
  CHECK(d.num_classes == 6);
  CHECK(d.images[0] == 1.0f);

  Npz multi;
  multi.arrays["train_images"] = NpyArray::from_u8({2, 2, 2}, std::vector<std::uint8_t>(8, 0));
  multi.arrays["train_labels"] = NpyArray::from_i64({2, 3}, std::vector<std::int64_t>(6, 0));
  CHECK_THROWS_AS(load_split(ZipArchive::from_bytes(write_npz(multi)), "train", 2), DataError);
}

TEST_CASE("medmnist class counts come from the file name") {
  CHECK(medmnist_num_classes("/x/pneumoniamnist.npz") == 2);
  CHECK(medmnist_num_classes("pathmnist_64.npz") == 9);
  CHECK(medmnist_num_classes("OrganAMNIST.npz") == 11);
  CHECK(medmnist_num_classes("mine.npz") == -1);
}

TEST_CASE("dataset archives round trip and record reads in the access log") {
  SyntheticSpec spec;
  spec.train_per_class = 5;
  spec.val_per_class = 2;
  spec.test_per_class = 3;
  spec.classes = 3;
  const auto s = make_synthetic(spec);
  const auto bytes = dataset_archive({&s.train, &s.val, &s.test});
  const auto z = ZipArchive::from_bytes(bytes, "synthetic.npz");
  AccessLog::global().clear();
  const auto train = load_split(z, "train");
  CHECK(AccessLog::global().touched("train_"));
  CHECK_FALSE(AccessLog::global().touched("test_"));
  CHECK(bitwise_equal(train.images, s.train.images));
  CHECK(train.labels == s.train.labels);
  CHECK(train.num_classes == 3);
  CHECK(dataset_archive({&s.train, &s.val, &s.test}) == bytes);
}

TEST_CASE("sha256 matches the published test vector") {
  CHECK(sha256_hex(std::string("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("resize: linear, constant preserving, and 2x bilinear is block averaging") {
  std::mt19937 rng(9);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor x({2, 3, 8, 8}), y({2, 3, 8, 8});
  for (auto& v : x.data()) v = u(rng);
  for (auto& v : y.data()) v = u(rng);
  for (ResizeFilter f : {ResizeFilter::bilinear, ResizeFilter::nearest, ResizeFilter::bicubic}) {
    for (auto [oh, ow] : {std::pair{4, 4}, std::pair{5, 11}, std::pair{16, 16}}) {
      Tensor mix(x.shape());
      for (std::int64_t i = 0; i < x.numel(); ++i) mix[i] = 0.3f * x[i] - 1.7f * y[i];
      const Tensor rx = resize(x, oh, ow, f), ry = resize(y, oh, ow, f), rm = resize(mix, oh, ow, f);
      double worst = 0.0;
      for (std::int64_t i = 0; i < rm.numel(); ++i) worst = std::max(worst, std::fabs(rm[i] - (0.3 * rx[i] - 1.7 * ry[i])));
      INFO(resize_filter_name(f) << " " << oh << "x" << ow);
      CHECK(worst < 1e-5);
      const Tensor c = resize(Tensor({1, 1, 8, 8}, 0.42f), oh, ow, f);
      for (float v : c.data()) CHECK(v == doctest::Approx(0.42f).epsilon(1e-6).scale(1));
    }
  }
  const Tensor half = resize(x, 4, 4, ResizeFilter::bilinear);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
          const double avg = (x.at(n, c, 2 * i, 2 * j) + x.at(n, c, 2 * i + 1, 2 * j) + x.at(n, c, 2 * i, 2 * j + 1) +
                              x.at(n, c, 2 * i + 1, 2 * j + 1)) / 4.0;
          CHECK(half.at(n, c, i, j) == doctest::Approx(avg).epsilon(1e-6).scale(1));
        }
  const Tensor up = resize(x, 16, 16, ResizeFilter::nearest);
  CHECK(up.at(1, 2, 5, 9) == x.at(1, 2, 2, 4));
  CHECK_THROWS_AS(parse_resize_filter("lanczos"), std::invalid_argument);
}

TEST_CASE("synthetic corpus: balanced, bounded, deterministic") {
  SyntheticSpec spec;
  spec.train_per_class = 50;
  spec.val_per_class = 10;
  spec.test_per_class = 20;
  spec.seed = 3;
  const auto a = make_synthetic(spec), b = make_synthetic(spec);
  CHECK(bitwise_equal(a.train.images, b.train.images));
  CHECK(a.test.labels == b.test.labels);
  CHECK(a.train.size() == 100);
  CHECK(class_counts(a.train) == std::vector<std::int64_t>{50, 50});
  for (float v : a.train.images.data()) CHECK((v >= 0.0f && v <= 1.0f));
  spec.seed = 4;
  CHECK_FALSE(bitwise_equal(make_synthetic(spec).train.images, a.train.images));
  spec.classes = 1;
  CHECK_THROWS_AS(make_synthetic(spec), std::invalid_argument);
}

TEST_CASE("synthetic textures are orthogonal across classes and tiers") {
  SyntheticSpec spec;
  spec.classes = 4;
  auto dot = [](const Tensor& p, const Tensor& q) {
    double s = 0.0;
    for (std::int64_t i = 0; i < p.numel(); ++i) s += static_cast<double>(p[i]) * q[i];
    return s;
  };
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      const auto ni = synthetic_feature(spec, PlantedFeature::nonrobust, i);
      const auto nj = synthetic_feature(spec, PlantedFeature::nonrobust, j);
      const auto mj = synthetic_feature(spec, PlantedFeature::mid, j);
      CHECK(dot(ni, nj) == doctest::Approx(i == j ? 256.0 : 0.0));
      CHECK(dot(ni, mj) == doctest::Approx(0.0));
    }
}

TEST_CASE("synthetic nonrobust tier: matched-filter accuracy follows the Gaussian error rate") {
  // Two classes, orthogonal +-1 patterns over N pixels with amplitude a and
  // noise sigma: the optimal probe scores (P0 - P1).x and errs with
  // probability Phi(-a sqrt(N/2) / sigma).
  SyntheticSpec spec;
  spec.a_r = 0.0f;
  spec.a_mid = 0.0f;
  spec.a_nr = 2.0f / 255.0f;
  spec.noise = 0.1f;
  spec.train_per_class = 1;
  spec.val_per_class = 1;
  spec.test_per_class = 2000;
  const auto s = make_synthetic(spec);
  const Tensor p0 = synthetic_feature(spec, PlantedFeature::nonrobust, 0);
  const Tensor p1 = synthetic_feature(spec, PlantedFeature::nonrobust, 1);
  const auto plane = p0.numel();
  std::int64_t correct = 0;
  for (std::int64_t i = 0; i < s.test.size(); ++i) {
    double score = 0.0;
    for (std::int64_t q = 0; q < plane; ++q) score += (p0[q] - p1[q]) * (s.test.images[i * plane + q] - spec.base);
    correct += (score > 0.0 ? 0 : 1) == s.test.labels[static_cast<std::size_t>(i)];
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(s.test.size());
  const double want = phi(spec.a_nr * std::sqrt(plane / 2.0) / spec.noise);
  const double tol = 4.0 * std::sqrt(want * (1.0 - want) / static_cast<double>(s.test.size()));
  INFO("acc=" << acc << " want=" << want);
  CHECK(std::fabs(acc - want) < tol);
}

TEST_CASE("synthetic robust tier: feature agrees with the label at rate p_r") {
  SyntheticSpec spec;
  spec.classes = 3;
  spec.noise = 0.01f;
  spec.a_r = 0.3f;
  spec.p_r = 0.7f;
  spec.train_per_class = 1;
  spec.val_per_class = 1;
  spec.test_per_class = 1000;
  const auto s = make_synthetic(spec);
  std::vector<Tensor> blobs;
  for (int k = 0; k < 3; ++k) blobs.push_back(synthetic_feature(spec, PlantedFeature::robust, k));
  const auto plane = blobs[0].numel();
  std::int64_t agree = 0;
  for (std::int64_t i = 0; i < s.test.size(); ++i) {
    int best = 0;
    double best_s = -1e30;
    for (int k = 0; k < 3; ++k) {
      double sc = 0.0;
      for (std::int64_t q = 0; q < plane; ++q) sc += blobs[static_cast<std::size_t>(k)][q] * s.test.images[i * plane + q];
      if (sc > best_s) best_s = sc, best = k;
    }
    agree += best == s.test.labels[static_cast<std::size_t>(i)];
  }
  const double rate = static_cast<double>(agree) / 3000.0;
  CHECK(std::fabs(rate - 0.7) < 4.0 * std::sqrt(0.21 / 3000.0));
}

#include "nrf/checkpoint.hpp"

TEST_CASE("checkpoint: save, load and forward are bitwise faithful") {
  ModelSpec spec;
  spec.arch = Arch::small_cnn;
  spec.in_channels = 1;
  spec.num_classes = 3;
  spec.base_width = 4;
  Model m = build_model(spec, 17);
  for (int i = 0; i < m.buffers.size(); ++i)
    for (auto& v : m.buffers[i].data()) v += 0.01f * static_cast<float>(i + 1);
  EmaState ema = EmaState::from(m.params, m.buffers, 0.99f);
  ema.updates = 12;
  OptimState opt = OptimState::for_params(m.params, 0.2f, 0.9f, 100);
  opt.step = 7;
  opt.velocity[0].fill(0.5f);

  Tensor x({2, 1, 8, 8});
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(i % 11) / 11.0f;
  const Tensor before = predict_logits(m, x);

  const auto dir = std::filesystem::temp_directory_path() / "nrf_ckpt_test";
  const std::string path = (dir / "m.npz").string();
  const std::string hash = save_checkpoint(path, m, &ema, &opt, {{"note", "unit"}});
  CHECK(hash == file_sha256(path));
  CHECK(hash.size() == 64);

  const Checkpoint ck = load_checkpoint(path);
  CHECK(bitwise_equal(predict_logits(ck.model, x), before));
  REQUIRE(ck.ema.has_value());
  CHECK(ck.ema->updates == 12);
  CHECK(bitwise_equal(ck.ema->shadow[3], ema.shadow[3]));
  REQUIRE(ck.optim.has_value());
  CHECK(ck.optim->step == 7);
  CHECK(ck.optim->velocity[0][0] == 0.5f);
  CHECK(ck.metadata["note"] == "unit");
  // identical content gives identical archive bytes, hence identical hashes
  CHECK(sha256_hex(checkpoint_bytes(ck.model, &*ck.ema, &*ck.optim, ck.metadata)) == hash);

  ModelSpec wider = spec;
  wider.base_width = 6;
  Model other = build_model(wider, 1);
  try {
    load_weights_into(other, path);
    FAIL("expected CheckpointMismatch");
  } catch (const CheckpointMismatch& e) {
    CHECK(e.tensor == "stem.conv.w");
    CHECK(std::string(e.what()).find("stem.conv.w") != std::string::npos);
  }
  Model same = build_model(spec, 99);
  load_weights_into(same, path);
  CHECK(bitwise_equal(predict_logits(same, x), before));
  std::filesystem::remove_all(dir);
}

TEST_CASE("model spec json rejects unknown keys") {
  CHECK_THROWS_AS(model_spec_from_json({{"depht", 16}}), std::invalid_argument);
  const ModelSpec s = model_spec_from_json({{"arch", "wrn"}, {"depth", 10}, {"widen_factor", 2}});
  CHECK(s.depth == 10);
  CHECK(model_spec_to_json(s)["widen_factor"] == 2);
}
