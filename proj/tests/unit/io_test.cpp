#include <gtest/gtest.h>

#include <png.h>

#include <sstream>

#include "ddc/checkpoint.hpp"
#include "ddc/config.hpp"
#include "ddc/image_io.hpp"
#include "test_util.hpp"

namespace ddc {
namespace {

// Writes a 16-bit RGB PNG directly through libpng.
void write_png16(const std::string& path, std::size_t h, std::size_t w, const std::vector<std::uint16_t>& v) {
  FILE* fp = std::fopen(path.c_str(), "wb");
  ASSERT_NE(fp, nullptr);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  png_init_io(png, fp);
  png_set_IHDR(png, info, png_uint_32(w), png_uint_32(h), 16, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<unsigned char> row(w * 6);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t i = 0; i < w * 3; ++i) {
      row[2 * i] = static_cast<unsigned char>(v[y * w * 3 + i] >> 8);
      row[2 * i + 1] = static_cast<unsigned char>(v[y * w * 3 + i] & 0xff);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

TEST(Png, EightBitRoundTrip) {
  test::TempDir dir("png");
  std::vector<float> v(3 * 5 * 7);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = float(i % 256) / 255.0f;
  const Tensor img({3, 5, 7}, v);
  write_png(dir.str("a.png"), img);
  const auto back = read_png(dir.str("a.png"));
  ASSERT_TRUE(back);
  EXPECT_EQ(back->shape(), img.shape());
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR((*back)[i], v[i], 1e-6);
  // Same input, same bytes.
  write_png(dir.str("b.png"), img);
  EXPECT_EQ(test::read_file(dir.str("a.png")), test::read_file(dir.str("b.png")));
}

TEST(Png, GrayscaleExpandsToRgb) {
  test::TempDir dir("png");
  write_png(dir.str("g.png"), Tensor::full({1, 4, 4}, 0.2f));
  const auto img = read_png(dir.str("g.png"));
  ASSERT_TRUE(img);
  EXPECT_EQ(img->shape(), (Shape{3, 4, 4}));
  for (float v : img->data()) EXPECT_NEAR(v, 51.0 / 255.0, 1e-6);
}

TEST(Png, SixteenBitScaledToUnitRange) {
  test::TempDir dir("png");
  write_png16(dir.str("d.png"), 2, 2, {0, 0, 0, 65535, 65535, 65535, 32768, 1, 256, 1000, 2000, 3000});
  const auto img = read_png(dir.str("d.png"));
  ASSERT_TRUE(img);
  EXPECT_EQ((*img)[0], 0.0f);
  EXPECT_EQ((*img)[1], 1.0f);  // channel 0, pixel (0, 1)
  EXPECT_NEAR((*img)[2], 32768.0 / 65535.0, 1e-7);
  EXPECT_NEAR((*img)[4 + 2], 1.0 / 65535.0, 1e-9);  // channel 1, pixel (1, 0)
}

TEST(Dataset, SkipsCorruptFilesAndResizes) {
  test::TempDir dir("ds");
  write_png(dir.str("b.png"), Tensor::full({3, 20, 30}, 0.5f));
  write_png(dir.str("a.png"), Tensor::full({3, 8, 8}, 1.0f));
  test::write_file(dir.str("c.png"), "not a png");
  test::write_file(dir.str("notes.txt"), "ignored");
  std::ostringstream warn;
  const auto ds = load_dataset(dir.path(), 8, warn);
  ASSERT_EQ(ds.images.size(), 2u);
  EXPECT_EQ(ds.names, (std::vector<std::string>{"a.png", "b.png"}));
  EXPECT_EQ(ds.images[1].shape(), (Shape{3, 8, 8}));
  for (float v : ds.images[1].data()) EXPECT_NEAR(v, 128.0 / 255.0, 1e-6);
  EXPECT_NE(warn.str().find("c.png"), std::string::npos);
}

TEST(Dataset, EmptyOrMissingDirectoryIsAnError) {
  test::TempDir dir("ds");
  std::ostringstream warn;
  EXPECT_THROW(load_dataset(dir.path(), 8, warn), DatasetError);
  EXPECT_THROW(load_dataset(dir.path() / "missing", 8, warn), DatasetError);
}

TEST(Dataset, CenterCropResizeAveragesBlocks) {
  std::vector<float> v(1 * 4 * 6);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = float(i);
  const auto out = center_crop_resize(Tensor({1, 4, 6}, v), 2);
  ASSERT_EQ(out.shape(), (Shape{1, 2, 2}));
  // Central 4x4 crop starts at column 1; top-left 2x2 block is {1, 2, 7, 8}.
  EXPECT_NEAR(out[0], 4.5f, 1e-6);
}

TEST(Synthetic, DeterministicAndInRange) {
  const auto a = synthetic_dataset(5, 16, 42), b = synthetic_dataset(5, 16, 42), c = synthetic_dataset(5, 16, 43);
  ASSERT_EQ(a.images.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(a.images[i].vec(), b.images[i].vec());
    EXPECT_NE(a.images[i].vec(), c.images[i].vec());
    for (float v : a.images[i].data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
  // Prefixes agree: image i depends only on (seed, i).
  EXPECT_EQ(synthetic_dataset(2, 16, 42).images[1].vec(), a.images[1].vec());
}

Checkpoint sample_checkpoint() {
  Checkpoint ck;
  Rng rng(1);
  ck.add("a.w", rng.randn<float>({2, 3, 4}));
  ck.add("b", Tensor({1}, {-0.0f}));
  ck.metadata["kind"] = "test";
  ck.metadata["step"] = 7;
  return ck;
}

TEST(CheckpointFile, RoundTripIsBitwise) {
  test::TempDir dir("ck");
  const auto ck = sample_checkpoint();
  save_checkpoint(dir.str("x.ddck"), ck);
  const auto back = load_checkpoint(dir.str("x.ddck"));
  ASSERT_EQ(back.tensors.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back.tensors[i].first, ck.tensors[i].first);
    EXPECT_EQ(back.tensors[i].second.shape(), ck.tensors[i].second.shape());
    EXPECT_EQ(std::memcmp(back.tensors[i].second.data().data(), ck.tensors[i].second.data().data(),
                          ck.tensors[i].second.numel() * sizeof(float)),
              0);
  }
  EXPECT_EQ(back.metadata, ck.metadata);
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(ck));
  EXPECT_THROW(Checkpoint(ck).add("b", Tensor({1}, {1.0f})), std::invalid_argument);
}

TEST(CheckpointFile, ParametersByPrefix) {
  const UNet<float> net([] {
    UNetConfig c;
    c.widths = {4, 8};
    c.blocks_per_level = 1;
    c.max_groups = 2;
    c.time_embed_dim = 8;
    return c;
  }(), 1);
  Checkpoint ck;
  ck.add_parameters("net.", net.parameters());
  const auto m = ck.with_prefix("net.");
  EXPECT_EQ(m.size(), net.parameters().size());
  EXPECT_EQ(m.at(net.parameters()[0].name).vec(), net.parameters()[0].tensor.vec());
}

TEST(CheckpointFile, RejectsMalformedFiles) {
  const std::string good = serialize_checkpoint(sample_checkpoint());
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), CheckpointFormatError);
  std::string bad_version = good;
  bad_version[4] = 9;
  EXPECT_THROW(deserialize_checkpoint(bad_version), CheckpointFormatError);
  for (std::size_t cut : {std::size_t(2), std::size_t(10), good.size() / 2, good.size() - 1})
    EXPECT_THROW(deserialize_checkpoint(good.substr(0, cut)), CheckpointFormatError) << cut;
  EXPECT_THROW(deserialize_checkpoint(good + "x"), CheckpointFormatError);
  test::TempDir dir("ck");
  EXPECT_THROW(load_checkpoint(dir.str("missing.ddck")), std::runtime_error);
}

TEST(Config, DefaultsRoundTripThroughJson) {
  const RunConfig c;
  const auto j = config_to_json(c);
  const auto back = config_from_json(j);
  EXPECT_EQ(config_to_json(back), j);
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_EQ(config_hash(c).size(), 16u);
  EXPECT_NO_THROW(validate_config(c));
}

TEST(Config, ParsesNestedSections) {
  const auto j = nlohmann::json::parse(R"({
    "seed": 3, "image_size": 16,
    "denoiser": {"widths": [8, 16], "blocks_per_level": 1},
    "train_ddc": {"tasks": [{"kind": "super_res", "factor": 2}], "sigma_max": 0.05, "kl_mode": "empirical"},
    "solve": {"strategy": "ddnm", "steps": 7, "task": "blur", "ddnm_scale": 0.3},
    "paths": {"out_dir": "o"}
  })");
  const auto c = config_from_json(j);
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.denoiser.widths, (std::vector<std::size_t>{8, 16}));
  ASSERT_EQ(c.pool.tasks.size(), 1u);
  EXPECT_EQ(c.pool.tasks[0].name(), "sr2");
  EXPECT_EQ(c.pool.sigma_max, 0.05);
  EXPECT_EQ(c.train_ddc.kl_mode, KlMode::Empirical);
  EXPECT_EQ(c.solve.task.kind, OperatorKind::GaussianBlur);
  EXPECT_EQ(c.solve.ddnm_scale, 0.3);
  EXPECT_EQ(c.denoiser_checkpoint_path(), (std::filesystem::path("o") / "denoiser.ddck").string());
  EXPECT_NO_THROW(validate_config(c));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  using nlohmann::json;
  EXPECT_THROW(config_from_json(json::parse(R"({"sede": 1})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"solve": {"stratgy": "ddc"}})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"seed": "one"})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"train_ddc": {"kl_mode": "fast"}})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"train_denoiser": {"ema_decay": 1.5}})")), ConfigError);
  auto c = RunConfig{};
  c.image_size = 30;
  EXPECT_THROW(validate_config(c), ConfigError);
  c = RunConfig{};
  c.solve.strategy = "magic";
  EXPECT_THROW(validate_config(c), ConfigError);
  c = RunConfig{};
  c.solve.steps = 1001;
  EXPECT_THROW(validate_config(c), ConfigError);
  test::TempDir dir("cfg");
  test::write_file(dir.str("bad.json"), "{ not json");
  EXPECT_THROW(load_config(dir.str("bad.json")), ConfigError);
  EXPECT_THROW(load_config(dir.str("missing.json")), ConfigError);
}

}  // namespace
}  // namespace ddc
