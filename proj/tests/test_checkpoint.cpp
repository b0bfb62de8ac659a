#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <string>

#include "pargo/checkpoint.hpp"
#include "pargo/projector_check.hpp"

using namespace pargo;

namespace {

std::filesystem::path temp_file(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

void put_u32(std::string& bytes, std::size_t pos, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) bytes[pos + i] = static_cast<char>((v >> (8 * i)) & 0xff);
}

template <Real T>
bool same_params(ProjectorParams<T>& a, ProjectorParams<T>& b) {
  const auto la = param_list(a), lb = param_list(b);
  if (la.size() != lb.size()) return false;
  for (std::size_t i = 0; i < la.size(); ++i) {
    if (la[i].shape() != lb[i].shape()) return false;
    if (std::memcmp(la[i].data().data(), lb[i].data().data(), la[i].numel() * sizeof(T)) != 0) return false;
  }
  return true;
}

}  // namespace

TEST(Checkpoint, SaveLoadIsBitIdentical) {
  const auto cfg = tiny_config();
  auto params = init_projector<double>(cfg, Rng(4));
  const auto path = temp_file("pargo_ckpt_roundtrip.pargo");
  save_checkpoint(params, cfg, path.string(), {{"note", "x"}});
  auto loaded = load_checkpoint<double>(path.string());
  EXPECT_TRUE(same_params(params, loaded.params));
  EXPECT_EQ(loaded.config, cfg);
  EXPECT_EQ(loaded.meta["note"], "x");
  std::filesystem::remove(path);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  auto cfg = tiny_config();
  cfg.dtype = DType::float32;
  const auto params = init_projector<float>(cfg, Rng(8));
  const NamedTensors<float> extra{{"head.w", Tensor<float>(Shape{2, 3}, {1, 2, 3, 4, 5, 6})}};
  const auto first = encode_checkpoint(params, cfg, {{"seed", 8}}, extra);
  const auto loaded = decode_checkpoint<float>(first);
  ASSERT_EQ(loaded.extra.size(), 1u);
  EXPECT_EQ(loaded.extra[0].first, "head.w");
  const auto second = encode_checkpoint(loaded.params, loaded.config, loaded.meta, loaded.extra);
  EXPECT_EQ(first, second);
}

TEST(Checkpoint, HeaderLayout) {
  const auto cfg = tiny_config();
  const auto bytes = encode_checkpoint(init_projector<double>(cfg, Rng(0)), cfg);
  EXPECT_EQ(bytes.substr(0, 4), "PARG");
  EXPECT_EQ(bytes.substr(4, 4), std::string("\x01\x00\x00\x00", 4));
  std::uint32_t n = 0;
  for (int i = 0; i < 4; ++i) n |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  const auto header = nlohmann::json::parse(bytes.substr(12, n));
  EXPECT_EQ(header["config"].get<ParGoConfig>(), cfg);
}

TEST(Checkpoint, EmbeddedConfigMatchesSaveTime) {
  auto cfg = tiny_config();
  cfg.cascade = false;
  const auto path = temp_file("pargo_ckpt_config.pargo");
  save_checkpoint(init_projector<double>(cfg, Rng(0)), cfg, path.string());
  EXPECT_EQ(peek_checkpoint(path.string()).config, cfg);
  std::filesystem::remove(path);
}

TEST(Checkpoint, TruncatedFileIsReportedNotCrashed) {
  const auto cfg = tiny_config();
  const auto bytes = encode_checkpoint(init_projector<double>(cfg, Rng(0)), cfg);
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, std::size_t{40}, bytes.size() / 2,
                          bytes.size() - 1}) {
    EXPECT_THROW((void)decode_checkpoint<double>(std::string_view(bytes).substr(0, cut)), CheckpointError)
        << "cut at " << cut;
  }
}

TEST(Checkpoint, BadMagicAndVersionAreRejected) {
  const auto cfg = tiny_config();
  auto bytes = encode_checkpoint(init_projector<double>(cfg, Rng(0)), cfg);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW((void)decode_checkpoint<double>(bad_magic), CheckpointError);
  auto bad_version = bytes;
  put_u32(bad_version, 4, 2);
  EXPECT_THROW((void)decode_checkpoint<double>(bad_version), CheckpointError);
}

TEST(Checkpoint, ShapeMismatchIsRejected) {
  const auto cfg = tiny_config();
  auto other = cfg;
  other.c = 12;
  other.heads = 2;
  // Header from one config, records from another.
  const auto a = encode_checkpoint(init_projector<double>(cfg, Rng(0)), cfg);
  const auto b = encode_checkpoint(init_projector<double>(other, Rng(0)), other);
  auto header_len = [](const std::string& s) {
    std::uint32_t n = 0;
    for (int i = 0; i < 4; ++i) n |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[8 + i])) << (8 * i);
    return 12 + static_cast<std::size_t>(n);
  };
  const auto spliced = a.substr(0, header_len(a)) + b.substr(header_len(b));
  EXPECT_THROW((void)decode_checkpoint<double>(spliced), CheckpointError);
}

TEST(Checkpoint, WrongScalarTypeIsRejected) {
  const auto cfg = tiny_config();
  const auto bytes = encode_checkpoint(init_projector<double>(cfg, Rng(0)), cfg);
  EXPECT_THROW((void)decode_checkpoint<float>(bytes), CheckpointError);
  EXPECT_THROW((void)encode_checkpoint(init_projector<float>(cfg, Rng(0)), cfg), ConfigError);
}

TEST(Checkpoint, MissingFileIsAnIoError) {
  EXPECT_THROW((void)load_checkpoint<double>("/nonexistent/dir/x.pargo"), IoError);
}
