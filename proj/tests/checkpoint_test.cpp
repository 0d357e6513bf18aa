#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>

#include "smoothcert/checkpoint.hpp"
#include "smoothcert/random.hpp"

using namespace smoothcert;
namespace fs = std::filesystem;

namespace {

Model<float> trained_bn_model() {
  ConvNetOptions opt;
  opt.size = 8;
  opt.channels = {4, 8};
  opt.norm = NormKind::batch;
  opt.num_classes = 3;
  Model<float> m(make_convnet(opt));
  m.init_parameters(5);
  Tensor x(Shape{4, 1, 8, 8});
  Rng rng(1);
  for (float& v : x.data()) v = static_cast<float>(rng.normal());
  m.forward(x, Mode::train);  // moves the running statistics off their defaults
  return m;
}

std::uint32_t le32(const std::string& s, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(s[off + i])) << (8 * i);
  return v;
}

void set_le32(std::string& s, std::size_t off, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s[off + i] = static_cast<char>((v >> (8 * i)) & 0xff);
}

std::string message_of(const std::string& bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.what();
  }
  return "";
}

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "smoothcert_ckpt_test";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitIdentical) {
  const Model<float> m = trained_bn_model();
  const std::string bytes = encode_checkpoint(m);
  const Model<float> back = decode_checkpoint(bytes);
  EXPECT_EQ(back.spec(), m.spec());
  const auto a = m.state(), b = back.state();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    ASSERT_EQ(a[i].second.size(), b[i].second.size());
    EXPECT_EQ(std::memcmp(a[i].second.ptr(), b[i].second.ptr(), a[i].second.size() * 4), 0)
        << a[i].first;
  }
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, FileRoundTripIsAtomic) {
  const Model<float> m = trained_bn_model();
  const fs::path p = temp_file("model.ckpt");
  save_checkpoint(m, p);
  EXPECT_FALSE(fs::exists(fs::path(p.string() + ".tmp")));
  EXPECT_EQ(encode_checkpoint(load_checkpoint(p)), encode_checkpoint(m));
}

TEST(Checkpoint, HeaderLayout) {
  const Model<float> m = trained_bn_model();
  const std::string bytes = encode_checkpoint(m);
  EXPECT_EQ(bytes.substr(0, 4), "SMCK");
  EXPECT_EQ(le32(bytes, 4), 1u);
  const std::uint32_t spec_len = le32(bytes, 8);
  const std::string spec = bytes.substr(12, spec_len);
  EXPECT_EQ(spec, m.spec().canonical_json());
  // Canonical text: sorted keys and no bare floating-point numbers.
  const auto js = nlohmann::json::parse(spec);
  EXPECT_EQ(js.dump(), spec);
  EXPECT_EQ(spec.find("0.1,"), std::string::npos);
  EXPECT_NE(spec.find("\"momentum\":\"0.1\""), std::string::npos);
  EXPECT_EQ(le32(bytes, 12 + spec_len), m.state().size());
}

TEST(Checkpoint, PayloadIsLittleEndianFloat32) {
  Model<float> m = trained_bn_model();
  auto& norm = std::get<NormLayer<float>>(m.layer(1));
  norm.gamma.fill(1.0f);
  const std::string bytes = encode_checkpoint(m);
  // The payload ends with the state tensors followed by the CRC; locate gamma
  // of layer 1 by its offset in state order.
  std::size_t before = 0;
  for (const auto& [name, t] : m.state()) {
    if (name == "layers.1.gamma") break;
    before += t.size();
  }
  std::size_t total = 0;
  for (const auto& e : m.state()) total += e.second.size();
  const std::size_t payload = bytes.size() - 4 - total * 4;
  const std::string one("\x00\x00\x80\x3f", 4);
  EXPECT_EQ(bytes.substr(payload + before * 4, 4), one);
}

TEST(Checkpoint, CorruptedPayloadFailsCrc) {
  std::string bytes = encode_checkpoint(trained_bn_model());
  bytes[bytes.size() - 40] ^= 0x10;
  EXPECT_NE(message_of(bytes).find("CRC mismatch"), std::string::npos);
}

TEST(Checkpoint, TruncationIsReported) {
  const std::string bytes = encode_checkpoint(trained_bn_model());
  for (const std::size_t keep : {2u, 10u, 40u}) {
    EXPECT_NE(message_of(bytes.substr(0, keep)).find("truncated checkpoint"), std::string::npos)
        << keep;
  }
  EXPECT_NE(message_of(bytes.substr(0, bytes.size() - 3)).find("truncated checkpoint"),
            std::string::npos);
  EXPECT_NE(message_of(bytes + "x").find("trailing bytes"), std::string::npos);
}

TEST(Checkpoint, BadMagicAndVersion) {
  std::string bytes = encode_checkpoint(trained_bn_model());
  std::string other = bytes;
  other[0] = 'X';
  EXPECT_NE(message_of(other).find("bad magic"), std::string::npos);
  set_le32(bytes, 4, 2);
  EXPECT_NE(message_of(bytes).find("unsupported version 2"), std::string::npos);
}

TEST(Checkpoint, ManifestMismatchNamesTheTensor) {
  std::string bytes = encode_checkpoint(trained_bn_model());
  const std::size_t spec_len = le32(bytes, 8);
  std::size_t off = 12 + spec_len + 4;  // first manifest entry
  const std::uint32_t name_len = le32(bytes, off);
  EXPECT_EQ(bytes.substr(off + 4, name_len), "layers.0.weight");
  off += 4 + name_len + 4;  // first dimension
  set_le32(bytes, off, le32(bytes, off) + 1);
  const std::string msg = message_of(bytes);
  EXPECT_NE(msg.find("manifest does not match spec"), std::string::npos) << msg;
  EXPECT_NE(msg.find("layers.0.weight"), std::string::npos) << msg;
}

TEST(Checkpoint, LoadErrorsCarryThePath) {
  const fs::path p = temp_file("broken.ckpt");
  std::ofstream(p, std::ios::binary) << "SMCK";
  try {
    load_checkpoint(p);
    FAIL() << "expected a checkpoint error";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find(p.string()), std::string::npos);
  }
  EXPECT_THROW(load_checkpoint(temp_file("absent.ckpt")), CheckpointError);
}

TEST(Checkpoint, IdenticalStatesGiveIdenticalBytes) {
  EXPECT_EQ(encode_checkpoint(trained_bn_model()), encode_checkpoint(trained_bn_model()));
}
