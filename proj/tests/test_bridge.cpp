#include <gtest/gtest.h>

#include <cstdlib>
#include <cstring>

#include "noiser/bridge.hpp"
#include "noiser/noiser.hpp"
#include "noiser/toy_transformer.hpp"

using namespace noiser;

namespace {

std::string cli_path() { return NOISER_CLI_PATH; }

void expect_close(const ProbDist& a, const ProbDist& b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "index " << i;
}

}  // namespace

TEST(Base64, KnownVectors) {
  const std::string s = "foobar";
  const std::vector<std::uint8_t> bytes(s.begin(), s.end());
  EXPECT_EQ(base64::encode(bytes), "Zm9vYmFy");
  EXPECT_EQ(base64::encode(std::span(bytes).first(4)), "Zm9vYg==");
  EXPECT_EQ(base64::encode(std::span(bytes).first(5)), "Zm9vYmE=");
  const auto back = base64::decode("Zm9vYg==");
  EXPECT_EQ(std::string(back.begin(), back.end()), "foob");
  EXPECT_THROW(base64::decode("Zm9"), Error);
}

TEST(Base64, Float32LittleEndian) {
  const std::vector<double> one{1.0};
  // 1.0f = 0x3f800000, little-endian bytes 00 00 80 3f.
  EXPECT_EQ(base64::encode_f32(one), "AACAPw==");
}

TEST(Base64, RoundTripProperty) {
  Rng rng(21);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> v(rng.next_u64() % 50);
    for (auto& x : v) x = static_cast<float>(rng.normal() * 100.0);
    EXPECT_EQ(base64::decode_f32(base64::encode_f32(v)), v);
  }
}

TEST(BridgeArrays, ShapeIsChecked) {
  const std::vector<double> v{1, 2, 3, 4, 5, 6};
  const auto arr = encode_array(v, {2, 3});
  EXPECT_EQ(decode_array(arr, {2, 3}), v);
  EXPECT_THROW(decode_array(arr, {3, 2}), Error);
  auto bad = arr;
  bad["shape"] = {2, 4};
  EXPECT_THROW(decode_array(bad, {2, 4}), Error);
}

TEST(BridgeRequests, InfoAndErrors) {
  ToyTransformer m(4);
  const auto info = handle_bridge_request(m, {{"op", "info"}});
  EXPECT_TRUE(info["ok"].get<bool>());
  EXPECT_EQ(info["payload"]["d_model"], 32);
  const auto unknown = handle_bridge_request(m, {{"op", "dance"}});
  EXPECT_FALSE(unknown["ok"].get<bool>());
  EXPECT_NE(unknown["error"].get<std::string>().find("unknown op"), std::string::npos);
  const auto oov = handle_bridge_request(m, {{"op", "embed"}, {"payload", {{"ids", {1, 99}}}}});
  EXPECT_FALSE(oov["ok"].get<bool>());
}

TEST(BridgeRequests, ForwardWithOverridesMatchesLocal) {
  ToyTransformer m(4);
  const TokenSequence x({5, 6, 7});
  const auto n = sample_noise(32, 2);
  const json req = {{"op", "forward"},
                    {"payload",
                     {{"ids", x.vec()},
                      {"overrides", {{{"position", 1}, {"delta", encode_array(n.scaled(0.5), {32})}}}}}}};
  const auto resp = handle_bridge_request(m, req);
  ASSERT_TRUE(resp["ok"].get<bool>()) << resp.dump();
  const auto probs = ProbDist::normalized(decode_array(resp["payload"]["probs"], {64}));
  // The delta travels as float32, so compare at float precision.
  expect_close(probs, forward_with_override(m, x, 1, n.scaled(0.5)), 1e-5);
}

TEST(RemoteModel, TcpMatchesInProcessModel) {
  ToyTransformer local(9);
  BridgeTcpServer server(local);
  RemoteModel remote("127.0.0.1:" + std::to_string(server.port()));
  EXPECT_EQ(remote.info().vocab_size, 64u);
  EXPECT_TRUE(remote.is_serial());
  const auto x = remote.tokenize("the eiffel tower is in");
  EXPECT_EQ(x.vec(), local.tokenize("the eiffel tower is in").vec());
  EXPECT_EQ(remote.detokenize(x.ids()), "the eiffel tower is in");
  const auto pr = greedy_next(remote, x);
  const auto pl = greedy_next(local, x);
  EXPECT_EQ(pr.token, pl.token);
  expect_close(pr.dist, pl.dist, 1e-5);
  double sum = 0;
  for (double p : pr.dist.probs()) sum += p;
  EXPECT_NEAR(sum, 1.0, 1e-12);
  const std::vector<double> zero(32, 0.0);
  expect_close(forward_with_override(remote, x, 2, zero), pr.dist, 1e-12);
}

TEST(RemoteModel, AttributionRunsThroughBridge) {
  ToyTransformer local(9);
  BridgeTcpServer server(local);
  RemoteModel remote("127.0.0.1:" + std::to_string(server.port()));
  NoiserConfig cfg;
  cfg.n_noise = 2;
  cfg.threads = 4;  // ignored for a serial model
  const auto r = attribute(remote, remote.tokenize("abc"), cfg);
  EXPECT_EQ(r.scores.size(), 3u);
}

TEST(RemoteModel, StdioChildProcess) {
  RemoteModel remote("stdio:" + cli_path() + " serve-bridge --model toy:9");
  ToyTransformer local(9);
  const auto x = local.tokenize("hello");
  EXPECT_EQ(greedy_next(remote, x).token, greedy_next(local, x).token);
  expect_close(greedy_next(remote, x).dist, greedy_next(local, x).dist, 1e-5);
}

TEST(RemoteModel, ServerErrorsSurfaceAsErrors) {
  ToyTransformer local(9);
  BridgeTcpServer server(local);
  RemoteModel remote("127.0.0.1:" + std::to_string(server.port()));
  EXPECT_THROW(remote.forward_from_embeddings(EmbeddingSequence(65, 32)), Error);
  // The connection stays usable after an error.
  EXPECT_NO_THROW(greedy_next(remote, remote.tokenize("ok")));
}

TEST(RemoteModel, MalformedLineGetsErrorResponse) {
  ToyTransformer local(9);
  BridgeTcpServer server(local);
  auto ch = connect_tcp("127.0.0.1", server.port());
  ch->write_line("{not json");
  const auto line = ch->read_line();
  ASSERT_TRUE(line.has_value());
  const auto resp = json::parse(*line);
  EXPECT_FALSE(resp["ok"].get<bool>());
  EXPECT_NE(resp["error"].get<std::string>().find("malformed request"), std::string::npos);
}

TEST(RemoteModel, UnreachableBridgeThrows) {
  EXPECT_THROW(RemoteModel("127.0.0.1:1"), Error);
  EXPECT_THROW(RemoteModel("no-port"), Error);
}
