#include "mdg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mdg {

using nlohmann::json;

namespace {

constexpr char kMagic[] = "mgckpt1";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void bytes(std::string_view s) { buf_.append(s); }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  std::string& buf() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::string_view slice(std::size_t from, std::size_t to) const { return std::string_view(data_).substr(from, to - from); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw CheckpointError("checkpoint truncated");
  }
  std::string data_;
  std::size_t pos_ = 0;
};

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

json adam_json(const AdamConfig& hp) {
  return {{"learning_rate", hp.learning_rate}, {"beta1", hp.beta1},     {"beta2", hp.beta2},
          {"epsilon", hp.epsilon},             {"clip_norm", hp.clip_norm}, {"weight_decay", hp.weight_decay}};
}

AdamConfig adam_from_json(const json& j) {
  AdamConfig hp;
  hp.learning_rate = j.at("learning_rate").get<double>();
  hp.beta1 = j.at("beta1").get<double>();
  hp.beta2 = j.at("beta2").get<double>();
  hp.epsilon = j.at("epsilon").get<double>();
  hp.clip_norm = j.at("clip_norm").get<double>();
  hp.weight_decay = j.at("weight_decay").get<double>();
  return hp;
}

}  // namespace

json to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},       {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
          {"n_segments", c.n_segments}, {"init_seed", c.init_seed}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.n_segments = j.value("n_segments", c.n_segments);
  c.init_seed = j.value("init_seed", c.init_seed);
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  Writer w;
  w.bytes(std::string_view(kMagic, kMagicLen));
  const json header = {{"model", to_json(ckpt.config)},
                       {"optimizer", {{"hp", adam_json(ckpt.optimizer.hp)}, {"step", ckpt.optimizer.step}}},
                       {"metadata", ckpt.metadata}};
  const auto header_text = header.dump();
  w.u32(static_cast<std::uint32_t>(header_text.size()));
  w.bytes(header_text);

  const auto tensor_start = w.buf().size();
  std::vector<std::pair<std::string, const Matrix<float>*>> tensors;
  ckpt.params.for_each([&](const std::string& n, const Matrix<float>& m) { tensors.emplace_back(n, &m); });
  ckpt.optimizer.m.for_each([&](const std::string& n, const Matrix<float>& m) { tensors.emplace_back("adam.m." + n, &m); });
  ckpt.optimizer.v.for_each([&](const std::string& n, const Matrix<float>& m) { tensors.emplace_back("adam.v." + n, &m); });
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(2);
    w.u32(static_cast<std::uint32_t>(m->rows()));
    w.u32(static_cast<std::uint32_t>(m->cols()));
    for (Eigen::Index i = 0; i < m->size(); ++i) w.f32(m->data()[i]);
  }
  const auto checksum = fnv1a(std::string_view(w.buf()).substr(tensor_start));
  w.u64(checksum);

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw CheckpointError("cannot write checkpoint: " + path.string());
    os.write(w.buf().data(), static_cast<std::streamsize>(w.buf().size()));
    if (!os) throw CheckpointError("write failed: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<int> expected_vocab_size) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint: " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  Reader r(ss.str());
  if (r.bytes(kMagicLen) != std::string_view(kMagic, kMagicLen)) throw CheckpointError("bad checkpoint magic");

  Checkpoint ckpt;
  json header;
  try {
    header = json::parse(r.bytes(r.u32()));
    ckpt.config = model_config_from_json(header.at("model"));
    ckpt.config.validate();
    ckpt.optimizer.hp = adam_from_json(header.at("optimizer").at("hp"));
    ckpt.optimizer.step = header.at("optimizer").at("step").get<std::int64_t>();
    ckpt.metadata = header.value("metadata", json::object());
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("bad checkpoint config block: ") + e.what());
  }
  if (expected_vocab_size && *expected_vocab_size != ckpt.config.vocab_size)
    throw CheckpointError("checkpoint vocab_size " + std::to_string(ckpt.config.vocab_size) +
                          " does not match vocabulary size " + std::to_string(*expected_vocab_size));

  ckpt.params = Parameters<float>::zeros(ckpt.config);
  ckpt.optimizer.m = Parameters<float>::zeros(ckpt.config);
  ckpt.optimizer.v = Parameters<float>::zeros(ckpt.config);
  std::vector<std::pair<std::string, Matrix<float>*>> expected;
  ckpt.params.for_each([&](const std::string& n, Matrix<float>& m) { expected.emplace_back(n, &m); });
  ckpt.optimizer.m.for_each([&](const std::string& n, Matrix<float>& m) { expected.emplace_back("adam.m." + n, &m); });
  ckpt.optimizer.v.for_each([&](const std::string& n, Matrix<float>& m) { expected.emplace_back("adam.v." + n, &m); });

  const auto tensor_start = r.pos();
  const auto count = r.u32();
  if (count != expected.size())
    throw CheckpointError("checkpoint has " + std::to_string(count) + " tensors, expected " +
                          std::to_string(expected.size()));
  for (auto& [name, m] : expected) {
    const auto got = r.bytes(r.u32());
    if (got != name) throw CheckpointError("unexpected tensor " + got + ", expected " + name);
    if (r.u32() != 2) throw CheckpointError("tensor " + name + " has unexpected rank");
    const auto rows = r.u32(), cols = r.u32();
    if (rows != m->rows() || cols != m->cols())
      throw CheckpointError("shape mismatch for " + name + ": " + std::to_string(rows) + "x" + std::to_string(cols));
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = r.f32();
  }
  const auto tensor_end = r.pos();
  if (r.u64() != fnv1a(r.slice(tensor_start, tensor_end))) throw CheckpointError("checkpoint checksum mismatch");
  return ckpt;
}

}  // namespace mdg
