#include "icsrec/encoder.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

namespace icsrec {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(EncoderKind kind) {
  return kind == EncoderKind::kAttention ? "attention" : "recurrent";
}

EncoderKind encoder_kind_from_string(const std::string& name) {
  if (name == "attention") return EncoderKind::kAttention;
  if (name == "recurrent" || name == "gru") return EncoderKind::kRecurrent;
  throw InputError("unknown encoder kind '" + name + "' (expected attention or recurrent)");
}

void ModelShape::validate() const {
  if (d == 0 || n == 0) throw InputError("d and n must be positive");
  if (item_count < 1) throw InputError("item_count must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw InputError("dropout must lie in [0, 1)");
  if (kind == EncoderKind::kAttention) {
    if (blocks == 0 || heads == 0 || ffn_dim == 0) throw InputError("blocks, heads and ffn_dim must be positive");
    if (d % heads != 0) throw InputError("d must be divisible by heads");
  }
}

namespace {

std::string block_name(std::size_t b, const std::string& suffix) {
  return "block" + std::to_string(b) + "." + suffix;
}

Mat normal_matrix(Eigen::Index rows, Eigen::Index cols, double std_dev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std_dev);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

}  // namespace

ModelParams ModelParams::initialize(const ModelShape& shape, std::uint64_t seed, double init_std) {
  shape.validate();
  ModelParams p;
  p.shape_ = shape;
  Rng rng(seed);
  const auto d = static_cast<Eigen::Index>(shape.d);
  auto& t = p.tensors_;
  // Insertion order below fixes the rng draw order.
  Mat items = normal_matrix(shape.item_count + 1, d, init_std, rng);
  items.row(0).setZero();
  t["item_embeddings"] = std::move(items);
  t["position_embeddings"] = normal_matrix(static_cast<Eigen::Index>(shape.n), d, init_std, rng);
  auto ones = [d] { return Mat::Ones(1, d); };
  auto zeros = [](Eigen::Index cols) { return Mat::Zero(1, cols); };
  if (shape.kind == EncoderKind::kAttention) {
    const auto f = static_cast<Eigen::Index>(shape.ffn_dim);
    for (std::size_t b = 0; b < shape.blocks; ++b) {
      t[block_name(b, "ln1.gamma")] = ones();
      t[block_name(b, "ln1.beta")] = zeros(d);
      for (const char* w : {"wq", "wk", "wv", "wo"}) {
        t[block_name(b, std::string("attn.") + w)] = normal_matrix(d, d, init_std, rng);
        t[block_name(b, std::string("attn.b") + (w + 1))] = zeros(d);
      }
      t[block_name(b, "ln2.gamma")] = ones();
      t[block_name(b, "ln2.beta")] = zeros(d);
      t[block_name(b, "ffn.w1")] = normal_matrix(d, f, init_std, rng);
      t[block_name(b, "ffn.b1")] = zeros(f);
      t[block_name(b, "ffn.w2")] = normal_matrix(f, d, init_std, rng);
      t[block_name(b, "ffn.b2")] = zeros(d);
    }
    if (shape.final_layer_norm) {
      t["final_ln.gamma"] = ones();
      t["final_ln.beta"] = zeros(d);
    }
  } else {
    t["gru.wx"] = normal_matrix(d, 3 * d, init_std, rng);
    t["gru.bx"] = zeros(3 * d);
    t["gru.wh"] = normal_matrix(d, 3 * d, init_std, rng);
    t["gru.bh"] = zeros(3 * d);
  }
  p.round_to_float();
  return p;
}

const Mat& ModelParams::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw StateError("no parameter named '" + name + "'");
  return it->second;
}

Mat& ModelParams::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw StateError("no parameter named '" + name + "'");
  return it->second;
}

bool ModelParams::all_finite() const {
  for (const auto& [name, m] : tensors_) {
    if (!m.allFinite()) return false;
  }
  return true;
}

void ModelParams::round_to_float() {
  for (auto& [name, m] : tensors_) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
  }
}

std::size_t ModelParams::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, m] : tensors_) total += static_cast<std::size_t>(m.size());
  return total;
}

bool operator==(const ModelParams& a, const ModelParams& b) {
  if (a.tensors_.size() != b.tensors_.size()) return false;
  for (const auto& [name, m] : a.tensors_) {
    auto it = b.tensors_.find(name);
    if (it == b.tensors_.end()) return false;
    if (m.rows() != it->second.rows() || m.cols() != it->second.cols()) return false;
    if (m != it->second) return false;
  }
  return true;
}

std::vector<ItemId> left_pad(std::span<const ItemId> input, std::size_t n) {
  std::vector<ItemId> out(n, kPadId);
  const std::size_t len = std::min(n, input.size());
  std::copy(input.end() - static_cast<std::ptrdiff_t>(len), input.end(), out.end() - static_cast<std::ptrdiff_t>(len));
  return out;
}

IdBatch make_batch(std::span<const std::span<const ItemId>> inputs, std::size_t n) {
  IdBatch batch;
  batch.batch = inputs.size();
  batch.n = n;
  batch.ids.reserve(inputs.size() * n);
  for (const auto& input : inputs) {
    const auto padded = left_pad(input, n);
    batch.ids.insert(batch.ids.end(), padded.begin(), padded.end());
  }
  batch.valid.resize(batch.ids.size());
  for (std::size_t i = 0; i < batch.ids.size(); ++i) batch.valid[i] = batch.ids[i] != kPadId ? 1 : 0;
  return batch;
}

BoundParams::BoundParams(ad::Tape& tape, const ModelParams& params, bool trainable) : shape_(params.shape()) {
  for (const auto& [name, m] : params.tensors()) {
    vars_.emplace(name, trainable ? tape.leaf_ref(m) : tape.constant(m));
  }
}

ad::Var BoundParams::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw StateError("no bound parameter named '" + name + "'");
  return it->second;
}

std::map<std::string, Mat> BoundParams::grads(const ad::Tape& tape) const {
  std::map<std::string, Mat> out;
  for (const auto& [name, var] : vars_) out.emplace(name, tape.grad(var));
  return out;
}

ad::Var embed_on_tape(ad::Tape& tape, const BoundParams& params, const IdBatch& batch) {
  if (batch.n != params.shape().n) {
    throw InputError("window length " + std::to_string(batch.n) + " does not match model n = " +
                     std::to_string(params.shape().n));
  }
  for (ItemId id : batch.ids) {
    if (id < 0 || id > params.shape().item_count) {
      throw OutOfVocabularyError("item id " + std::to_string(id) + " exceeds item_count " +
                                 std::to_string(params.shape().item_count));
    }
  }
  ad::Var items = ad::gather_rows(tape, params["item_embeddings"], batch.ids);
  return ad::add_positions(tape, items, params["position_embeddings"], batch.batch);
}

namespace {

std::vector<std::size_t> last_valid_rows(std::span<const std::uint8_t> valid, std::size_t batch, std::size_t n) {
  std::vector<std::size_t> rows(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t j = n;
    while (j > 0 && !valid[b * n + j - 1]) --j;
    if (j == 0) throw EmptyInputError("sequence " + std::to_string(b) + " has no valid position");
    rows[b] = b * n + j - 1;
  }
  return rows;
}

ad::Var linear(ad::Tape& tape, ad::Var x, ad::Var w, ad::Var b) {
  return ad::add_bias(tape, ad::matmul(tape, x, w), b);
}

ad::Var maybe_dropout(ad::Tape& tape, ad::Var x, double rate, bool train, Rng* rng) {
  if (!train || rate <= 0.0) return x;
  if (rng == nullptr) throw StateError("train-mode forward needs a random source");
  return ad::dropout(tape, x, rate, *rng);
}

ad::Var attention_stack(ad::Tape& tape, const BoundParams& p, ad::Var x, std::span<const std::uint8_t> valid,
                        std::size_t batch, bool train, Rng* rng) {
  const ModelShape& s = p.shape();
  for (std::size_t b = 0; b < s.blocks; ++b) {
    auto P = [&](const std::string& suffix) { return p[block_name(b, suffix)]; };
    ad::Var a = ad::layer_norm(tape, x, P("ln1.gamma"), P("ln1.beta"), s.layer_norm_eps);
    ad::Var q = linear(tape, a, P("attn.wq"), P("attn.bq"));
    ad::Var k = linear(tape, a, P("attn.wk"), P("attn.bk"));
    ad::Var v = linear(tape, a, P("attn.wv"), P("attn.bv"));
    ad::Var att = ad::causal_attention(tape, q, k, v, valid, batch, s.n, s.heads);
    ad::Var o = linear(tape, att, P("attn.wo"), P("attn.bo"));
    x = ad::add(tape, x, maybe_dropout(tape, o, s.dropout, train, rng));
    ad::Var c = ad::layer_norm(tape, x, P("ln2.gamma"), P("ln2.beta"), s.layer_norm_eps);
    ad::Var f = linear(tape, ad::gelu(tape, linear(tape, c, P("ffn.w1"), P("ffn.b1"))), P("ffn.w2"), P("ffn.b2"));
    x = ad::add(tape, x, maybe_dropout(tape, f, s.dropout, train, rng));
  }
  if (s.final_layer_norm) x = ad::layer_norm(tape, x, p["final_ln.gamma"], p["final_ln.beta"], s.layer_norm_eps);
  return x;
}

ad::Var recurrent_stack(ad::Tape& tape, const BoundParams& p, ad::Var x, std::span<const std::uint8_t> valid,
                        std::size_t batch) {
  ad::Var gx = linear(tape, x, p["gru.wx"], p["gru.bx"]);
  return ad::gru_recurrence(tape, gx, p["gru.wh"], p["gru.bh"], valid, batch, p.shape().n);
}

}  // namespace

EncodedVars encode_on_tape(ad::Tape& tape, const BoundParams& params, ad::Var emb,
                           std::span<const std::uint8_t> valid, std::size_t batch, bool train, Rng* rng) {
  const ModelShape& s = params.shape();
  auto rows = last_valid_rows(valid, batch, s.n);
  ad::Var x = maybe_dropout(tape, emb, s.dropout, train, rng);
  ad::Var hidden = s.kind == EncoderKind::kAttention ? attention_stack(tape, params, x, valid, batch, train, rng)
                                                     : recurrent_stack(tape, params, x, valid, batch);
  ad::Var intent = ad::take_rows(tape, hidden, std::move(rows));
  return {hidden, intent};
}

EncodedVars forward(ad::Tape& tape, const BoundParams& params, const IdBatch& batch, bool train, Rng* rng) {
  ad::Var emb = embed_on_tape(tape, params, batch);
  return encode_on_tape(tape, params, emb, batch.valid, batch.batch, train, rng);
}

Mat encode_intents(const ModelParams& params, std::span<const std::span<const ItemId>> inputs,
                   std::size_t batch_size) {
  const auto d = static_cast<Eigen::Index>(params.shape().d);
  Mat out(static_cast<Eigen::Index>(inputs.size()), d);
  for (std::size_t start = 0; start < inputs.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, inputs.size() - start);
    IdBatch batch = make_batch(inputs.subspan(start, count), params.shape().n);
    ad::Tape tape;
    BoundParams bound(tape, params, false);
    EncodedVars enc = forward(tape, bound, batch, false, nullptr);
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(count)) = tape.value(enc.intent);
  }
  return out;
}

SequenceEmbedding embed(const ModelParams& params, std::span<const ItemId> input_ids) {
  const ModelShape& s = params.shape();
  if (input_ids.size() != s.n) {
    throw InputError("embed expects a window of length " + std::to_string(s.n) + ", got " +
                     std::to_string(input_ids.size()));
  }
  IdBatch batch;
  batch.ids.assign(input_ids.begin(), input_ids.end());
  batch.batch = 1;
  batch.n = s.n;
  batch.valid.resize(s.n);
  for (std::size_t i = 0; i < s.n; ++i) batch.valid[i] = input_ids[i] != kPadId ? 1 : 0;
  ad::Tape tape;
  BoundParams bound(tape, params, false);
  ad::Var emb = embed_on_tape(tape, bound, batch);
  return SequenceEmbedding{tape.value(emb), std::move(batch.valid)};
}

namespace {

SequenceRepr encode_single(const ModelParams& params, const SequenceEmbedding& emb, bool train_mode, Rng* rng) {
  const ModelShape& s = params.shape();
  if (static_cast<std::size_t>(emb.values.rows()) != s.n || static_cast<std::size_t>(emb.values.cols()) != s.d ||
      emb.valid.size() != s.n) {
    throw InputError("embedding shape does not match the model");
  }
  ad::Tape tape;
  BoundParams bound(tape, params, false);
  ad::Var e = tape.constant(emb.values);
  EncodedVars enc = encode_on_tape(tape, bound, e, emb.valid, 1, train_mode, rng);
  SequenceRepr repr;
  repr.hidden = tape.value(enc.hidden);
  repr.intent = tape.value(enc.intent).row(0).transpose();
  return repr;
}

}  // namespace

SequenceRepr encode(const ModelParams& params, const SequenceEmbedding& emb, bool train_mode, Rng* rng) {
  if (params.shape().kind != EncoderKind::kAttention) throw StateError("encode needs attention parameters");
  return encode_single(params, emb, train_mode, rng);
}

SequenceRepr encode_recurrent(const ModelParams& params, const SequenceEmbedding& emb, bool train_mode, Rng* rng) {
  if (params.shape().kind != EncoderKind::kRecurrent) throw StateError("encode_recurrent needs recurrent parameters");
  return encode_single(params, emb, train_mode, rng);
}

void write_f32_file(const fs::path& path, const Mat& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  std::vector<char> bytes(static_cast<std::size_t>(m.size()) * 4);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(m.data()[i]));
    for (int k = 0; k < 4; ++k) bytes[static_cast<std::size_t>(i) * 4 + k] = static_cast<char>((bits >> (8 * k)) & 0xFF);
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

Mat read_f32_file(const fs::path& path, Eigen::Index rows, Eigen::Index cols) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const auto expected = static_cast<std::size_t>(rows * cols) * 4;
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != expected) {
    throw InputError(path.string() + ": expected " + std::to_string(expected) + " bytes, found " +
                     std::to_string(bytes.size()));
  }
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) {
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[static_cast<std::size_t>(i) * 4 + k])) << (8 * k);
    }
    m.data()[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return m;
}

std::string checkpoint_id(const ModelParams& params) {
  std::uint64_t hash = 14695981039346656037ULL;
  for (const auto& [name, m] : params.tensors()) {
    for (char c : name) {
      hash ^= static_cast<unsigned char>(c);
      hash *= 1099511628211ULL;
    }
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(m.data()[i]));
      for (int k = 0; k < 4; ++k) {
        hash ^= (bits >> (8 * k)) & 0xFF;
        hash *= 1099511628211ULL;
      }
    }
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << hash;
  return out.str();
}

void save_checkpoint(const fs::path& dir, const ModelParams& params) {
  fs::create_directories(dir);
  const ModelShape& s = params.shape();
  json manifest;
  manifest["d"] = s.d;
  manifest["n"] = s.n;
  manifest["blocks"] = s.blocks;
  manifest["heads"] = s.heads;
  manifest["ffn_dim"] = s.ffn_dim;
  manifest["item_count"] = s.item_count;
  manifest["encoder_kind"] = to_string(s.kind);
  manifest["dropout"] = s.dropout;
  manifest["final_layer_norm"] = s.final_layer_norm;
  manifest["layer_norm_eps"] = s.layer_norm_eps;
  manifest["checkpoint_id"] = checkpoint_id(params);
  json list = json::array();
  for (const auto& [name, m] : params.tensors()) {
    const std::string file = name + ".f32";
    write_f32_file(dir / file, m);
    list.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"file", file}});
  }
  manifest["parameters"] = std::move(list);
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

ModelParams load_checkpoint(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("checkpoint manifest not found: " + manifest_path.string());
  json manifest;
  ModelShape s;
  try {
    in >> manifest;
    s.d = manifest.at("d").get<std::size_t>();
    s.n = manifest.at("n").get<std::size_t>();
    s.blocks = manifest.at("blocks").get<std::size_t>();
    s.heads = manifest.at("heads").get<std::size_t>();
    s.ffn_dim = manifest.value("ffn_dim", s.d);
    s.item_count = manifest.at("item_count").get<ItemId>();
    s.kind = encoder_kind_from_string(manifest.at("encoder_kind").get<std::string>());
    s.dropout = manifest.at("dropout").get<double>();
    s.final_layer_norm = manifest.value("final_layer_norm", true);
    s.layer_norm_eps = manifest.value("layer_norm_eps", 1e-12);
  } catch (const json::exception& e) {
    throw InputError(manifest_path.string() + ": " + e.what());
  }
  // Shapes come from a freshly initialized model of the declared shape.
  ModelParams params = ModelParams::initialize(s, 0);
  std::size_t seen = 0;
  for (const auto& entry : manifest.at("parameters")) {
    const auto name = entry.at("name").get<std::string>();
    const auto rows = entry.at("rows").get<Eigen::Index>();
    const auto cols = entry.at("cols").get<Eigen::Index>();
    auto it = params.tensors().find(name);
    if (it == params.tensors().end()) throw InputError("checkpoint has unexpected parameter '" + name + "'");
    if (it->second.rows() != rows || it->second.cols() != cols) {
      throw InputError("parameter '" + name + "' has shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                       ", manifest shape implies " + std::to_string(it->second.rows()) + "x" +
                       std::to_string(it->second.cols()));
    }
    it->second = read_f32_file(dir / entry.at("file").get<std::string>(), rows, cols);
    ++seen;
  }
  if (seen != params.tensors().size()) throw InputError("checkpoint is missing parameters");
  if (!params.all_finite()) throw NumericError("checkpoint contains non-finite values");
  return params;
}

}  // namespace icsrec
