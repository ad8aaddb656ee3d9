#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "icsrec/autograd.hpp"
#include "icsrec/common.hpp"

namespace icsrec {

enum class EncoderKind { kAttention, kRecurrent };

std::string to_string(EncoderKind kind);
EncoderKind encoder_kind_from_string(const std::string& name);

struct ModelShape {
  std::size_t d = 64;
  std::size_t n = 50;
  std::size_t blocks = 2;
  std::size_t heads = 2;
  std::size_t ffn_dim = 64;
  ItemId item_count = 0;
  EncoderKind kind = EncoderKind::kAttention;
  double dropout = 0.5;
  bool final_layer_norm = true;
  double layer_norm_eps = 1e-12;

  void validate() const;
};

/// Named parameter tensors. Values are kept representable in 32-bit floats so
/// that a checkpoint round trip is exact.
class ModelParams {
 public:
  ModelParams() = default;

  /// Embeddings and weight matrices ~ N(0, init_std^2), biases 0, layer-norm
  /// scales 1. Row 0 of the item table (padding) is zero.
  static ModelParams initialize(const ModelShape& shape, std::uint64_t seed, double init_std = 0.02);

  const ModelShape& shape() const { return shape_; }
  const Mat& at(const std::string& name) const;
  Mat& at(const std::string& name);
  const std::map<std::string, Mat>& tensors() const { return tensors_; }
  std::map<std::string, Mat>& tensors() { return tensors_; }

  bool all_finite() const;
  /// Rounds every value to the nearest 32-bit float.
  void round_to_float();
  std::size_t parameter_count() const;

  friend bool operator==(const ModelParams& a, const ModelParams& b);

 private:
  ModelShape shape_;
  std::map<std::string, Mat> tensors_;
};

/// Eq. (3) output for one window.
struct SequenceEmbedding {
  Mat values;                       // n x d
  std::vector<std::uint8_t> valid;  // 1 where a real item sits
};

struct SequenceRepr {
  Mat hidden;  // n x d
  Vec intent;  // d
};

/// Left-pads each input's most recent n items with 0 into a batch * n id grid.
struct IdBatch {
  std::vector<ItemId> ids;
  std::vector<std::uint8_t> valid;
  std::size_t batch = 0;
  std::size_t n = 0;
};

IdBatch make_batch(std::span<const std::span<const ItemId>> inputs, std::size_t n);
std::vector<ItemId> left_pad(std::span<const ItemId> input, std::size_t n);

/// Parameters registered on a tape, either trainable or frozen.
class BoundParams {
 public:
  BoundParams(ad::Tape& tape, const ModelParams& params, bool trainable);

  ad::Var operator[](const std::string& name) const;
  const ModelShape& shape() const { return shape_; }
  /// Gradients of the tape's last backward() target, by parameter name.
  std::map<std::string, Mat> grads(const ad::Tape& tape) const;

 private:
  ModelShape shape_;
  std::map<std::string, ad::Var> vars_;
};

struct EncodedVars {
  ad::Var hidden;  // (batch * n) x d
  ad::Var intent;  // batch x d
};

ad::Var embed_on_tape(ad::Tape& tape, const BoundParams& params, const IdBatch& batch);

/// Runs the encoder selected by the shape's kind. `rng` drives dropout and is
/// only read when `train` is set.
EncodedVars encode_on_tape(ad::Tape& tape, const BoundParams& params, ad::Var emb,
                           std::span<const std::uint8_t> valid, std::size_t batch, bool train, Rng* rng);

EncodedVars forward(ad::Tape& tape, const BoundParams& params, const IdBatch& batch, bool train, Rng* rng);

/// Eval-mode intents for a list of windows, batched internally.
Mat encode_intents(const ModelParams& params, std::span<const std::span<const ItemId>> inputs,
                   std::size_t batch_size = 256);

SequenceEmbedding embed(const ModelParams& params, std::span<const ItemId> input_ids);

/// Causal self-attention encoder. Throws EmptyInputError without a valid position.
SequenceRepr encode(const ModelParams& params, const SequenceEmbedding& emb, bool train_mode = false,
                    Rng* rng = nullptr);

/// Gated recurrent encoder; params must have been initialized as kRecurrent.
SequenceRepr encode_recurrent(const ModelParams& params, const SequenceEmbedding& emb,
                              bool train_mode = false, Rng* rng = nullptr);

/// Checkpoint directory: manifest.json plus one little-endian float32 file per
/// parameter.
void save_checkpoint(const std::filesystem::path& dir, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& dir);

/// FNV-1a over the float32 image of every parameter, as 16 hex digits.
std::string checkpoint_id(const ModelParams& params);

void write_f32_file(const std::filesystem::path& path, const Mat& m);
Mat read_f32_file(const std::filesystem::path& path, Eigen::Index rows, Eigen::Index cols);

}  // namespace icsrec
