#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "muxplm/demux.hpp"
#include "muxplm/mux.hpp"
#include "muxplm/objectives.hpp"

namespace muxplm {

enum class MuxKind { gaussian, contextual, none };
enum class DemuxKind { rsa, prefix, none };

std::string_view to_string(MuxKind k);
std::string_view to_string(DemuxKind k);
MuxKind parse_mux_kind(std::string_view s);
DemuxKind parse_demux_kind(std::string_view s);

struct ModelSpec {
  std::string size_name = "micro";
  ModelConfig config;
  MuxKind mux = MuxKind::gaussian;
  DemuxKind demux = DemuxKind::rsa;
  bool trainable_mux_keys = false;
  std::size_t num_classes = 2;
  std::size_t num_tags = 3;

  // none/none is the vanilla single-instance backbone and needs N = 1.
  bool vanilla() const { return mux == MuxKind::none; }
  void validate() const;
};

template <typename T>
struct MuxModel {
  ModelSpec spec;
  EncoderParams<T> encoder;
  MuxKeys<T> mux_keys;            // gaussian
  ContextualMuxParams<T> ctx_mux;  // contextual
  DemuxKeys<T> rsa;               // rsa
  DemuxMlp<T> prefix_mlp;         // prefix
  HeadParams<T> heads;

  std::size_t n() const { return spec.config.mux_width; }
  // Every tensor, trainable or not, under a stable name.
  void visit(const ParamVisitor<T>& fn);
  std::size_t parameter_count();
};

// Weights come from one stream seeded by init_seed; mux and demux keys use
// streams derived from it.
template <typename T>
MuxModel<T> init_model(const ModelSpec& spec, std::uint64_t init_seed);

struct ModelForwardOptions {
  bool train = false;
  Rng* rng = nullptr;
  bool capture = false;
  bool cls_only = false;  // demultiplex position 0 only
};

template <typename T>
struct ModelOutput {
  Tensor<T> demuxed;                       // [B×N×L×d], L = 1 when cls_only
  EncoderState<T> encoder;                 // backbone pass over B multiplexed rows
  std::vector<std::uint8_t> encoder_mask;  // [B×L_enc] key validity seen by the backbone
  std::size_t encoder_len = 0;
};

// tokens [B×N×L]; padding is recognised by the PAD id.
template <typename T>
ModelOutput<T> model_forward(const MuxModel<T>& model, std::span<const std::int32_t> tokens, std::size_t groups,
                             std::size_t seq_len, const ModelForwardOptions& options = {});

}  // namespace muxplm
