// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradcheck.hpp"
#include "muxplm/benchlab.hpp"
#include "muxplm/config.hpp"
#include "muxplm/demux.hpp"
#include "muxplm/model.hpp"
#include "muxplm/mux.hpp"
#include "muxplm/objectives.hpp"
#include "muxplm/runner.hpp"
#include "muxplm/trainer.hpp"
#include "muxplm/vocab.hpp"

using namespace muxplm;
using muxplm::testing::grad_check;
using muxplm::testing::random_tensor;
using T64 = Tensor<double>;
using V = std::vector<T64>;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = true;
  std::string summary;
};

void note(const std::string& line) {
  std::printf("    %s\n", line.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + static_cast<std::size_t>(rng.below(hi - lo + 1)); }

std::vector<std::int32_t> random_bytes(std::size_t count, Rng& rng, std::int32_t limit = vocab::kByteCount) {
  std::vector<std::int32_t> t(count);
  for (auto& v : t) v = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(limit)));
  return t;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "muxplm_acceptance" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------- 1

ModelConfig layer_config(std::size_t d, std::size_t n) {
  ModelConfig c;
  c.num_layers = 1;
  c.hidden_size = d;
  c.ffn_size = 2 * d;
  c.num_heads = 2;
  c.head_size = d / 2;
  c.max_seq_len = 16;
  c.vocab_size = vocab::kSize;
  c.mux_width = n;
  c.dropout = 0.0;
  c.attention_dropout = 0.0;
  return c;
}

template <typename P>
void jitter(P& params, Rng& rng, double scale) {
  params.visit("", [&](const std::string&, T64& t) {
    for (auto& v : t.mutable_data()) v += scale * rng.normal();
  });
}

struct GradCase {
  std::string name;
  // Builds one random instance: the function under test and its inputs.
  std::function<std::pair<testing::Fn, V>(Rng&)> make;
  double h = 1e-5;
};

std::vector<GradCase> grad_cases() {
  std::vector<GradCase> cases;
  auto add = [&](std::string name, auto make, double h = 1e-5) { cases.push_back({std::move(name), make, h}); };

  add("matmul", [](Rng& r) {
    const auto m = pick(r, 1, 4), k = pick(r, 1, 4), n = pick(r, 1, 4);
    return std::pair{testing::Fn([](const V& in) { return diff::matmul(in[0], in[1]); }), V{random_tensor({m, k}, r), random_tensor({k, n}, r)}};
  });
  add("matmul_bt", [](Rng& r) {
    const auto m = pick(r, 1, 4), k = pick(r, 1, 4), n = pick(r, 1, 4);
    return std::pair{testing::Fn([](const V& in) { return diff::matmul_bt(in[0], in[1]); }), V{random_tensor({m, k}, r), random_tensor({n, k}, r)}};
  });
  add("linear", [](Rng& r) {
    const auto b = pick(r, 1, 3), m = pick(r, 1, 3), k = pick(r, 1, 4), n = pick(r, 1, 4);
    return std::pair{testing::Fn([](const V& in) { return diff::linear(in[0], in[1], &in[2]); }),
                     V{random_tensor({b, m, k}, r), random_tensor({k, n}, r), random_tensor({n}, r)}};
  });
  add("linear_bt", [](Rng& r) {
    const auto b = pick(r, 1, 3), m = pick(r, 1, 3), k = pick(r, 1, 4), n = pick(r, 1, 4);
    return std::pair{testing::Fn([](const V& in) { return diff::linear_bt(in[0], in[1], &in[2]); }),
                     V{random_tensor({b, m, k}, r), random_tensor({n, k}, r), random_tensor({n}, r)}};
  });
  add("add", [](Rng& r) {
    const diff::Shape s{pick(r, 1, 4), pick(r, 1, 4)};
    return std::pair{testing::Fn([](const V& in) { return diff::add(in[0], in[1]); }), V{random_tensor(s, r), random_tensor(s, r)}};
  });
  add("hadamard", [](Rng& r) {
    const diff::Shape s{pick(r, 1, 4), pick(r, 1, 4)};
    return std::pair{testing::Fn([](const V& in) { return diff::hadamard(in[0], in[1]); }), V{random_tensor(s, r), random_tensor(s, r)}};
  });
  add("scale", [](Rng& r) {
    const double f = 4.0 * r.uniform() - 2.0;
    return std::pair{testing::Fn([f](const V& in) { return diff::scale(in[0], f); }), V{random_tensor({pick(r, 1, 6)}, r)}};
  });
  add("add_rows", [](Rng& r) {
    const auto m = pick(r, 1, 4), n = pick(r, 1, 4);
    return std::pair{testing::Fn([](const V& in) { return diff::add_rows(in[0], in[1]); }), V{random_tensor({m, n}, r), random_tensor({n}, r)}};
  });
  add("mul_rows", [](Rng& r) {
    const auto m = pick(r, 1, 4), n = pick(r, 1, 4);
    return std::pair{testing::Fn([](const V& in) { return diff::mul_rows(in[0], in[1]); }), V{random_tensor({m, n}, r), random_tensor({n}, r)}};
  });
  add("softmax", [](Rng& r) {
    const auto axis = pick(r, 0, 2);
    return std::pair{testing::Fn([axis](const V& in) { return diff::softmax(in[0], axis); }),
                     V{random_tensor({pick(r, 1, 3), pick(r, 1, 3), pick(r, 1, 4)}, r)}};
  });
  add("layer_norm", [](Rng& r) {
    const auto m = pick(r, 1, 3), n = pick(r, 2, 6);
    return std::pair{testing::Fn([](const V& in) { return diff::layer_norm(in[0], in[1], in[2], 1e-12); }),
                     V{random_tensor({m, n}, r), random_tensor({n}, r), random_tensor({n}, r)}};
  });
  add("gelu", [](Rng& r) {
    return std::pair{testing::Fn([](const V& in) { return diff::gelu(in[0]); }), V{random_tensor({pick(r, 1, 12)}, r, -4, 4)}};
  });
  add("cross_entropy", [](Rng& r) {
    const auto rows = pick(r, 1, 5), classes = pick(r, 2, 6);
    std::vector<std::int32_t> t(rows);
    for (auto& v : t) v = r.bernoulli(0.2) ? diff::kIgnoreIndex : static_cast<std::int32_t>(r.below(classes));
    t[0] = static_cast<std::int32_t>(r.below(classes));
    return std::pair{testing::Fn([t](const V& in) { return diff::cross_entropy(in[0], t); }), V{random_tensor({rows, classes}, r)}};
  });
  add("bce_with_logits", [](Rng& r) {
    const auto n = pick(r, 1, 8);
    std::vector<std::int8_t> labels(n);
    for (auto& v : labels) v = static_cast<std::int8_t>(static_cast<int>(r.below(3)) - 1);
    labels[0] = 1;
    return std::pair{testing::Fn([labels](const V& in) { return diff::bce_with_logits(in[0], labels); }), V{random_tensor({n}, r)}};
  });
  add("embedding", [](Rng& r) {
    const auto rows = pick(r, 2, 6), d = pick(r, 1, 4), a = pick(r, 1, 3), b = pick(r, 1, 3);
    auto ids = random_bytes(a * b, r, static_cast<std::int32_t>(rows));
    return std::pair{testing::Fn([ids, a, b](const V& in) { return diff::embedding(in[0], ids, {a, b}); }), V{random_tensor({rows, d}, r)}};
  });
  add("add_positions", [](Rng& r) {
    const auto b = pick(r, 1, 3), l = pick(r, 1, 4), d = pick(r, 1, 4);
    return std::pair{testing::Fn([](const V& in) { return diff::add_positions(in[0], in[1]); }),
                     V{random_tensor({b, l, d}, r), random_tensor({l + pick(r, 0, 3), d}, r)}};
  });
  add("reshape", [](Rng& r) {
    const auto m = pick(r, 1, 4), n = pick(r, 1, 4);
    return std::pair{testing::Fn([m, n](const V& in) { return diff::reshape(in[0], {n, m}); }), V{random_tensor({m, n}, r)}};
  });
  add("swap_adjacent", [](Rng& r) {
    const auto axis = pick(r, 0, 2);
    return std::pair{testing::Fn([axis](const V& in) { return diff::swap_adjacent(in[0], axis); }),
                     V{random_tensor({pick(r, 1, 3), pick(r, 1, 3), pick(r, 1, 3), pick(r, 1, 2)}, r)}};
  });
  add("mean_axis", [](Rng& r) {
    const auto axis = pick(r, 0, 2);
    return std::pair{testing::Fn([axis](const V& in) { return diff::mean_axis(in[0], axis); }),
                     V{random_tensor({pick(r, 1, 3), pick(r, 1, 3), pick(r, 1, 4)}, r)}};
  });
  add("slice_axis", [](Rng& r) {
    const auto n = pick(r, 2, 5);
    const auto start = pick(r, 0, n - 1), len = pick(r, 1, n - start);
    return std::pair{testing::Fn([start, len](const V& in) { return diff::slice_axis(in[0], 1, start, len); }),
                     V{random_tensor({pick(r, 1, 3), n, pick(r, 1, 3)}, r)}};
  });
  add("sum", [](Rng& r) {
    return std::pair{testing::Fn([](const V& in) { return diff::sum(in[0]); }), V{random_tensor({pick(r, 1, 4), pick(r, 1, 4)}, r)}};
  });
  add("mean", [](Rng& r) {
    return std::pair{testing::Fn([](const V& in) { return diff::mean(in[0]); }), V{random_tensor({pick(r, 1, 4), pick(r, 1, 4)}, r)}};
  });
  add("hadamard_keys", [](Rng& r) {
    const auto n = pick(r, 1, 3), d = pick(r, 1, 4);
    return std::pair{testing::Fn([](const V& in) { return diff::hadamard_keys(in[0], in[1]); }),
                     V{random_tensor({pick(r, 1, 2), n, pick(r, 1, 3), d}, r), random_tensor({n, d}, r)}};
  });
  add("keyed_mean", [](Rng& r) {
    const auto n = pick(r, 1, 3), d = pick(r, 1, 4);
    return std::pair{testing::Fn([](const V& in) { return diff::keyed_mean(in[0], in[1]); }),
                     V{random_tensor({pick(r, 1, 2), n, pick(r, 1, 3), d}, r), random_tensor({n, d}, r)}};
  });
  add("pair_add", [](Rng& r) {
    const auto b = pick(r, 1, 2), l = pick(r, 1, 3), n = pick(r, 1, 3), d = pick(r, 1, 3);
    const bool shared = r.bernoulli(0.5);
    auto c = shared ? random_tensor({n, d}, r) : random_tensor({b, n, d}, r);
    return std::pair{testing::Fn([](const V& in) { return diff::pair_add(in[0], in[1]); }), V{random_tensor({b, l, d}, r), c}};
  });
  add("attention", [](Rng& r) {
    const auto p = pick(r, 1, 2), l = pick(r, 1, 4), heads = pick(r, 1, 2), hs = pick(r, 1, 3);
    auto mask = std::make_shared<std::vector<std::uint8_t>>(p * l);
    for (std::size_t i = 0; i < mask->size(); ++i) (*mask)[i] = (i % l == 0) || r.bernoulli(0.7);
    const double drop = r.bernoulli(0.5) ? 0.3 : 0.0;
    const std::uint64_t seed = r.next_u64();
    const diff::Shape s{p, l, heads * hs};
    return std::pair{testing::Fn([mask, heads, drop, seed](const V& in) {
                       Rng dr(seed);  // same dropout mask on every evaluation
                       diff::AttentionOptions o;
                       o.heads = heads;
                       o.key_mask = *mask;
                       o.dropout = drop;
                       o.rng = &dr;
                       return diff::attention(in[0], in[1], in[2], o);
                     }),
                     V{random_tensor(s, r), random_tensor(s, r), random_tensor(s, r)}};
  });
  add("dropout", [](Rng& r) {
    const std::uint64_t seed = r.next_u64();
    const double p = 0.1 + 0.5 * r.uniform();
    return std::pair{testing::Fn([seed, p](const V& in) {
                       Rng dr(seed);
                       return diff::dropout(in[0], p, dr);
                     }),
                     V{random_tensor({pick(r, 1, 12)}, r)}};
  });

  add("multiplex", [](Rng& r) {
    const auto n = pick(r, 1, 4), l = pick(r, 1, 3), d = pick(r, 1, 4);
    const bool batched = r.bernoulli(0.5);
    auto x = batched ? random_tensor({2, n, l, d}, r) : random_tensor({n, l, d}, r);
    return std::pair{testing::Fn([](const V& in) {
                       MuxKeys<double> k;
                       k.keys = in[1];
                       return multiplex(in[0], k).h_mux;
                     }),
                     V{x, random_tensor({n, d}, r)}};
  });
  add("contextual_multiplex", [](Rng& r) {
    const auto n = pick(r, 1, 3), l = pick(r, 1, 3);
    auto config = layer_config(4, n);
    auto params = init_contextual_mux<double>(config, r, r.next_u64());
    jitter(params, r, 0.3);
    return std::pair{testing::Fn([params, config](const V& in) {
                       auto p = params;
                       p.trans_ctx.wq = in[1];
                       p.trans_inst.w_ff1 = in[2];
                       p.keys.keys = in[3];
                       return contextual_multiplex(in[0], p, config).h_mux;
                     }),
                     V{random_tensor({n, l, 4}, r, -1, 1), params.trans_ctx.wq, params.trans_inst.w_ff1, params.keys.keys}};
  });
  add("rsa_demultiplex", [](Rng& r) {
    const auto n = pick(r, 1, 4), l = pick(r, 1, 3), d = pick(r, 2, 4);
    auto dk = init_demux_keys<double>(n, d, r.next_u64());
    jitter(dk.mlp, r, 0.4);
    auto h = r.bernoulli(0.5) ? random_tensor({l, d}, r) : random_tensor({2, l, d}, r);
    return std::pair{testing::Fn([dk](const V& in) {
                       auto k = dk;
                       k.keys = in[1];
                       k.mlp.w1 = in[2];
                       k.mlp.b2 = in[3];
                       return rsa_demultiplex(in[0], k);
                     }),
                     V{h, dk.keys, dk.mlp.w1, dk.mlp.b2}};
  });
  add("prefix_demultiplex", [](Rng& r) {
    const auto n = pick(r, 1, 4), l = pick(r, 1, 3), d = pick(r, 2, 4);
    auto dk = init_demux_keys<double>(n, d, r.next_u64());
    jitter(dk.mlp, r, 0.4);
    return std::pair{testing::Fn([mlp = dk.mlp, n](const V& in) {
                       auto m = mlp;
                       m.w1 = in[1];
                       m.w2 = in[2];
                       return prefix_demultiplex(in[0], n, m);
                     }),
                     V{random_tensor({n + l, d}, r), dk.mlp.w1, dk.mlp.w2}};
  });

  // Losses over demultiplexed states [N×L×d] and a small token table.
  struct LossSetup {
    std::size_t n, l, d, v;
    std::vector<std::int32_t> originals, seq_labels, tag_labels;
    CorruptionOutcome masked, replaced;
    HeadParams<double> heads;
  };
  auto loss_setup = [](Rng& r) {
    auto s = std::make_shared<LossSetup>();
    s->n = pick(r, 1, 3), s->l = pick(r, 2, 4), s->d = pick(r, 2, 4), s->v = pick(r, 3, 7);
    s->originals = random_bytes(s->n * s->l, r, static_cast<std::int32_t>(s->v));
    s->masked = mask_tokens(s->originals, 0.5, r.next_u64());
    s->replaced = random_replace(s->originals, 0.5, r.next_u64());
    s->heads = init_heads<double>(s->d, s->v, 3, 4, r);
    jitter(s->heads, r, 0.5);
    s->seq_labels = random_bytes(s->n, r, 3);
    s->tag_labels = random_bytes(s->n * s->l, r, 4);
    s->tag_labels[0] = diff::kIgnoreIndex;
    return s;
  };
  auto loss_case = [&](std::string name, auto body) {
    add(std::move(name), [loss_setup, body](Rng& r) {
      auto s = loss_setup(r);
      return std::pair{testing::Fn([s, body](const V& in) { return body(*s, in[0], in[1]); }),
                       V{random_tensor({s->n, s->l, s->d}, r), random_tensor({s->v, s->d}, r)}};
    });
  };
  loss_case("retrieval_loss", [](const LossSetup& s, const T64& h, const T64& t) { return retrieval_loss(h, s.originals, t, s.heads); });
  loss_case("mlm_loss", [](const LossSetup& s, const T64& h, const T64& t) {
    if (s.masked.touched_count() == 0) return retrieval_loss(h, s.originals, t, s.heads);
    return mlm_loss(h, s.masked, t, s.heads);
  });
  loss_case("rtd_loss", [](const LossSetup& s, const T64& h, const T64&) { return rtd_loss(h, s.replaced, s.heads); });
  loss_case("mixed_pretrain_loss", [](const LossSetup& s, const T64& h, const T64& t) {
    auto ret = retrieval_loss(h, s.originals, t, s.heads);
    auto mlm = s.masked.touched_count() ? mlm_loss(h, s.masked, t, s.heads) : ret;
    return mixed_pretrain_loss(mlm, ret, 0.35);
  });
  loss_case("sequence_cls_loss", [](const LossSetup& s, const T64& h, const T64&) {
    return diff::cross_entropy(sequence_logits(h, s.heads), s.seq_labels);
  });
  loss_case("token_cls_loss", [](const LossSetup& s, const T64& h, const T64&) {
    auto logits = token_logits(h, s.heads);
    return diff::cross_entropy(diff::reshape(logits, {s.n * s.l, 4}), s.tag_labels);
  });

  // Forward pass, demultiplexing and retrieval loss of one priming step,
  // differentiated with respect to every model tensor.
  add("prime_step", [](Rng& r) {
    static const std::pair<MuxKind, DemuxKind> kinds[] = {{MuxKind::gaussian, DemuxKind::rsa},
                                                          {MuxKind::contextual, DemuxKind::prefix},
                                                          {MuxKind::gaussian, DemuxKind::prefix},
                                                          {MuxKind::contextual, DemuxKind::rsa}};
    const auto [mux, demux] = kinds[r.below(4)];
    const auto n = pick(r, 1, 3), l = pick(r, 2, 3);
    ModelSpec spec;
    spec.size_name = "tiny";
    spec.config = layer_config(4, n);
    spec.mux = mux;
    spec.demux = demux;
    spec.trainable_mux_keys = true;
    auto model = std::make_shared<MuxModel<double>>(init_model<double>(spec, r.next_u64()));
    V params;
    model->visit([&](const std::string&, T64& t) { params.push_back(t); });
    auto tokens = random_bytes(n * l, r);
    tokens[0] = vocab::kCls;
    return std::pair{testing::Fn([model, tokens, n, l](const V&) {
                       auto d = model_forward(*model, tokens, 1, l).demuxed;
                       return retrieval_loss(d, tokens, model->encoder.token_embedding, model->heads);
                     }),
                     params};
  }, 1e-6);
  return cases;
}

Verdict criterion1() {
  const auto t0 = Clock::now();
  constexpr std::size_t kInstances = 20;
  Verdict v;
  double worst = 0.0;
  std::size_t cases = 0;
  for (const auto& c : grad_cases()) {
    Rng rng(derive_seed(0x9c, std::hash<std::string>{}(c.name)));
    double max_err = 0.0;
    std::size_t checked = 0;
    for (std::size_t i = 0; i < kInstances; ++i) {
      auto [fn, inputs] = c.make(rng);
      const auto r = grad_check(fn, std::move(inputs), c.h, rng.next_u64());
      max_err = std::max(max_err, r.max_rel_error);
      checked += r.checked;
    }
    const bool ok = max_err < 1e-4 && checked > 0;
    if (!ok) note(fmt("%s: max relative error %.3g over %zu entries", c.name.c_str(), max_err, checked));
    v.pass = v.pass && ok;
    worst = std::max(worst, max_err);
    ++cases;
  }
  const double secs = since(t0);
  v.pass = v.pass && secs < 120.0;
  v.summary = fmt("%zu operations x %zu random instances, worst relative error %.2e, %.1f s (limits 1e-4, 120 s)", cases,
                  kInstances, worst, secs);
  return v;
}

// ---------------------------------------------------------------- 2

Verdict criterion2() {
  const auto t0 = Clock::now();
  Verdict v;
  auto fail = [&](const std::string& what) {
    if (v.pass) note(what);
    v.pass = false;
  };
  Rng rng(0x5a);
  std::size_t trials = 0;
  for (; trials < 50; ++trials) {
    const auto n = pick(rng, 1, 8), l = pick(rng, 1, 6), d = pick(rng, 1, 8), b = pick(rng, 1, 3);
    auto keys = sample_mux_keys<double>(n, d, rng.next_u64());
    auto dk = init_demux_keys<double>(n, d, rng.next_u64());

    // Shape identity through both multiplexers and both demultiplexers.
    auto x = random_tensor({n, l, d}, rng, -1, 1, false);
    auto xb = random_tensor({b, n, l, d}, rng, -1, 1, false);
    if (rsa_demultiplex(multiplex(x, keys), dk).shape() != x.shape()) fail("gaussian/rsa round-trip shape");
    if (rsa_demultiplex(multiplex(xb, keys).h_mux, dk).shape() != xb.shape()) fail("batched round-trip shape");
    if (d % 2 == 0) {
      auto config = layer_config(d, n);
      auto ctx = init_contextual_mux<double>(config, rng, rng.next_u64());
      if (rsa_demultiplex(contextual_multiplex(x, ctx, config), dk).shape() != x.shape()) fail("contextual/rsa round-trip shape");
    }
    auto enc = random_tensor({n + l, d}, rng, -1, 1, false);
    if (prefix_demultiplex(enc, n, dk.mlp).shape() != x.shape()) fail("prefix round-trip shape");

    // Joint instance/key permutation leaves the superposition unchanged.
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    std::vector<double> xs(x.numel()), ks(n * d);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(x.data().begin() + perm[i] * l * d, l * d, xs.begin() + i * l * d);
      std::copy_n(keys.keys.data().begin() + perm[i] * d, d, ks.begin() + i * d);
    }
    MuxKeys<double> pk;
    pk.keys = T64::from({n, d}, ks);
    const auto a = multiplex(x, keys).h_mux.to_vector();
    const auto p = multiplex(T64::from({n, l, d}, xs), pk).h_mux.to_vector();
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (std::abs(a[i] - p[i]) > 1e-12 * std::max(1.0, std::abs(a[i]))) {
        fail("joint permutation symmetry");
        break;
      }
    }

    // Permuting demux key rows permutes the output slices.
    auto h = multiplex(x, keys);
    auto out = rsa_demultiplex(h, dk).to_vector();
    auto dkp = dk;
    std::vector<double> dks(n * d);
    for (std::size_t i = 0; i < n; ++i) std::copy_n(dk.keys.data().begin() + perm[i] * d, d, dks.begin() + i * d);
    dkp.keys = T64::from({n, d}, dks);
    auto pout = rsa_demultiplex(h, dkp).to_vector();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t e = 0; e < l * d; ++e) {
        const double want = out[perm[i] * l * d + e];
        if (std::abs(pout[i * l * d + e] - want) > 1e-12 * std::max(1.0, std::abs(want))) {
          fail("key-index equivariance");
          break;
        }
      }
    }

    // All-ones keys reduce the multiplexer to the instance mean.
    MuxKeys<double> ones;
    ones.keys = T64::full({n, d}, 1.0);
    const auto m = multiplex(x, ones).h_mux.to_vector();
    for (std::size_t j = 0; j < l * d; ++j) {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += x.data()[i * l * d + j];
      mean /= static_cast<double>(n);
      if (std::abs(m[j] - mean) > 1e-12 * std::max(1.0, std::abs(mean))) {
        fail("all-ones key mean");
        break;
      }
    }
  }

  // Prefix i carries epsilon_i at position i and epsilon_pad elsewhere, ahead
  // of the unchanged body.
  std::size_t prefixes = 0;
  for (std::size_t n = 1; n <= vocab::kMaxMuxWidth; ++n) {
    const auto pb = make_prefix_block(n);
    const std::size_t body = 5;
    auto tokens = random_bytes(2 * n * body, rng);
    const auto out = attach_prefix(tokens, body, pb, body + n);
    if (out.size() != 2 * n * (n + body)) fail("prefix length");
    for (std::size_t g = 0; g < 2; ++g) {
      for (std::size_t i = 0; i < n; ++i) {
        const auto* row = out.data() + (g * n + i) * (n + body);
        for (std::size_t k = 0; k < n; ++k) {
          const std::int32_t want = k == i ? vocab::epsilon(i) : vocab::kEpsilonPad;
          if (row[k] != want) fail(fmt("prefix pattern at N=%zu", n));
        }
        if (!std::equal(row + n, row + n + body, tokens.begin() + (g * n + i) * body)) fail("prefix body");
        ++prefixes;
      }
    }
  }
  const double secs = since(t0);
  v.pass = v.pass && secs < 60.0;
  v.summary = fmt("%zu random geometries, %zu prefix rows for N=1..16, %.1f s (limit 60 s)", trials, prefixes, secs);
  return v;
}

// ---------------------------------------------------------------- 3

RunConfig priming_config() {
  RunConfig c;
  c.set("size", "micro");
  c.set("n", "2");
  c.set("seq_len", "64");
  c.set("batch", "8");
  c.set("lr", "1e-3");
  c.set("steps", "2000");
  c.set("warmup", "200");
  c.set("log_every", "250");
  c.set("seed", "3");
  return c;
}

Verdict criterion3() {
  const auto t0 = Clock::now();
  const auto cfg = priming_config();
  const auto train = train_dataset(cfg, TaskKind::text);
  const auto held = eval_dataset(cfg, TaskKind::text);
  auto state = new_train_state(model_spec(cfg), seeds(cfg));
  const auto plan = stage_plan(cfg, Stage::prime);
  const auto before = evaluate(state.model, held, Objective::retrieval, 8, 64, 1);
  run_stage(state, plan, train, [](const MetricRecord& r) {
    note(fmt("step %zu: train loss %.3f, accuracy %.3f", r.step, r.loss, r.accuracy));
  });
  const auto after = evaluate(state.model, held, Objective::retrieval, 8, 64, 1);
  const double chance = 1.0 / static_cast<double>(vocab::kSize);
  Verdict v;
  v.pass = after.accuracy > 50.0 * chance && after.accuracy - before.accuracy >= 0.40;
  v.summary = fmt("micro N=2 L=64, %zu steps: held-out retrieval accuracy %.4f (untrained %.4f, 50x chance %.4f), "
                  "gain %.1f points (need 40), %.0f s",
                  plan.steps, after.accuracy, before.accuracy, 50.0 * chance, 100.0 * (after.accuracy - before.accuracy), since(t0));
  return v;
}

// ---------------------------------------------------------------- 4

Verdict criterion4() {
  const auto t0 = Clock::now();
  const std::vector<std::size_t> widths{2, 5, 10};
  const std::vector<std::uint64_t> trial_seeds{1, 2, 3};
  std::vector<double> means;
  for (auto n : widths) {
    double total = 0.0;
    std::string per_seed;
    for (auto s : trial_seeds) {
      RunConfig cfg;
      cfg.set("size", "micro");
      cfg.set("layers", "2");
      cfg.set("hidden", "64");
      cfg.set("heads", "2");
      cfg.set("ffn", "256");
      cfg.set("n", std::to_string(n));
      cfg.set("seq_len", "32");
      cfg.set("batch", "8");
      cfg.set("lr", "1e-3");
      cfg.set("steps", "1500");
      cfg.set("dropout", "0");
      cfg.set("attention_dropout", "0");
      cfg.set("seed", std::to_string(s));
      const auto train = train_dataset(cfg, TaskKind::text);
      const auto held = eval_dataset(cfg, TaskKind::text);
      auto state = new_train_state(model_spec(cfg), seeds(cfg));
      run_stage(state, stage_plan(cfg, Stage::prime), train);
      const auto r = evaluate(state.model, held, Objective::retrieval, 4, 32, s);
      total += r.accuracy;
      per_seed += fmt(" %.4f", r.accuracy);
    }
    means.push_back(total / static_cast<double>(trial_seeds.size()));
    note(fmt("N=%zu retrieval accuracy per seed:%s, mean %.4f", n, per_seed.c_str(), means.back()));
  }
  constexpr double kTol = 0.01;
  Verdict v;
  v.pass = means[0] >= means[1] - kTol && means[1] >= means[2] - kTol;
  v.summary = fmt("matched 1500-step budgets, mean held-out retrieval accuracy N=2 %.4f, N=5 %.4f, N=10 %.4f "
                  "(1-point tolerance), %.0f s",
                  means[0], means[1], means[2], since(t0));
  return v;
}

// ---------------------------------------------------------------- 5

Verdict criterion5() {
  const auto t0 = Clock::now();
  const auto dir = scratch("bench");
  RunConfig cfg;
  cfg.set("size", "bench");
  cfg.set("out_dir", dir.string());
  cfg.set("bench_widths", "2,5,10");
  cfg.set("bench_prefix", "true");
  const auto s = nlohmann::json::parse(run_command("bench", cfg, [](LogLevel, const std::string& m) { note(m); }));
  const auto& sp = s["speedup"];
  const double n2 = sp["rsa_N2"]["ratio"], n5 = sp["rsa_N5"]["ratio"], n10 = sp["rsa_N10"]["ratio"];
  const double p10 = sp["prefix_N10"]["ratio"];
  Verdict v;
  v.pass = n2 >= 1.6 && n2 <= 2.1 && n5 >= 3.5 && n5 <= 5.0 && n10 >= 6.0 && n10 <= 10.0 && n10 > p10;
  v.summary = fmt("batch 128, length 128, 200 batches, 3 trials: speedup N=2 %.2f [1.6,2.1], N=5 %.2f [3.5,5.0], "
                  "N=10 %.2f [6,10]; prefix N=10 %.2f (rsa must exceed), %.0f s",
                  n2, n5, n10, p10, since(t0));
  return v;
}

// ---------------------------------------------------------------- 6

Verdict criterion6() {
  const auto t0 = Clock::now();
  Verdict v;

  // Averaging identical slot logits never changes the argmax.
  Rng rng(0xe6);
  std::size_t rows = 0;
  for (; rows < 20000; ++rows) {
    const auto classes = pick(rng, 2, 8), n = pick(rng, 1, 16);
    std::vector<double> logits(classes);
    const bool integral = rows % 2 == 0;  // integral rows produce ties
    for (auto& x : logits) x = integral ? static_cast<double>(rng.below(4)) : 20.0 * rng.uniform() - 10.0;
    std::vector<double> slots;
    for (std::size_t i = 0; i < n; ++i) slots.insert(slots.end(), logits.begin(), logits.end());
    if (argmax(average_logits(slots, classes)) != argmax(logits)) {
      if (v.pass) note("argmax changed under identical-logit averaging");
      v.pass = false;
    }
  }

  const std::vector<std::uint64_t> trial_seeds{1, 2, 3};
  double single = 0.0, ensembled = 0.0;
  std::size_t consistent = 0, predictions = 0;
  for (auto s : trial_seeds) {
    RunConfig cfg;
    cfg.set("size", "micro");
    cfg.set("layers", "2");
    cfg.set("hidden", "64");
    cfg.set("heads", "2");
    cfg.set("ffn", "256");
    cfg.set("n", "4");
    cfg.set("seq_len", "24");
    cfg.set("batch", "8");
    cfg.set("lr", "1e-3");
    cfg.set("corpus_size", "2000");
    cfg.set("eval_size", "400");
    cfg.set("seed", std::to_string(s));
    auto state = new_train_state(model_spec(cfg, 2, 3), seeds(cfg));
    const auto text = train_dataset(cfg, TaskKind::text);
    for (auto [stage, steps] : {std::pair{Stage::prime, "800"}, {Stage::pretrain, "300"}, {Stage::finetune, "1500"}}) {
      cfg.set("steps", steps);
      run_stage(state, stage_plan(cfg, stage), stage == Stage::finetune ? train_dataset(cfg, TaskKind::seq) : text);
    }
    const auto held = eval_dataset(cfg, TaskKind::seq);
    const std::size_t n = state.model.n();
    const auto plain = ensemble_evaluate(state.model, held, 24, EnsembleOptions{n, true}, s, 8);
    const auto dup = ensemble_evaluate(state.model, held, 24, EnsembleOptions{1, true}, s, 8);
    note(fmt("seed %llu: distinct instances %.4f, duplicated instance %.4f", static_cast<unsigned long long>(s), plain.accuracy,
             dup.accuracy));
    single += plain.accuracy;
    ensembled += dup.accuracy;

    // The returned class is the argmax of the averaged slot logits.
    Rng pr(s);
    for (std::size_t i = 0; i < 50; ++i) {
      std::vector<double> averaged;
      const auto cls = ensemble_predict(state.model, held.examples[i].tokens, {}, 24, EnsembleOptions{1, true}, pr, &averaged);
      consistent += cls == argmax(averaged);
      ++predictions;
    }
  }
  single /= static_cast<double>(trial_seeds.size());
  ensembled /= static_cast<double>(trial_seeds.size());
  v.pass = v.pass && consistent == predictions && ensembled >= single - 0.005;
  v.summary = fmt("N=4 over 3 seeds: duplicated-instance accuracy %.4f vs distinct %.4f (allowed drop 0.5 points); "
                  "%zu identical-logit rows and %zu/%zu model predictions argmax-consistent, %.0f s",
                  ensembled, single, rows, consistent, predictions, since(t0));
  return v;
}

// ---------------------------------------------------------------- 7

Verdict criterion7() {
  const auto t0 = Clock::now();
  Verdict v;
  double worst_uniform = 0.0, worst_onehot = 0.0, worst_const = 0.0;
  for (std::size_t len = 1; len <= 128; len = len * 2 + 1) {
    const std::size_t rows = 2, heads = 3;
    std::vector<float> uniform(rows * heads * len * len, 1.0f / static_cast<float>(len));
    std::vector<float> onehot(uniform.size(), 0.0f);
    for (std::size_t r = 0; r < rows * heads * len; ++r) onehot[r * len + r % len] = 1.0f;
    const std::vector<std::uint8_t> valid(rows * len, 1);
    worst_uniform = std::max(worst_uniform, std::abs(attention_entropy(uniform, rows, heads, len, valid) - std::log(static_cast<double>(len))));
    worst_onehot = std::max(worst_onehot, std::abs(attention_entropy(onehot, rows, heads, len, valid)));
    for (float c : {-2.5f, 0.0f, 0.75f, 3.0f}) {
      const std::size_t width = 4;
      std::vector<float> hidden(rows * len * width, c);
      worst_const = std::max(worst_const, std::abs(mean_abs_activation(hidden, rows, len, width, valid) - std::abs(static_cast<double>(c))));
    }
  }
  v.pass = worst_uniform < 1e-6 && worst_onehot < 1e-12 && worst_const < 1e-6;

  RunConfig base;
  base.set("seq_len", "8");
  base.set("eval_size", "8");
  const auto sample = eval_dataset(base, TaskKind::text);
  std::string sizes;
  for (const char* size : {"micro", "bench", "small", "base", "large"}) {
    for (const char* mux : {"gaussian", "none"}) {
      RunConfig cfg = base;
      cfg.set("size", size);
      cfg.set("mux", mux);
      cfg.set("demux", std::string(mux) == "none" ? "none" : "rsa");
      if (std::string(mux) == "none") cfg.set("n", "1");
      const auto spec = model_spec(cfg);
      const auto model = init_model<float>(spec, 1);
      const auto p = muxology(model, sample, 8, 2);
      const bool ok = p.activation.size() == spec.config.num_layers && p.entropy.size() == spec.config.num_layers;
      if (!ok) note(fmt("%s/%s profile has %zu entries for %zu layers", size, mux, p.activation.size(), spec.config.num_layers));
      v.pass = v.pass && ok;
    }
    sizes += std::string(sizes.empty() ? "" : ",") + size;
  }
  v.summary = fmt("uniform entropy error %.2e, one-hot %.2e, constant activation error %.2e; profile lengths match for %s, %.0f s",
                  worst_uniform, worst_onehot, worst_const, sizes.c_str(), since(t0));
  return v;
}

// ---------------------------------------------------------------- 8

Verdict criterion8() {
  Rng rng(0x8a);
  std::size_t matched = 0;
  const std::size_t sets = 1000;
  for (std::size_t s = 0; s < sets; ++s) {
    const auto count = pick(rng, 1, 40);
    const bool grid = s % 2 == 0;  // grid coordinates force ties
    std::vector<ParetoPoint> pts(count);
    for (std::size_t i = 0; i < count; ++i) {
      pts[i].throughput = grid ? 1.0 + static_cast<double>(rng.below(6)) : 0.1 + 100.0 * rng.uniform();
      pts[i].accuracy = grid ? static_cast<double>(rng.below(6)) : 100.0 * rng.uniform();
      pts[i].label = std::to_string(i);
    }
    // O(n^2) oracle: a point survives unless another beats it on both axes.
    std::vector<ParetoPoint> oracle;
    for (const auto& p : pts) {
      bool dominated = false;
      for (const auto& q : pts) dominated = dominated || (q.throughput > p.throughput && q.accuracy > p.accuracy);
      if (!dominated) oracle.push_back(p);
    }
    std::stable_sort(oracle.begin(), oracle.end(), [](const auto& a, const auto& b) { return a.throughput < b.throughput; });
    const auto got = pareto_frontier(pts);
    const bool same = got.size() == oracle.size() &&
                      std::equal(got.begin(), got.end(), oracle.begin(), [](const auto& a, const auto& b) {
                        return a.throughput == b.throughput && a.accuracy == b.accuracy && a.label == b.label;
                      });
    matched += same;
  }
  return {matched == sets, fmt("%zu/%zu random point sets match the brute-force dominance filter exactly", matched, sets)};
}

// ---------------------------------------------------------------- 9

Verdict criterion9() {
  const auto t0 = Clock::now();
  std::vector<fs::path> dirs{scratch("det_a"), scratch("det_b")};
  for (const auto& dir : dirs) {
    RunConfig cfg;
    cfg.set("size", "micro");
    cfg.set("layers", "2");
    cfg.set("hidden", "64");
    cfg.set("heads", "2");
    cfg.set("ffn", "256");
    cfg.set("seq_len", "32");
    cfg.set("batch", "8");
    cfg.set("steps", "60");
    cfg.set("log_every", "5");
    cfg.set("seed", "11");
    cfg.set("out_dir", dir.string());
    run_command("prime", cfg);
  }
  const auto ca = slurp(dirs[0] / "prime.ckpt"), cb = slurp(dirs[1] / "prime.ckpt");
  const auto ma = slurp(dirs[0] / "prime.metrics.jsonl"), mb = slurp(dirs[1] / "prime.metrics.jsonl");
  const bool ok = !ca.empty() && ca == cb && !ma.empty() && ma == mb;
  return {ok, fmt("two 60-step prime runs with dropout and prefetching: checkpoints %zu bytes %s, metric logs %zu bytes %s, %.0f s",
                  ca.size(), ca == cb ? "identical" : "DIFFER", ma.size(), ma == mb ? "identical" : "DIFFER", since(t0))};
}

// ---------------------------------------------------------------- 10

bool within_3sigma(std::size_t count, std::size_t trials, double p, std::string& detail, const char* what) {
  const double mean = static_cast<double>(trials) * p;
  const double sigma = std::sqrt(static_cast<double>(trials) * p * (1.0 - p));
  const double z = (static_cast<double>(count) - mean) / sigma;
  detail += fmt("%s %zu/%zu (z=%+.2f) ", what, count, trials, z);
  return std::abs(z) <= 3.0;
}

Verdict criterion10() {
  constexpr std::size_t kPositions = 10000;
  constexpr double kRate = 0.15;
  Rng rng(0x10);
  const auto tokens = random_bytes(kPositions, rng);
  std::string detail;
  bool ok = true;

  const auto masked = mask_tokens(tokens, kRate, 101);
  std::size_t selected = 0, as_mask = 0, as_random = 0, kept = 0;
  for (std::size_t i = 0; i < kPositions; ++i) {
    if (!masked.touched[i]) {
      ok = ok && masked.corrupted[i] == tokens[i] && masked.mlm_labels[i] == diff::kIgnoreIndex;
      continue;
    }
    ++selected;
    ok = ok && masked.mlm_labels[i] == tokens[i];
    if (masked.corrupted[i] == vocab::kMask) ++as_mask;
    else if (masked.corrupted[i] == tokens[i]) ++kept;
    else ++as_random;
  }
  // A random replacement equals the original with probability 1/256.
  const double same = 1.0 / 256.0;
  ok = within_3sigma(selected, kPositions, kRate, detail, "masked") && ok;
  ok = within_3sigma(as_mask, selected, 0.8, detail, "[MASK]") && ok;
  ok = within_3sigma(as_random, selected, 0.1 * (1.0 - same), detail, "random") && ok;
  ok = within_3sigma(kept, selected, 0.1 + 0.1 * same, detail, "kept") && ok;

  const auto replaced = random_replace(tokens, kRate, 202);
  std::size_t chosen = 0, changed = 0;
  for (std::size_t i = 0; i < kPositions; ++i) {
    chosen += replaced.touched[i] != 0;
    changed += replaced.rtd_labels[i] == 1;
    ok = ok && (replaced.rtd_labels[i] == 1) == (replaced.corrupted[i] != tokens[i]);
  }
  ok = within_3sigma(chosen, kPositions, kRate, detail, "replaced") && ok;
  ok = within_3sigma(changed, chosen, 1.0 - same, detail, "changed") && ok;
  detail.pop_back();
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"gradient suite", criterion1},      {"shape and symmetry", criterion2},  {"priming learns", criterion3},
      {"N-degradation direction", criterion4}, {"throughput", criterion5},    {"ensembling direction", criterion6},
      {"muxology exactness", criterion7},  {"pareto oracle", criterion8},       {"determinism", criterion9},
      {"corruption statistics", criterion10},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    std::printf("criterion %d (%s): running\n", id, criteria[i].first.c_str());
    std::fflush(stdout);
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    std::printf("criterion %d (%s): %s: %s\n", id, criteria[i].first.c_str(), v.pass ? "PASS" : "FAIL", v.summary.c_str());
    std::fflush(stdout);
    failures += !v.pass;
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
