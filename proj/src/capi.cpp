#include "muxplm.h"

#include <cstdlib>
#include <cstring>
#include <string>

#include <json.hpp>

#include "muxplm/config.hpp"
#include "muxplm/corpus.hpp"
#include "muxplm/errors.hpp"
#include "muxplm/runner.hpp"

struct muxplm_config {
  muxplm::RunConfig cfg;
};

struct muxplm_model {
  muxplm::TrainState state;
};

namespace {

thread_local std::string last_error;

struct NullArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

void need(const void* p, const char* what) {
  if (!p) throw NullArgument(std::string(what) + " is null");
}

template <typename Fn>
int guard(Fn&& fn) {
  try {
    fn();
    last_error.clear();
    return MUXPLM_OK;
  } catch (const NullArgument& e) {
    last_error = e.what();
    return MUXPLM_ERR_ARGUMENT;
  } catch (const muxplm::DimensionError& e) {
    last_error = e.what();
    return MUXPLM_ERR_DIMENSION;
  } catch (const muxplm::ValueError& e) {
    last_error = e.what();
    return MUXPLM_ERR_VALUE;
  } catch (const muxplm::ConfigError& e) {
    last_error = e.what();
    return MUXPLM_ERR_CONFIG;
  } catch (const muxplm::FormatError& e) {
    last_error = e.what();
    return MUXPLM_ERR_FORMAT;
  } catch (const muxplm::StageOrderError& e) {
    last_error = e.what();
    return MUXPLM_ERR_STAGE_ORDER;
  } catch (const muxplm::Error& e) {
    last_error = e.what();
    return MUXPLM_ERR_RUNTIME;
  } catch (const std::filesystem::filesystem_error& e) {
    last_error = e.what();
    return MUXPLM_ERR_RUNTIME;
  } catch (const std::exception& e) {
    last_error = e.what();
    return MUXPLM_ERR_INTERNAL;
  } catch (...) {
    last_error = "unknown exception";
    return MUXPLM_ERR_INTERNAL;
  }
}

char* dup(const std::string& s) {
  auto* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (!p) throw std::bad_alloc();
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

}  // namespace

extern "C" {

const char* muxplm_last_error(void) { return last_error.c_str(); }

const char* muxplm_status_name(int status) {
  switch (status) {
    case MUXPLM_OK: return "ok";
    case MUXPLM_ERR_ARGUMENT: return "argument";
    case MUXPLM_ERR_DIMENSION: return "dimension";
    case MUXPLM_ERR_VALUE: return "value";
    case MUXPLM_ERR_CONFIG: return "config";
    case MUXPLM_ERR_FORMAT: return "format";
    case MUXPLM_ERR_STAGE_ORDER: return "stage-order";
    case MUXPLM_ERR_RUNTIME: return "runtime";
    case MUXPLM_ERR_INTERNAL: return "internal";
    default: return "unknown";
  }
}

const char* muxplm_version(void) {
  static const std::string v = muxplm::library_version();
  return v.c_str();
}

void muxplm_string_free(char* s) { std::free(s); }

int muxplm_config_new(muxplm_config** out) {
  return guard([&] {
    need(out, "out");
    *out = new muxplm_config();
  });
}

void muxplm_config_free(muxplm_config* cfg) { delete cfg; }

int muxplm_config_set(muxplm_config* cfg, const char* key, const char* value) {
  return guard([&] {
    need(cfg, "config");
    need(key, "key");
    need(value, "value");
    cfg->cfg.set(key, value);
  });
}

int muxplm_config_load(muxplm_config* cfg, const char* path) {
  return guard([&] {
    need(cfg, "config");
    need(path, "path");
    cfg->cfg.load_file(path);
  });
}

int muxplm_config_get(const muxplm_config* cfg, const char* key, char** value) {
  return guard([&] {
    need(cfg, "config");
    need(key, "key");
    need(value, "value");
    *value = dup(cfg->cfg.get(key));
  });
}

int muxplm_config_keys(char** json) {
  return guard([&] {
    need(json, "json");
    auto arr = nlohmann::json::array();
    for (const auto& k : muxplm::config_keys()) {
      arr.push_back({{"name", k.name}, {"kind", k.kind}, {"default", k.fallback}, {"help", k.help}});
    }
    *json = dup(arr.dump());
  });
}

int muxplm_commands(char** json) {
  return guard([&] {
    need(json, "json");
    *json = dup(nlohmann::json(muxplm::command_names()).dump());
  });
}

int muxplm_run(const muxplm_config* cfg, const char* command, muxplm_log_fn log, void* user, char** summary) {
  return guard([&] {
    need(cfg, "config");
    need(command, "command");
    muxplm::LogFn sink;
    if (log) {
      sink = [log, user](muxplm::LogLevel level, const std::string& msg) { log(static_cast<int>(level), msg.c_str(), user); };
    }
    const auto result = muxplm::run_command(command, cfg->cfg, sink);
    if (summary) *summary = dup(result);
  });
}

int muxplm_model_create(const muxplm_config* cfg, muxplm_model** out) {
  return guard([&] {
    need(cfg, "config");
    need(out, "out");
    const auto spec = muxplm::model_spec(cfg->cfg);
    *out = new muxplm_model{muxplm::new_train_state(spec, muxplm::seeds(cfg->cfg))};
  });
}

int muxplm_model_load(const char* path, muxplm_model** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = new muxplm_model{muxplm::load_checkpoint(path)};
  });
}

int muxplm_model_save(const muxplm_model* model, const char* path) {
  return guard([&] {
    need(model, "model");
    need(path, "path");
    muxplm::save_checkpoint(model->state, path);
  });
}

void muxplm_model_free(muxplm_model* model) { delete model; }

int muxplm_model_info(const muxplm_model* model, char** json) {
  return guard([&] {
    need(model, "model");
    need(json, "json");
    auto& m = const_cast<muxplm::MuxModel<float>&>(model->state.model);
    const auto& c = m.spec.config;
    nlohmann::json j;
    j["size"] = m.spec.size_name;
    j["n"] = c.mux_width;
    j["hidden"] = c.hidden_size;
    j["layers"] = c.num_layers;
    j["heads"] = c.num_heads;
    j["max_seq_len"] = c.max_seq_len;
    j["mux"] = std::string(muxplm::to_string(m.spec.mux));
    j["demux"] = std::string(muxplm::to_string(m.spec.demux));
    j["num_classes"] = m.spec.num_classes;
    j["parameters"] = m.parameter_count();
    j["stages"] = nlohmann::json::array();
    for (const auto& r : model->state.history) {
      j["stages"].push_back({{"stage", std::string(muxplm::to_string(r.stage))},
                             {"objective", std::string(muxplm::to_string(r.objective))},
                             {"steps", r.steps}});
    }
    *json = dup(j.dump());
  });
}

int muxplm_model_forward(const muxplm_model* model, const int32_t* tokens, size_t groups, size_t seq_len, float* out,
                         size_t out_len) {
  return guard([&] {
    need(model, "model");
    need(tokens, "tokens");
    need(out, "out");
    const auto& m = model->state.model;
    const std::size_t count = groups * m.n() * seq_len;
    const std::size_t want = count * m.spec.config.hidden_size;
    if (out_len != want) {
      throw muxplm::DimensionError("output buffer holds " + std::to_string(out_len) + " floats, forward produces " + std::to_string(want));
    }
    const auto r = muxplm::model_forward(m, std::span<const std::int32_t>(tokens, count), groups, seq_len);
    const auto& d = r.demuxed.data();
    std::copy(d.begin(), d.end(), out);
  });
}

int muxplm_model_classify(const muxplm_model* model, const char* text, size_t seq_len, int32_t* out_class) {
  return guard([&] {
    need(model, "model");
    need(text, "text");
    need(out_class, "out_class");
    auto tokens = muxplm::tokenize(text);
    muxplm::Rng rng(0);
    const auto cls = muxplm::ensemble_predict(model->state.model, tokens, {}, seq_len, muxplm::EnsembleOptions{1, false}, rng);
    *out_class = static_cast<int32_t>(cls);
  });
}

int muxplm_pareto(const double* throughput, const double* accuracy, size_t count, size_t* out_idx, size_t* out_count) {
  return guard([&] {
    need(throughput, "throughput");
    need(accuracy, "accuracy");
    need(out_idx, "out_idx");
    need(out_count, "out_count");
    std::vector<muxplm::ParetoPoint> pts(count);
    for (std::size_t i = 0; i < count; ++i) pts[i] = {throughput[i], accuracy[i], std::to_string(i)};
    const auto front = muxplm::pareto_frontier(pts);
    for (std::size_t i = 0; i < front.size(); ++i) out_idx[i] = std::stoul(front[i].label);
    *out_count = front.size();
  });
}

}  // extern "C"
