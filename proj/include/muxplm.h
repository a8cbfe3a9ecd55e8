#ifndef MUXPLM_H
#define MUXPLM_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define MUXPLM_API __declspec(dllexport)
#else
#define MUXPLM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum muxplm_status {
  MUXPLM_OK = 0,
  MUXPLM_ERR_ARGUMENT = 1,     /* null handle or pointer */
  MUXPLM_ERR_DIMENSION = 2,
  MUXPLM_ERR_VALUE = 3,
  MUXPLM_ERR_CONFIG = 4,
  MUXPLM_ERR_FORMAT = 5,       /* malformed checkpoint or input file */
  MUXPLM_ERR_STAGE_ORDER = 6,
  MUXPLM_ERR_RUNTIME = 7,      /* any other library or I/O failure */
  MUXPLM_ERR_INTERNAL = 8      /* unexpected exception */
} muxplm_status;

typedef enum muxplm_log_level {
  MUXPLM_LOG_ERROR = 0,
  MUXPLM_LOG_WARN = 1,
  MUXPLM_LOG_INFO = 2,
  MUXPLM_LOG_DEBUG = 3
} muxplm_log_level;

typedef void (*muxplm_log_fn)(int level, const char* message, void* user);

typedef struct muxplm_config muxplm_config;
typedef struct muxplm_model muxplm_model;

/* Message of the last failing call on this thread; "" after a success. */
MUXPLM_API const char* muxplm_last_error(void);
MUXPLM_API const char* muxplm_status_name(int status);
MUXPLM_API const char* muxplm_version(void);

/* Strings returned through char** outputs are released with this. */
MUXPLM_API void muxplm_string_free(char* s);

MUXPLM_API int muxplm_config_new(muxplm_config** out);
MUXPLM_API void muxplm_config_free(muxplm_config* cfg);
MUXPLM_API int muxplm_config_set(muxplm_config* cfg, const char* key, const char* value);
MUXPLM_API int muxplm_config_load(muxplm_config* cfg, const char* path);
MUXPLM_API int muxplm_config_get(const muxplm_config* cfg, const char* key, char** value);
/* JSON array of {name, kind, default, help}. */
MUXPLM_API int muxplm_config_keys(char** json);
/* JSON array of command names accepted by muxplm_run. */
MUXPLM_API int muxplm_commands(char** json);

/* Runs one command; summary (optional) receives a JSON object. */
MUXPLM_API int muxplm_run(const muxplm_config* cfg, const char* command, muxplm_log_fn log, void* user,
                          char** summary);

/* Fresh model from a configuration, or a model loaded from a checkpoint. */
MUXPLM_API int muxplm_model_create(const muxplm_config* cfg, muxplm_model** out);
MUXPLM_API int muxplm_model_load(const char* path, muxplm_model** out);
MUXPLM_API int muxplm_model_save(const muxplm_model* model, const char* path);
MUXPLM_API void muxplm_model_free(muxplm_model* model);
/* JSON object: size, n, hidden, layers, mux, demux, parameters, stages. */
MUXPLM_API int muxplm_model_info(const muxplm_model* model, char** json);

/* tokens [groups x n x seq_len] of ids in [0, 276); out receives the
   demultiplexed hidden states [groups x n x seq_len x hidden]. */
MUXPLM_API int muxplm_model_forward(const muxplm_model* model, const int32_t* tokens, size_t groups, size_t seq_len,
                                    float* out, size_t out_len);
/* Sentence class of UTF-8 text, with the text filling every slot. */
MUXPLM_API int muxplm_model_classify(const muxplm_model* model, const char* text, size_t seq_len, int32_t* out_class);

/* Indices of the non-dominated points, ascending by throughput. out_idx needs
   room for count entries. */
MUXPLM_API int muxplm_pareto(const double* throughput, const double* accuracy, size_t count, size_t* out_idx,
                             size_t* out_count);

#ifdef __cplusplus
}
#endif

#endif
