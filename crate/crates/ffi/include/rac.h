#ifndef RAC_H
#define RAC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum RacStatus {
  RAC_STATUS_OK = 0,
  // A required pointer argument was null.
  RAC_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  RAC_STATUS_INVALID_UTF8 = 2,
  // A JSON argument did not parse or had the wrong shape.
  RAC_STATUS_INVALID_JSON = 3,
  // A scenario or engine configuration was rejected.
  RAC_STATUS_CONFIG_ERROR = 4,
  // The engine failed (unregistered tool, log storage, ...).
  RAC_STATUS_ENGINE_ERROR = 5,
  // The run was rolled back and accepts no further calls.
  RAC_STATUS_TERMINATED = 6,
  // A Rust panic was caught at the boundary.
  RAC_STATUS_PANIC = 7,
} RacStatus;

// An engine driven by a host-supplied tool callback.
typedef struct RacEngineHandle RacEngineHandle;

// Where a tool callback writes its response.
typedef struct RacOutput RacOutput;

// A finished scenario run.
typedef struct RacRun RacRun;

// Executes one tool call. Returns 0 on success and non-zero on failure;
// either way the response goes through [`rac_output_set`].
typedef int32_t (*RacExecuteFn)(void *user_data,
                                const char *tool,
                                const char *params_json,
                                struct RacOutput *out);

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// The message of the last failed call on this thread, or null if none.
// Valid until the next failing call on this thread.
const char *rac_last_error_message(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must be null or a string returned by this library, freed once.
void rac_string_free(char *s);

// Loads a scenario from TOML source and runs it to completion.
// `seed_override` is used when `has_seed` is non-zero.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` must be valid for writes.
enum RacStatus rac_run_scenario(const char *toml,
                                int32_t has_seed,
                                uint64_t seed_override,
                                struct RacRun **out);

// The run report as a JSON object.
//
// # Safety
// `run` must be a live handle; `out` must be valid for writes.
enum RacStatus rac_run_report_json(const struct RacRun *run, char **out);

// The transaction log records of the run as a JSON array.
//
// # Safety
// `run` must be a live handle; `out` must be valid for writes.
enum RacStatus rac_run_records_json(const struct RacRun *run, char **out);

// The process exit code the CLI would use for this run: 0 success or
// clean rollback, 2 halted with uncompensated effects, 3 dirty rollback.
// Returns -1 for a null handle.
//
// # Safety
// `run` must be null or a live handle.
int32_t rac_run_exit_code(const struct RacRun *run);

// # Safety
// `run` must be null or a handle from [`rac_run_scenario`], freed once.
void rac_run_free(struct RacRun *run);

// Sets the callback's response. The string is copied. For a successful
// call it is the result JSON; for a failed one either a JSON object
// `{"code": ..., "message": ...}` or free text.
//
// # Safety
// `out` must be the pointer passed to the callback; `text` must be null
// or NUL-terminated.
void rac_output_set(struct RacOutput *out, const char *text);

// Creates an engine.
//
// - `tools_json`: array of MCP tool declarations the callback serves.
// - `config_json`: null, or an object with optional keys `api_config`,
//   `recovery` and `seed`.
// - `log_dir`: null keeps the log in memory; otherwise the log for
//   `run_id` is opened (and resumed) in that directory.
//
// # Safety
// String arguments must be null or NUL-terminated; `execute` must be safe
// to call with `user_data` for the life of the engine; `out` must be
// valid for writes.
enum RacStatus rac_engine_new(const char *run_id,
                              const char *tools_json,
                              const char *config_json,
                              const char *log_dir,
                              RacExecuteFn execute,
                              void *user_data,
                              struct RacEngineHandle **out);

// Invokes a tool through the engine. On `Ok`, `out_json` receives
// `{"kind": "result", "value": ...}` or, when recovery rolled the run
// back, `{"kind": "recovery", "summary": "..."}`.
//
// # Safety
// `engine` must be a live handle, strings NUL-terminated, `out_json`
// valid for writes.
enum RacStatus rac_engine_invoke(struct RacEngineHandle *engine,
                                 const char *tool,
                                 const char *params_json,
                                 char **out_json);

// Rolls back every completed call and returns the summary text.
//
// # Safety
// As for [`rac_engine_invoke`].
enum RacStatus rac_engine_rollback(struct RacEngineHandle *engine,
                                   const char *reason,
                                   char **out_summary);

// The engine's transaction log records as a JSON array.
//
// # Safety
// As for [`rac_engine_invoke`].
enum RacStatus rac_engine_records_json(struct RacEngineHandle *engine, char **out_json);

// # Safety
// `engine` must be null or a handle from [`rac_engine_new`], freed once.
void rac_engine_free(struct RacEngineHandle *engine);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RAC_H */
