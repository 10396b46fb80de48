#ifndef DEEPMON_H
#define DEEPMON_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DeepmonStatus {
  DEEPMON_STATUS_OK = 0,
  DEEPMON_STATUS_NULL_ARGUMENT = 1,
  DEEPMON_STATUS_INVALID_UTF8 = 2,
  DEEPMON_STATUS_LOAD_FAILED = 3,
  DEEPMON_STATUS_NOT_FOUND = 4,
  DEEPMON_STATUS_INVALID_INPUT = 5,
  DEEPMON_STATUS_INTERNAL = 6,
} DeepmonStatus;

typedef enum DeepmonMode {
  DEEPMON_MODE_KN = 0,
  DEEPMON_MODE_M = 1,
  DEEPMON_MODE_G_PR = 2,
} DeepmonMode;

// Opaque plan library.
typedef struct DeepmonLibrary DeepmonLibrary;

// Opaque trained goal predictor.
typedef struct DeepmonPredictor DeepmonPredictor;

// Opaque scenario with its library.
typedef struct DeepmonScenario DeepmonScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *deepmon_last_error(void);

// Library version as a static string.
const char *deepmon_version(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void deepmon_string_free(char *s);

// Loads a plan library manifest.
//
// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum DeepmonStatus deepmon_library_load(const char *path, struct DeepmonLibrary **out);

// # Safety
// `lib` must come from `deepmon_library_load` and not have been freed.
void deepmon_library_free(struct DeepmonLibrary *lib);

// Number of entries in the library.
//
// # Safety
// `lib` must be a live handle; `out` must be writable.
enum DeepmonStatus deepmon_library_len(const struct DeepmonLibrary *lib, size_t *out);

// Solves one entry; writes the actions, one per line.
//
// # Safety
// `lib` must be a live handle, `entry` nul-terminated, `out` writable.
enum DeepmonStatus deepmon_plan(const struct DeepmonLibrary *lib, const char *entry, char **out);

// Best-matching library entry for a goal state written as
// `Atom(a, b); Atom(c)`. Writes the entry name.
//
// # Safety
// `lib` must be a live handle, `goal` nul-terminated, `out` writable.
enum DeepmonStatus deepmon_match(const struct DeepmonLibrary *lib, const char *goal, char **out);

// Loads a trained predictor checkpoint for the library's vocabulary.
//
// # Safety
// `lib` must be a live handle, `path` nul-terminated, `out` writable.
enum DeepmonStatus deepmon_predictor_load(const struct DeepmonLibrary *lib,
                                          const char *path,
                                          struct DeepmonPredictor **out);

// # Safety
// `net` must come from `deepmon_predictor_load` and not have been freed.
void deepmon_predictor_free(struct DeepmonPredictor *net);

// Top-`k` next goals for a task and state, as a JSON array of
// `{"rank", "log_prob", "goal": [atoms]}` objects.
//
// # Safety
// Handles must be live, strings nul-terminated, `out` writable.
enum DeepmonStatus deepmon_predict(const struct DeepmonPredictor *net,
                                   const struct DeepmonLibrary *lib,
                                   const char *task,
                                   const char *state,
                                   size_t k,
                                   char **out);

// Loads a scenario file and everything it references.
//
// # Safety
// `path` must be nul-terminated; `out` must be writable.
enum DeepmonStatus deepmon_scenario_load(const char *path, struct DeepmonScenario **out);

// # Safety
// `sc` must come from `deepmon_scenario_load` and not have been freed.
void deepmon_scenario_free(struct DeepmonScenario *sc);

// Runs one trial with the default monitor configuration. `net` may be
// null except in `DEEPMON_MODE_G_PR`. Writes 1 or 0 to `success` and, if
// `trace` is not null, the JSON-lines trace.
//
// # Safety
// Handles must be live; `success` writable; `trace` null or writable.
enum DeepmonStatus deepmon_run_trial(const struct DeepmonScenario *sc,
                                     enum DeepmonMode mode,
                                     const struct DeepmonPredictor *net,
                                     uint64_t seed,
                                     int32_t *success,
                                     char **trace);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEEPMON_H */
