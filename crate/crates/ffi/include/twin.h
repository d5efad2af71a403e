#ifndef TWIN_H
#define TWIN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TwinStatus {
  TWIN_STATUS_OK = 0,
  TWIN_STATUS_NULL_ARGUMENT = 1,
  TWIN_STATUS_INVALID_UTF8 = 2,
  // Configuration text failed to parse or validate.
  TWIN_STATUS_CONFIG = 3,
  // A command line was malformed or used a non-command topic.
  TWIN_STATUS_INVALID_COMMAND = 4,
  // A snapshot document failed to parse.
  TWIN_STATUS_SNAPSHOT = 5,
  // No telemetry is waiting.
  TWIN_STATUS_EMPTY = 6,
  // A panic was caught at the boundary.
  TWIN_STATUS_INTERNAL = 7,
} TwinStatus;

// Opaque session handle.
typedef struct TwinSession TwinSession;

typedef struct TwinPose {
  double x;
  double y;
  double heading;
} TwinPose;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread. Owned by the library;
// valid until the next failing call on the same thread.
const char *twin_last_error(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void twin_string_free(char *s);

// Creates a session. `config_toml` may be null for the built-in config.
//
// # Safety
// `config_toml` must be null or a NUL-terminated string; `out` must be writable.
enum TwinStatus twin_session_new(const char *config_toml, uint64_t seed, struct TwinSession **out);

// Destroys a session. Null is ignored.
//
// # Safety
// `s` must come from `twin_session_new` and not have been freed.
void twin_session_free(struct TwinSession *s);

// Advances `ticks` fixed steps, queueing delivered telemetry for polling.
//
// # Safety
// `s` must be a live session handle.
enum TwinStatus twin_session_step(struct TwinSession *s, uint32_t ticks);

// Publishes one command record (`{"topic": ..., "payload": ...}`) at the current sim time.
//
// # Safety
// `s` must be a live session handle; `line` a NUL-terminated string.
enum TwinStatus twin_session_publish(struct TwinSession *s, const char *line);

// Pops the oldest queued telemetry record as a JSON line, or returns
// `TWIN_STATUS_EMPTY`. Free the string with `twin_string_free`.
//
// # Safety
// `s` must be a live session handle; `out` writable.
enum TwinStatus twin_session_poll(struct TwinSession *s, char **out);

// Requests a scenario reset through the command bus.
//
// # Safety
// `s` must be a live session handle.
enum TwinStatus twin_session_reset(struct TwinSession *s);

// World state as a TOML document. Free with `twin_string_free`.
//
// # Safety
// `s` must be a live session handle; `out` writable.
enum TwinStatus twin_session_snapshot(struct TwinSession *s, char **out);

// Replaces the world state with a document from `twin_session_snapshot`.
//
// # Safety
// `s` must be a live session handle; `doc` a NUL-terminated string.
enum TwinStatus twin_session_restore(struct TwinSession *s, const char *doc);

// # Safety
// `s` must be a live session handle; `out` writable.
enum TwinStatus twin_session_pose(struct TwinSession *s, struct TwinPose *out);

// Current sim time in nanoseconds.
//
// # Safety
// `s` must be a live session handle; `out` writable.
enum TwinStatus twin_session_time_ns(struct TwinSession *s, uint64_t *out);

// Hex SHA-256 over all telemetry delivered so far. Free with `twin_string_free`.
//
// # Safety
// `s` must be a live session handle; `out` writable.
enum TwinStatus twin_session_telemetry_hash(struct TwinSession *s, char **out);

// Rounds `angle` (radians) to the nearest multiple of `step`. Returns NaN
// for a non-positive or non-finite step.
double twin_quantize_joint(double angle, double step);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TWIN_H */
