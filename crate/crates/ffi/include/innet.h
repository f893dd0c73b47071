#ifndef INNET_H
#define INNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum InnetStatus {
  INNET_STATUS_OK = 0,
  INNET_STATUS_NULL_POINTER = 1,
  INNET_STATUS_INVALID_ARGUMENT = 2,
  INNET_STATUS_BUFFER_TOO_SMALL = 3,
  INNET_STATUS_WIRE = 4,
  INNET_STATUS_SWITCH = 5,
  INNET_STATUS_CONFIG = 6,
  INNET_STATUS_RUN = 7,
  INNET_STATUS_PANIC = 8,
} InnetStatus;

// Opaque run configuration.
typedef struct InnetConfig InnetConfig;

// Opaque aggregation switch.
typedef struct InnetSwitch InnetSwitch;

// Decoded packet header. For data kinds `ack` and `credit` are zero; for
// heartbeat kinds `len` is zero.
typedef struct InnetPacketInfo {
  // 0 param data, 1 gradient data, 2 param heartbeat, 3 gradient heartbeat.
  uint8_t kind;
  uint8_t worker_id;
  uint32_t seq_num;
  size_t len;
  uint32_t ack;
  uint32_t credit;
} InnetPacketInfo;

// Receives each packet the switch emits. `port` is the destination worker
// id, or -1 for the optimizer. The bytes are only valid during the call.
typedef void (*InnetEmitFn)(void *ctx, int32_t port, const uint8_t *bytes, size_t len);

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or NULL. Valid until
// the next call into the library from the same thread.
const char *innet_last_error(void);

// Library version as a static NUL-terminated string.
const char *innet_version(void);

// Elements carried by one data packet.
size_t innet_elems_per_packet(void);

// Converts `n` floats to fixed point. `clamped` may be NULL.
//
// # Safety
// `input` and `output` must point to `n` valid elements.
enum InnetStatus innet_to_fixed(const float *input,
                                size_t n,
                                uint32_t frac_bits,
                                uint32_t workers,
                                int32_t *output,
                                size_t *clamped);

// Converts `n` fixed-point integers back to floats.
//
// # Safety
// `input` and `output` must point to `n` valid elements.
enum InnetStatus innet_from_fixed(const int32_t *input,
                                  size_t n,
                                  uint32_t frac_bits,
                                  float *output);

// Serializes a packet. `values` holds `info.len` elements for data kinds.
// `written` receives the encoded length; with a short buffer it receives
// the required size and [`InnetStatus::BufferTooSmall`] is returned.
//
// # Safety
// `info` and `written` must be valid; `values` must hold `info.len`
// elements and `out` must hold `cap` bytes.
enum InnetStatus innet_packet_encode(const struct InnetPacketInfo *info,
                                     const int32_t *values,
                                     uint8_t *out,
                                     size_t cap,
                                     size_t *written);

// Parses a packet. Data values are copied into `values` (capacity `cap`
// elements); `info.len` tells how many there are.
//
// # Safety
// `bytes` must hold `len` bytes, `info` must be valid and `values` must
// hold `cap` elements.
enum InnetStatus innet_packet_decode(const uint8_t *bytes,
                                     size_t len,
                                     struct InnetPacketInfo *info,
                                     int32_t *values,
                                     size_t cap);

// # Safety
// `out` must be a valid pointer; the handle is released with
// [`innet_switch_free`].
enum InnetStatus innet_switch_new(uint32_t workers,
                                  uint32_t window,
                                  uint32_t leader,
                                  struct InnetSwitch **out);

// # Safety
// `sw` must come from [`innet_switch_new`] and not be used afterwards.
void innet_switch_free(struct InnetSwitch *sw);

// Feeds one encoded packet to the switch and reports every packet it emits
// through `emit`.
//
// # Safety
// `sw` must be a live handle and `bytes` must hold `len` bytes. `emit` is
// called synchronously with `ctx`.
enum InnetStatus innet_switch_handle(struct InnetSwitch *sw,
                                     const uint8_t *bytes,
                                     size_t len,
                                     InnetEmitFn emit,
                                     void *ctx);

// Counters of a switch, in the order aggregates emitted, shadow
// re-emissions, duplicates absorbed.
//
// # Safety
// `sw` must be a live handle and `out` must hold three elements.
enum InnetStatus innet_switch_counters(const struct InnetSwitch *sw, uint64_t *out);

// A configuration with default values.
struct InnetConfig *innet_config_new(void);

// # Safety
// `cfg` must come from [`innet_config_new`] and not be used afterwards.
void innet_config_free(struct InnetConfig *cfg);

// Sets one `key = value` entry.
//
// # Safety
// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
enum InnetStatus innet_config_set(struct InnetConfig *cfg, const char *key, const char *value);

// Trains on the simulated fabric, writing results under `out_dir`.
// `final_loss` may be NULL.
//
// # Safety
// `cfg` must be a live handle and `out_dir` a NUL-terminated path.
enum InnetStatus innet_train_sim(const struct InnetConfig *cfg,
                                 const char *out_dir,
                                 double *final_loss);

// Runs the single-process reference, writing results under `out_dir`.
//
// # Safety
// As for [`innet_train_sim`].
enum InnetStatus innet_oracle(const struct InnetConfig *cfg,
                              const char *out_dir,
                              double *final_loss);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INNET_H */
