#ifndef LIPI_H
#define LIPI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LipiStatus {
  LIPI_STATUS_OK = 0,
  LIPI_STATUS_NULL_POINTER = 1,
  LIPI_STATUS_INVALID_UTF8 = 2,
  LIPI_STATUS_INVALID_ARGUMENT = 3,
  /**
   * The run itself failed or did not complete.
   */
  LIPI_STATUS_PROTOCOL_ERROR = 4,
  LIPI_STATUS_PANIC = 5,
} LipiStatus;

/**
 * Opaque network handle.
 */
typedef struct LipiTopology LipiTopology;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Owned by the
 * library; do not free.
 */
const char *lipi_last_error(void);

/**
 * Builds a topology from a spelling such as `ring:8` or `geometric:24:300`.
 *
 * # Safety
 * `spec` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LipiStatus lipi_topology_new(const char *spec, uint64_t seed, struct LipiTopology **out);

/**
 * Parses the edge-list text format: the node count, then `u v [prob]` per line.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LipiStatus lipi_topology_parse(const char *text, struct LipiTopology **out);

/**
 * # Safety
 * `topo` must come from this library and not have been freed. NULL is ignored.
 */
void lipi_topology_free(struct LipiTopology *topo);

/**
 * # Safety
 * `topo` must be a live handle and `out` a valid pointer.
 */
enum LipiStatus lipi_topology_node_count(const struct LipiTopology *topo, uint32_t *out);

/**
 * Hop diameter; fails on a disconnected network.
 *
 * # Safety
 * `topo` must be a live handle and `out` a valid pointer.
 */
enum LipiStatus lipi_topology_diameter(const struct LipiTopology *topo, uint32_t *out);

/**
 * Key exchange plus one failure-free LiPI sum round. `secrets[i]` belongs
 * to node `i + 1`; `len` must equal the node count.
 *
 * # Safety
 * `topo` must be a live handle, `secrets` must point to `len` values and
 * `out_total` must be valid.
 */
enum LipiStatus lipi_sum_round(const struct LipiTopology *topo,
                               const uint64_t *secrets,
                               size_t len,
                               uint64_t seed,
                               uint64_t *out_total);

/**
 * Runs a JSON experiment config and returns the records as JSON lines.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out` a valid pointer.
 * The returned string must be released with [`lipi_string_free`].
 */
enum LipiStatus lipi_run_json(const char *config_json, char **out);

/**
 * # Safety
 * `s` must come from this library and not have been freed. NULL is ignored.
 */
void lipi_string_free(char *s);

/**
 * `base^exp mod modulus`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum LipiStatus lipi_mod_pow(uint64_t base, uint64_t exp, uint64_t modulus, uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LIPI_H */
