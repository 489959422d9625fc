#ifndef MIDWAY_H
#define MIDWAY_H

#include <stddef.h>
#include <stdint.h>

typedef enum MwStatus {
  MW_STATUS_OK = 0,
  MW_STATUS_NULL_ARGUMENT = 1,
  MW_STATUS_INVALID_ARGUMENT = 2,
  MW_STATUS_CONFIG = 3,
  MW_STATUS_IO = 4,
  MW_STATUS_FORMAT = 5,
  MW_STATUS_NUMERIC = 6,
  MW_STATUS_DATA = 7,
  MW_STATUS_BUFFER_TOO_SMALL = 8,
  MW_STATUS_PANIC = 9,
} MwStatus;

/**
 * Run configuration handle.
 */
typedef struct MwConfig MwConfig;

/**
 * Trained model loaded from a checkpoint.
 */
typedef struct MwModel MwModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *mw_last_error(void);

/**
 * Creates a configuration from a preset name ("toy" or "paper").
 */
enum MwStatus mw_config_new(const char *preset, struct MwConfig **out);

/**
 * Sets one dotted key. The configuration is unchanged on failure.
 */
enum MwStatus mw_config_set(struct MwConfig *cfg, const char *key, const char *value);

/**
 * Writes the 16-character configuration hash.
 */
enum MwStatus mw_config_hash(const struct MwConfig *cfg, char *buf, size_t len, size_t *needed);

void mw_config_free(struct MwConfig *cfg);

enum MwStatus mw_model_load(const char *path, struct MwModel **out);

/**
 * Input image side in pixels and patch grid side.
 */
enum MwStatus mw_model_dims(const struct MwModel *model, size_t *image_size, size_t *grid);

/**
 * Training step stored in the checkpoint.
 */
enum MwStatus mw_model_step(const struct MwModel *model, uint64_t *step);

void mw_model_free(struct MwModel *model);

/**
 * Perturbation heatmap of `source` (row-major token index) from frame `src`
 * into frame `tgt`. Frames are interleaved 8-bit RGB of `size`×`size`
 * pixels where `size` is the model image size. `scores` must hold
 * grid×grid values and receives cosine scores in row-major order.
 */
enum MwStatus mw_perturb(const struct MwModel *model,
                         const uint8_t *src,
                         const uint8_t *tgt,
                         size_t size,
                         size_t source,
                         size_t k,
                         uint64_t seed,
                         double *scores,
                         size_t scores_len);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* MIDWAY_H */
