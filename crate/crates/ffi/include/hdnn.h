/* C API for the hdnn highway-network training toolkit. */

#ifndef HDNN_H
#define HDNN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible C-API call.
 */
typedef enum HdnnStatus {
  HDNN_STATUS_OK = 0,
  /**
   * Bad flags, configuration or architecture.
   */
  HDNN_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Unreadable or malformed data and model files.
   */
  HDNN_STATUS_DATA_ERROR = 2,
  /**
   * A verification run executed and did not pass.
   */
  HDNN_STATUS_VERIFICATION_FAILED = 3,
  HDNN_STATUS_NULL_POINTER = 4,
  /**
   * An internal panic was caught at the boundary.
   */
  HDNN_STATUS_PANIC = 5,
} HdnnStatus;

/**
 * A loaded frame dataset (opaque).
 */
typedef struct HdnnDataset HdnnDataset;

/**
 * A model checkpoint: architecture plus parameters (opaque).
 */
typedef struct HdnnModel HdnnModel;

#endif /* HDNN_H */
