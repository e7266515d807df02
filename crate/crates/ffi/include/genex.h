#ifndef GENEX_H
#define GENEX_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GenexStatus {
  GENEX_STATUS_OK = 0,
  GENEX_STATUS_NULL_ARGUMENT = 1,
  GENEX_STATUS_INVALID_UTF8 = 2,
  GENEX_STATUS_INVALID_INPUT = 3,
  GENEX_STATUS_CONFIGURATION = 4,
  GENEX_STATUS_IO = 5,
  GENEX_STATUS_SCORER_MISMATCH = 6,
  GENEX_STATUS_PROVIDER = 7,
  GENEX_STATUS_INTERNAL = 8,
  GENEX_STATUS_PANIC = 9,
} GenexStatus;

// Loaded and validated pipeline configuration.
typedef struct GenexPipeline GenexPipeline;

// Language model scorer handle.
typedef struct GenexScorer GenexScorer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static string; do not free.
const char *genex_version(void);

// Message of the last failure on this thread as a new string, or null.
char *genex_last_error(void);

// # Safety
// `s` must be null or a string returned by this library and not yet freed.
void genex_string_free(char *s);

// Normalizes a raw generic with the default rules. Writes
// `{"text": ..., "report": {...}}`.
//
// # Safety
// `raw` must be a valid C string and `out_json` a valid pointer.
enum GenexStatus genex_preprocess(const char *raw, char **out_json);

// Evaluates each clause of a JSON constraint set against `text`. Writes a
// JSON array of booleans.
//
// # Safety
// Both inputs must be valid C strings and `out_json` a valid pointer.
enum GenexStatus genex_satisfies(const char *constraints_json, const char *text, char **out_json);

// Builds a table-driven scorer from its JSON description.
//
// # Safety
// `spec_json` must be a valid C string and `out` a valid pointer.
enum GenexStatus genex_toy_scorer_new(const char *spec_json, struct GenexScorer **out);

// Trains a trigram scorer on a corpus file, one sentence per line.
//
// # Safety
// `corpus_path` must be a valid C string and `out` a valid pointer.
enum GenexStatus genex_ngram_scorer_new(const char *corpus_path, struct GenexScorer **out);

// # Safety
// `scorer` must be null or a handle from this library not yet freed.
void genex_scorer_free(struct GenexScorer *scorer);

// Decodes a completion of `prompt`. A null `constraints_json` runs plain
// beam search; a null `config_json` uses default decoder settings. Writes
// a JSON array of `{"text", "log_prob", "all_satisfied"}` in final order.
//
// # Safety
// `scorer` must be a live handle, string arguments valid C strings or
// null where allowed, and `out_json` a valid pointer.
enum GenexStatus genex_decode(const struct GenexScorer *scorer,
                              const char *prompt,
                              const char *constraints_json,
                              const char *config_json,
                              char **out_json);

// Perplexity of `text` (tokenized, then scored from an empty context).
//
// # Safety
// `scorer` must be a live handle, `text` a valid C string and `out` a
// valid pointer.
enum GenexStatus genex_perplexity(const struct GenexScorer *scorer, const char *text, double *out);

// Loads and validates a TOML pipeline configuration. A non-null
// `output_dir` overrides the configured one.
//
// # Safety
// `config_path` must be a valid C string, `output_dir` null or a valid C
// string, and `out` a valid pointer.
enum GenexStatus genex_pipeline_load(const char *config_path,
                                     const char *output_dir,
                                     struct GenexPipeline **out);

// Runs generation and writes the output files. Writes a JSON summary
// with the output paths, the manifest and its SHA-256.
//
// # Safety
// `pipeline` must be a live handle and `out_json` a valid pointer.
enum GenexStatus genex_pipeline_run(const struct GenexPipeline *pipeline, char **out_json);

// # Safety
// `pipeline` must be null or a handle from this library not yet freed.
void genex_pipeline_free(struct GenexPipeline *pipeline);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GENEX_H */
