#ifndef MILSTM_H
#define MILSTM_H

/* C interface to the multiple-instance learning library. All state lives in
 * opaque handles; every function returns a status code. String outputs are
 * heap-allocated JSON documents; release them with mil_string_free. */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* status codes; the CLI reuses them as process exit codes */
#define MIL_OK 0
#define MIL_ERR_INPUT 2      /* bad arguments, unreadable or malformed data */
#define MIL_ERR_GENERATION 3 /* unsatisfiable sampling request */
#define MIL_ERR_COMPAT 4     /* checkpoint/task or version mismatch */
#define MIL_ERR_NUMERIC 5    /* non-finite loss or internal numeric fault */

typedef struct mil_pool mil_pool;     /* instance pool (images + labels) */
typedef struct mil_bagset mil_bagset; /* bags sampled for one scenario */
typedef struct mil_model mil_model;   /* encoder + pooling + heads */

const char* mil_version(void);

/* message for the most recent failure on this thread; never NULL */
const char* mil_last_error(void);

void mil_string_free(char* s);

/* Parse a run-config document: defaults applied, unknown keys rejected.
 * Returns the canonical form and its hash so artifacts can be fingerprinted. */
int mil_config_normalize(const char* json_text, char** canonical_out,
                         char** hash_hex_out);

/* ---- instance pools ---- */

int mil_pool_synthetic(size_t n_per_class, uint64_t seed, mil_pool** out);
int mil_pool_from_idx(const char* images_path, const char* labels_path,
                      const char* split, mil_pool** out);
int mil_pool_save(const mil_pool* pool, const char* images_path,
                  const char* labels_path);
/* counts per class, split tag, and content checksums */
int mil_pool_manifest(const mil_pool* pool, char** json_out);
void mil_pool_free(mil_pool* pool);

/* ---- bag sets ---- */

/* scenario parameters (task, m, sigma, n_bags, k_outliers, seed) are read
 * from the run-config document */
int mil_bags_generate(const mil_pool* pool, const char* config_json,
                      mil_bagset** out);
int mil_bags_save(const mil_bagset* bags, const char* path);
int mil_bags_load(const char* path, mil_bagset** out);
/* class balance, cardinality histogram, target histogram */
int mil_bags_summary(const mil_bagset* bags, char** json_out);
/* scenario tag; owned by the handle, valid until mil_bags_free */
const char* mil_bags_task(const mil_bagset* bags);
void mil_bags_free(mil_bagset* bags);

/* ---- models ---- */

/* one line per epoch; return nonzero to stop training early */
typedef int (*mil_progress_cb)(size_t epoch, double train_loss,
                               double train_error, double val_loss,
                               double val_error, void* user);

int mil_model_create(const char* config_json, mil_model** out);
int mil_model_load(const char* path, mil_model** out);
int mil_model_save(const mil_model* model, const char* path);
/* scenario tag recorded at training time; owned by the handle */
const char* mil_model_task(const mil_model* model);
int mil_model_train(mil_model* model, const mil_bagset* bags,
                    const char* config_json, mil_progress_cb cb, void* user,
                    char** history_json_out);
void mil_model_free(mil_model* model);

/* ---- evaluation ----
 * Every scorer checks the model's task tag against the bag set and fails
 * with MIL_ERR_COMPAT, naming both tags, when they differ. */

int mil_eval_metrics(const mil_model* model, const mil_bagset* bags,
                     char** json_out);
int mil_eval_permutations(const mil_model* model, const mil_bagset* bags,
                          size_t n_perm, uint64_t seed, char** json_out);
/* pair probes at each cardinality; finetune != 0 additionally adapts a copy
 * of the model per size on freshly sampled bags */
int mil_eval_cardinality(const mil_model* model, const mil_pool* pool,
                         const int* sizes, size_t n_sizes, int finetune,
                         const char* config_json, char** json_out);
/* k == 0 picks the task's cluster count */
int mil_cluster(const mil_model* model, const mil_bagset* bags, size_t k,
                uint64_t seed, char** json_out);
int mil_instance_eval(const mil_model* model, const mil_bagset* bags,
                      char** json_out);
int mil_export_features(const mil_model* model, const mil_bagset* bags,
                        const char* csv_path, char** json_out);
int mil_export_states(const mil_model* model, const mil_bagset* bags,
                      const char* csv_path);

#ifdef __cplusplus
}
#endif

#endif /* MILSTM_H */
