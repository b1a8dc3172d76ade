/* C interface to the memory-guided single-image de-raining toolkit.
 *
 * All functions return derain_status; on failure derain_last_error() holds a
 * human-readable message for the calling thread. Handles are opaque and must
 * be released with their matching free function.
 */
#ifndef DERAIN_DERAIN_H_
#define DERAIN_DERAIN_H_

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum derain_status {
    DERAIN_OK = 0,
    DERAIN_ERR_USAGE = 1,   /* bad arguments or violated contract */
    DERAIN_ERR_IO = 2,      /* file system / format failure */
    DERAIN_ERR_NUMERIC = 3  /* non-finite values during training */
} derain_status;

/* Message for the most recent failure on this thread; empty string if none. */
const char* derain_last_error(void);

/* ---- synthetic time-lapse datasets ---- */

typedef struct derain_rain_params {
    double density;    /* streak count fraction of pixels, [0,1] */
    double length_px;
    double width_px;
    double angle_deg;  /* from vertical, [-45,45] */
    double intensity;  /* (0,1] */
    double jitter;     /* per-frame parameter noise, >= 0 */
} derain_rain_params;

void derain_rain_params_default(derain_rain_params* params);

/* Writes `scenes` scene directories under out_dir (frames, the held-out
 * background, and a metadata file per scene). Refuses a non-empty out_dir
 * unless force is nonzero. rain may be NULL for defaults. */
derain_status derain_generate_dataset(const char* out_dir, int scenes, int frames,
                                      int size, unsigned long long seed,
                                      const derain_rain_params* rain, int force);

/* ---- training ---- */

/* String fields may be NULL where noted. Numeric fields set to the
 * derain_train_options_init() sentinels keep their built-in or config-file
 * value; explicitly set fields take precedence over the config file. */
typedef struct derain_train_options {
    const char* data_dir;     /* required */
    const char* ckpt_out;     /* required */
    const char* metrics_csv;  /* NULL: no CSV */
    const char* config_file;  /* NULL: none */
    const char* resume_ckpt;  /* NULL: fresh run */
    int steps;                /* total training steps */
    int save_every;           /* periodic checkpoint interval; 0: only final */
    int batch_size;
    int memory_items;
    int base_channels;
    int query_channels;
    int input_size;
    int use_memory;           /* 0/1 */
    int bsw_l;
    int bsw_h;
    const char* bsw_grouping; /* "cluster" or "quantile"; NULL: keep */
    unsigned long long seed;
    int seed_set;             /* nonzero when seed carries a value */
    double lr0;
    double lambda_b;
    double lambda_s;
    double lambda_c;
    double lambda_w;
} derain_train_options;

void derain_train_options_init(derain_train_options* options);

derain_status derain_train_run(const derain_train_options* options);

/* ---- inference ---- */

typedef struct derain_model derain_model;

derain_status derain_model_load(const char* checkpoint_path, derain_model** out);
void derain_model_free(derain_model* model);

int derain_model_input_size(const derain_model* model);
int derain_model_memory_items(const derain_model* model);

/* Reads a square PNG of the trained size, writes the de-rained background
 * and the estimated rain layer. Either output path may be NULL to skip. */
derain_status derain_model_derain_file(derain_model* model, const char* in_png,
                                       const char* out_bg_png, const char* out_rain_png);

/* One grayscale PNG per memory item under out_dir. */
derain_status derain_model_export_attention(derain_model* model, const char* in_png,
                                            const char* out_dir);

/* L2 norm of each memory item; writes min(cap, item count) values, returns
 * the item count through out_count when non-NULL. */
derain_status derain_model_item_norms(const derain_model* model, double* out,
                                      int cap, int* out_count);

/* ---- evaluation ---- */

/* Scores de-rained frames against each scene's held-out background and
 * writes a per-frame CSV with a summary mean row. checkpoint_path NULL
 * scores the unmodified inputs (identity de-rainer baseline). */
derain_status derain_evaluate(const char* checkpoint_path, const char* data_dir,
                              const char* out_csv);

#ifdef __cplusplus
}
#endif

#endif /* DERAIN_DERAIN_H_ */
