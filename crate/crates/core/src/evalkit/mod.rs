//! Recognition metrics, height buckets and ω × R sweeps.

mod metrics;
mod sweep;

pub use metrics::{
    bucket_by_height, char_error_rate, levenshtein, normalize, pair_cer, pair_correct, summarize, word_accuracy,
    EvalRecord, HeightBuckets,
};
pub use sweep::{item_seed, load_eval_items, sweep, EvalItem, SweepCell, SweepResult, SweepRow, SweepSpec, SweepTable};
