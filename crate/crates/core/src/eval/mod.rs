mod index;
mod metrics;
mod permutation;
mod run;

pub use index::{build_index, retrieve, RetrievalIndex};
pub use metrics::{
    hit_at_k, mrr_at_k, per_query_hit, per_query_recall, per_query_rr, recall_at_k, write_metrics_csv, MetricRow,
};
pub use permutation::{permutation_test, permutation_test_exact, permutation_test_monte_carlo, EXACT_MAX_N};
pub use run::{read_trec_run, write_trec_run, Hit, QueryRun, RunResult};
