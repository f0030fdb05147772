mod bm25;
mod data;
mod encode;
mod finetune;
mod losses;
mod negatives;
mod toy;

pub use bm25::{bm25_score, Bm25Index, Bm25Params, CorpusStats};
pub use data::{read_pairs, read_qrels, write_pairs, write_qrels, Document, Qrels, Query, RetrievalDataset, TokenizedDataset};
pub use encode::{dot, encode_all, encode_cls, encode_on_tape, norm, similarity, Metric};
pub use finetune::{
    eval_header, finetune, initial_triples, EvalRecord, FinetuneConfig, FinetuneOutcome, FinetuneRecord, NegativeSource, Objective,
    FINETUNE_HEADER,
};
pub use losses::{in_batch_negative_loss, pair_scores, triplet_loss, triplet_loss_batch};
pub use negatives::{
    mine_lexical_negatives, refresh_hard_negatives, select_label_subset, triple_queries, write_triples, TripletExample,
};
pub use toy::{generate_toy_data, merged_qrels, ToyConfig, ToyData};
