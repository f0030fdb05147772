//! Synthetic Markov sources with exact entropy, decoders trained on them, and
//! probes of CLS embeddings and decoder reliance on h_0.

mod markov;
mod plot;
mod probes;
mod theory;

pub use markov::{
    exact_conditional_entropy, generate_markov_corpus, mean_and_se, monte_carlo_entropy, stationary_distribution,
    EntropyFloor, MarkovCorpus, MarkovSpec, Stationary, TopicTable,
};
pub use plot::{bar_chart_svg, line_plot_svg};
pub use probes::{
    cls_diversity_profile, decoder_cls_dependency, DependencyCurve, DependencyPoint, DiversityProfile, DiversityRow,
};
pub use theory::{
    decomposition_check, paired_gap, sequence_losses, train_theory_decoder, DecompositionReport, H0Mode,
    TheoryDecoder, TheoryDecoderConfig, MIN_POSITIONS,
};
