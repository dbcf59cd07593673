//! Records, multi-domain datasets, the simulated labeling oracle with its
//! budget, minibatch sampling and the synthetic benchmark generator.

mod budget;
pub(crate) mod dataset;
mod record;
mod sampler;
pub mod synth;

pub use budget::{oracle_annotate, BudgetPlan};
pub use dataset::{Dims, DomainEntry, DomainRole, DomainSet, Manifest, Oracle, TestSplit};
pub use record::{Label, SampleRecord};
pub use sampler::{BatchSampler, Minibatch};
pub use synth::{synth_generate, synth_generate_with_truth, SynthSpec, SynthTruth};
