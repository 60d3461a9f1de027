//! Sample manifests, K-shot episodes, balanced batch sampling and a
//! synthetic two-domain corpus.

mod episode;
mod manifest;
mod sampler;
mod store;
mod synth;

pub use episode::{make_episode, EpisodeSplit, HiddenLabels, SealGuard};
pub use manifest::{label_name, load_manifest, parse_label, write_manifest, Domain, SampleRecord, CLASS_NAMES};
pub use sampler::{BalancedSampler, LabeledDraw, TrainingBatch};
pub use store::ImageStore;
pub use synth::{synth_domains, SynthConfig, SynthOutput};
