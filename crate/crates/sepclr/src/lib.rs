//! Separation-augmented contrastive learning for audio representations,
//! scaled down to run on a single CPU core.
//!
//! The pipeline: synthetic labeled sound scenes ([`scenegen`]) are decomposed
//! by surrogate separation processors ([`processors`]) into channels that sum
//! back to the mixture, views are cut and augmented with temporal-proximity
//! sampling plus SpecAugment ([`features`]), and a shared convolutional
//! encoder with two task heads ([`model`]) is trained under a similarity
//! maximization (NT-Xent) and a coincidence prediction objective ([`losses`],
//! [`trainer`]). Learned embeddings are scored by query-by-example retrieval
//! mAP and a shallow downstream classifier ([`eval`]).

pub mod digest;
pub mod eval;
pub mod features;
pub mod losses;
pub mod model;
pub mod nn;
pub mod processors;
pub mod rng;
pub mod scenegen;
pub mod trainer;

/// Raises glibc's mmap/trim thresholds so large tensor buffers are served
/// from the heap free list instead of fresh mmaps. Training allocates and
/// frees multi-megabyte activations every step; without this the process
/// spends most of its time in page faults. Call once at startup.
pub fn tune_allocator() {
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

pub use eval::EvalReport;
pub use features::{AugmentationPolicy, LogMelPatch};
pub use model::{EncoderConfig, ModelState};
pub use processors::{ProcessorBank, ProcessorKind, SeparationOutput};
pub use scenegen::{SceneConfig, SoundScene};
pub use trainer::{ComparisonMode, TaskMode, TrainConfig};
