//! Windowed and kernelized attention.

pub mod block;
pub mod mhsa;
pub mod window;

pub use block::{merge_index, patch_merging, BlockConfig, BlockContext, BlockForcing, EncoderBlock, PatchMerging};
pub use mhsa::{performer_attention, performer_core, random_features, AttentionKind, AttentionParams};
pub use window::{window_partition, window_reverse, RelPosBias, WindowConfig, WindowPlan};
