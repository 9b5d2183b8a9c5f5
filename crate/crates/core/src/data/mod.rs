//! Trial protocols, training-time segmentation, seeded batching and the
//! synthetic corpus generator.

mod batch;
mod protocol;
mod synth;

pub use batch::{batch_order, make_batches, slice_segments, SegmentBatch};
pub use protocol::{parse_protocol, parse_protocol_str, write_protocol, Label, ProtocolFormat, ProtocolSet, Subset, TrialRecord};
pub use synth::{generate_synthetic_dataset, render_pair, SynthConfig, SyntheticCorpus, SYNTH_ATTACK};

#[cfg(test)]
mod tests;
