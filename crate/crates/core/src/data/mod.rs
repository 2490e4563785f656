//! Audio I/O, synthetic sources and mixture generation.

pub mod mixture;
pub mod synth;
pub mod wav;

use crate::tensor::Tensor;

pub use mixture::{
    make_mixture, snr_db, synthetic_stream, Corpus, CorpusEntry, EpochStream, MixtureBatch, MixtureItem, SourceSet,
    Split, StreamSpec, MAX_CROP_ATTEMPTS,
};
pub use synth::{resample_linear, synth_source, tone_bank_partials, Partial, SourceKind};
pub use wav::{encode_wav, parse_wav, read_wav, write_wav, SampleFormat};

/// A mono waveform `[T]` and its sample rate in Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Tensor,
    pub rate: u32,
}
