//! SNR-controlled mixing, normalization, corpora and per-epoch streams.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::synth::{resample_linear, synth_source, SourceKind};
use crate::data::wav::read_wav;
use crate::data::AudioClip;
use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Attempts at finding a crop with non-zero energy before giving up.
pub const MAX_CROP_ATTEMPTS: usize = 8;

/// One two-source training example.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureItem {
    /// Normalized mixture `[T]`; equals the sum of `sources` rows.
    pub mixture: Tensor,
    /// Normalized sources `[2, T]`.
    pub sources: Tensor,
    /// Mixture before normalization; equals `raw_sources` summed.
    pub raw_mixture: Tensor,
    /// Cropped sources before normalization, the second one already scaled.
    pub raw_sources: Tensor,
    pub snr_db: f64,
    /// Gain applied to the second source.
    pub gain: f64,
    pub mean: f64,
    pub std: f64,
}

/// Items stacked along a leading batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureBatch {
    /// `[batch, T]`
    pub mixtures: Tensor,
    /// `[batch, N, T]`
    pub sources: Tensor,
    pub snr_db: Vec<f64>,
    /// `(mean, std)` of each raw mixture.
    pub stats: Vec<(f64, f64)>,
}

impl MixtureBatch {
    pub fn from_items(items: &[MixtureItem]) -> Result<Self> {
        let first = items.first().ok_or_else(|| invalid("empty batch"))?;
        let t = first.mixture.len();
        let n = first.sources.dim(0);
        let mut mixtures = Vec::with_capacity(items.len() * t);
        let mut sources = Vec::with_capacity(items.len() * n * t);
        for it in items {
            if it.mixture.len() != t {
                return Err(invalid("items in a batch must share a length"));
            }
            mixtures.extend_from_slice(it.mixture.data());
            sources.extend_from_slice(it.sources.data());
        }
        Ok(Self {
            mixtures: Tensor::from_vec(&[items.len(), t], mixtures)?,
            sources: Tensor::from_vec(&[items.len(), n, t], sources)?,
            snr_db: items.iter().map(|i| i.snr_db).collect(),
            stats: items.iter().map(|i| (i.mean, i.std)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.mixtures.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mixture `[T]` of item `b`.
    pub fn mixture(&self, b: usize) -> Result<Tensor> {
        Tensor::from_vec(&[self.mixtures.dim(1)], self.mixtures.row(b).to_vec())
    }

    /// Sources `[N, T]` of item `b`.
    pub fn item_sources(&self, b: usize) -> Result<Tensor> {
        let (n, t) = (self.sources.dim(1), self.sources.dim(2));
        Tensor::from_vec(&[n, t], self.sources.data()[b * n * t..(b + 1) * n * t].to_vec())
    }
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Energy ratio `10 log10(|a|^2 / |b|^2)` in dB.
pub fn snr_db(a: &[f64], b: &[f64]) -> f64 {
    10.0 * (energy(a) / energy(b)).log10()
}

fn crop(clip: &AudioClip, len: usize, r: &mut impl Rng, which: &str) -> Result<Vec<f64>> {
    let n = clip.samples.len();
    if n < len {
        return Err(invalid(format!("{which} has {n} samples, fewer than the {len}-sample segment")));
    }
    for _ in 0..MAX_CROP_ATTEMPTS {
        let start = r.random_range(0..=n - len);
        let seg = &clip.samples.data()[start..start + len];
        if energy(seg) > 0.0 {
            return Ok(seg.to_vec());
        }
    }
    Err(invalid(format!("{which}: every one of {MAX_CROP_ATTEMPTS} crops was silent")))
}

/// Crops both clips at seeded random offsets, scales the second so the
/// pair has the requested SNR, mixes them and normalizes.
///
/// Normalization subtracts each source's own mean and divides every
/// signal by the raw mixture's standard deviation; the normalized mixture
/// is then the sum of the normalized sources, so it has zero mean and unit
/// standard deviation.
pub fn make_mixture(
    source_a: &AudioClip,
    source_b: &AudioClip,
    snr: f64,
    segment_seconds: f64,
    seed: u64,
) -> Result<MixtureItem> {
    if source_a.rate != source_b.rate {
        return Err(invalid(format!("sample rates differ: {} and {}", source_a.rate, source_b.rate)));
    }
    if !snr.is_finite() {
        return Err(invalid("snr must be finite"));
    }
    let len = (segment_seconds * source_a.rate as f64).round() as usize;
    if len < 2 {
        return Err(invalid(format!("segment of {segment_seconds} s is too short")));
    }
    let mut r = rng::stream(seed, &[rng::label("crop")]);
    let a = crop(source_a, len, &mut r, "first source")?;
    let b = crop(source_b, len, &mut r, "second source")?;
    let gain = (energy(&a) / (energy(&b) * 10f64.powf(snr / 10.0))).sqrt();
    let b: Vec<f64> = b.iter().map(|v| gain * v).collect();
    let raw_mixture: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let n = len as f64;
    let mean = raw_mixture.iter().sum::<f64>() / n;
    let std = (raw_mixture.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(std > 0.0) {
        return Err(Error::NonFinite("mixture standard deviation".into()));
    }
    let normalize = |s: &[f64]| -> Vec<f64> {
        let m = s.iter().sum::<f64>() / n;
        s.iter().map(|v| (v - m) / std).collect()
    };
    let (na, nb) = (normalize(&a), normalize(&b));
    let mixture: Vec<f64> = na.iter().zip(&nb).map(|(x, y)| x + y).collect();
    let mut sources = na;
    sources.extend(nb);
    let mut raw_sources = a;
    raw_sources.extend(b);
    Ok(MixtureItem {
        mixture: Tensor::from_vec(&[len], mixture)?,
        sources: Tensor::from_vec(&[2, len], sources)?,
        raw_mixture: Tensor::from_vec(&[len], raw_mixture)?,
        raw_sources: Tensor::from_vec(&[2, len], raw_sources)?,
        snr_db: snr,
        gain,
        mean,
        std,
    })
}

/// One clip listed in a corpus manifest.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub path: PathBuf,
    pub label: Option<String>,
    pub clip: AudioClip,
}

/// WAV clips loaded from a manifest and resampled to one rate.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub rate: u32,
    pub entries: Vec<CorpusEntry>,
}

impl Corpus {
    /// Reads a manifest: one path per line, optionally followed by a tab and
    /// a class label. Relative paths resolve against the manifest's folder.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn load(manifest: impl AsRef<Path>, rate: u32) -> Result<Self> {
        let manifest = manifest.as_ref();
        let text = fs::read_to_string(manifest)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", manifest.display()))))?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        for line in text.lines() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (p, label) = match line.split_once('\t') {
                Some((p, l)) => (p, Some(l.trim().to_string()).filter(|l| !l.is_empty())),
                None => (line, None),
            };
            let path = base.join(p.trim());
            let clip = resample_linear(&read_wav(&path)?, rate)?;
            entries.push(CorpusEntry { path, label, clip });
        }
        if entries.is_empty() {
            return Err(invalid(format!("corpus manifest {} lists no clips", manifest.display())));
        }
        Ok(Self { rate, entries })
    }

    /// Two entries; when labels exist they come from different classes.
    fn pick_pair(&self, r: &mut impl Rng) -> Result<(usize, usize)> {
        let n = self.entries.len();
        if n < 2 {
            return Err(invalid("a corpus needs at least two clips to form mixtures"));
        }
        for _ in 0..64 {
            let i = r.random_range(0..n);
            let j = r.random_range(0..n);
            let (a, b) = (&self.entries[i].label, &self.entries[j].label);
            let distinct = match (a, b) {
                (Some(a), Some(b)) => a != b,
                _ => true,
            };
            if i != j && distinct {
                return Ok((i, j));
            }
        }
        Err(invalid("could not find two clips from distinct classes"))
    }
}

/// Where mixture sources come from.
#[derive(Debug, Clone)]
pub enum SourceSet {
    /// Freshly generated signals; the two sources of a mixture are always
    /// different kinds.
    Synthetic { kinds: Vec<SourceKind>, rate: u32 },
    Corpus(std::sync::Arc<Corpus>),
}

impl SourceSet {
    pub fn rate(&self) -> u32 {
        match self {
            SourceSet::Synthetic { rate, .. } => *rate,
            SourceSet::Corpus(c) => c.rate,
        }
    }
}

/// Which fixed stream an item belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn label(self) -> u64 {
        rng::label(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// Everything that determines a stream of mixtures.
#[derive(Debug, Clone)]
pub struct StreamSpec {
    pub sources: SourceSet,
    pub n_mixtures: usize,
    pub batch_size: usize,
    pub segment_seconds: f64,
    /// Inclusive SNR range in dB.
    pub snr_range: (f64, f64),
    pub seed: u64,
    pub split: Split,
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_mixtures == 0 {
            return Err(invalid("n_mixtures must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        let (lo, hi) = self.snr_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(invalid(format!("bad snr range [{lo}, {hi}]")));
        }
        if let SourceSet::Synthetic { kinds, rate } = &self.sources {
            if kinds.len() < 2 {
                return Err(invalid("synthetic mixtures need at least two source kinds"));
            }
            if *rate == 0 {
                return Err(invalid("rate must be positive"));
            }
        }
        Ok(())
    }

    pub fn segment_samples(&self) -> usize {
        (self.segment_seconds * self.sources.rate() as f64).round() as usize
    }

    /// Number of batches per epoch.
    pub fn batches(&self) -> usize {
        self.n_mixtures.div_ceil(self.batch_size)
    }

    /// Item `index` of `epoch`; depends on nothing else.
    pub fn item(&self, epoch: u64, index: usize) -> Result<MixtureItem> {
        let seed = rng::derive(self.seed, &[self.split.label(), epoch, index as u64]);
        let mut r = rng::stream(seed, &[rng::label("pick")]);
        let (lo, hi) = self.snr_range;
        let snr = if lo == hi { lo } else { r.random_range(lo..=hi) };
        match &self.sources {
            SourceSet::Synthetic { kinds, rate } => {
                let i = r.random_range(0..kinds.len());
                let j = (i + r.random_range(1..kinds.len())) % kinds.len();
                // a little slack so crops land at different offsets
                let seconds = self.segment_seconds * 1.25;
                let a = synth_source(kinds[i], rng::derive(seed, &[1]), seconds, *rate)?;
                let b = synth_source(kinds[j], rng::derive(seed, &[2]), seconds, *rate)?;
                make_mixture(&a, &b, snr, self.segment_seconds, seed)
            }
            SourceSet::Corpus(c) => {
                let (i, j) = c.pick_pair(&mut r)?;
                make_mixture(&c.entries[i].clip, &c.entries[j].clip, snr, self.segment_seconds, seed)
            }
        }
    }

    /// Batches of `epoch` in order. Items are generated in parallel.
    pub fn epoch(&self, epoch: u64) -> Result<EpochStream<'_>> {
        self.validate()?;
        Ok(EpochStream { spec: self, epoch, next: 0 })
    }
}

/// Iterator over one epoch's batches.
#[derive(Debug)]
pub struct EpochStream<'a> {
    spec: &'a StreamSpec,
    epoch: u64,
    next: usize,
}

impl Iterator for EpochStream<'_> {
    type Item = Result<MixtureBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        let start = self.next * self.spec.batch_size;
        if start >= self.spec.n_mixtures {
            return None;
        }
        self.next += 1;
        let end = (start + self.spec.batch_size).min(self.spec.n_mixtures);
        let items: Result<Vec<_>> = (start..end).into_par_iter().map(|i| self.spec.item(self.epoch, i)).collect();
        Some(items.and_then(|items| MixtureBatch::from_items(&items)))
    }
}

/// Synthetic stream over all source kinds.
pub fn synthetic_stream(
    n_mixtures: usize,
    batch_size: usize,
    segment_seconds: f64,
    rate: u32,
    seed: u64,
    split: Split,
) -> StreamSpec {
    StreamSpec {
        sources: SourceSet::Synthetic { kinds: SourceKind::ALL.to_vec(), rate },
        n_mixtures,
        batch_size,
        segment_seconds,
        snr_range: (-5.0, 5.0),
        seed,
        split,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(v: Vec<f64>) -> AudioClip {
        let n = v.len();
        AudioClip { samples: Tensor::from_vec(&[n], v).unwrap(), rate: 100 }
    }

    #[test]
    fn equal_energy_at_zero_db_has_unit_gain() {
        let a = clip(vec![1.0, -1.0, 1.0, -1.0]);
        let b = clip(vec![0.0, 2.0, 0.0, 0.0]);
        let m = make_mixture(&a, &b, 0.0, 0.04, 1).unwrap();
        assert_eq!(m.gain, 1.0);
    }

    #[test]
    fn silent_source_is_rejected_after_retries() {
        let a = clip(vec![1.0; 10]);
        let b = clip(vec![0.0; 10]);
        let err = make_mixture(&a, &b, 0.0, 0.05, 1).unwrap_err().to_string();
        assert!(err.contains("silent"), "{err}");
    }

    #[test]
    fn short_clip_rejected() {
        let a = clip(vec![1.0; 3]);
        assert!(make_mixture(&a, &a, 0.0, 0.05, 1).is_err());
    }

    #[test]
    fn batch_count_rounds_up() {
        let mut s = synthetic_stream(8, 4, 0.05, 8000, 1, Split::Train);
        assert_eq!(s.epoch(0).unwrap().count(), 2);
        s.n_mixtures = 9;
        assert_eq!(s.batches(), 3);
        let last = s.epoch(0).unwrap().last().unwrap().unwrap();
        assert_eq!(last.len(), 1);
    }

    #[test]
    fn empty_stream_rejected() {
        let s = synthetic_stream(0, 4, 0.05, 8000, 1, Split::Train);
        assert!(s.epoch(0).is_err());
    }
}
