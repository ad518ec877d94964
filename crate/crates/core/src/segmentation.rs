//! Splitting an utterance into overlapping segments and averaging the
//! segment embeddings back into one speaker embedding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{self as nx, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Overlap {
    /// Fraction of the segment length, rounded to the nearest sample.
    Fraction(f64),
    Samples(usize),
}

/// Segment length and overlap for one segmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentSpec {
    pub length: usize,
    pub overlap: Overlap,
}

impl SegmentSpec {
    pub fn new(length: usize, overlap: Overlap) -> Result<Self> {
        let spec = Self { length, overlap };
        spec.hop()?;
        Ok(spec)
    }

    /// Ten percent overlap.
    pub fn with_default_overlap(length: usize) -> Result<Self> {
        Self::new(length, Overlap::Fraction(0.1))
    }

    pub fn overlap_samples(&self) -> usize {
        match self.overlap {
            Overlap::Fraction(f) => (f * self.length as f64).round() as usize,
            Overlap::Samples(n) => n,
        }
    }

    /// Distance between consecutive segment starts.
    pub fn hop(&self) -> Result<usize> {
        if self.length == 0 {
            return Err(Error::InvalidInput("segment length must be at least one sample".into()));
        }
        if let Overlap::Fraction(f) = self.overlap {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::InvalidInput(format!("overlap fraction {f} outside [0, 1)")));
            }
        }
        let overlap = self.overlap_samples();
        if overlap >= self.length {
            return Err(Error::InvalidInput(format!(
                "overlap {overlap} leaves no hop for segment length {}",
                self.length
            )));
        }
        Ok(self.length - overlap)
    }

    /// Number of segments produced for a source of `source_length` samples.
    pub fn count(&self, source_length: usize) -> Result<usize> {
        let hop = self.hop()?;
        if source_length <= self.length {
            return Ok(1);
        }
        Ok((source_length - self.length).div_ceil(hop) + 1)
    }

    /// Start offsets; the last segment is anchored to the end of the source.
    pub fn starts(&self, source_length: usize) -> Result<Vec<usize>> {
        let hop = self.hop()?;
        let k = self.count(source_length)?;
        if k == 1 {
            return Ok(vec![0]);
        }
        let mut starts: Vec<usize> = (0..k - 1).map(|i| i * hop).collect();
        starts.push(source_length - self.length);
        Ok(starts)
    }
}

/// The segments of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSet {
    pub segments: Vec<Vec<f64>>,
    pub starts: Vec<usize>,
    pub source_length: usize,
}

impl SegmentSet {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Splits `x` into overlapping windows of `spec.length` samples.
///
/// A source no longer than one segment yields a single segment, zero-padded
/// on the right.
pub fn segment(x: &[f64], spec: &SegmentSpec) -> Result<SegmentSet> {
    if x.is_empty() {
        return Err(Error::InvalidInput("cannot segment an empty waveform".into()));
    }
    let starts = spec.starts(x.len())?;
    let c = spec.length;
    let segments = if x.len() <= c {
        let mut padded = x.to_vec();
        padded.resize(c, 0.0);
        vec![padded]
    } else {
        starts.iter().map(|&s| x[s..s + c].to_vec()).collect()
    };
    Ok(SegmentSet {
        segments,
        starts,
        source_length: x.len(),
    })
}

/// Averages K segment embeddings (each `[batch, dim]` or `[dim]`) element-wise.
pub fn aggregate(embeddings: &[Tensor]) -> Result<Tensor> {
    if embeddings.is_empty() {
        return Err(Error::InvalidInput("aggregate needs at least one segment embedding".into()));
    }
    nx::mean_stack(embeddings)
}

/// How the training segment length is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentPolicy {
    Fixed(usize),
    /// A fresh length per mini-batch, uniform in `[min, max]`.
    PerBatchRandom { min: usize, max: usize },
}

impl SegmentPolicy {
    /// Every length the policy can produce after rounding to `factor`.
    pub fn admissible_lengths(&self, factor: usize) -> Vec<usize> {
        match *self {
            SegmentPolicy::Fixed(c) => vec![c],
            SegmentPolicy::PerBatchRandom { min, max } => {
                let lo = min.div_ceil(factor).max(1);
                let hi = max / factor;
                (lo..=hi).map(|m| m * factor).collect()
            }
        }
    }

    /// Shortest length the policy produces, used at evaluation time.
    pub fn shortest(&self, factor: usize) -> Option<usize> {
        self.admissible_lengths(factor).into_iter().next()
    }
}

/// One draw per mini-batch: uniform in `[min, max]`, rounded down to a
/// multiple of `factor`.
pub fn draw_segment_length(min: usize, max: usize, factor: usize, rng: &mut impl Rng) -> Result<usize> {
    if min > max || factor == 0 {
        return Err(Error::InvalidInput(format!("segment length range [{min}, {max}] is empty")));
    }
    if max / factor == 0 || min.div_ceil(factor) > max / factor {
        return Err(Error::InvalidInput(format!(
            "no multiple of {factor} lies in [{min}, {max}]"
        )));
    }
    // Rejection keeps the rounded result inside [min, max].
    loop {
        let raw = rng.random_range(min..=max);
        let rounded = raw / factor * factor;
        if rounded >= min && rounded > 0 {
            return Ok(rounded);
        }
    }
}
