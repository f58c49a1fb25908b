//! Baselines and masked inputs.
//!
//! A masked input `X_C` equals the sample on the kept regions `C` and the
//! baseline everywhere else. The baseline is the per-feature, per-channel
//! mean of a reference dataset and is treated as a fixed quantity.

use std::borrow::Borrow;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::partition::Region;
use crate::tensor::{Shape, Tensor};

const BASELINE_MAGIC: &[u8; 4] = b"HSBL";
const BASELINE_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("cannot compute a baseline from an empty dataset")]
    EmptyDataset,
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Shape, got: Shape },
    #[error("region {region} lies outside a {height}x{width} input")]
    OutOfBounds { region: Region, height: usize, width: usize },
    #[error("baseline contains a non-finite value at offset {0}")]
    NonFinite(usize),
    #[error("malformed baseline file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Per-feature replacement values, one per stored scalar of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline(Tensor);

impl Baseline {
    pub fn new(values: Tensor) -> Result<Self, MaskError> {
        if let Some(i) = values.data().iter().position(|v| !v.is_finite()) {
            return Err(MaskError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn zeros(shape: Shape) -> Self {
        Self(Tensor::zeros(shape))
    }

    pub fn shape(&self) -> Shape {
        self.0.shape()
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), MaskError> {
        let [c, h, wd] = self.shape().dims();
        w.write_all(BASELINE_MAGIC)?;
        w.write_all(&BASELINE_VERSION.to_le_bytes())?;
        w.write_all(&3u16.to_le_bytes())?;
        for extent in [c, h, wd] {
            let extent = u32::try_from(extent)
                .map_err(|_| MaskError::Format(format!("extent {extent} exceeds u32")))?;
            w.write_all(&extent.to_le_bytes())?;
        }
        for v in self.0.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, MaskError> {
        let mut head = [0u8; 8];
        r.read_exact(&mut head)?;
        if &head[..4] != BASELINE_MAGIC {
            return Err(MaskError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != BASELINE_VERSION {
            return Err(MaskError::Format(format!("unsupported version {version}")));
        }
        let dims = u16::from_le_bytes([head[6], head[7]]) as usize;
        if !(1..=3).contains(&dims) {
            return Err(MaskError::Format(format!("unsupported rank {dims}")));
        }
        let mut extents = [1usize; 3];
        for slot in extents.iter_mut().skip(3 - dims) {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *slot = u32::from_le_bytes(b) as usize;
        }
        let shape = Shape::new(extents[0], extents[1], extents[2]);
        let mut bytes = vec![0u8; shape.len() * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::from_vec(shape, data).expect("length matches shape");
        Self::new(tensor)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MaskError> {
        let file = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MaskError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(io::BufReader::new(file))
    }
}

/// Per-scalar arithmetic mean of `dataset`, accumulated in one pass with a
/// running-mean update.
pub fn compute_baseline<I, T>(dataset: I) -> Result<Baseline, MaskError>
where
    I: IntoIterator<Item = T>,
    T: Borrow<Tensor>,
{
    let mut iter = dataset.into_iter();
    let first = iter.next().ok_or(MaskError::EmptyDataset)?;
    let mut mean = first.borrow().clone();
    let shape = mean.shape();
    let mut count = 1usize;
    for sample in iter {
        let sample = sample.borrow();
        if sample.shape() != shape {
            return Err(MaskError::ShapeMismatch { expected: shape, got: sample.shape() });
        }
        count += 1;
        let k = count as f64;
        for (m, &x) in mean.data_mut().iter_mut().zip(sample.data()) {
            *m += (x - *m) / k;
        }
    }
    Baseline::new(mean)
}

/// A sample with everything outside `kept` replaced by the baseline.
///
/// The masked array is produced lazily: in-process oracles usually only
/// need the kept regions, while external models call [`materialize`].
///
/// [`materialize`]: MaskedInput::materialize
#[derive(Debug, Clone)]
pub struct MaskedInput<'a> {
    input: &'a Tensor,
    baseline: &'a Baseline,
    kept: Vec<Region>,
}

/// Builds `X_C` for the kept regions `kept`. The input is never modified.
pub fn mask<'a>(
    input: &'a Tensor,
    kept: Vec<Region>,
    baseline: &'a Baseline,
) -> Result<MaskedInput<'a>, MaskError> {
    let shape = input.shape();
    if baseline.shape() != shape {
        return Err(MaskError::ShapeMismatch { expected: shape, got: baseline.shape() });
    }
    if let Some(bad) = kept.iter().find(|r| !r.within(shape)) {
        return Err(MaskError::OutOfBounds { region: *bad, height: shape.height, width: shape.width });
    }
    Ok(MaskedInput { input, baseline, kept })
}

impl<'a> MaskedInput<'a> {
    /// Skips the bounds check; callers guarantee `kept` lies within the input.
    pub(crate) fn new_unchecked(input: &'a Tensor, baseline: &'a Baseline, kept: Vec<Region>) -> Self {
        debug_assert!(kept.iter().all(|r| r.within(input.shape())));
        Self { input, baseline, kept }
    }

    pub fn kept(&self) -> &[Region] {
        &self.kept
    }

    pub fn shape(&self) -> Shape {
        self.input.shape()
    }

    pub fn input(&self) -> &'a Tensor {
        self.input
    }

    pub fn baseline(&self) -> &'a Baseline {
        self.baseline
    }

    pub fn is_kept(&self, row: usize, col: usize) -> bool {
        self.kept.iter().any(|r| r.contains(row, col))
    }

    pub fn value(&self, channel: usize, row: usize, col: usize) -> f64 {
        if self.is_kept(row, col) {
            self.input.get(channel, row, col)
        } else {
            self.baseline.values().get(channel, row, col)
        }
    }

    /// Appends the masked array (channel-first, row-major) to `out`.
    pub fn write_into(&self, out: &mut Vec<f64>) {
        let start = out.len();
        out.extend_from_slice(self.baseline.values().data());
        let dst = &mut out[start..];
        let shape = self.shape();
        let src = self.input.data();
        for region in &self.kept {
            for ch in 0..shape.channels {
                for row in region.row_start..region.row_end {
                    let base = (ch * shape.height + row) * shape.width;
                    let span = base + region.col_start..base + region.col_end;
                    dst[span.clone()].copy_from_slice(&src[span]);
                }
            }
        }
    }

    pub fn materialize(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.shape().len());
        self.write_into(&mut data);
        Tensor::from_vec(self.shape(), data).expect("masked data has the input's shape")
    }
}
