//! Frame datasets: the seeded PRNG, a synthetic frame-classification
//! generator, context-window splicing, the FDS1 binary codec and epoch
//! minibatching.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// splitmix64 pseudo-random generator.
///
/// The state transition is fully specified so that independent
/// implementations reproduce identical streams: add the golden-ratio
/// increment, then mix with two xor-shift-multiply rounds.
#[derive(Debug, Clone)]
pub struct Prng {
    state: u64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Prng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in [lo, hi): the top 53 bits of the next output scaled
    /// into the interval.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        let u = (self.next_u64() >> 11) as f64 * SCALE;
        lo + u * (hi - lo)
    }

    /// Standard Gaussian via Box-Muller over two uniforms. The first draw is
    /// mapped to (0, 1] so the log never sees zero; the sine branch is
    /// discarded so the generator state stays a single u64.
    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(0.0, 1.0);
        let u2 = self.uniform(0.0, 1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform index in [0, n) via modulo; bias is negligible for the small
    /// ranges used here and the rule is trivially portable.
    pub fn index(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

/// A frame-classification dataset: per-frame feature vectors, integer class
/// labels and the segment structure the frames came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDataset {
    pub num_classes: usize,
    /// N x d feature matrix.
    pub features: Matrix,
    /// One class label per frame, each in [0, num_classes).
    pub labels: Vec<usize>,
    /// Segment lengths; positive, summing to N. Splicing never crosses a
    /// segment boundary.
    pub segments: Vec<usize>,
}

impl FrameDataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        segments: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::Data(format!(
                "{} labels for {} frames",
                labels.len(),
                n
            )));
        }
        if num_classes < 1 {
            return Err(Error::Data("num_classes must be at least 1".into()));
        }
        for (frame, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    frame,
                    label: label as u64,
                    num_classes,
                });
            }
        }
        if segments.iter().any(|&s| s == 0) {
            return Err(Error::Data("zero-length segment".into()));
        }
        let sum: usize = segments.iter().sum();
        if sum != n {
            return Err(Error::SegmentSumMismatch {
                sum: sum as u64,
                num_frames: n as u64,
            });
        }
        Ok(FrameDataset {
            num_classes,
            features,
            labels,
            segments,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }

    pub fn feat_dim(&self) -> usize {
        self.features.cols()
    }
}

/// Context window for splicing.
#[derive(Debug, Clone, Copy)]
pub struct SpliceConfig {
    /// Frames taken on each side; the spliced dimension is d*(2*context+1).
    pub context: usize,
}

impl SpliceConfig {
    pub fn spliced_dim(&self, feat_dim: usize) -> usize {
        feat_dim * (2 * self.context + 1)
    }
}

/// Concatenates each frame with its +/- context neighbours. Neighbour
/// indices are clamped to the frame's own segment, so positions past a
/// segment edge repeat the boundary frame and no row ever mixes segments.
pub fn splice(dataset: &FrameDataset, cfg: &SpliceConfig) -> Matrix {
    let d = dataset.feat_dim();
    let n = dataset.num_frames();
    let c = cfg.context as isize;
    let width = cfg.spliced_dim(d);
    let mut out = Vec::with_capacity(n * width);
    let mut seg_start = 0usize;
    for &seg_len in &dataset.segments {
        let seg_end = seg_start + seg_len; // exclusive
        for t in seg_start..seg_end {
            for offset in -c..=c {
                let src = (t as isize + offset)
                    .clamp(seg_start as isize, seg_end as isize - 1)
                    as usize;
                out.extend_from_slice(dataset.features.row(src));
            }
        }
        seg_start = seg_end;
    }
    Matrix::from_vec(n, width, out)
}

/// Quantizes to f32 precision; dataset features round-trip the on-disk
/// float32 representation bitwise because they are generated at it.
fn to_f32_precision(v: f64) -> f64 {
    v as f32 as f64
}

/// Generates a synthetic frame-classification task: K class prototypes in
/// [-1,1]^d, segments of geometrically distributed length (mean `mean_dur`,
/// capped at 50) each carrying one uniformly chosen class, and per-frame
/// Gaussian noise of scale `noise_sigma` around the prototype.
///
/// Draw order, fixed for reproducibility: prototypes row-major, then per
/// segment one duration draw and one class draw, then per frame the noise
/// values in feature order.
pub fn generate_synthetic(
    classes: usize,
    dim: usize,
    frames: usize,
    mean_dur: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<FrameDataset> {
    if classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    if dim < 1 {
        return Err(Error::Config("feature dimension must be positive".into()));
    }
    if frames < 1 {
        return Err(Error::Config("need at least 1 frame".into()));
    }
    if !(mean_dur >= 1.0) {
        return Err(Error::Config("mean segment duration must be >= 1".into()));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Config("noise sigma must be non-negative".into()));
    }
    let mut rng = Prng::new(seed);
    let mut prototypes = Vec::with_capacity(classes);
    for _ in 0..classes {
        let proto: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        prototypes.push(proto);
    }

    let mut features = Vec::with_capacity(frames * dim);
    let mut labels = Vec::with_capacity(frames);
    let mut segments = Vec::new();
    let mut remaining = frames;
    while remaining > 0 {
        let dur = sample_duration(&mut rng, mean_dur).min(remaining);
        let class = rng.index(classes);
        for _ in 0..dur {
            let proto = &prototypes[class];
            for &p in proto {
                features.push(to_f32_precision(p + rng.gaussian() * noise_sigma));
            }
            labels.push(class);
        }
        segments.push(dur);
        remaining -= dur;
    }

    FrameDataset::new(
        Matrix::from_vec(frames, dim, features),
        labels,
        segments,
        classes,
    )
}

/// Geometric duration on {1, 2, ...} with mean `mean_dur`, by inversion of
/// one uniform draw, capped at 50.
fn sample_duration(rng: &mut Prng, mean_dur: f64) -> usize {
    let u = rng.uniform(0.0, 1.0);
    if mean_dur <= 1.0 {
        return 1;
    }
    let p = 1.0 / mean_dur;
    let k = ((1.0 - u).ln() / (1.0 - p).ln()).ceil();
    (k.max(1.0) as usize).min(50)
}

/// Splits a dataset into its first `first_frames` frames and the remainder.
/// A segment straddling the cut is divided at the cut point, which becomes a
/// segment boundary in both halves. Used to carve a validation set that
/// shares the training set's class prototypes.
pub fn split_at(dataset: &FrameDataset, first_frames: usize) -> Result<(FrameDataset, FrameDataset)> {
    let n = dataset.num_frames();
    if first_frames == 0 || first_frames >= n {
        return Err(Error::Config(format!(
            "split point {first_frames} must be inside (0, {n})"
        )));
    }
    let mut first_segs = Vec::new();
    let mut second_segs = Vec::new();
    let mut covered = 0usize;
    for &len in &dataset.segments {
        if covered + len <= first_frames {
            first_segs.push(len);
        } else if covered >= first_frames {
            second_segs.push(len);
        } else {
            let head = first_frames - covered;
            first_segs.push(head);
            second_segs.push(len - head);
        }
        covered += len;
    }
    let first = FrameDataset::new(
        dataset.features.slice_rows(0, first_frames),
        dataset.labels[..first_frames].to_vec(),
        first_segs,
        dataset.num_classes,
    )?;
    let second = FrameDataset::new(
        dataset.features.slice_rows(first_frames, n),
        dataset.labels[first_frames..].to_vec(),
        second_segs,
        dataset.num_classes,
    )?;
    Ok((first, second))
}

const DATASET_MAGIC: &[u8; 4] = b"FDS1";

/// Serializes to the FDS1 layout: magic, u32 num_frames / feat_dim /
/// num_classes / num_segments, the segment lengths as u32, features as
/// row-major float32, labels as u32. All integers little-endian.
pub fn encode_dataset(dataset: &FrameDataset) -> Vec<u8> {
    let n = dataset.num_frames();
    let d = dataset.feat_dim();
    let mut out = Vec::with_capacity(4 + 16 + dataset.segments.len() * 4 + n * d * 4 + n * 4);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.num_classes as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.segments.len() as u32).to_le_bytes());
    for &s in &dataset.segments {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for &v in dataset.features.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in &dataset.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out
}

/// Little-endian cursor shared by the dataset and checkpoint codecs.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, len: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, what: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parses the FDS1 layout produced by [`encode_dataset`]. Features are
/// widened from float32 to f64 on load.
pub fn decode_dataset(bytes: &[u8]) -> Result<FrameDataset> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            expected: "FDS1",
            found: magic.try_into().unwrap(),
        });
    }
    let n = r.u32("num_frames")? as usize;
    let d = r.u32("feat_dim")? as usize;
    let k = r.u32("num_classes")? as usize;
    let num_segments = r.u32("num_segments")? as usize;
    if n == 0 || d == 0 || k == 0 {
        return Err(Error::Data(format!(
            "header declares {n} frames, dim {d}, {k} classes; all must be positive"
        )));
    }
    let mut segments = Vec::with_capacity(num_segments);
    let mut sum = 0u64;
    for _ in 0..num_segments {
        let len = r.u32("segment table")?;
        if len == 0 {
            return Err(Error::Data("zero-length segment".into()));
        }
        sum += u64::from(len);
        segments.push(len as usize);
    }
    if sum != n as u64 {
        return Err(Error::SegmentSumMismatch {
            sum,
            num_frames: n as u64,
        });
    }
    let mut features = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        let v = r.f32("features")?;
        if !v.is_finite() {
            return Err(Error::Data("non-finite feature value".into()));
        }
        features.push(f64::from(v));
    }
    let mut labels = Vec::with_capacity(n);
    for frame in 0..n {
        let l = r.u32("labels")?;
        if l as usize >= k {
            return Err(Error::LabelOutOfRange {
                frame,
                label: u64::from(l),
                num_classes: k,
            });
        }
        labels.push(l as usize);
    }
    if !r.done() {
        return Err(Error::Data("trailing bytes after labels".into()));
    }
    FrameDataset::new(Matrix::from_vec(n, d, features), labels, segments, k)
}

pub fn write_dataset(path: &Path, dataset: &FrameDataset) -> Result<()> {
    fs::write(path, encode_dataset(dataset))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<FrameDataset> {
    decode_dataset(&fs::read(path)?)
}

/// Fisher-Yates permutation of 0..n driven by the given stream; the swap
/// index for position i is `next_u64() mod (i+1)`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = Prng::new(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.index(i + 1);
        order.swap(i, j);
    }
    order
}

/// Ordered minibatches for one epoch: a seeded shuffle of the frame indices
/// cut into contiguous slices of `batch_size`, the last possibly short.
pub struct Minibatches<'a> {
    features: &'a Matrix,
    labels: &'a [usize],
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

pub fn minibatches<'a>(
    features: &'a Matrix,
    labels: &'a [usize],
    batch_size: usize,
    epoch_seed: u64,
) -> Minibatches<'a> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    assert_eq!(features.rows(), labels.len());
    Minibatches {
        features,
        labels,
        order: shuffled_indices(features.rows(), epoch_seed),
        batch_size,
        next: 0,
    }
}

impl<'a> Iterator for Minibatches<'a> {
    type Item = (Matrix, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let idx = &self.order[self.next..end];
        self.next = end;
        let d = self.features.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Some((Matrix::from_vec(idx.len(), d, data), labels))
    }
}
