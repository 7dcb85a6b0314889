//! Data ingestion: the CIFAR binary format, a synthetic desk-scale task,
//! per-channel normalization, and train-time augmentation.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const IMAGE_VALUES: usize = 3 * IMAGE_PIXELS;

/// Calibrated so the nearest-prototype (Bayes) accuracy of the synthetic
/// task sits near 85% at K = 4.
pub const DIFFICULTY_MID: f64 = 17.5;

// ---------------------------------------------------------------------------
// CIFAR binary format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    C10,
    C100,
}

impl CifarVariant {
    pub fn record_len(&self) -> usize {
        match self {
            CifarVariant::C10 => 1 + IMAGE_VALUES,
            CifarVariant::C100 => 2 + IMAGE_VALUES,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            CifarVariant::C10 => 10,
            CifarVariant::C100 => 100,
        }
    }
}

/// One raw record: label byte(s) plus 3072 row-major pixel bytes
/// (1024 R, 1024 G, 1024 B).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecord {
    /// Fine label (the only label for CIFAR-10).
    pub label: u8,
    /// Coarse label; unused (zero) for CIFAR-10.
    pub coarse_label: u8,
    pub pixels: Vec<u8>,
}

pub fn encode_records(records: &[CifarRecord], variant: CifarVariant) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * variant.record_len());
    for rec in records {
        assert_eq!(rec.pixels.len(), IMAGE_VALUES, "record pixel payload");
        if let CifarVariant::C100 = variant {
            out.push(rec.coarse_label);
        }
        out.push(rec.label);
        out.extend_from_slice(&rec.pixels);
    }
    out
}

pub fn decode_records(bytes: &[u8], variant: CifarVariant) -> Result<Vec<CifarRecord>> {
    let rec_len = variant.record_len();
    if bytes.len() % rec_len != 0 {
        return Err(Error::Format(format!(
            "truncated CIFAR data: {} bytes is not a multiple of the {}-byte record",
            bytes.len(),
            rec_len
        )));
    }
    let mut records = Vec::with_capacity(bytes.len() / rec_len);
    for (i, chunk) in bytes.chunks_exact(rec_len).enumerate() {
        let (coarse, label, pixels) = match variant {
            CifarVariant::C10 => (0u8, chunk[0], &chunk[1..]),
            CifarVariant::C100 => (chunk[0], chunk[1], &chunk[2..]),
        };
        if (label as usize) >= variant.classes() {
            return Err(Error::Format(format!(
                "record {i}: label {label} out of range for {} classes",
                variant.classes()
            )));
        }
        if let CifarVariant::C100 = variant {
            if coarse >= 20 {
                return Err(Error::Format(format!(
                    "record {i}: coarse label {coarse} out of range"
                )));
            }
        }
        records.push(CifarRecord {
            label,
            coarse_label: coarse,
            pixels: pixels.to_vec(),
        });
    }
    Ok(records)
}

pub fn load_cifar_file(path: &Path, variant: CifarVariant) -> Result<Vec<CifarRecord>> {
    let bytes = std::fs::read(path)?;
    decode_records(&bytes, variant)
}

// ---------------------------------------------------------------------------
// raw splits and normalization
// ---------------------------------------------------------------------------

/// Images before normalization, `[M, 3, 32, 32]` as f64 (CIFAR pixels are
/// scaled to [0,1]).
#[derive(Debug, Clone)]
pub struct RawSplit {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl RawSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn records_to_split(records: &[CifarRecord], take: usize, classes: usize) -> RawSplit {
    let m = take.min(records.len());
    let mut images = Vec::with_capacity(m * IMAGE_VALUES);
    let mut labels = Vec::with_capacity(m);
    for rec in &records[..m] {
        images.extend(rec.pixels.iter().map(|&p| p as f64 / 255.0));
        labels.push(rec.label as usize);
    }
    RawSplit {
        images,
        labels,
        classes,
    }
}

/// Dataset-wide per-channel mean and standard deviation, computed from the
/// training split and reused verbatim for evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub fn compute_norm_stats(split: &RawSplit) -> NormStats {
    let m = split.len();
    assert!(m > 0, "empty split");
    let mut mean = [0.0; 3];
    let mut sq = [0.0; 3];
    for img in split.images.chunks(IMAGE_VALUES) {
        for c in 0..3 {
            for &v in &img[c * IMAGE_PIXELS..(c + 1) * IMAGE_PIXELS] {
                mean[c] += v;
                sq[c] += v * v;
            }
        }
    }
    let count = (m * IMAGE_PIXELS) as f64;
    let mut std = [0.0; 3];
    for c in 0..3 {
        mean[c] /= count;
        let var = (sq[c] / count - mean[c] * mean[c]).max(0.0);
        // Guard constant channels.
        std[c] = var.sqrt().max(1e-8);
    }
    NormStats { mean, std }
}

/// Normalized images plus labels: the tensor-ready dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * IMAGE_VALUES..(i + 1) * IMAGE_VALUES]
    }
}

pub fn normalize(split: &RawSplit, stats: &NormStats) -> Dataset {
    let mut images = Vec::with_capacity(split.images.len());
    for img in split.images.chunks(IMAGE_VALUES) {
        for c in 0..3 {
            for &v in &img[c * IMAGE_PIXELS..(c + 1) * IMAGE_PIXELS] {
                images.push((v - stats.mean[c]) / stats.std[c]);
            }
        }
    }
    Dataset {
        images,
        labels: split.labels.clone(),
        classes: split.classes,
    }
}

// ---------------------------------------------------------------------------
// synthetic task
// ---------------------------------------------------------------------------

/// Class prototypes: per class, a coarse 3x4x4 Gaussian grid upsampled
/// bilinearly to 3x32x32. Smooth patterns keep the class signal visible to
/// local convolutions. Returns `[K, 3, 32, 32]`.
pub fn synth_prototypes(seed: u64, classes: usize) -> Vec<f64> {
    let coarse_side = 4;
    let mut rng = Rng::new(seed).derive("synth-prototypes");
    let mut coarse = vec![0.0; classes * 3 * coarse_side * coarse_side];
    rng.fill_normal(&mut coarse, 0.0, 1.0);

    let mut out = vec![0.0; classes * IMAGE_VALUES];
    let scale = coarse_side as f64 / IMAGE_SIDE as f64;
    for k in 0..classes {
        for c in 0..3 {
            let grid = &coarse[(k * 3 + c) * coarse_side * coarse_side
                ..(k * 3 + c + 1) * coarse_side * coarse_side];
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    // align_corners = false bilinear sampling.
                    let fy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, coarse_side as f64 - 1.0);
                    let fx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, coarse_side as f64 - 1.0);
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(coarse_side - 1), (x0 + 1).min(coarse_side - 1));
                    let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
                    let v = grid[y0 * coarse_side + x0] * (1.0 - wy) * (1.0 - wx)
                        + grid[y0 * coarse_side + x1] * (1.0 - wy) * wx
                        + grid[y1 * coarse_side + x0] * wy * (1.0 - wx)
                        + grid[y1 * coarse_side + x1] * wy * wx;
                    out[(k * 3 + c) * IMAGE_PIXELS + y * IMAGE_SIDE + x] = v;
                }
            }
        }
    }
    out
}

/// Draws `m` samples: a uniformly random class prototype plus isotropic
/// Gaussian pixel noise with standard deviation `difficulty`. The same seed
/// always produces the same prototypes; the split name separates the train
/// and test streams.
pub fn synth_split(seed: u64, m: usize, classes: usize, difficulty: f64, split: &str) -> RawSplit {
    let prototypes = synth_prototypes(seed, classes);
    let mut rng = Rng::new(seed).derive(&format!("synth-{split}"));
    let mut images = Vec::with_capacity(m * IMAGE_VALUES);
    let mut labels = Vec::with_capacity(m);
    for _ in 0..m {
        let k = rng.below(classes);
        labels.push(k);
        let proto = &prototypes[k * IMAGE_VALUES..(k + 1) * IMAGE_VALUES];
        for &p in proto {
            images.push(p + difficulty * rng.normal());
        }
    }
    RawSplit {
        images,
        labels,
        classes,
    }
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

/// Random crop after a 4-pixel zero pad, then a coin-flip horizontal
/// mirror. Shape and label are untouched.
pub fn augment_crop_flip(img: &[f64], rng: &mut Rng) -> Vec<f64> {
    const PAD: usize = 4;
    debug_assert_eq!(img.len(), IMAGE_VALUES);
    let dy = rng.below(2 * PAD + 1);
    let dx = rng.below(2 * PAD + 1);
    let flip = rng.coin();

    let mut out = vec![0.0; IMAGE_VALUES];
    for c in 0..3 {
        for y in 0..IMAGE_SIDE {
            let sy = (y + dy) as isize - PAD as isize;
            if sy < 0 || sy >= IMAGE_SIDE as isize {
                continue;
            }
            for x in 0..IMAGE_SIDE {
                let sx = (x + dx) as isize - PAD as isize;
                if sx < 0 || sx >= IMAGE_SIDE as isize {
                    continue;
                }
                let tx = if flip { IMAGE_SIDE - 1 - x } else { x };
                out[c * IMAGE_PIXELS + y * IMAGE_SIDE + tx] =
                    img[c * IMAGE_PIXELS + sy as usize * IMAGE_SIDE + sx as usize];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// dataset specs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Synth { classes: usize, difficulty: f64 },
    Cifar { variant: CifarVariant, dir: std::path::PathBuf },
}

impl DataSpec {
    pub fn classes(&self) -> usize {
        match self {
            DataSpec::Synth { classes, .. } => *classes,
            DataSpec::Cifar { variant, .. } => variant.classes(),
        }
    }
}

/// Loads the train/test raw splits: the first `train_size` / `test_size`
/// records of the files `train.bin` / `test.bin` for CIFAR, or freshly
/// synthesized samples.
pub fn load_splits(
    spec: &DataSpec,
    seed: u64,
    train_size: usize,
    test_size: usize,
) -> Result<(RawSplit, RawSplit)> {
    match spec {
        DataSpec::Synth { classes, difficulty } => Ok((
            synth_split(seed, train_size, *classes, *difficulty, "train"),
            synth_split(seed, test_size, *classes, *difficulty, "test"),
        )),
        DataSpec::Cifar { variant, dir } => {
            let train = load_cifar_file(&dir.join("train.bin"), *variant)?;
            let test = load_cifar_file(&dir.join("test.bin"), *variant)?;
            if train.len() < train_size || test.len() < test_size {
                return Err(Error::Config(format!(
                    "requested {train_size}/{test_size} records, files hold {}/{}",
                    train.len(),
                    test.len()
                )));
            }
            Ok((
                records_to_split(&train, train_size, variant.classes()),
                records_to_split(&test, test_size, variant.classes()),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_records(n: usize, variant: CifarVariant) -> Vec<CifarRecord> {
        let mut rng = Rng::new(4242);
        (0..n)
            .map(|i| CifarRecord {
                label: (i % variant.classes().min(256)) as u8,
                coarse_label: match variant {
                    CifarVariant::C10 => 0,
                    CifarVariant::C100 => (i % 20) as u8,
                },
                pixels: (0..IMAGE_VALUES).map(|_| (rng.next_u64() & 0xff) as u8).collect(),
            })
            .collect()
    }

    #[test]
    fn cifar_roundtrip_both_variants() {
        for variant in [CifarVariant::C10, CifarVariant::C100] {
            let records = sample_records(10, variant);
            let bytes = encode_records(&records, variant);
            assert_eq!(bytes.len(), 10 * variant.record_len());
            let back = decode_records(&bytes, variant).unwrap();
            assert_eq!(records, back);
        }
    }

    #[test]
    fn truncated_cifar_is_rejected() {
        let records = sample_records(3, CifarVariant::C10);
        let mut bytes = encode_records(&records, CifarVariant::C10);
        bytes.push(7); // 3073*n + 1
        assert!(matches!(
            decode_records(&bytes, CifarVariant::C10),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut records = sample_records(1, CifarVariant::C10);
        records[0].label = 11;
        let bytes = encode_records(&records, CifarVariant::C10);
        assert!(decode_records(&bytes, CifarVariant::C10).is_err());
    }

    #[test]
    fn c100_uses_fine_label() {
        let mut records = sample_records(1, CifarVariant::C100);
        records[0].coarse_label = 5;
        records[0].label = 73;
        let bytes = encode_records(&records, CifarVariant::C100);
        let back = decode_records(&bytes, CifarVariant::C100).unwrap();
        assert_eq!(back[0].label, 73);
        let split = records_to_split(&back, 1, 100);
        assert_eq!(split.labels, vec![73]);
    }

    #[test]
    fn zero_pixels_normalize_to_negative_mean_over_std() {
        // One black record and one bright record so stats are non-trivial.
        let mut records = sample_records(2, CifarVariant::C10);
        records[0].pixels = vec![0; IMAGE_VALUES];
        records[0].label = 3;
        let split = records_to_split(&records, 2, 10);
        let stats = compute_norm_stats(&split);
        let ds = normalize(&split, &stats);
        for c in 0..3 {
            let want = (0.0 - stats.mean[c]) / stats.std[c];
            for &v in &ds.image(0)[c * IMAGE_PIXELS..(c + 1) * IMAGE_PIXELS] {
                assert!((v - want).abs() < 1e-12);
            }
        }
        assert_eq!(ds.labels[0], 3);
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let a = synth_split(9, 16, 4, 1.0, "train");
        let b = synth_split(9, 16, 4, 1.0, "train");
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        let c = synth_split(10, 16, 4, 1.0, "train");
        assert_ne!(a.images, c.images);
        // Train and test streams differ but share prototypes.
        let d = synth_split(9, 16, 4, 1.0, "test");
        assert_ne!(a.images, d.images);
    }

    #[test]
    fn zero_difficulty_is_nearest_prototype_perfect() {
        let k = 4;
        let split = synth_split(3, 32, k, 0.0, "train");
        let prototypes = synth_prototypes(3, k);
        for i in 0..split.len() {
            let img = &split.images[i * IMAGE_VALUES..(i + 1) * IMAGE_VALUES];
            let mut best = (f64::INFINITY, usize::MAX);
            for cls in 0..k {
                let proto = &prototypes[cls * IMAGE_VALUES..(cls + 1) * IMAGE_VALUES];
                let d2: f64 = img.iter().zip(proto).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < best.0 {
                    best = (d2, cls);
                }
            }
            assert_eq!(best.1, split.labels[i]);
        }
    }

    #[test]
    fn augmentation_preserves_shape_and_is_seeded() {
        let mut rng = Rng::new(77);
        let img: Vec<f64> = (0..IMAGE_VALUES).map(|i| i as f64).collect();
        let out = augment_crop_flip(&img, &mut rng);
        assert_eq!(out.len(), IMAGE_VALUES);

        let mut r1 = Rng::new(5);
        let mut r2 = Rng::new(5);
        assert_eq!(augment_crop_flip(&img, &mut r1), augment_crop_flip(&img, &mut r2));
    }
}
