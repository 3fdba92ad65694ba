//! Datasets, splits and label corruption.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::config::{DatasetSpec, TrainerConfig};
use crate::error::HarnessError;

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<u32>,
    pub dim: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            dim: self.dim,
            classes: self.classes,
        }
    }
}

/// Train/val/test partition. Only `train.labels` is corrupted;
/// `clean_labels` and `flipped` keep the ground truth for grading.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub clean_labels: Vec<u32>,
    pub flipped: Vec<bool>,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn flipped_count(&self) -> usize {
        self.flipped.iter().filter(|&&f| f).count()
    }
}

pub fn gaussian_blobs(
    classes: usize,
    dim: usize,
    separation: f64,
    samples: usize,
    center_seed: u64,
    center_shift: f64,
    rng: &mut ChaCha8Rng,
) -> Dataset {
    let mut crng = ChaCha8Rng::seed_from_u64(center_seed);
    let spread = Normal::new(0.0, separation.max(0.0)).expect("finite separation");
    let mut centers: Vec<f64> = (0..classes * dim).map(|_| spread.sample(&mut crng)).collect();
    if center_shift != 0.0 {
        let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut crng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        for c in centers.chunks_mut(dim) {
            for (x, u) in c.iter_mut().zip(&dir) {
                *x += center_shift * u / norm;
            }
        }
    }
    let mut features = Vec::with_capacity(samples * dim);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let k = i % classes;
        labels.push(k as u32);
        for j in 0..dim {
            let e: f64 = StandardNormal.sample(rng);
            features.push(centers[k * dim + j] + e);
        }
    }
    Dataset {
        features,
        labels,
        dim,
        classes,
    }
}

pub fn two_moons(samples: usize, noise: f64, rng: &mut ChaCha8Rng) -> Dataset {
    let jitter = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut features = Vec::with_capacity(samples * 2);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let t = rng.random_range(0.0..std::f64::consts::PI);
        let (x, y) = if i % 2 == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        features.push(x + jitter.sample(rng));
        features.push(y + jitter.sample(rng));
        labels.push((i % 2) as u32);
    }
    Dataset {
        features,
        labels,
        dim: 2,
        classes: 2,
    }
}

pub fn load_csv(path: &Path) -> Result<Dataset, HarnessError> {
    let load_err = |m: String| HarnessError::DatasetLoad(format!("{}: {m}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| load_err(e.to_string()))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| load_err(e.to_string()))?;
        let values: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let values = match values {
            Ok(v) => v,
            Err(_) if line == 0 => continue,
            Err(e) => return Err(load_err(format!("line {}: {e}", line + 1))),
        };
        if values.len() < 2 {
            return Err(load_err(format!("line {}: need features and a label", line + 1)));
        }
        let d = values.len() - 1;
        if *dim.get_or_insert(d) != d {
            return Err(load_err(format!("line {}: ragged row", line + 1)));
        }
        let label = values[d];
        if label < 0.0 || label.fract() != 0.0 {
            return Err(load_err(format!("line {}: label {label} is not a class index", line + 1)));
        }
        features.extend_from_slice(&values[..d]);
        labels.push(label as u32);
    }
    let dim = dim.ok_or_else(|| load_err("no data rows".into()))?;
    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    Ok(Dataset {
        features,
        labels,
        dim,
        classes,
    })
}

fn idx_payload(bytes: &[u8], expected_type: u8, what: &str) -> Result<(Vec<usize>, usize), HarnessError> {
    let err = |m: &str| HarnessError::DatasetLoad(format!("{what}: {m}"));
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(err("bad IDX magic"));
    }
    if bytes[2] != expected_type {
        return Err(err("unsupported IDX element type (expected unsigned byte)"));
    }
    let ndims = bytes[3] as usize;
    let start = 4 + 4 * ndims;
    if bytes.len() < start {
        return Err(err("truncated IDX header"));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let total: usize = dims.iter().product();
    if bytes.len() < start + total {
        return Err(err("truncated IDX payload"));
    }
    Ok((dims, start))
}

/// Reads IDX images (pixels scaled to [0, 1]) and their labels.
pub fn load_idx(images: &Path, labels: &Path, subsample: Option<usize>) -> Result<Dataset, HarnessError> {
    let read = |p: &Path| fs::read(p).map_err(|e| HarnessError::DatasetLoad(format!("{}: {e}", p.display())));
    let img = read(images)?;
    let lab = read(labels)?;
    let (idims, istart) = idx_payload(&img, 0x08, "images")?;
    let (ldims, lstart) = idx_payload(&lab, 0x08, "labels")?;
    if idims.is_empty() || ldims.len() != 1 || idims[0] != ldims[0] {
        return Err(HarnessError::DatasetLoad("image and label counts differ".into()));
    }
    let n = subsample.map_or(idims[0], |s| s.min(idims[0]));
    let dim: usize = idims[1..].iter().product();
    let features = img[istart..istart + n * dim].iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<u32> = lab[lstart..lstart + n].iter().map(|&l| l as u32).collect();
    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    Ok(Dataset {
        features,
        labels,
        dim,
        classes,
    })
}

/// Flips exactly round(fraction·n) labels to a different, uniformly chosen
/// class. Returns the flip mask.
pub fn flip_labels(labels: &mut [u32], classes: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let n = labels.len();
    let mut mask = vec![false; n];
    if classes < 2 {
        return mask;
    }
    let k = ((fraction * n as f64).round() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    for &i in &idx[..k] {
        let shift = rng.random_range(1..classes as u32);
        labels[i] = (labels[i] + shift) % classes as u32;
        mask[i] = true;
    }
    mask
}

/// Replaces every label with a uniform draw; the mask marks the labels
/// that changed.
pub fn randomize_labels(labels: &mut [u32], classes: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    labels
        .iter_mut()
        .map(|l| {
            let new = rng.random_range(0..classes.max(1) as u32);
            let changed = new != *l;
            *l = new;
            changed
        })
        .collect()
}

/// Builds the dataset named by `cfg` and splits it. The test and validation
/// sets always keep clean labels.
pub fn prepare(cfg: &TrainerConfig) -> Result<Splits, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let full = match &cfg.dataset {
        DatasetSpec::GaussianBlobs {
            classes,
            dim,
            separation,
            samples,
            center_seed,
            center_shift,
        } => gaussian_blobs(
            *classes,
            *dim,
            *separation,
            *samples,
            center_seed.unwrap_or(cfg.seed),
            *center_shift,
            &mut rng,
        ),
        DatasetSpec::TwoMoons { samples, noise } => two_moons(*samples, *noise, &mut rng),
        DatasetSpec::CsvDataset { path } => load_csv(path)?,
        DatasetSpec::IdxImages {
            path,
            labels_path,
            subsample,
        } => load_idx(path, labels_path, *subsample)?,
    };
    if full.classes < 2 {
        return Err(HarnessError::DatasetLoad("need at least two classes".into()));
    }
    let n = full.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let n_test = (cfg.test_fraction * n as f64).round() as usize;
    let n_val = (cfg.val_fraction * n as f64).round() as usize;
    if n_test + n_val >= n {
        return Err(HarnessError::DatasetLoad("no samples left for training".into()));
    }
    let test = full.subset(&idx[..n_test]);
    let val = full.subset(&idx[n_test..n_test + n_val]);
    let mut train = full.subset(&idx[n_test + n_val..]);
    let clean_labels = train.labels.clone();
    let flipped = if cfg.random_labels {
        randomize_labels(&mut train.labels, train.classes, &mut rng)
    } else {
        flip_labels(&mut train.labels, train.classes, cfg.label_noise_fraction, &mut rng)
    };
    Ok(Splits {
        train,
        clean_labels,
        flipped,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flips_exact_count_to_other_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clean: Vec<u32> = (0..1000).map(|i| i % 4).collect();
        let mut noisy = clean.clone();
        let mask = flip_labels(&mut noisy, 4, 0.2, &mut rng);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 200);
        for i in 0..1000 {
            assert_eq!(mask[i], clean[i] != noisy[i]);
        }
    }

    #[test]
    fn splits_partition_and_keep_eval_labels_clean() {
        let cfg = TrainerConfig {
            label_noise_fraction: 0.3,
            ..TrainerConfig::default()
        };
        let s = prepare(&cfg).unwrap();
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 2000);
        assert_eq!(s.test.len(), 400);
        assert_eq!(s.flipped_count(), (0.3 * s.train.len() as f64).round() as usize);
        let again = prepare(&cfg).unwrap();
        assert_eq!(s.train, again.train);
    }

    #[test]
    fn idx_round_trip() {
        let dir = std::env::temp_dir().join(format!("gwa-idx-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend((0..12).map(|v| v * 20));
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 3, 1, 0, 2];
        fs::write(dir.join("img"), &img).unwrap();
        fs::write(dir.join("lab"), &lab).unwrap();
        let d = load_idx(&dir.join("img"), &dir.join("lab"), Some(2)).unwrap();
        assert_eq!((d.len(), d.dim, d.classes), (2, 4, 2));
        assert!((d.row(1)[0] - 80.0 / 255.0).abs() < 1e-12);
        fs::write(dir.join("bad"), &img[..20]).unwrap();
        assert!(load_idx(&dir.join("bad"), &dir.join("lab"), None).is_err());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn csv_with_header() {
        let path = std::env::temp_dir().join(format!("gwa-csv-{}.csv", std::process::id()));
        fs::write(&path, "x,y,label\n0.5,1.0,0\n-1,2,1\n3,4,2\n").unwrap();
        let d = load_csv(&path).unwrap();
        assert_eq!((d.len(), d.dim, d.classes), (3, 2, 3));
        fs::write(&path, "0.5,1.0,0\n1,2\n").unwrap();
        assert!(load_csv(&path).is_err());
        fs::remove_file(&path).unwrap();
    }
}
