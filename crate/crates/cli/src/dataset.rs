//! Synthetic class clusters and the binary dataset format.
//!
//! File layout, little-endian: magic `XDS1`, class count `u64`, feature
//! width `u32`, sample count `u64`, then `count * width` `f32` features and
//! `count` `u32` labels. A `<file>.meta` text sidecar records how the data
//! was made.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use xclass_core::math::DenseMatrix;

pub const DATASET_MAGIC: &[u8; 4] = b"XDS1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    /// Expected Euclidean norm of the noise added to each unit mean.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, rows: &[usize]) -> Result<(DenseMatrix, Vec<usize>)> {
        let x = self.features.gather_rows(rows)?;
        Ok((x, rows.iter().map(|&r| self.labels[r]).collect()))
    }
}

fn unit(v: &mut [f32]) {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Gaussian clusters on the unit sphere: each class gets a random unit mean
/// and every sample is `normalize(mean + noise)` with isotropic noise of
/// per-coordinate deviation `spread / sqrt(dim)`. Returns (train, test).
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    ensure!(
        spec.classes > 0 && spec.dim > 0 && spec.train_per_class > 0,
        "classes, dim and train_per_class must be positive"
    );
    ensure!(spec.spread >= 0.0, "spread must be nonnegative");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = (spec.spread / (spec.dim as f64).sqrt()) as f32;
    let per_class = spec.train_per_class + spec.test_per_class;
    let mut train = Vec::with_capacity(spec.classes * spec.train_per_class * spec.dim);
    let mut test = Vec::with_capacity(spec.classes * spec.test_per_class * spec.dim);
    let mut normal = || -> f32 { StandardNormal.sample(&mut rng) };
    for _ in 0..spec.classes {
        let mut mean: Vec<f32> = (0..spec.dim).map(|_| normal()).collect();
        unit(&mut mean);
        for s in 0..per_class {
            let mut x: Vec<f32> = mean.iter().map(|m| m + sigma * normal()).collect();
            unit(&mut x);
            if s < spec.train_per_class {
                train.extend(x);
            } else {
                test.extend(x);
            }
        }
    }
    let labels = |n: usize| -> Vec<usize> { (0..spec.classes).flat_map(|c| std::iter::repeat_n(c, n)).collect() };
    let make = |data: Vec<f32>, n: usize| -> Result<Dataset> {
        Ok(Dataset {
            num_classes: spec.classes,
            features: DenseMatrix::from_vec(spec.classes * n, spec.dim, data)?,
            labels: labels(n),
        })
    };
    Ok((make(train, spec.train_per_class)?, make(test, spec.test_per_class)?))
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = BufWriter::new(f);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&(ds.num_classes as u64).to_le_bytes())?;
    w.write_all(&(ds.dim() as u32).to_le_bytes())?;
    w.write_all(&(ds.len() as u64).to_le_bytes())?;
    for v in ds.features.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    for &y in &ds.labels {
        w.write_all(&(y as u32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).with_context(|| format!("truncated dataset: missing {what}"))?;
    Ok(b)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = fs::File::open(path).with_context(|| format!("cannot open dataset {}", path.display()))?;
    let mut r = BufReader::new(f);
    if &read_array::<4>(&mut r, "magic")? != DATASET_MAGIC {
        bail!("{} is not a dataset file (bad magic)", path.display());
    }
    let classes = u64::from_le_bytes(read_array(&mut r, "class count")?) as usize;
    let dim = u32::from_le_bytes(read_array(&mut r, "width")?) as usize;
    let count = u64::from_le_bytes(read_array(&mut r, "sample count")?) as usize;
    let mut features = Vec::with_capacity(count.saturating_mul(dim).min(1 << 28));
    for _ in 0..count * dim {
        features.push(f32::from_le_bytes(read_array(&mut r, "features")?));
    }
    let mut labels = Vec::with_capacity(count.min(1 << 28));
    for _ in 0..count {
        let y = u32::from_le_bytes(read_array(&mut r, "labels")?) as usize;
        ensure!(y < classes, "label {y} out of range for {classes} classes");
        labels.push(y);
    }
    Ok(Dataset {
        num_classes: classes,
        features: DenseMatrix::from_vec(count, dim, features)?,
        labels,
    })
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes `<dir>/train.xds` and `<dir>/test.xds` with their sidecars.
pub fn write_synthetic(dir: &Path, spec: &SyntheticSpec, seed: u64) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let (train, test) = generate_synthetic(spec, seed)?;
    let mut out = Vec::new();
    for (name, ds) in [("train", &train), ("test", &test)] {
        let path = dir.join(format!("{name}.xds"));
        write_dataset(&path, ds)?;
        let meta = format!(
            "split={name}\nclasses={}\ndim={}\ncount={}\ntrain_per_class={}\ntest_per_class={}\nspread={}\nseed={seed}\n",
            spec.classes,
            spec.dim,
            ds.len(),
            spec.train_per_class,
            spec.test_per_class,
            spec.spread
        );
        fs::write(meta_path(&path), meta)?;
        out.push(path);
    }
    Ok((out[0].clone(), out[1].clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(spread: f64) -> SyntheticSpec {
        SyntheticSpec {
            classes: 5,
            train_per_class: 4,
            test_per_class: 2,
            dim: 8,
            spread,
        }
    }

    #[test]
    fn zero_spread_repeats_the_mean() {
        let (train, test) = generate_synthetic(&spec(0.0), 3).unwrap();
        assert_eq!(train.len(), 20);
        assert_eq!(test.len(), 10);
        for c in 0..5 {
            let first = train.features.row(c * 4);
            for s in 1..4 {
                assert_eq!(train.features.row(c * 4 + s), first);
            }
            assert_eq!(test.features.row(c * 2), first);
        }
    }

    #[test]
    fn samples_are_unit_norm() {
        let (train, _) = generate_synthetic(&spec(0.3), 1).unwrap();
        for r in train.features.row_iter() {
            let n: f32 = r.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = generate_synthetic(&spec(0.3), 9).unwrap();
        let p = dir.path().join("d.xds");
        write_dataset(&p, &train).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), train);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"XDS1");
        assert_eq!(bytes.len(), 4 + 8 + 4 + 8 + 20 * 8 * 4 + 20 * 4);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.xds");
        fs::write(&p, b"NOPE").unwrap();
        assert!(read_dataset(&p).is_err());
    }
}
