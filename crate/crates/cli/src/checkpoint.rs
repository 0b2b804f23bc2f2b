//! Binary model checkpoints.
//!
//! Layout, little-endian: magic `XCK1`, config hash `u64`, activation `u8`
//! (0 tanh, 1 identity), layer count `u32`, then for each layer its output
//! and input widths (`u32` each), weights and biases as `f32`. The classifier
//! follows as rows `u64`, cols `u32` and its `f32` data.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use xclass_core::math::{Activation, DenseMatrix, Mlp};
use xclass_core::sim::Model;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XCK1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub model: Model,
}

fn put_f32s(w: &mut impl Write, v: &[f32]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).context("truncated checkpoint")?;
    Ok(b)
}

fn get_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    (0..n).map(|_| Ok(f32::from_le_bytes(get(r)?))).collect()
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = BufWriter::new(f);
    let net = &ck.model.extractor;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&ck.config_hash.to_le_bytes())?;
    w.write_all(&[match net.activation() {
        Activation::Tanh => 0u8,
        Activation::Identity => 1,
    }])?;
    w.write_all(&(net.num_layers() as u32).to_le_bytes())?;
    for (wt, b) in net.weights().iter().zip(net.biases()) {
        w.write_all(&(wt.rows() as u32).to_le_bytes())?;
        w.write_all(&(wt.cols() as u32).to_le_bytes())?;
        put_f32s(&mut w, wt.as_slice())?;
        put_f32s(&mut w, b)?;
    }
    let fc = &ck.model.classifier;
    w.write_all(&(fc.rows() as u64).to_le_bytes())?;
    w.write_all(&(fc.cols() as u32).to_le_bytes())?;
    put_f32s(&mut w, fc.as_slice())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = fs::File::open(path).with_context(|| format!("cannot open checkpoint {}", path.display()))?;
    let mut r = BufReader::new(f);
    if &get::<4>(&mut r)? != CHECKPOINT_MAGIC {
        bail!("{} is not a checkpoint (bad magic)", path.display());
    }
    let config_hash = u64::from_le_bytes(get(&mut r)?);
    let activation = match get::<1>(&mut r)?[0] {
        0 => Activation::Tanh,
        1 => Activation::Identity,
        a => bail!("unknown activation code {a}"),
    };
    let layers = u32::from_le_bytes(get(&mut r)?) as usize;
    ensure!(layers > 0 && layers < 1024, "implausible layer count {layers}");
    let mut weights = Vec::with_capacity(layers);
    let mut biases = Vec::with_capacity(layers);
    for _ in 0..layers {
        let rows = u32::from_le_bytes(get(&mut r)?) as usize;
        let cols = u32::from_le_bytes(get(&mut r)?) as usize;
        weights.push(DenseMatrix::from_vec(rows, cols, get_f32s(&mut r, rows * cols)?)?);
        biases.push(get_f32s(&mut r, rows)?);
    }
    let extractor = Mlp::from_parts(weights, biases, activation)?;
    let rows = u64::from_le_bytes(get(&mut r)?) as usize;
    let cols = u32::from_le_bytes(get(&mut r)?) as usize;
    ensure!(
        cols == extractor.output_dim(),
        "classifier width {cols} does not match embedding width {}",
        extractor.output_dim()
    );
    let classifier = DenseMatrix::from_vec(rows, cols, get_f32s(&mut r, rows * cols)?)?;
    let mut rest = [0u8; 1];
    ensure!(r.read(&mut rest)? == 0, "trailing bytes after checkpoint");
    Ok(Checkpoint {
        config_hash,
        model: Model { extractor, classifier },
    })
}
