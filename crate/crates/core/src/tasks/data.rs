//! Synthetic data generation and the columnar dataset file format.
//!
//! The file layout is: magic `FKDS`, format version, target kind, row
//! count, feature width, target width, then row-major little-endian f64
//! features followed by targets (labels are stored as integral f64).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{TaskConfig, TaskVariant};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tasks::{
    LogisticTask, MlpTask, QuadraticTask, SyntheticDataset, Targets, TaskModel, WeightSet,
};

const MAGIC: &[u8; 4] = b"FKDS";
const VERSION: u32 = 1;

/// Build the task described by `cfg`, generating (or loading) its dataset
/// and the initial weights from the master seed's named streams.
pub fn build_task(cfg: &TaskConfig, master_seed: u64) -> Result<TaskModel> {
    let init = init_weights(cfg, master_seed);
    let data = match &cfg.dataset_file {
        Some(path) => {
            let data = read_dataset(path)?;
            check_dataset_shape(cfg, &data)?;
            data
        }
        None => generate_dataset(cfg, master_seed, &init)?,
    };
    if let Some(path) = &cfg.export_dataset {
        write_dataset(path, &data)?;
    }
    match cfg.variant {
        TaskVariant::Quadratic => Ok(TaskModel::Quadratic(QuadraticTask::new(data, init)?)),
        TaskVariant::Logistic => Ok(TaskModel::Logistic(LogisticTask::new(data, init)?)),
        TaskVariant::TwoLayerMlp => Ok(TaskModel::Mlp(MlpTask::new(data, init)?)),
    }
}

fn init_weights(cfg: &TaskConfig, master_seed: u64) -> WeightSet {
    let mut rng = rng::stream_rng(master_seed, Stream::Init, &[]);
    let matrices = cfg
        .layer_dims()
        .iter()
        .map(|&(rows, cols)| gaussian_matrix(&mut rng, rows, cols, cfg.init_scale))
        .collect();
    WeightSet::new(matrices)
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

/// Planted update added to the initial weights to form the data-generating
/// optimum; optionally rank-limited.
fn planted_delta(
    rng: &mut impl Rng,
    rows: usize,
    cols: usize,
    rank: Option<usize>,
    scale: f64,
) -> Array2<f64> {
    match rank {
        Some(r) => {
            let u = gaussian_matrix(rng, rows, r, 1.0);
            let v = gaussian_matrix(rng, r, cols, 1.0);
            u.dot(&v) * (scale / (r as f64).sqrt())
        }
        None => gaussian_matrix(rng, rows, cols, scale),
    }
}

fn generate_dataset(
    cfg: &TaskConfig,
    master_seed: u64,
    init: &WeightSet,
) -> Result<SyntheticDataset> {
    let mut rng = rng::stream_rng(master_seed, Stream::Data, &[]);
    let n = cfg.examples;
    let d = cfg.feature_dim;

    // Gaussian features with a geometric column-scale spread so the
    // covariance spectrum spans roughly [1/condition, 1].
    let mut features = gaussian_matrix(&mut rng, n, d, 1.0);
    if cfg.condition > 1.0 {
        for (j, mut col) in features.columns_mut().into_iter().enumerate() {
            let t = if d > 1 { j as f64 / (d - 1) as f64 } else { 0.0 };
            let scale = cfg.condition.powf(-0.5 * t);
            col.mapv_inplace(|v| v * scale);
        }
    }

    let targets = match cfg.variant {
        TaskVariant::Quadratic => {
            let delta = planted_delta(
                &mut rng,
                d,
                cfg.output_dim,
                cfg.planted_rank,
                cfg.planted_scale,
            );
            let mut w_star = init.matrix(0).clone();
            w_star += &delta;
            let mut y = features.dot(&w_star);
            if cfg.noise > 0.0 {
                for v in y.iter_mut() {
                    *v += cfg.noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            Targets::Regression(y)
        }
        TaskVariant::Logistic => {
            let classes = cfg.output_dim;
            let delta = planted_delta(&mut rng, d, classes, cfg.planted_rank, cfg.planted_scale);
            let mut w_star = init.matrix(0).clone();
            w_star += &delta;
            let logits = features.dot(&w_star);
            let labels = logits
                .rows()
                .into_iter()
                .map(|row| {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let weights: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
                    let total: f64 = weights.iter().sum();
                    let mut u = rng.gen::<f64>() * total;
                    for (c, w) in weights.iter().enumerate() {
                        if u < *w {
                            return c;
                        }
                        u -= w;
                    }
                    classes - 1
                })
                .collect();
            Targets::Labels { labels, classes }
        }
        TaskVariant::TwoLayerMlp => {
            let d1 = planted_delta(
                &mut rng,
                d,
                cfg.hidden_dim,
                cfg.planted_rank,
                cfg.planted_scale,
            );
            let d2 = planted_delta(
                &mut rng,
                cfg.hidden_dim,
                cfg.output_dim,
                cfg.planted_rank,
                cfg.planted_scale,
            );
            let mut w1 = init.matrix(0).clone();
            w1 += &d1;
            let mut w2 = init.matrix(1).clone();
            w2 += &d2;
            let mut y = features.dot(&w1);
            y.mapv_inplace(f64::tanh);
            let mut y = y.dot(&w2);
            if cfg.noise > 0.0 {
                for v in y.iter_mut() {
                    *v += cfg.noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            Targets::Regression(y)
        }
    };

    Ok(SyntheticDataset { features, targets })
}

fn check_dataset_shape(cfg: &TaskConfig, data: &SyntheticDataset) -> Result<()> {
    if data.feature_dim() != cfg.feature_dim {
        return Err(Error::invalid_config(format!(
            "dataset file has feature width {}, task.feature_dim is {}",
            data.feature_dim(),
            cfg.feature_dim
        )));
    }
    let ok = match (&data.targets, cfg.variant) {
        (Targets::Regression(y), TaskVariant::Quadratic | TaskVariant::TwoLayerMlp) => {
            y.ncols() == cfg.output_dim
        }
        (Targets::Labels { classes, .. }, TaskVariant::Logistic) => *classes == cfg.output_dim,
        _ => false,
    };
    if !ok {
        return Err(Error::invalid_config(
            "dataset file targets do not match the task variant",
        ));
    }
    Ok(())
}

/// Write a dataset to the columnar binary format.
pub fn write_dataset(path: impl AsRef<Path>, data: &SyntheticDataset) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let (kind, target_width): (u32, usize) = match &data.targets {
        Targets::Regression(y) => (0, y.ncols()),
        Targets::Labels { classes, .. } => (1, *classes),
    };
    out.write_all(&kind.to_le_bytes())?;
    out.write_all(&(data.num_examples() as u64).to_le_bytes())?;
    out.write_all(&(data.feature_dim() as u64).to_le_bytes())?;
    out.write_all(&(target_width as u64).to_le_bytes())?;
    for v in data.features.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    match &data.targets {
        Targets::Regression(y) => {
            for v in y.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Targets::Labels { labels, .. } => {
            for &l in labels {
                out.write_all(&(l as f64).to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Read a dataset written by [`write_dataset`].
pub fn read_dataset(path: impl AsRef<Path>) -> Result<SyntheticDataset> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad dataset magic bytes".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let kind = read_u32(&mut input)?;
    let rows = read_u64(&mut input)? as usize;
    let feat = read_u64(&mut input)? as usize;
    let twidth = read_u64(&mut input)? as usize;
    if rows == 0 || feat == 0 || twidth == 0 {
        return Err(Error::Format("dataset header has zero dimension".into()));
    }
    let features = read_matrix(&mut input, rows, feat)?;
    let targets = match kind {
        0 => Targets::Regression(read_matrix(&mut input, rows, twidth)?),
        1 => {
            let raw = read_matrix(&mut input, rows, 1)?;
            let mut labels = Vec::with_capacity(rows);
            for &v in raw.iter() {
                if v < 0.0 || v.fract() != 0.0 || v >= twidth as f64 {
                    return Err(Error::Format(format!("invalid stored label {v}")));
                }
                labels.push(v as usize);
            }
            Targets::Labels {
                labels,
                classes: twidth,
            }
        }
        other => return Err(Error::Format(format!("unknown target kind {other}"))),
    };
    Ok(SyntheticDataset { features, targets })
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(input: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_matrix(input: &mut impl Read, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut values = Vec::with_capacity(rows * cols);
    let mut buf = [0u8; 8];
    for _ in 0..rows * cols {
        input.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| Error::Format(format!("dataset shape error: {e}")))
}
