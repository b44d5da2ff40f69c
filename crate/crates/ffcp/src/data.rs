//! Dataset construction: synthetic generators, strict CSV ingestion, seeded
//! splitting, and train-fold standardization.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::RowMatrix;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: RowMatrix,
    pub targets: RowMatrix,
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
    /// Where the data came from (generator tag or file path).
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn target_dim(&self) -> usize {
        self.targets.cols()
    }

    fn validate(&self) -> Result<()> {
        if self.len() == 0 {
            return Err(Error::Empty("dataset".into()));
        }
        if self.features.as_slice().iter().any(|v| !v.is_finite())
            || self.targets.as_slice().iter().any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("dataset entry".into()));
        }
        Ok(())
    }
}

/// Disjoint train/calibration/test indices over one dataset.
#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub train_idx: Vec<usize>,
    pub cal_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
}

/// `Y = W·X + ε` with `X` uniform on `[0,1]^d`, `W` a fixed seeded row of
/// standard normals, `ε` standard normal scaled by `noise_scale`.
pub fn gen_synthetic(n: usize, d_x: usize, seed: u64, noise_scale: f64) -> Result<Dataset> {
    gen_linear(n, d_x, seed, noise_scale, false)
}

/// Heteroscedastic variant `Y = W·X + |W₂·X|·ε`: noise magnitude varies with
/// the input through a second fixed matrix, so adaptive-width methods have
/// something to adapt to.
pub fn gen_synthetic_hetero(n: usize, d_x: usize, seed: u64, noise_scale: f64) -> Result<Dataset> {
    gen_linear(n, d_x, seed, noise_scale, true)
}

fn gen_linear(n: usize, d_x: usize, seed: u64, noise_scale: f64, hetero: bool) -> Result<Dataset> {
    if n == 0 || d_x == 0 {
        return Err(Error::InvalidConfig("n and d_x must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fixed coefficient rows, drawn once before any sample.
    let w: Vec<f64> = (0..d_x).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let w2: Vec<f64> = (0..d_x).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();

    let mut features = Vec::with_capacity(n * d_x);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let start = features.len();
        for _ in 0..d_x {
            features.push(rng.gen_range(0.0..1.0));
        }
        let x = &features[start..];
        let mean: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
        let eps: f64 = rng.sample(StandardNormal);
        let noise = if hetero {
            let scale: f64 = w2.iter().zip(x).map(|(a, b)| a * b).sum();
            scale.abs() * eps * noise_scale
        } else {
            eps * noise_scale
        };
        targets.push(mean + noise);
    }

    Ok(Dataset {
        features: RowMatrix::from_flat(features, n, d_x)?,
        targets: RowMatrix::from_flat(targets, n, 1)?,
        feature_names: (0..d_x).map(|j| format!("x{j}")).collect(),
        target_names: vec!["y".into()],
        provenance: if hetero {
            format!("synthetic-hetero(n={n},d={d_x},seed={seed})")
        } else {
            format!("synthetic(n={n},d={d_x},seed={seed})")
        },
    })
}

/// Gaussian class clusters for the classification pipeline: `K` seeded class
/// means in `d_x` dimensions, unit isotropic noise, labels stored as the
/// target column.
pub fn gen_synthetic_classes(
    n: usize,
    d_x: usize,
    classes: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || d_x == 0 || classes < 2 {
        return Err(Error::InvalidConfig(
            "need n >= 1, d_x >= 1, classes >= 2".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..d_x)
                .map(|_| 0.6 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut features = Vec::with_capacity(n * d_x);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.gen_range(0..classes);
        for j in 0..d_x {
            features.push(means[k][j] + rng.sample::<f64, _>(StandardNormal));
        }
        targets.push(k as f64);
    }
    Ok(Dataset {
        features: RowMatrix::from_flat(features, n, d_x)?,
        targets: RowMatrix::from_flat(targets, n, 1)?,
        feature_names: (0..d_x).map(|j| format!("x{j}")).collect(),
        target_names: vec!["class".into()],
        provenance: format!("synthetic-classes(n={n},d={d_x},k={classes},seed={seed})"),
    })
}

/// Strict CSV loader: UTF-8, comma separated, one header row, plain decimal
/// numbers, no quoting. All non-target columns become features in file order.
pub fn load_csv(path: impl AsRef<Path>, target_columns: &[String]) -> Result<Dataset> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Csv {
        path: display.clone(),
        row: 0,
        column: "-".into(),
        message: "file is empty (missing header row)".into(),
    })?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();

    // Validate requested targets against the header.
    let mut target_pos = Vec::with_capacity(target_columns.len());
    for t in target_columns {
        let hits: Vec<usize> = names.iter().enumerate().filter(|(_, n)| *n == t).map(|(i, _)| i).collect();
        if hits.is_empty() {
            return Err(Error::Csv {
                path: display.clone(),
                row: 0,
                column: t.clone(),
                message: "target column not found in header".into(),
            });
        }
        if target_pos.contains(&hits[0]) {
            return Err(Error::Csv {
                path: display.clone(),
                row: 0,
                column: t.clone(),
                message: "target column listed twice".into(),
            });
        }
        target_pos.push(hits[0]);
    }
    if target_columns.is_empty() {
        return Err(Error::Csv {
            path: display.clone(),
            row: 0,
            column: "-".into(),
            message: "at least one target column is required".into(),
        });
    }

    let mut feature_rows = Vec::new();
    let mut target_rows = Vec::new();
    for (row_idx, line) in lines.enumerate() {
        let row_number = row_idx + 2; // 1-based, after the header
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != names.len() {
            return Err(Error::Csv {
                path: display.clone(),
                row: row_number,
                column: "-".into(),
                message: format!("{} cells, header has {}", cells.len(), names.len()),
            });
        }
        let mut frow = Vec::with_capacity(names.len() - target_pos.len());
        let mut trow = vec![0.0; target_pos.len()];
        for (col, cell) in cells.iter().enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(Error::Csv {
                    path: display.clone(),
                    row: row_number,
                    column: names[col].clone(),
                    message: "missing value".into(),
                });
            }
            let value: f64 = cell.parse().map_err(|_| Error::Csv {
                path: display.clone(),
                row: row_number,
                column: names[col].clone(),
                message: format!("not a number: {cell:?}"),
            })?;
            if !value.is_finite() {
                return Err(Error::Csv {
                    path: display.clone(),
                    row: row_number,
                    column: names[col].clone(),
                    message: format!("non-finite value: {cell:?}"),
                });
            }
            if let Some(k) = target_pos.iter().position(|&p| p == col) {
                trow[k] = value;
            } else {
                frow.push(value);
            }
        }
        feature_rows.push(frow);
        target_rows.push(trow);
    }
    if feature_rows.is_empty() {
        return Err(Error::Csv {
            path: display.clone(),
            row: 1,
            column: "-".into(),
            message: "no data rows".into(),
        });
    }

    let feature_names: Vec<String> = names
        .iter()
        .enumerate()
        .filter(|(i, _)| !target_pos.contains(i))
        .map(|(_, n)| n.clone())
        .collect();
    Ok(Dataset {
        features: RowMatrix::from_rows(&feature_rows)?,
        targets: RowMatrix::from_rows(&target_rows)?,
        feature_names,
        target_names: target_columns.to_vec(),
        provenance: display,
    })
}

/// Write a dataset in the exact format [`load_csv`] reads. Numbers use the
/// shortest round-trip formatting, so write→load is bit-exact.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    let header: Vec<&str> = dataset
        .feature_names
        .iter()
        .chain(&dataset.target_names)
        .map(String::as_str)
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..dataset.len() {
        let mut first = true;
        for v in dataset.features.row(i).iter().chain(dataset.targets.row(i)) {
            if !first {
                out.push(',');
            }
            let _ = write!(out, "{v}");
            first = false;
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Seeded shuffle + contiguous partition into train/calibration/test folds.
///
/// Fold sizes are floors of `ratio * n` with the remainder distributed to the
/// earlier folds in order. Errors if any fold would be empty.
pub fn split(dataset: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<FoldSplit> {
    dataset.validate()?;
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) {
        return Err(Error::InvalidConfig("fold ratios must be positive".into()));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "fold ratios must sum to 1, got {}",
            a + b + c
        )));
    }
    let n = dataset.len();
    let mut sizes = [
        (a * n as f64).floor() as usize,
        (b * n as f64).floor() as usize,
        (c * n as f64).floor() as usize,
    ];
    let mut remainder = n - sizes.iter().sum::<usize>();
    for s in sizes.iter_mut() {
        if remainder == 0 {
            break;
        }
        *s += 1;
        remainder -= 1;
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::InvalidConfig(format!(
            "fold sizes {sizes:?} include an empty fold (n = {n})"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);

    let train_idx = order[..sizes[0]].to_vec();
    let cal_idx = order[sizes[0]..sizes[0] + sizes[1]].to_vec();
    let test_idx = order[sizes[0] + sizes[1]..].to_vec();
    Ok(FoldSplit {
        train_idx,
        cal_idx,
        test_idx,
        seed,
    })
}

/// Mean/std pairs used by [`standardize`]; enough to undo the transform.
#[derive(Debug, Clone)]
pub struct TransformRecord {
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub target_means: Vec<f64>,
    pub target_stds: Vec<f64>,
    /// Columns left untouched because their train-fold variance was zero.
    pub passthrough_features: Vec<usize>,
    pub passthrough_targets: Vec<usize>,
}

impl TransformRecord {
    /// Undo the target transform for one row.
    pub fn inverse_targets(&self, scaled: &[f64]) -> Vec<f64> {
        scaled
            .iter()
            .enumerate()
            .map(|(j, v)| v * self.target_stds[j] + self.target_means[j])
            .collect()
    }

    /// Band length in original target units for coordinate `j`.
    pub fn unscale_target_length(&self, j: usize, length: f64) -> f64 {
        length * self.target_stds[j]
    }
}

/// Z-score features and targets using train-fold statistics only.
///
/// Zero-variance columns pass through unscaled and are listed in the record.
pub fn standardize(dataset: &Dataset, fold: &FoldSplit) -> Result<(Dataset, TransformRecord)> {
    standardize_with(dataset, fold, true)
}

/// [`standardize`] with optional target scaling; classification labels must
/// stay raw.
pub fn standardize_with(
    dataset: &Dataset,
    fold: &FoldSplit,
    scale_targets: bool,
) -> Result<(Dataset, TransformRecord)> {
    if fold.train_idx.is_empty() {
        return Err(Error::Empty("training fold".into()));
    }
    let (fm, fs, fpass) = column_stats(&dataset.features, &fold.train_idx);
    let (tm, ts, tpass) = if scale_targets {
        column_stats(&dataset.targets, &fold.train_idx)
    } else {
        (
            vec![0.0; dataset.target_dim()],
            vec![1.0; dataset.target_dim()],
            Vec::new(),
        )
    };

    let mut features = dataset.features.clone();
    apply_zscore(&mut features, &fm, &fs);
    let mut targets = dataset.targets.clone();
    apply_zscore(&mut targets, &tm, &ts);

    let record = TransformRecord {
        feature_means: fm,
        feature_stds: fs,
        target_means: tm,
        target_stds: ts,
        passthrough_features: fpass,
        passthrough_targets: tpass,
    };
    Ok((
        Dataset {
            features,
            targets,
            feature_names: dataset.feature_names.clone(),
            target_names: dataset.target_names.clone(),
            provenance: format!("{} [standardized]", dataset.provenance),
        },
        record,
    ))
}

/// Per-column mean and std over the given rows. Zero-variance columns report
/// mean 0 / std 1 (identity transform) and land in the passthrough list.
fn column_stats(m: &RowMatrix, rows: &[usize]) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let n = rows.len() as f64;
    let mut means = vec![0.0; m.cols()];
    let mut stds = vec![0.0; m.cols()];
    let mut passthrough = Vec::new();
    for &i in rows {
        for (j, v) in m.row(i).iter().enumerate() {
            means[j] += v;
        }
    }
    means.iter_mut().for_each(|v| *v /= n);
    for &i in rows {
        for (j, v) in m.row(i).iter().enumerate() {
            let d = v - means[j];
            stds[j] += d * d;
        }
    }
    for j in 0..m.cols() {
        stds[j] = (stds[j] / n).sqrt();
        if stds[j] == 0.0 {
            means[j] = 0.0;
            stds[j] = 1.0;
            passthrough.push(j);
        }
    }
    (means, stds, passthrough)
}

fn apply_zscore(m: &mut RowMatrix, means: &[f64], stds: &[f64]) {
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let v = (m.get(i, j) - means[j]) / stds[j];
            m.set(i, j, v);
        }
    }
}
