//! Offline learning of the condensed mechanical representation: sweep the
//! actuation space, record `(delta_a, W^tri, delta_a_free)` at each
//! equilibrium, standardize element-wise over the training split, and fit a
//! small MLP mapping `(delta_a, W_0^tri, delta_0^free)` to
//! `(W^tri, delta_a_free)`.
//!
//! The training grid is a homogeneous per-cable lattice; the test set is an
//! independent random sweep of a quarter the training size. Effector-goal
//! violations are never learned: they are rebuilt from geometry at control
//! time.

pub mod mlp;

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condense::{condense_with, symmetric_from_triangle, triangle_len};
use crate::error::{Error, Result};
use crate::parallel::{map_indexed, Parallelism};
use crate::robot::RobotModel;
use mlp::{Adam, Mlp};

/// One observation of the mechanical representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub delta_a: Vec<f64>,
    pub w_tri: Vec<f64>,
    pub delta_a_free: Vec<f64>,
}

/// The zero-actuation condensed state fed to the surrogate as context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub delta_a: Vec<f64>,
    pub w_tri: Vec<f64>,
    pub delta_a_free: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SampleSet {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub anchor: AnchorRecord,
    pub n_actuators: usize,
    pub w_len: usize,
}

/// Per-cable sweep: `count` evenly spaced pull-in targets in `[min, max]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl GridAxis {
    pub fn values(&self) -> Vec<f64> {
        if self.count <= 1 {
            return vec![self.min];
        }
        (0..self.count)
            .map(|i| self.min + (self.max - self.min) * i as f64 / (self.count - 1) as f64)
            .collect()
    }
}

/// Cartesian product of the axis values, first axis fastest.
pub fn grid_points(axes: &[GridAxis]) -> Vec<Vec<f64>> {
    let values: Vec<Vec<f64>> = axes.iter().map(|a| a.values()).collect();
    let total: usize = values.iter().map(|v| v.len()).product();
    let mut points = Vec::with_capacity(total);
    let mut idx = vec![0usize; axes.len()];
    for _ in 0..total {
        points.push(idx.iter().zip(&values).map(|(&i, v)| v[i]).collect());
        for k in 0..axes.len() {
            idx[k] += 1;
            if idx[k] < values[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
    points
}

#[derive(Debug, Clone, Copy)]
pub struct CollectReport {
    pub grid_total: usize,
    pub train_kept: usize,
    pub test_kept: usize,
    pub skipped: usize,
}

/// Sweeps the actuation space and condenses each equilibrium.
///
/// Every grid point is solved independently from the anchor equilibrium, so
/// the result is bit-identical regardless of thread count. Points whose solve
/// fails are skipped with a warning.
pub fn collect(
    model: &RobotModel,
    axes: &[GridAxis],
    seed: u64,
    par: Parallelism,
) -> Result<(SampleSet, CollectReport)> {
    if axes.len() != model.cable_count() {
        return Err(Error::Dimension(format!(
            "{} grid axes for {} cables",
            axes.len(),
            model.cable_count()
        )));
    }
    let set = model.constraint_set()?;

    // Anchor: the full zero-actuation equilibrium.
    let mut anchor_sys = model.build_system()?;
    anchor_sys.solve_free()?;
    let zeros = vec![0.0; model.cable_count()];
    let anchor_state = condense_with(&mut anchor_sys, &set, &zeros, Parallelism::Sequential)?;
    let anchor = AnchorRecord {
        delta_a: anchor_state.delta_a.as_slice().to_vec(),
        w_tri: anchor_state.w_triangle(),
        delta_a_free: anchor_state.delta_a_free.as_slice().to_vec(),
    };

    let train_targets = grid_points(axes);
    let n_test = train_targets.len().div_ceil(4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let test_targets: Vec<Vec<f64>> = (0..n_test)
        .map(|_| {
            axes.iter()
                .map(|a| {
                    if a.max > a.min {
                        rng.random_range(a.min..a.max)
                    } else {
                        a.min
                    }
                })
                .collect()
        })
        .collect();

    let solve_point = |targets: &Vec<f64>| -> Option<Sample> {
        let mut sys = anchor_sys.clone();
        let tensions = match sys.solve_with_imposed_pull_ins(targets) {
            Ok((lam, _)) => lam,
            Err(e) => {
                log::warn!("grid point {targets:?} skipped: {e}");
                return None;
            }
        };
        let measured = sys.pull_ins(sys.positions());
        match condense_with(&mut sys, &set, &tensions, Parallelism::Sequential) {
            Ok(state) => Some(Sample {
                delta_a: measured,
                w_tri: state.w_triangle(),
                delta_a_free: state.delta_a_free.as_slice().to_vec(),
            }),
            Err(e) => {
                log::warn!("condensation at {targets:?} skipped: {e}");
                None
            }
        }
    };

    let train_opt = map_indexed(par, train_targets.len(), |i| solve_point(&train_targets[i]));
    let test_opt = map_indexed(par, test_targets.len(), |i| solve_point(&test_targets[i]));

    let grid_total = train_targets.len();
    let train: Vec<Sample> = train_opt.into_iter().flatten().collect();
    let test: Vec<Sample> = test_opt.into_iter().flatten().collect();
    let skipped = grid_total + n_test - train.len() - test.len();
    if train.is_empty() {
        return Err(Error::Collection(
            "every grid point failed to solve or condense".into(),
        ));
    }

    let report = CollectReport { grid_total, train_kept: train.len(), test_kept: test.len(), skipped };
    Ok((
        SampleSet {
            n_actuators: model.cable_count(),
            w_len: anchor.w_tri.len(),
            train,
            test,
            anchor,
        },
        report,
    ))
}

/// Element-wise standardization statistics, fit once on the training split.
/// Constant features keep a unit scale so they pass through unchanged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stats {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
    /// Per-cable `[min, max]` of the training actuations, for extrapolation
    /// warnings at control time.
    pub delta_a_range: Vec<[f64; 2]>,
}

const STD_GUARD: f64 = 1e-12;

fn mean_std(columns: usize, rows: impl Iterator<Item = Vec<f64>> + Clone) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; columns];
    let mut count = 0usize;
    for row in rows.clone() {
        for (m, v) in mean.iter_mut().zip(&row) {
            *m += v;
        }
        count += 1;
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = vec![0.0; columns];
    for row in rows {
        for ((s, v), m) in var.iter_mut().zip(&row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / count as f64).sqrt();
            if sd < STD_GUARD {
                1.0
            } else {
                sd
            }
        })
        .collect();
    (mean, std)
}

impl SampleSet {
    pub fn input_dim(&self) -> usize {
        self.n_actuators + self.w_len + self.anchor.delta_a_free.len()
    }

    pub fn output_dim(&self) -> usize {
        self.w_len + self.n_actuators
    }

    /// Raw network input for an actuation state: the current `delta_a`
    /// concatenated with the anchor context.
    pub fn input_vector(anchor: &AnchorRecord, delta_a: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(delta_a.len() + anchor.w_tri.len() + anchor.delta_a_free.len());
        v.extend_from_slice(delta_a);
        v.extend_from_slice(&anchor.w_tri);
        v.extend_from_slice(&anchor.delta_a_free);
        v
    }

    pub fn output_vector(sample: &Sample) -> Vec<f64> {
        let mut v = Vec::with_capacity(sample.w_tri.len() + sample.delta_a_free.len());
        v.extend_from_slice(&sample.w_tri);
        v.extend_from_slice(&sample.delta_a_free);
        v
    }

    /// Fits standardization statistics on the training split.
    pub fn fit_stats(&self) -> Result<Stats> {
        if self.train.len() < 2 {
            return Err(Error::InvalidArgument(
                "need at least 2 training samples to standardize".into(),
            ));
        }
        let inputs: Vec<Vec<f64>> = self
            .train
            .iter()
            .map(|s| Self::input_vector(&self.anchor, &s.delta_a))
            .collect();
        let outputs: Vec<Vec<f64>> = self.train.iter().map(Self::output_vector).collect();
        let (input_mean, input_std) = mean_std(self.input_dim(), inputs.iter().cloned());
        let (output_mean, output_std) = mean_std(self.output_dim(), outputs.iter().cloned());

        let mut delta_a_range = vec![[f64::INFINITY, f64::NEG_INFINITY]; self.n_actuators];
        for s in &self.train {
            for (r, &v) in delta_a_range.iter_mut().zip(&s.delta_a) {
                r[0] = r[0].min(v);
                r[1] = r[1].max(v);
            }
        }

        Ok(Stats { input_mean, input_std, output_mean, output_std, delta_a_range })
    }
}

impl Stats {
    pub fn standardize_input(&self, raw: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            raw.len(),
            raw.iter()
                .zip(&self.input_mean)
                .zip(&self.input_std)
                .map(|((v, m), s)| (v - m) / s),
        )
    }

    pub fn standardize_output(&self, raw: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            raw.len(),
            raw.iter()
                .zip(&self.output_mean)
                .zip(&self.output_std)
                .map(|((v, m), s)| (v - m) / s),
        )
    }

    pub fn unstandardize_output(&self, z: &DVector<f64>) -> Vec<f64> {
        z.iter()
            .zip(&self.output_mean)
            .zip(&self.output_std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }
}

/// Training hyperparameters. The defaults follow the recorded decisions:
/// Adam at 1e-3, mini-batches of 64, a 10000-epoch budget with
/// best-checkpoint selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: Vec::new(), // filled per robot by `auto_hidden`
            learning_rate: 1e-3,
            epochs: 10000,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Picks equal hidden widths so the total weight count lands near 400 for the
/// requested number of layers (affine stages).
pub fn auto_hidden(input: usize, output: usize, layers: usize) -> Vec<usize> {
    assert!(layers >= 1);
    if layers == 1 {
        return Vec::new();
    }
    let n_hidden = layers - 1;
    let weights_for = |h: usize| -> usize {
        input * h + (n_hidden - 1) * h * h + h * output
    };
    let mut best = 2usize;
    let mut best_gap = usize::MAX;
    for h in 2..=64 {
        let gap = weights_for(h).abs_diff(400);
        if gap < best_gap {
            best_gap = gap;
            best = h;
        }
    }
    vec![best; n_hidden]
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: u64,
    pub arch: Vec<usize>,
    pub optimizer: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_test_loss: f64,
}

/// Trained surrogate: network weights, standardization statistics, and the
/// anchor context it was trained against.
#[derive(Debug, Clone)]
pub struct SurrogateModel {
    pub mlp: Mlp,
    pub stats: Stats,
    pub anchor: AnchorRecord,
    pub meta: ModelMeta,
}

/// Trains the surrogate, returning the checkpoint with the lowest test loss
/// and the per-epoch loss curve. Deterministic under a fixed seed.
pub fn train(set: &SampleSet, cfg: &TrainConfig) -> Result<(SurrogateModel, Vec<LossPoint>)> {
    if set.train.is_empty() || set.test.is_empty() {
        return Err(Error::InvalidArgument("empty train or test split".into()));
    }
    let stats = set.fit_stats()?;

    let xs: Vec<DVector<f64>> = set
        .train
        .iter()
        .map(|s| stats.standardize_input(&SampleSet::input_vector(&set.anchor, &s.delta_a)))
        .collect();
    let ys: Vec<DVector<f64>> = set
        .train
        .iter()
        .map(|s| stats.standardize_output(&SampleSet::output_vector(s)))
        .collect();
    let xt: Vec<DVector<f64>> = set
        .test
        .iter()
        .map(|s| stats.standardize_input(&SampleSet::input_vector(&set.anchor, &s.delta_a)))
        .collect();
    let yt: Vec<DVector<f64>> = set
        .test
        .iter()
        .map(|s| stats.standardize_output(&SampleSet::output_vector(s)))
        .collect();

    let mut dims = vec![set.input_dim()];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(set.output_dim());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Mlp::new_seeded(&dims, &mut rng)?;
    let mut adam = Adam::new(&net, cfg.learning_rate);

    let test_loss = |net: &Mlp| -> f64 {
        xt.iter().zip(&yt).map(|(x, y)| (net.forward(x) - y).norm_squared()).sum::<f64>()
            / xt.len() as f64
    };

    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best_loss = test_loss(&net);
    let mut best_epoch = 0usize;
    let mut best_net = net.clone();

    for epoch in 1..=cfg.epochs {
        // Fisher-Yates shuffle, seed-deterministic.
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut grads = net.zero_gradients();
            let scale = 2.0 / chunk.len() as f64;
            for &i in chunk {
                let (out, cache) = net.forward_cached(&xs[i]);
                let err = &out - &ys[i];
                epoch_loss += err.norm_squared();
                net.backward_accumulate(&cache, &(err * scale), &mut grads);
            }
            adam.step(&mut net, &grads);
        }
        epoch_loss /= xs.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at epoch {epoch}; lower the learning rate"
            )));
        }

        let tl = test_loss(&net);
        curve.push(LossPoint { epoch, train_loss: epoch_loss, test_loss: tl });
        if tl < best_loss {
            best_loss = tl;
            best_epoch = epoch;
            best_net = net.clone();
        }
    }

    let meta = ModelMeta {
        seed: cfg.seed,
        arch: best_net.dims(),
        optimizer: "adam".into(),
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        best_epoch,
        best_test_loss: best_loss,
    };
    Ok((SurrogateModel { mlp: best_net, stats, anchor: set.anchor.clone(), meta }, curve))
}

impl SurrogateModel {
    pub fn n_actuators(&self) -> usize {
        self.anchor.delta_a.len()
    }

    pub fn w_dim(&self) -> usize {
        // w_len = d (d + 1) / 2 solved for d.
        let w_len = self.anchor.w_tri.len();
        let d = ((((8 * w_len + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
        debug_assert_eq!(triangle_len(d), w_len);
        d
    }

    /// Raw prediction `(W^tri, delta_a_free)` in physical units.
    pub fn predict_triangle(&self, delta_a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if delta_a.len() != self.n_actuators() {
            return Err(Error::Dimension(format!(
                "expected {} actuations, got {}",
                self.n_actuators(),
                delta_a.len()
            )));
        }
        let input = SampleSet::input_vector(&self.anchor, delta_a);
        let z = self.stats.standardize_input(&input);
        let out = self.mlp.forward(&z);
        let raw = self.stats.unstandardize_output(&out);
        let w_len = self.anchor.w_tri.len();
        Ok((raw[..w_len].to_vec(), raw[w_len..].to_vec()))
    }

    /// Full prediction with the symmetric compliance matrix reconstructed
    /// from its upper triangle.
    pub fn predict(&self, delta_a: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let (tri, dfree) = self.predict_triangle(delta_a)?;
        let w = symmetric_from_triangle(&tri, self.w_dim());
        Ok((w, DVector::from_vec(dfree)))
    }

    /// True when `delta_a` leaves the per-coordinate training range.
    pub fn extrapolates(&self, delta_a: &[f64]) -> bool {
        delta_a
            .iter()
            .zip(&self.stats.delta_a_range)
            .any(|(&v, r)| v < r[0] - 1e-12 || v > r[1] + 1e-12)
    }
}

// --- serialization ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LayerFile {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    layers: Vec<LayerFile>,
    stats: Stats,
    anchor: AnchorRecord,
    meta: ModelMeta,
}

impl SurrogateModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            layers: self
                .mlp
                .layers
                .iter()
                .map(|l| LayerFile {
                    w: l.w.row_iter().map(|r| r.iter().copied().collect()).collect(),
                    b: l.b.iter().copied().collect(),
                })
                .collect(),
            stats: self.stats.clone(),
            anchor: self.anchor.clone(),
            meta: self.meta.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SurrogateModel> {
        let text = std::fs::read_to_string(path)?;
        let file: ModelFile = serde_json::from_str(&text)?;
        let layers = file
            .layers
            .into_iter()
            .map(|l| {
                let rows = l.w.len();
                let cols = l.w.first().map_or(0, |r| r.len());
                let w = DMatrix::from_fn(rows, cols, |i, j| l.w[i][j]);
                mlp::Layer { w, b: DVector::from_vec(l.b) }
            })
            .collect();
        Ok(SurrogateModel {
            mlp: Mlp { layers },
            stats: file.stats,
            anchor: file.anchor,
            meta: file.meta,
        })
    }
}

/// Writes samples as CSV with the header
/// `delta_a_0,..,W_tri_0,..,delta_a_free_0,..`.
pub fn save_samples_csv(path: &Path, samples: &[Sample], n_a: usize, w_len: usize) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = Vec::new();
    header.extend((0..n_a).map(|i| format!("delta_a_{i}")));
    header.extend((0..w_len).map(|i| format!("W_tri_{i}")));
    header.extend((0..n_a).map(|i| format!("delta_a_free_{i}")));
    writeln!(out, "{}", header.join(","))?;
    for s in samples {
        let row: Vec<String> = s
            .delta_a
            .iter()
            .chain(s.w_tri.iter())
            .chain(s.delta_a_free.iter())
            .map(|v| format!("{v}"))
            .collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

fn parse_samples_csv(path: &Path) -> Result<(Vec<Sample>, usize, usize)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument(format!("{path:?}: empty dataset")))?;
    let cols: Vec<&str> = header.split(',').collect();
    let n_a = cols.iter().filter(|c| c.starts_with("delta_a_") && !c.starts_with("delta_a_free_")).count();
    let w_len = cols.iter().filter(|c| c.starts_with("W_tri_")).count();
    if n_a == 0 || w_len == 0 || cols.len() != 2 * n_a + w_len {
        return Err(Error::InvalidArgument(format!(
            "{path:?}: unrecognized dataset header"
        )));
    }
    let mut samples = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("{path:?} line {}: {e}", ln + 2)))
            })
            .collect::<Result<_>>()?;
        if vals.len() != cols.len() {
            return Err(Error::InvalidArgument(format!(
                "{path:?} line {}: {} values, expected {}",
                ln + 2,
                vals.len(),
                cols.len()
            )));
        }
        samples.push(Sample {
            delta_a: vals[..n_a].to_vec(),
            w_tri: vals[n_a..n_a + w_len].to_vec(),
            delta_a_free: vals[n_a + w_len..].to_vec(),
        });
    }
    Ok((samples, n_a, w_len))
}

/// Sidecar paths for a train CSV: `<stem>.test.csv` and `<stem>.anchor.json`.
pub fn dataset_sidecars(train_path: &Path) -> (PathBuf, PathBuf) {
    let stem = train_path.with_extension("");
    (
        stem.with_extension("test.csv"),
        stem.with_extension("anchor.json"),
    )
}

/// Writes a full sample set: train CSV plus the test/anchor sidecars.
pub fn save_dataset(train_path: &Path, set: &SampleSet) -> Result<()> {
    let (test_path, anchor_path) = dataset_sidecars(train_path);
    save_samples_csv(train_path, &set.train, set.n_actuators, set.w_len)?;
    save_samples_csv(&test_path, &set.test, set.n_actuators, set.w_len)?;
    std::fs::write(&anchor_path, serde_json::to_string_pretty(&set.anchor)?)?;
    Ok(())
}

pub fn load_dataset(train_path: &Path) -> Result<SampleSet> {
    let (test_path, anchor_path) = dataset_sidecars(train_path);
    let (train, n_a, w_len) = parse_samples_csv(train_path)?;
    let (test, n_a2, w_len2) = parse_samples_csv(&test_path)?;
    if n_a != n_a2 || w_len != w_len2 {
        return Err(Error::Dimension("train/test dataset dimensions disagree".into()));
    }
    let anchor: AnchorRecord = serde_json::from_str(&std::fs::read_to_string(&anchor_path)?)?;
    if anchor.delta_a.len() != n_a || anchor.w_tri.len() != w_len {
        return Err(Error::Dimension("anchor dimensions disagree with dataset".into()));
    }
    Ok(SampleSet { train, test, anchor, n_actuators: n_a, w_len })
}

pub fn save_loss_curve(path: &Path, curve: &[LossPoint]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,train_loss,test_loss")?;
    for p in curve {
        writeln!(out, "{},{},{}", p.epoch, p.train_loss, p.test_loss)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_set() -> SampleSet {
        // 2 actuators, 2x2 W (w_len = 3): synthetic smooth data.
        let mut train = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                let a = i as f64 / 5.0;
                let b = j as f64 / 5.0;
                train.push(Sample {
                    delta_a: vec![a, b],
                    w_tri: vec![1.0 + 0.3 * a, 0.1 * a * b, 1.0 + 0.2 * b],
                    delta_a_free: vec![0.05 * a, 0.07 * b],
                });
            }
        }
        let test: Vec<Sample> = (0..9)
            .map(|k| {
                let a = (k as f64 * 0.11) % 1.0;
                let b = (k as f64 * 0.37) % 1.0;
                Sample {
                    delta_a: vec![a, b],
                    w_tri: vec![1.0 + 0.3 * a, 0.1 * a * b, 1.0 + 0.2 * b],
                    delta_a_free: vec![0.05 * a, 0.07 * b],
                }
            })
            .collect();
        let anchor = AnchorRecord {
            delta_a: vec![0.0, 0.0],
            w_tri: vec![1.0, 0.0, 1.0],
            delta_a_free: vec![0.0, 0.0],
        };
        SampleSet { train, test, anchor, n_actuators: 2, w_len: 3 }
    }

    #[test]
    fn grid_arithmetic_matches_sampling_protocol() {
        // Four cables sampled 11 times over [0, 30] and two cables sampled 81
        // times over [0, 20]: the lattice sizes follow from the per-cable
        // counts.
        let diamond = vec![GridAxis { min: 0.0, max: 30.0, count: 11 }; 4];
        assert_eq!(grid_points(&diamond).len(), 14641);
        let finger = vec![GridAxis { min: 0.0, max: 20.0, count: 81 }; 2];
        assert_eq!(grid_points(&finger).len(), 6561);
        let single = vec![GridAxis { min: 0.0, max: 0.0, count: 1 }; 2];
        assert_eq!(grid_points(&single), vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn standardized_train_split_has_zero_mean_unit_std() {
        let set = toy_set();
        let stats = set.fit_stats().unwrap();
        let n = set.train.len() as f64;
        let dim = set.output_dim();
        let mut mean = vec![0.0; dim];
        let mut var = vec![0.0; dim];
        for s in &set.train {
            let z = stats.standardize_output(&SampleSet::output_vector(s));
            for (m, v) in mean.iter_mut().zip(z.iter()) {
                *m += v / n;
            }
        }
        for s in &set.train {
            let z = stats.standardize_output(&SampleSet::output_vector(s));
            for ((sv, v), m) in var.iter_mut().zip(z.iter()).zip(&mean) {
                *sv += (v - m) * (v - m) / n;
            }
        }
        for (k, (&m, &v)) in mean.iter().zip(&var).enumerate() {
            assert!(m.abs() < 1e-10, "column {k} mean {m}");
            assert!((v.sqrt() - 1.0).abs() < 1e-10, "column {k} std {}", v.sqrt());
        }
    }

    #[test]
    fn constant_features_pass_through() {
        let set = toy_set();
        let stats = set.fit_stats().unwrap();
        // Anchor features are constant across samples: std guard keeps them
        // finite and the standardized value is exactly zero.
        let input = SampleSet::input_vector(&set.anchor, &[0.4, 0.4]);
        let z = stats.standardize_input(&input);
        for k in set.n_actuators..z.len() {
            assert!(z[k].abs() < 1e-12, "anchor feature {k} not centered: {}", z[k]);
        }
    }

    #[test]
    fn standardize_round_trip() {
        let set = toy_set();
        let stats = set.fit_stats().unwrap();
        let raw = SampleSet::output_vector(&set.train[7]);
        let z = stats.standardize_output(&raw);
        let back = stats.unstandardize_output(&z);
        for (a, b) in raw.iter().zip(&back) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_network_predicts_output_means() {
        let set = toy_set();
        let stats = set.fit_stats().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::new_seeded(&[set.input_dim(), 4, set.output_dim()], &mut rng).unwrap();
        for l in net.layers.iter_mut() {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        let model = SurrogateModel {
            mlp: net,
            stats: stats.clone(),
            anchor: set.anchor.clone(),
            meta: ModelMeta {
                seed: 0,
                arch: vec![],
                optimizer: "adam".into(),
                learning_rate: 0.0,
                batch_size: 0,
                epochs: 0,
                best_epoch: 0,
                best_test_loss: 0.0,
            },
        };
        let (tri, dfree) = model.predict_triangle(&[0.2, 0.9]).unwrap();
        let raw: Vec<f64> = tri.into_iter().chain(dfree).collect();
        for (v, m) in raw.iter().zip(&stats.output_mean) {
            assert_relative_eq!(v, m, epsilon = 1e-12);
        }
    }

    #[test]
    fn training_learns_toy_set_and_is_deterministic() {
        let set = toy_set();
        let cfg = TrainConfig {
            hidden: vec![8, 8],
            learning_rate: 3e-3,
            epochs: 400,
            batch_size: 8,
            seed: 42,
        };
        let (m1, curve) = train(&set, &cfg).unwrap();
        let (m2, _) = train(&set, &cfg).unwrap();

        assert!(m1.meta.best_test_loss < 1e-2, "test loss {}", m1.meta.best_test_loss);
        // Running minimum of the test loss is non-increasing by construction;
        // check the curve is recorded densely.
        assert_eq!(curve.len(), cfg.epochs);

        // Bit-identical weights under the same seed.
        for (l1, l2) in m1.mlp.layers.iter().zip(&m2.mlp.layers) {
            assert_eq!(l1.w.as_slice(), l2.w.as_slice());
            assert_eq!(l1.b.as_slice(), l2.b.as_slice());
        }
    }

    #[test]
    fn prediction_is_symmetric_and_accurate_on_train_points() {
        let set = toy_set();
        let cfg = TrainConfig {
            hidden: vec![10],
            learning_rate: 3e-3,
            epochs: 600,
            batch_size: 12,
            seed: 7,
        };
        let (model, _) = train(&set, &cfg).unwrap();
        let sample = &set.train[14];
        let (w, dfree) = model.predict(&sample.delta_a).unwrap();
        assert_eq!(w.nrows(), 2);
        assert_eq!(w, w.transpose());

        let truth = symmetric_from_triangle(&sample.w_tri, 2);
        let rel = (&w - &truth).norm() / truth.norm();
        assert!(rel < 0.05, "train-point W error {rel}");
        for (p, t) in dfree.iter().zip(&sample.delta_a_free) {
            assert!((p - t).abs() < 0.05, "dfree {p} vs {t}");
        }
    }

    #[test]
    fn model_file_round_trip() {
        let set = toy_set();
        let cfg = TrainConfig { hidden: vec![4], learning_rate: 1e-3, epochs: 5, batch_size: 8, seed: 1 };
        let (model, _) = train(&set, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.model.json");
        model.save(&path).unwrap();
        let back = SurrogateModel::load(&path).unwrap();
        let (w1, d1) = model.predict(&[0.3, 0.3]).unwrap();
        let (w2, d2) = back.predict(&[0.3, 0.3]).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(d1, d2);
    }

    #[test]
    fn dataset_round_trip_and_extrapolation_flag() {
        let set = toy_set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        save_dataset(&path, &set).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.train, set.train);
        assert_eq!(back.test, set.test);
        assert_eq!(back.anchor, set.anchor);

        let cfg = TrainConfig { hidden: vec![4], learning_rate: 1e-3, epochs: 2, batch_size: 8, seed: 1 };
        let (model, _) = train(&back, &cfg).unwrap();
        assert!(!model.extrapolates(&[0.5, 0.5]));
        assert!(model.extrapolates(&[1.5, 0.5]));
    }

    #[test]
    fn auto_hidden_targets_four_hundred_weights() {
        let h = auto_hidden(19, 17, 3);
        assert_eq!(h.len(), 2);
        let w = 19 * h[0] + h[0] * h[1] + h[1] * 17;
        assert!((350..=450).contains(&w), "weight count {w}");
    }

    #[test]
    fn collect_single_zero_point_equals_anchor() {
        // Tiny robot: one cable, no gravity. A grid with one point at zero
        // actuation must reproduce the anchor.
        let mut cfg = crate::robot::finger_like();
        cfg.mesh = crate::robot::MeshSource::Box { dims: [4.0, 4.0, 8.0], res: [1, 1, 2] };
        cfg.material.gravity = [0.0, 0.0, 0.0];
        let mesh = crate::mesh::build_box_mesh([4.0, 4.0, 8.0], [1, 1, 2]).unwrap();
        let mid = mesh.nearest_node(&nalgebra::Point3::new(0.0, 0.0, 4.0));
        let tip = mesh.nearest_node(&nalgebra::Point3::new(0.0, 0.0, 8.0));
        cfg.cables = vec![crate::constraints::CableActuator {
            via_nodes: vec![mid, tip],
            pull_anchor: Some([0.0, 0.0, -2.0]),
            lambda_bounds: [0.0, 5.0],
            delta_bounds: [0.0, 2.0],
        }];
        cfg.effectors = vec![crate::constraints::Effector {
            point: crate::constraints::EffectorPoint::Node { node: tip },
            goal: [0.0, 0.0, 8.0],
        }];
        cfg.fixed_region = crate::robot::FixedRegion { min: [0.0, 0.0, 0.0], max: [4.0, 4.0, 0.0] };
        let model = cfg.resolve(std::path::Path::new(".")).unwrap();
        let axes = vec![GridAxis { min: 0.0, max: 0.0, count: 1 }];
        let (set, report) = collect(&model, &axes, 9, Parallelism::Sequential).unwrap();
        assert_eq!(report.grid_total, 1);
        assert_eq!(set.train.len(), 1);
        assert_eq!(set.test.len(), 1);
        let s = &set.train[0];
        for (a, b) in s.w_tri.iter().zip(&set.anchor.w_tri) {
            assert_relative_eq!(a, b, epsilon = 1e-8, max_relative = 1e-6);
        }
        for (a, b) in s.delta_a.iter().zip(&set.anchor.delta_a) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
