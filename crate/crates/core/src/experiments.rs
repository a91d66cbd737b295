//! Training loop and per-epoch measurements.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{FlabError, Result};
use crate::mirror::{mirror_step_in_place, MirrorConfig};
use crate::network::{clean_pass, modulated_pass, Network};
use crate::numerics::{matmul, mean_std, Matrix, Rng};
use crate::rules::{
    apply_updates_in_place, batch_loss, compute_update, time_local_impl, BatchReduction,
    FeedbackPaths, OptimizerConfig, RuleKind,
};

const EVAL_CHUNK: usize = 1000;

const DROPOUT_STREAM: u64 = 1;
const MIRROR_STREAM: u64 = 2;
const FA_STREAM: u64 = 3;

/// Angle in degrees between `vec a` and `vec b`.
pub fn alignment_angle(a: &Matrix, b: &Matrix) -> Result<f64> {
    let dot = a.inner(b)?;
    let na = a.frobenius_norm();
    let nb = b.frobenius_norm();
    if na == 0.0 || nb == 0.0 {
        return Err(FlabError::InvalidArgument(
            "alignment angle of a zero matrix".into(),
        ));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees())
}

/// `W_L · … · W_1`, shape `(n_L, n_0)`.
pub fn w_tot(net: &Network) -> Matrix {
    let mut acc = net.weights[0].clone();
    for w in &net.weights[1..] {
        acc = matmul(w, &acc).expect("shape chain checked at construction");
    }
    acc
}

/// Angle between `F` and `W_totᵀ`.
pub fn feedback_alignment(net: &Network) -> Result<f64> {
    alignment_angle(&net.feedback, &w_tot(net).transpose())
}

/// Angle between `W_1 F` and `W_2ᵀ`; `None` unless the network has two layers.
pub fn adaptive_feedback_alignment(net: &Network) -> Result<Option<f64>> {
    if net.depth() != 2 {
        return Ok(None);
    }
    let w1f = matmul(&net.weights[0], &net.feedback)?;
    alignment_angle(&w1f, &net.weights[1].transpose()).map(Some)
}

fn chunks(n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .step_by(EVAL_CHUNK)
        .map(|s| (s..(s + EVAL_CHUNK).min(n)).collect())
        .collect()
}

/// Per-sample `‖h_ℓ‖² − ‖h_ℓ^err‖²` for layer `ℓ ≥ 1`, each sample modulated
/// by its own error; dropout is off.
pub fn goodness_gap(net: &Network, ds: &Dataset, layer: usize) -> Result<Vec<f64>> {
    if layer == 0 || layer > net.depth() {
        return Err(FlabError::InvalidArgument(format!(
            "goodness layer must be in 1..={}, got {layer}",
            net.depth()
        )));
    }
    let parts = chunks(ds.len())
        .into_par_iter()
        .map(|idx| {
            let (x, y) = ds.batch(&idx)?;
            let clean = clean_pass(net, &x, None)?;
            let e = clean.output().sub(&y)?;
            let m = modulated_pass(net, &x, &e, &[])?;
            let (h, he) = (&clean.activations[layer], &m.activations[layer]);
            Ok((0..h.rows())
                .map(|r| {
                    let a: f64 = h.row(r).iter().map(|v| v * v).sum();
                    let b: f64 = he.row(r).iter().map(|v| v * v).sum();
                    a - b
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Percentage of samples whose output argmax equals the label; dropout off.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<f64> {
    let hits = chunks(ds.len())
        .into_par_iter()
        .map(|idx| {
            let x = ds.inputs.select_rows(&idx)?;
            let out = clean_pass(net, &x, None)?;
            let o = out.output();
            Ok(idx
                .iter()
                .enumerate()
                .filter(|(r, &i)| argmax(o.row(*r)) == ds.labels[i])
                .count())
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(100.0 * hits.iter().sum::<usize>() as f64 / ds.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub align_f_wtot: f64,
    pub align_w1f_w2: Option<f64>,
    pub goodness_gap_mean: f64,
    pub goodness_gap_std: f64,
    pub lr_effective: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<EpochRow>,
}

pub const CSV_HEADER: &str =
    "epoch,train_loss,test_accuracy,align_F_Wtot,align_W1F_W2,goodness_gap_mean,goodness_gap_std,lr_effective";

impl EpochRow {
    pub fn csv_line(&self) -> String {
        let mut s = String::new();
        let w1f = self.align_w1f_w2.map(|v| v.to_string()).unwrap_or_default();
        write!(
            s,
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.test_accuracy,
            self.align_f_wtot,
            w1f,
            self.goodness_gap_mean,
            self.goodness_gap_std,
            self.lr_effective
        )
        .unwrap();
        s
    }
}

impl RunRecord {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| FlabError::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| FlabError::io(path, e))
    }
}

/// Test-set measurements shared by every epoch row.
pub fn measure(net: &Network, test: &Dataset) -> Result<(f64, f64, Option<f64>, f64, f64)> {
    let acc = evaluate(net, test)?;
    let align = feedback_alignment(net)?;
    let afa = adaptive_feedback_alignment(net)?;
    let gaps = goodness_gap(net, test, 1)?;
    let (gm, gs) = mean_std(&gaps);
    Ok((acc, align, afa, gm, gs))
}

/// Everything `train` needs besides the data.
#[derive(Clone, Debug)]
pub struct TrainSpec<'a> {
    pub rule: RuleKind,
    pub opt: &'a OptimizerConfig,
    pub mirror: Option<&'a MirrorConfig>,
    pub epochs: usize,
}

/// Runs `spec.epochs` epochs, calling `on_epoch` after each. The network is
/// updated in place.
///
/// Shuffling for epoch `k` uses `Rng::new(seed ^ k)`; dropout, mirror noise and
/// FA feedback draw from independent forks of `rng`.
pub fn train_with(
    net: &mut Network,
    train_set: &Dataset,
    test_set: &Dataset,
    spec: &TrainSpec<'_>,
    rng: &Rng,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<RunRecord> {
    spec.opt.validate()?;
    if let Some(m) = spec.mirror {
        m.validate()?;
        if net.feedback_factors.is_none() {
            return Err(FlabError::Unfactorized);
        }
    }
    if train_set.input_dim() != net.input_dim() || train_set.n_classes != net.output_dim() {
        return Err(FlabError::dims(
            "training data",
            (train_set.input_dim(), train_set.n_classes),
            (net.input_dim(), net.output_dim()),
        ));
    }
    if test_set.input_dim() != net.input_dim() || test_set.n_classes != net.output_dim() {
        return Err(FlabError::dims(
            "test data",
            (test_set.input_dim(), test_set.n_classes),
            (net.input_dim(), net.output_dim()),
        ));
    }
    let mut dropout_rng = rng.fork(DROPOUT_STREAM);
    let mut mirror_rng = rng.fork(MIRROR_STREAM);
    let fa_paths = match spec.rule {
        RuleKind::Fa => Some(FeedbackPaths::random(net, &mut rng.fork(FA_STREAM))?),
        _ => None,
    };
    let out_act = net.activation(net.depth() - 1);
    let bs = spec.opt.batch_size;
    let mut record = RunRecord::default();

    for epoch in 0..spec.epochs {
        let lr = spec.opt.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Rng::new(rng.seed() ^ epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for idx in order.chunks(bs) {
            let (x, y) = train_set.batch(idx)?;
            let output = if spec.rule == RuleKind::PepitaTimeLocal {
                let step_lr = match spec.opt.reduction {
                    BatchReduction::Mean => lr,
                    BatchReduction::Sum => lr * idx.len() as f64,
                };
                let (mut next, output) =
                    time_local_impl(net, &x, &y, step_lr, Some(&mut dropout_rng))?;
                if spec.opt.weight_decay > 0.0 {
                    // decay acts on the weights the step started from
                    let shrink = lr * spec.opt.weight_decay;
                    for (n, w) in next.weights.iter_mut().zip(&net.weights) {
                        n.axpy(-shrink, w)?;
                    }
                }
                net.weights = next.weights;
                output
            } else {
                let mut out = compute_update(
                    spec.rule,
                    net,
                    fa_paths.as_ref(),
                    &x,
                    &y,
                    Some(&mut dropout_rng),
                )?;
                if spec.opt.reduction == BatchReduction::Sum {
                    out.updates.scale(idx.len() as f64);
                }
                apply_updates_in_place(net, &out.updates, spec.opt, epoch)?;
                out.output
            };
            loss_sum += batch_loss(&output, &y, out_act) * idx.len() as f64;
            if let Some(m) = spec.mirror {
                mirror_step_in_place(net, m, &mut mirror_rng)?;
            }
        }
        if !net.is_finite() {
            return Err(FlabError::NonFinite("training step"));
        }
        let (acc, align, afa, gm, gs) = measure(net, test_set)?;
        let row = EpochRow {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            test_accuracy: acc,
            align_f_wtot: align,
            align_w1f_w2: afa,
            goodness_gap_mean: gm,
            goodness_gap_std: gs,
            lr_effective: lr,
        };
        on_epoch(&row);
        record.rows.push(row);
    }
    Ok(record)
}

pub fn train(
    net: &mut Network,
    train_set: &Dataset,
    test_set: &Dataset,
    spec: &TrainSpec<'_>,
    rng: &Rng,
) -> Result<RunRecord> {
    train_with(net, train_set, test_set, spec, rng, |_| {})
}
