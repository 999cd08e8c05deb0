//! A two-layer MLP whose saved activations go through the store.
//!
//! The forward output never depends on the store: the layer input is offered
//! to the controller after `y` is computed from the original values. The
//! backward pass computes `grad_in` from `W` and `grad_out` alone and only
//! then reads the stored (possibly quantized) input for `grad_W`. A dropped
//! input freezes that layer's weights for the step.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::pagestore::{PageStore, Payload};
use crate::policy::{Action, ActivationInfo, Ladder, Policy, PolicyConfig};
use crate::quant::{importance, Bitwidth, ImportanceMetric};
use crate::reduce::{fused_map_reduce, ReduceOp};
use crate::{ActId, Error, Result};

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!("{rows}x{cols} matrix from {} values", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`.
    pub w: Matrix,
    pub bias: Vec<f32>,
    pub relu: bool,
}

impl DenseLayer {
    pub fn new(w: Matrix, bias: Vec<f32>, relu: bool) -> Result<Self> {
        if bias.len() != w.rows {
            return Err(Error::invalid("bias length must match output width"));
        }
        Ok(Self { w, bias, relu })
    }

    pub fn random<R: Rng>(inputs: usize, outputs: usize, relu: bool, rng: &mut R) -> Self {
        let std = (2.0 / inputs as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("positive std");
        let data = (0..inputs * outputs).map(|_| normal.sample(rng)).collect();
        Self {
            w: Matrix {
                rows: outputs,
                cols: inputs,
                data,
            },
            bias: vec![0.0; outputs],
            relu,
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.cols
    }

    pub fn outputs(&self) -> usize {
        self.w.rows
    }

    pub fn is_finite(&self) -> bool {
        self.w.data.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Where a layer's saved input lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeSlot {
    Stored { act_id: ActId, bitwidth: Bitwidth },
    Skip { act_id: ActId },
    /// Reference mode: the original input is kept by the caller.
    Exact,
}

/// What backward needs from forward besides the saved input.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    pub slot: TapeSlot,
    /// Positive-output mask of a ReLU layer, kept outside the store.
    pub relu_mask: Option<Vec<bool>>,
}

/// Store and controller handles for one forward call.
pub struct StoreCtx<'a> {
    pub store: &'a mut PageStore,
    pub policy: &'a mut Policy,
    pub metric: ImportanceMetric,
}

/// `x · Wᵀ + bias`, then ReLU when configured; the mask is returned for
/// ReLU layers.
pub fn forward_plain(layer: &DenseLayer, x: &Matrix) -> Result<(Matrix, Option<Vec<bool>>)> {
    if x.cols != layer.inputs() {
        return Err(Error::invalid(format!("input width {} != layer width {}", x.cols, layer.inputs())));
    }
    let mut y = Matrix::zeros(x.rows, layer.outputs());
    for i in 0..x.rows {
        let xi = x.row(i);
        for o in 0..layer.outputs() {
            let mut acc = layer.bias[o];
            for (a, w) in xi.iter().zip(layer.w.row(o)) {
                acc += a * w;
            }
            y.data[i * y.cols + o] = acc;
        }
    }
    if !layer.relu || y.data.is_empty() {
        return Ok((y, None));
    }
    let (data, _) = fused_map_reduce(&y.data, |v| v.max(0.0), ReduceOp::Max)?;
    let mask = y.data.iter().map(|&v| v > 0.0).collect();
    y.data = data;
    Ok((y, Some(mask)))
}

/// Forward pass that also offers `x` to the store as activation `act_id`.
pub fn forward(layer: &DenseLayer, x: &Matrix, act_id: ActId, ctx: Option<&mut StoreCtx>) -> Result<(Matrix, Tape)> {
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite layer input"));
    }
    let (y, relu_mask) = forward_plain(layer, x)?;
    let slot = match ctx {
        None => TapeSlot::Exact,
        Some(ctx) => {
            let info = ActivationInfo {
                act_id,
                numel: x.data.len() as u64,
                time_cost: x.data.len() as f64,
                importance: importance(&x.data, ctx.metric)?,
            };
            let tile = ctx.policy.config().tile_elems;
            let d = ctx
                .policy
                .on_activation(ctx.store, info, |b| Ok(Payload::encode(&x.data, b, tile)?.to_bytes()))?;
            match d.action {
                Action::StoreAt(bitwidth) => TapeSlot::Stored { act_id, bitwidth },
                Action::Skip => TapeSlot::Skip { act_id },
            }
        }
    };
    Ok((y, Tape { slot, relu_mask }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub grad_in: Matrix,
    pub grad_w: Matrix,
    pub grad_bias: Vec<f32>,
}

/// Backward pass. `exact_input` is used only for [`TapeSlot::Exact`].
pub fn backward(
    layer: &DenseLayer,
    grad_out: &Matrix,
    tape: &Tape,
    store: Option<&PageStore>,
    exact_input: Option<&Matrix>,
) -> Result<Gradients> {
    let (n, outs, ins) = (grad_out.rows, layer.outputs(), layer.inputs());
    if grad_out.cols != outs {
        return Err(Error::invalid("gradient width does not match layer output"));
    }
    let mut g = grad_out.clone();
    if let Some(mask) = &tape.relu_mask {
        for (v, &m) in g.data.iter_mut().zip(mask) {
            if !m {
                *v = 0.0;
            }
        }
    }
    // Uses only W and the incoming gradient.
    let mut grad_in = Matrix::zeros(n, ins);
    for i in 0..n {
        for o in 0..outs {
            let gio = g.at(i, o);
            for (k, w) in layer.w.row(o).iter().enumerate() {
                grad_in.data[i * ins + k] += gio * w;
            }
        }
    }
    let mut grad_bias = vec![0.0f32; outs];
    for i in 0..n {
        for (o, gb) in grad_bias.iter_mut().enumerate() {
            *gb += g.at(i, o);
        }
    }
    let saved: Option<Matrix> = match tape.slot {
        TapeSlot::Skip { .. } => None,
        TapeSlot::Exact => Some(exact_input.ok_or_else(|| Error::invalid("exact tape needs the input"))?.clone()),
        TapeSlot::Stored { act_id, bitwidth } => {
            let store = store.ok_or_else(|| Error::invalid("stored tape needs the store"))?;
            let payload = store.read_payload(act_id)?;
            if payload.bitwidth() != bitwidth {
                return Err(Error::corrupt(format!("activation {act_id} changed width in the store")));
            }
            Some(Matrix::from_vec(n, ins, payload.decode()?).map_err(|e| Error::corrupt(e.to_string()))?)
        }
    };
    let mut grad_w = Matrix::zeros(outs, ins);
    if let Some(x) = saved {
        for i in 0..n {
            let xi = x.row(i);
            for o in 0..outs {
                let gio = g.at(i, o);
                for (k, a) in xi.iter().enumerate() {
                    grad_w.data[o * ins + k] += gio * a;
                }
            }
        }
    }
    Ok(Gradients {
        grad_in,
        grad_w,
        grad_bias,
    })
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> (f32, Matrix) {
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut loss = 0.0f32;
    let n = logits.rows as f32;
    for i in 0..logits.rows {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: f32 = exps.iter().sum();
        loss -= (exps[labels[i]] / z).ln();
        for (c, e) in exps.iter().enumerate() {
            let p = e / z;
            grad.data[i * logits.cols + c] = (p - if c == labels[i] { 1.0 } else { 0.0 }) / n;
        }
    }
    (loss / n, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: DenseLayer,
    pub output: DenseLayer,
}

impl Mlp {
    pub fn random(inputs: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            hidden: DenseLayer::random(inputs, hidden, true, &mut rng),
            output: DenseLayer::random(hidden, classes, false, &mut rng),
        }
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let (h, _) = forward_plain(&self.hidden, x)?;
        Ok(forward_plain(&self.output, &h)?.0)
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        let logits = self.logits(x)?;
        let correct = (0..x.rows)
            .filter(|&i| {
                let row = logits.row(i);
                let pred = (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best });
                pred == labels[i]
            })
            .count();
        Ok(correct as f64 / x.rows as f64)
    }

    /// One SGD step. With `ctx`, both layer inputs go through the store and
    /// the returned widths say what was kept.
    pub fn step(&mut self, x: &Matrix, labels: &[usize], lr: f32, mut ctx: Option<&mut StoreCtx>) -> Result<(f32, [Bitwidth; 2])> {
        if let Some(c) = ctx.as_deref_mut() {
            c.policy.begin_iteration(c.store);
        }
        let (h, tape1) = forward(&self.hidden, x, 0, ctx.as_deref_mut())?;
        let (logits, tape2) = forward(&self.output, &h, 1, ctx.as_deref_mut())?;
        let (loss, grad) = softmax_xent(&logits, labels);
        let store = ctx.as_deref().map(|c| &*c.store);
        let g2 = backward(&self.output, &grad, &tape2, store, Some(&h))?;
        let g1 = backward(&self.hidden, &g2.grad_in, &tape1, store, Some(x))?;
        if let Some(c) = ctx {
            c.policy.end_iteration(c.store);
        }
        apply(&mut self.output, &g2, lr);
        apply(&mut self.hidden, &g1, lr);
        let width = |t: &Tape| match t.slot {
            TapeSlot::Stored { bitwidth, .. } => bitwidth,
            TapeSlot::Skip { .. } => Bitwidth::SKIP,
            TapeSlot::Exact => Bitwidth::FULL,
        };
        Ok((loss, [width(&tape1), width(&tape2)]))
    }
}

fn apply(layer: &mut DenseLayer, g: &Gradients, lr: f32) {
    for (w, d) in layer.w.data.iter_mut().zip(&g.grad_w.data) {
        *w -= lr * d;
    }
    for (b, d) in layer.bias.iter_mut().zip(&g.grad_bias) {
        *b -= lr * d;
    }
}

/// Two Gaussian blobs at `±separation/2` along every axis, unit variance.
pub fn two_class_dataset(n: usize, dims: usize, separation: f32, seed: u64) -> (Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let shift = separation / 2.0 / (dims as f32).sqrt();
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..2usize);
        let sign = if label == 1 { 1.0 } else { -1.0 };
        data.extend((0..dims).map(|_| normal.sample(&mut rng) + sign * shift));
        labels.push(label);
    }
    (Matrix { rows: n, cols: dims, data }, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub inputs: usize,
    pub hidden: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub batch: usize,
    pub lr: f32,
    /// Distance between class means.
    pub separation: f32,
    /// Storage width of the quantized run.
    pub bitwidth: Bitwidth,
    pub mem_budget: u64,
    pub page_size: u64,
    pub metric: ImportanceMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            epochs: 20,
            inputs: 16,
            hidden: 32,
            train_samples: 1024,
            test_samples: 1024,
            batch: 32,
            lr: 0.05,
            separation: 2.5,
            bitwidth: Bitwidth::B4,
            mem_budget: 1 << 20,
            page_size: 4096,
            metric: ImportanceMetric::QuantErrorEstimate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub fp32_acc: f64,
    pub quant_acc: f64,
    /// Stored activations of the quantized run by width: 0, 2, 4, 8, 32.
    pub histogram: [u64; 5],
}

fn hist_slot(b: Bitwidth) -> usize {
    match b.bits() {
        0 => 0,
        2 => 1,
        4 => 2,
        8 => 3,
        _ => 4,
    }
}

/// Trains a full-precision reference and a store-backed copy from the same
/// initialization on the same batches; reports test accuracy per epoch.
pub fn train(cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    if cfg.batch == 0 || cfg.epochs == 0 || cfg.hidden == 0 || cfg.inputs == 0 {
        return Err(Error::invalid("training sizes must be positive"));
    }
    let (xtr, ytr) = two_class_dataset(cfg.train_samples, cfg.inputs, cfg.separation, cfg.seed);
    let (xte, yte) = two_class_dataset(cfg.test_samples, cfg.inputs, cfg.separation, cfg.seed ^ 0x7e57);
    let mut reference = Mlp::random(cfg.inputs, cfg.hidden, 2, cfg.seed.wrapping_add(1));
    let mut quant = reference.clone();
    let mut store = PageStore::new(cfg.mem_budget, cfg.page_size, cfg.mem_budget / cfg.page_size * cfg.page_size)?;
    let mut policy = Policy::new(PolicyConfig {
        ladder: Ladder::Fixed(cfg.bitwidth),
        ..PolicyConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..xtr.rows).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut histogram = [0u64; 5];
        for batch in order.chunks(cfg.batch) {
            let mut data = Vec::with_capacity(batch.len() * cfg.inputs);
            for &i in batch {
                data.extend_from_slice(xtr.row(i));
            }
            let x = Matrix::from_vec(batch.len(), cfg.inputs, data)?;
            let labels: Vec<usize> = batch.iter().map(|&i| ytr[i]).collect();
            let (l_ref, _) = reference.step(&x, &labels, cfg.lr, None)?;
            let mut ctx = StoreCtx {
                store: &mut store,
                policy: &mut policy,
                metric: cfg.metric,
            };
            let (l_q, widths) = quant.step(&x, &labels, cfg.lr, Some(&mut ctx))?;
            if !l_ref.is_finite() || !l_q.is_finite() || !reference.hidden.is_finite() || !quant.hidden.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            for w in widths {
                histogram[hist_slot(w)] += 1;
            }
        }
        records.push(EpochRecord {
            epoch,
            fp32_acc: reference.accuracy(&xte, &yte)?,
            quant_acc: quant.accuracy(&xte, &yte)?,
            histogram,
        });
    }
    Ok(records)
}

pub const ACCURACY_CSV_HEADER: &str = "epoch,fp32_acc,quant_acc,hist_b0,hist_b2,hist_b4,hist_b8,hist_b32";

pub fn accuracy_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(ACCURACY_CSV_HEADER);
    out.push('\n');
    for r in records {
        let h = r.histogram;
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{},{},{},{}",
            r.epoch, r.fp32_acc, r.quant_acc, h[0], h[1], h[2], h[3], h[4]
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (DenseLayer, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = DenseLayer::random(5, 2, true, &mut rng);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let x = Matrix::from_vec(4, 5, (0..20).map(|_| normal.sample(&mut rng)).collect()).unwrap();
        (layer, x)
    }

    fn ctx_parts(b: Bitwidth) -> (PageStore, Policy) {
        (
            PageStore::new(1 << 16, 256, 1 << 16).unwrap(),
            Policy::new(PolicyConfig {
                ladder: Ladder::Fixed(b),
                ..PolicyConfig::default()
            }),
        )
    }

    #[test]
    fn store_does_not_change_forward() {
        let (layer, x) = small();
        let (plain, _) = forward_plain(&layer, &x).unwrap();
        for b in [Bitwidth::SKIP, Bitwidth::B2, Bitwidth::B4, Bitwidth::FULL] {
            let (mut store, mut policy) = ctx_parts(b);
            let mut ctx = StoreCtx {
                store: &mut store,
                policy: &mut policy,
                metric: ImportanceMetric::Range,
            };
            let (y, tape) = forward(&layer, &x, 9, Some(&mut ctx)).unwrap();
            assert_eq!(y, plain);
            if b == Bitwidth::SKIP {
                assert_eq!(tape.slot, TapeSlot::Skip { act_id: 9 });
            }
            if b == Bitwidth::FULL {
                assert_eq!(store.read_payload(9).unwrap().decode().unwrap(), x.data);
            }
        }
    }

    #[test]
    fn full_width_backward_matches_reference() {
        let (layer, x) = small();
        let grad = Matrix::from_vec(4, 2, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8]).unwrap();
        let (_, tape_ref) = forward(&layer, &x, 0, None).unwrap();
        let reference = backward(&layer, &grad, &tape_ref, None, Some(&x)).unwrap();
        let (mut store, mut policy) = ctx_parts(Bitwidth::FULL);
        let mut ctx = StoreCtx {
            store: &mut store,
            policy: &mut policy,
            metric: ImportanceMetric::Range,
        };
        let (_, tape) = forward(&layer, &x, 0, Some(&mut ctx)).unwrap();
        let got = backward(&layer, &grad, &tape, Some(&store), None).unwrap();
        assert_eq!(got, reference);
    }

    #[test]
    fn skipped_input_freezes_weights() {
        let (layer, x) = small();
        let grad = Matrix::from_vec(4, 2, vec![1.0; 8]).unwrap();
        let tape = Tape {
            slot: TapeSlot::Skip { act_id: 0 },
            relu_mask: None,
        };
        let g = backward(&layer, &grad, &tape, None, None).unwrap();
        assert!(g.grad_w.data.iter().all(|&v| v == 0.0));
        let exact = Tape {
            slot: TapeSlot::Exact,
            relu_mask: None,
        };
        assert_eq!(backward(&layer, &grad, &exact, None, Some(&x)).unwrap().grad_in, g.grad_in);
    }

    #[test]
    fn softmax_gradient_rows_sum_to_zero() {
        let logits = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let (loss, g) = softmax_xent(&logits, &[2, 0]);
        assert!(loss > 0.0);
        for i in 0..2 {
            assert!(g.row(i).iter().sum::<f32>().abs() < 1e-6);
        }
    }

    #[test]
    fn csv_shape() {
        let csv = accuracy_csv(&[EpochRecord {
            epoch: 0,
            fp32_acc: 0.5,
            quant_acc: 0.25,
            histogram: [0, 0, 2, 0, 0],
        }]);
        assert_eq!(csv.lines().nth(1).unwrap(), "0,0.500000,0.250000,0,0,2,0,0");
    }
}
