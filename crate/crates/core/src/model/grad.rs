use ndarray::{Array2, ArrayView1};

use super::network::{ExampleInput, Tape};
use super::{ModelConfig, ModelError, ModelParams, Real, Result};
use crate::losses::{claad_loss_grad, classification_loss_grad, LossConfig};
use crate::par::Exec;

/// Examples per gradient accumulator. Fixed so the reduction tree, and with
/// it every rounding step, does not depend on the thread count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSelector {
    /// Two-path contrastive loss on the probe outputs.
    Claad,
    /// Cross-entropy on the logits, averaged over the views.
    Classification,
}

/// One batch seen through one or more augmentation views. `views[v][i]` is
/// example `i` under view `v`.
#[derive(Debug, Clone)]
pub struct ViewBatch<'a, F> {
    pub views: Vec<Vec<ExampleInput<'a, F>>>,
    pub labels: &'a [u8],
}

/// Forward results per view, rows in batch order.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutputs<F> {
    pub z: Vec<Array2<F>>,
    pub p: Vec<Array2<F>>,
    pub logits: Vec<Array2<F>>,
}

#[derive(Debug, Clone)]
pub struct GradientResult<F> {
    pub loss: F,
    pub grads: ModelParams<F>,
    pub outputs: BatchOutputs<F>,
}

fn stack<F: Real>(rows: impl Iterator<Item = ndarray::Array1<F>>, width: usize) -> Array2<F> {
    let rows: Vec<_> = rows.collect();
    let mut m = Array2::zeros((rows.len(), width));
    for (mut r, v) in m.rows_mut().into_iter().zip(rows) {
        r.assign(&v);
    }
    m
}

fn collect_outputs<F: Real>(tapes: &[Tape<F>], n_views: usize, b: usize) -> BatchOutputs<F> {
    let mut out = BatchOutputs { z: Vec::new(), p: Vec::new(), logits: Vec::new() };
    for v in 0..n_views {
        let slice = &tapes[v * b..(v + 1) * b];
        let w = |f: fn(&Tape<F>) -> usize| slice.first().map_or(0, f);
        out.z.push(stack(slice.iter().map(|t| t.outputs.z.clone()), w(|t| t.outputs.z.len())));
        out.p.push(stack(slice.iter().map(|t| t.outputs.p.clone()), w(|t| t.outputs.p.len())));
        out.logits.push(stack(slice.iter().map(|t| t.outputs.logits.clone()), w(|t| t.outputs.logits.len())));
    }
    out
}

fn non_finite_output<F: Real>(o: &BatchOutputs<F>) -> Option<String> {
    for (name, set) in [("z", &o.z), ("p", &o.p), ("logits", &o.logits)] {
        for (v, m) in set.iter().enumerate() {
            if m.iter().any(|x| !x.is_finite()) {
                return Some(format!("view{v}.{name}"));
            }
        }
    }
    None
}

fn numerical_failure<F: Real>(params: &ModelParams<F>, outputs: &BatchOutputs<F>, what: &str) -> ModelError {
    let tensor = params
        .first_non_finite()
        .or_else(|| non_finite_output(outputs))
        .unwrap_or_else(|| what.to_string());
    ModelError::NumericalFailure { tensor }
}

/// Sum per-chunk gradient stores in chunk order.
fn reduce<F: Real>(params: &ModelParams<F>, parts: Vec<ModelParams<F>>) -> ModelParams<F> {
    let mut it = parts.into_iter();
    let mut total = it.next().unwrap_or_else(|| params.zeros_like());
    for p in it {
        total.scaled_add(F::one(), &p);
    }
    total
}

/// Loss value and gradient of every parameter tensor for `batch`.
///
/// Under [`LossSelector::Claad`] the representation `z` is a constant, so
/// gradient reaches the encoder only through the probe head.
pub fn compute_gradients<F: Real>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    batch: &ViewBatch<F>,
    selector: LossSelector,
    loss_cfg: &LossConfig,
    exec: Exec,
) -> Result<GradientResult<F>> {
    let n_views = batch.views.len();
    let b = batch.labels.len();
    if n_views == 0 || batch.views.iter().any(|v| v.len() != b) {
        return Err(ModelError::Shape(format!("every view needs {b} examples")));
    }
    if selector == LossSelector::Claad && n_views != 2 {
        return Err(ModelError::Shape(format!("contrastive loss needs 2 views, got {n_views}")));
    }
    let items: Vec<&ExampleInput<F>> = batch.views.iter().flatten().collect();
    let n_chunks = items.len().div_ceil(CHUNK);
    let chunk = |c: usize| &items[c * CHUNK..((c + 1) * CHUNK).min(items.len())];

    let (loss, grads, outputs) = match selector {
        LossSelector::Claad => {
            let tapes = exec.map(&items, |x| params.run(cfg, x, false)).into_iter().collect::<Result<Vec<_>>>()?;
            let outputs = collect_outputs(&tapes, 2, b);
            let (p, z) = (&outputs.p, &outputs.z);
            let (loss, g1, g2) = claad_loss_grad(p[0].view(), z[1].view(), p[1].view(), z[0].view(), batch.labels, loss_cfg)?;
            if !loss.is_finite() {
                return Err(numerical_failure(params, &outputs, "loss.claad"));
            }
            let dp = [g1, g2];
            let parts = exec.map_range(n_chunks, |c| {
                let mut g = params.zeros_like();
                for k in c * CHUNK..((c + 1) * CHUNK).min(tapes.len()) {
                    let row: ArrayView1<F> = dp[k / b].row(k % b);
                    params.backward(&tapes[k], Some(row), None, &mut g);
                }
                g
            });
            (loss, reduce(params, parts), outputs)
        }
        LossSelector::Classification => {
            let scale = F::one() / F::from_usize(n_views).expect("views");
            let parts = exec.map_range(n_chunks, |c| -> Result<_> {
                let mut g = params.zeros_like();
                let mut tapes = Vec::new();
                let mut loss = F::zero();
                for (off, x) in chunk(c).iter().enumerate() {
                    let k = c * CHUNK + off;
                    let tape = params.run(cfg, x, false)?;
                    let logits = tape.outputs.logits.view().insert_axis(ndarray::Axis(0));
                    let (l, dl) = classification_loss_grad(logits, &batch.labels[k % b..k % b + 1], loss_cfg)?;
                    let dl = dl.row(0).mapv(|v| v * scale);
                    params.backward(&tape, None, Some(dl.view()), &mut g);
                    loss = loss + l * scale;
                    tapes.push(tape);
                }
                Ok((g, loss, tapes))
            });
            let mut loss = F::zero();
            let mut grads = Vec::with_capacity(n_chunks);
            let mut tapes = Vec::with_capacity(items.len());
            for part in parts {
                let (g, l, t) = part?;
                loss = loss + l;
                grads.push(g);
                tapes.extend(t);
            }
            let outputs = collect_outputs(&tapes, n_views, b);
            if !loss.is_finite() {
                return Err(numerical_failure(params, &outputs, "loss.classification"));
            }
            (loss, reduce(params, grads), outputs)
        }
    };
    if let Some(name) = grads.first_non_finite() {
        return Err(ModelError::NumericalFailure { tensor: name });
    }
    Ok(GradientResult { loss, grads, outputs })
}
