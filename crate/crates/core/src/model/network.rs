use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::layers::{
    affine, affine_bwd, attention_bwd, attention_fwd, linear_bwd, linear_bwd_params, linear_fwd, normalize,
    normalize_bwd, positional_encoding, vec_linear_bwd, vec_linear_fwd, AttentionCache, Normalized,
};
use super::params::{Block, Linear, ModelParams};
use super::{ModelConfig, ModelError, Real, Result};

/// One decision window as the network sees it.
#[derive(Debug, Clone, Copy)]
pub struct ExampleInput<'a, F> {
    /// CSP features `[C × L]`.
    pub features: ArrayView2<'a, F>,
    pub env_a: ArrayView1<'a, F>,
    pub env_b: ArrayView1<'a, F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outputs<F> {
    /// Encoder representation.
    pub z: Array1<F>,
    /// Probe head output.
    pub p: Array1<F>,
    pub logits: Array1<F>,
}

/// Intermediate streams of one forward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace<F> {
    pub eeg_projected: Array2<F>,
    /// Projected envelopes, `[a, b]`. Every block of a pairing reads this.
    pub audio_projected: [Array2<F>; 2],
    /// EEG-side stream after each block, per pairing.
    pub streams: [Vec<Array2<F>>; 2],
    /// Concatenated time-averaged streams `[2·d_model]`.
    pub pooled: Array1<F>,
    pub z: Array1<F>,
}

#[derive(Debug, Clone)]
struct BlockTape<F> {
    ln_eeg: Normalized<F>,
    query: Array2<F>,
    keys: Array2<F>,
    attn: AttentionCache<F>,
    ln_ffn: Normalized<F>,
    ffn_in: Array2<F>,
    fc2_in: Array2<F>,
}

#[derive(Debug, Clone)]
struct PairingTape<F> {
    audio: Array2<F>,
    audio_norm: Normalized<F>,
    blocks: Vec<BlockTape<F>>,
    streams: Vec<Array2<F>>,
}

/// Everything the backward pass needs from one example's forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Tape<F> {
    x_t: Array2<F>,
    env: [Array1<F>; 2],
    eeg: Array2<F>,
    pairings: Vec<PairingTape<F>>,
    pooled: Array1<F>,
    z: Array1<F>,
    probe_pre: Array1<F>,
    /// Input of every classifier layer.
    clf_in: Vec<Array1<F>>,
    pub outputs: Outputs<F>,
}

fn relu<F: Real>(x: &Array1<F>) -> Array1<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

fn block_fwd<F: Real>(
    b: &Block<F>,
    stream: ArrayView2<F>,
    audio_norm: &Normalized<F>,
    pe: ArrayView2<F>,
    n_heads: usize,
) -> (Array2<F>, BlockTape<F>) {
    let ln_eeg = normalize(stream);
    let query = affine(&ln_eeg, &b.ln_eeg);
    let keys = affine(audio_norm, &b.ln_audio);
    let (m, attn) = attention_fwd(&b.attn, query.view(), keys.view(), keys.view(), n_heads);
    let r1 = m + stream;
    let ln_ffn = normalize(r1.view());
    let ffn_in = affine(&ln_ffn, &b.ln_ffn);
    let fc2_in = linear_fwd(&b.fc1, ffn_in.view()) + &ffn_in;
    let out = linear_fwd(&b.fc2, fc2_in.view()) + pe;
    (out, BlockTape { ln_eeg, query, keys, attn, ln_ffn, ffn_in, fc2_in })
}

/// Returns `dL/dstream` and this block's contribution to `dL/d(normalized audio)`.
fn block_bwd<F: Real>(
    b: &Block<F>,
    t: &BlockTape<F>,
    audio_norm: &Normalized<F>,
    dout: ArrayView2<F>,
    g: &mut Block<F>,
) -> (Array2<F>, Array2<F>) {
    let dr2 = linear_bwd(&b.fc2, t.fc2_in.view(), dout, &mut g.fc2);
    let mut dn = linear_bwd(&b.fc1, t.ffn_in.view(), dr2.view(), &mut g.fc1);
    dn += &dr2;
    let dr1 = normalize_bwd(&t.ln_ffn, affine_bwd(&t.ln_ffn, &b.ln_ffn, dn.view(), &mut g.ln_ffn).view());
    let (dq, dk, dv) = attention_bwd(&b.attn, &t.attn, t.query.view(), t.keys.view(), t.keys.view(), dr1.view(), &mut g.attn);
    let dstream = dr1 + normalize_bwd(&t.ln_eeg, affine_bwd(&t.ln_eeg, &b.ln_eeg, dq.view(), &mut g.ln_eeg).view());
    let dkeys = dk + dv;
    let daudio = affine_bwd(audio_norm, &b.ln_audio, dkeys.view(), &mut g.ln_audio);
    (dstream, daudio)
}

fn check_block_inputs<F: Real>(b: &Block<F>, eeg: ArrayView2<F>, audio: ArrayView2<F>) -> Result<()> {
    let d = b.ln_eeg.gain.len();
    if eeg.dim() != audio.dim() || eeg.ncols() != d {
        return Err(ModelError::Shape(format!(
            "block of width {d} got streams {:?} and {:?}",
            eeg.dim(),
            audio.dim()
        )));
    }
    Ok(())
}

/// One cross-attention unit on `[L × d_model]` streams. The result replaces
/// the EEG-side stream for the next unit.
pub fn cross_attention_block<F: Real>(
    eeg: ArrayView2<F>,
    audio: ArrayView2<F>,
    block: &Block<F>,
    n_heads: usize,
) -> Result<Array2<F>> {
    check_block_inputs(block, eeg, audio)?;
    let d = eeg.ncols();
    if n_heads == 0 || d % n_heads != 0 || d % 2 != 0 {
        return Err(ModelError::Shape(format!("width {d} with {n_heads} heads")));
    }
    let pe = positional_encoding(eeg.nrows(), d);
    Ok(block_fwd(block, eeg, &normalize(audio), pe.view(), n_heads).0)
}

fn check_input<F: Real>(cfg: &ModelConfig, x: &ExampleInput<F>) -> Result<()> {
    let (c, l) = x.features.dim();
    if c != cfg.in_channels {
        return Err(ModelError::Shape(format!("expected {} feature rows, got {c}", cfg.in_channels)));
    }
    if l == 0 || x.env_a.len() != l || x.env_b.len() != l {
        return Err(ModelError::Shape(format!(
            "features span {l} samples, envelopes {} and {}",
            x.env_a.len(),
            x.env_b.len()
        )));
    }
    Ok(())
}

/// Two-layer probe: ReLU hidden layer, linear output.
pub fn probe_forward<F: Real>(z: ArrayView1<F>, probe: &[Linear<F>; 2]) -> Array1<F> {
    let h = relu(&vec_linear_fwd(&probe[0], z));
    vec_linear_fwd(&probe[1], h.view())
}

/// Classifier logits; ReLU between layers, linear output.
pub fn classifier_forward<F: Real>(z: ArrayView1<F>, layers: &[Linear<F>]) -> Array1<F> {
    let mut x = z.to_owned();
    for (i, l) in layers.iter().enumerate() {
        x = vec_linear_fwd(l, x.view());
        if i + 1 < layers.len() {
            x = relu(&x);
        }
    }
    x
}

/// Encoder representation `z` of one window.
pub fn cmaa_encode<'a, F: Real>(
    features: ArrayView2<'a, F>,
    env_a: ArrayView1<'a, F>,
    env_b: ArrayView1<'a, F>,
    params: &ModelParams<F>,
    cfg: &ModelConfig,
) -> Result<Array1<F>> {
    Ok(params.forward(cfg, &ExampleInput { features, env_a, env_b })?.z)
}

impl<F: Real> ModelParams<F> {
    pub(crate) fn run(&self, cfg: &ModelConfig, x: &ExampleInput<F>, keep_streams: bool) -> Result<Tape<F>> {
        check_input(cfg, x)?;
        let l = x.features.ncols();
        let d = cfg.d_model;
        let pe: Array2<F> = positional_encoding(l, d);
        let x_t = x.features.t().to_owned();
        let mut eeg = linear_fwd(&self.eeg_in, x_t.view());
        if cfg.input_pe {
            eeg += &pe;
        }
        let env = [x.env_a.to_owned(), x.env_b.to_owned()];
        let mut pairings = Vec::with_capacity(2);
        let mut halves = Vec::with_capacity(2);
        for e in &env {
            let mut audio = linear_fwd(&self.audio_in, e.view().insert_axis(Axis(1)));
            if cfg.input_pe {
                audio += &pe;
            }
            let audio_norm = normalize(audio.view());
            let mut stream = eeg.clone();
            let mut blocks = Vec::with_capacity(self.blocks.len());
            let mut streams = Vec::new();
            for b in &self.blocks {
                let (out, tape) = block_fwd(b, stream.view(), &audio_norm, pe.view(), cfg.n_heads);
                blocks.push(tape);
                stream = out;
                if keep_streams {
                    streams.push(stream.clone());
                }
            }
            halves.push(stream.mean_axis(Axis(0)).expect("nonempty window"));
            pairings.push(PairingTape { audio, audio_norm, blocks, streams });
        }
        let pooled = concatenate(Axis(0), &[halves[0].view(), halves[1].view()]).expect("equal widths");
        let z = vec_linear_fwd(&self.fusion, pooled.view());
        let probe_pre = vec_linear_fwd(&self.probe[0], z.view());
        let p = vec_linear_fwd(&self.probe[1], relu(&probe_pre).view());
        let mut clf_in = Vec::with_capacity(self.classifier.len());
        let mut h = z.clone();
        for (i, layer) in self.classifier.iter().enumerate() {
            let y = vec_linear_fwd(layer, h.view());
            clf_in.push(h);
            h = if i + 1 < self.classifier.len() { relu(&y) } else { y };
        }
        let outputs = Outputs { z: z.clone(), p, logits: h };
        Ok(Tape { x_t, env, eeg, pairings, pooled, z, probe_pre, clf_in, outputs })
    }

    /// Inference on one window.
    pub fn forward(&self, cfg: &ModelConfig, x: &ExampleInput<F>) -> Result<Outputs<F>> {
        Ok(self.run(cfg, x, false)?.outputs)
    }

    /// Forward pass keeping every intermediate stream.
    pub fn trace(&self, cfg: &ModelConfig, x: &ExampleInput<F>) -> Result<EncoderTrace<F>> {
        let t = self.run(cfg, x, true)?;
        let [pa, pb]: [PairingTape<F>; 2] = t.pairings.try_into().expect("two pairings");
        Ok(EncoderTrace {
            eeg_projected: t.eeg,
            audio_projected: [pa.audio, pb.audio],
            streams: [pa.streams, pb.streams],
            pooled: t.pooled,
            z: t.z,
        })
    }

    /// Reverse pass for one example. `dp` and `dlogits` are the loss
    /// gradients at the probe output and the logits; the representation `z`
    /// only receives gradient through the heads.
    pub(crate) fn backward(
        &self,
        tape: &Tape<F>,
        dp: Option<ArrayView1<F>>,
        dlogits: Option<ArrayView1<F>>,
        g: &mut ModelParams<F>,
    ) {
        let mut dz = Array1::zeros(tape.z.len());
        if let Some(dp) = dp {
            let hidden = relu(&tape.probe_pre);
            let mut dh = vec_linear_bwd(&self.probe[1], hidden.view(), dp, &mut g.probe[1]);
            dh.zip_mut_with(&tape.probe_pre, |d, &x| {
                if x <= F::zero() {
                    *d = F::zero()
                }
            });
            dz += &vec_linear_bwd(&self.probe[0], tape.z.view(), dh.view(), &mut g.probe[0]);
        }
        if let Some(dl) = dlogits {
            let mut dy = dl.to_owned();
            for i in (0..self.classifier.len()).rev() {
                let mut dx = vec_linear_bwd(&self.classifier[i], tape.clf_in[i].view(), dy.view(), &mut g.classifier[i]);
                if i > 0 {
                    // input of layer i is relu(...) of the layer below
                    dx.zip_mut_with(&tape.clf_in[i], |d, &x| {
                        if x <= F::zero() {
                            *d = F::zero()
                        }
                    });
                }
                dy = dx;
            }
            dz += &dy;
        }
        let dpooled = vec_linear_bwd(&self.fusion, tape.pooled.view(), dz.view(), &mut g.fusion);
        let (l, d) = tape.eeg.dim();
        let inv_l = F::one() / F::from_usize(l).expect("length");
        let mut deeg = Array2::<F>::zeros((l, d));
        for (k, pt) in tape.pairings.iter().enumerate() {
            let half = dpooled.slice(s![k * d..(k + 1) * d]).mapv(|v| v * inv_l);
            let mut ds = Array2::from_shape_fn((l, d), |(_, j)| half[j]);
            let mut daudio_hat = Array2::<F>::zeros((l, d));
            for (bi, bt) in pt.blocks.iter().enumerate().rev() {
                let (dstream, da) = block_bwd(&self.blocks[bi], bt, &pt.audio_norm, ds.view(), &mut g.blocks[bi]);
                daudio_hat += &da;
                ds = dstream;
            }
            deeg += &ds;
            let daudio = normalize_bwd(&pt.audio_norm, daudio_hat.view());
            linear_bwd_params(tape.env[k].view().insert_axis(Axis(1)), daudio.view(), &mut g.audio_in);
        }
        linear_bwd_params(tape.x_t.view(), deeg.view(), &mut g.eeg_in);
    }
}
