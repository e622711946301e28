use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError, Real, Result};

/// `y = x·W + b` with `W: [in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Linear<F> {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { weight: Array2::zeros((n_in, n_out)), bias: Array1::zeros(n_out) }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn xavier(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (n_in + n_out) as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((n_in, n_out), || F::lit(rng.gen_range(-a..a))),
            bias: Array1::zeros(n_out),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<F> {
    pub gain: Array1<F>,
    pub bias: Array1<F>,
}

impl<F: Real> LayerNormParams<F> {
    pub fn new(d: usize) -> Self {
        Self { gain: Array1::ones(d), bias: Array1::zeros(d) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<F> {
    pub q: Linear<F>,
    pub k: Linear<F>,
    pub v: Linear<F>,
    pub out: Linear<F>,
}

/// One cross-attention unit. The EEG-side stream is the query; the audio
/// stream supplies keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub ln_eeg: LayerNormParams<F>,
    pub ln_audio: LayerNormParams<F>,
    pub attn: Attention<F>,
    pub ln_ffn: LayerNormParams<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

/// Full parameter set, shared by both augmentation paths. Gradients and Adam
/// moments reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub eeg_in: Linear<F>,
    pub audio_in: Linear<F>,
    pub blocks: Vec<Block<F>>,
    pub fusion: Linear<F>,
    pub probe: [Linear<F>; 2],
    pub classifier: Vec<Linear<F>>,
}

type Named<'a, F> = Vec<(String, ArrayViewD<'a, F>)>;
type NamedMut<'a, F> = Vec<(String, ArrayViewMutD<'a, F>)>;

fn push_lin<'a, F>(out: &mut Named<'a, F>, name: &str, l: &'a Linear<F>) {
    out.push((format!("{name}.weight"), l.weight.view().into_dyn()));
    out.push((format!("{name}.bias"), l.bias.view().into_dyn()));
}

fn push_ln<'a, F>(out: &mut Named<'a, F>, name: &str, l: &'a LayerNormParams<F>) {
    out.push((format!("{name}.gain"), l.gain.view().into_dyn()));
    out.push((format!("{name}.bias"), l.bias.view().into_dyn()));
}

fn push_lin_mut<'a, F>(out: &mut NamedMut<'a, F>, name: &str, l: &'a mut Linear<F>) {
    out.push((format!("{name}.weight"), l.weight.view_mut().into_dyn()));
    out.push((format!("{name}.bias"), l.bias.view_mut().into_dyn()));
}

fn push_ln_mut<'a, F>(out: &mut NamedMut<'a, F>, name: &str, l: &'a mut LayerNormParams<F>) {
    out.push((format!("{name}.gain"), l.gain.view_mut().into_dyn()));
    out.push((format!("{name}.bias"), l.bias.view_mut().into_dyn()));
}

impl<F: Real> ModelParams<F> {
    /// Random initialization, deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let eeg_in = Linear::xavier(cfg.in_channels, d, &mut rng);
        let audio_in = Linear::xavier(1, d, &mut rng);
        let blocks = (0..cfg.n_blocks)
            .map(|_| Block {
                ln_eeg: LayerNormParams::new(d),
                ln_audio: LayerNormParams::new(d),
                attn: Attention {
                    q: Linear::xavier(d, d, &mut rng),
                    k: Linear::xavier(d, d, &mut rng),
                    v: Linear::xavier(d, d, &mut rng),
                    out: Linear::xavier(d, d, &mut rng),
                },
                ln_ffn: LayerNormParams::new(d),
                fc1: Linear::xavier(d, d, &mut rng),
                fc2: Linear::xavier(d, d, &mut rng),
            })
            .collect();
        let fusion = Linear::xavier(2 * d, cfg.d_repr, &mut rng);
        let probe = [
            Linear::xavier(cfg.d_repr, cfg.probe_hidden, &mut rng),
            Linear::xavier(cfg.probe_hidden, cfg.d_repr, &mut rng),
        ];
        let mut classifier = Vec::new();
        let mut prev = cfg.d_repr;
        for &w in &cfg.clf_dims {
            classifier.push(Linear::xavier(prev, w, &mut rng));
            prev = w;
        }
        Ok(Self { eeg_in, audio_in, blocks, fusion, probe, classifier })
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(F::zero());
        z
    }

    pub fn fill(&mut self, v: F) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(v);
        }
    }

    /// Every tensor with its dotted name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        push_lin(&mut out, "eeg_in", &self.eeg_in);
        push_lin(&mut out, "audio_in", &self.audio_in);
        for (i, b) in self.blocks.iter().enumerate() {
            push_ln(&mut out, &format!("block{i}.ln_eeg"), &b.ln_eeg);
            push_ln(&mut out, &format!("block{i}.ln_audio"), &b.ln_audio);
            push_lin(&mut out, &format!("block{i}.attn.q"), &b.attn.q);
            push_lin(&mut out, &format!("block{i}.attn.k"), &b.attn.k);
            push_lin(&mut out, &format!("block{i}.attn.v"), &b.attn.v);
            push_lin(&mut out, &format!("block{i}.attn.out"), &b.attn.out);
            push_ln(&mut out, &format!("block{i}.ln_ffn"), &b.ln_ffn);
            push_lin(&mut out, &format!("block{i}.fc1"), &b.fc1);
            push_lin(&mut out, &format!("block{i}.fc2"), &b.fc2);
        }
        push_lin(&mut out, "fusion", &self.fusion);
        push_lin(&mut out, "probe.0", &self.probe[0]);
        push_lin(&mut out, "probe.1", &self.probe[1]);
        for (i, l) in self.classifier.iter().enumerate() {
            push_lin(&mut out, &format!("classifier.{i}"), l);
        }
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = Vec::new();
        push_lin_mut(&mut out, "eeg_in", &mut self.eeg_in);
        push_lin_mut(&mut out, "audio_in", &mut self.audio_in);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            push_ln_mut(&mut out, &format!("block{i}.ln_eeg"), &mut b.ln_eeg);
            push_ln_mut(&mut out, &format!("block{i}.ln_audio"), &mut b.ln_audio);
            push_lin_mut(&mut out, &format!("block{i}.attn.q"), &mut b.attn.q);
            push_lin_mut(&mut out, &format!("block{i}.attn.k"), &mut b.attn.k);
            push_lin_mut(&mut out, &format!("block{i}.attn.v"), &mut b.attn.v);
            push_lin_mut(&mut out, &format!("block{i}.attn.out"), &mut b.attn.out);
            push_ln_mut(&mut out, &format!("block{i}.ln_ffn"), &mut b.ln_ffn);
            push_lin_mut(&mut out, &format!("block{i}.fc1"), &mut b.fc1);
            push_lin_mut(&mut out, &format!("block{i}.fc2"), &mut b.fc2);
        }
        push_lin_mut(&mut out, "fusion", &mut self.fusion);
        let [p0, p1] = &mut self.probe;
        push_lin_mut(&mut out, "probe.0", p0);
        push_lin_mut(&mut out, "probe.1", p1);
        for (i, l) in self.classifier.iter_mut().enumerate() {
            push_lin_mut(&mut out, &format!("classifier.{i}"), l);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += k · other`, tensor by tensor.
    pub fn scaled_add(&mut self, k: F, other: &Self) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            Zip::from(&mut a).and(&b).for_each(|a, &b| *a = *a + k * b);
        }
    }

    pub fn scale(&mut self, k: F) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * k);
        }
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors().into_iter().find(|(_, t)| t.iter().any(|v| !v.is_finite())).map(|(n, _)| n)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some(tensor) => Err(ModelError::NumericalFailure { tensor }),
            None => Ok(()),
        }
    }

    /// Element-type conversion, e.g. `f32` training weights to `f64`.
    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let lin = |l: &Linear<F>| Linear {
            weight: l.weight.mapv(|v| G::lit(v.to_f64().expect("finite"))),
            bias: l.bias.mapv(|v| G::lit(v.to_f64().expect("finite"))),
        };
        let ln = |l: &LayerNormParams<F>| LayerNormParams {
            gain: l.gain.mapv(|v| G::lit(v.to_f64().expect("finite"))),
            bias: l.bias.mapv(|v| G::lit(v.to_f64().expect("finite"))),
        };
        ModelParams {
            eeg_in: lin(&self.eeg_in),
            audio_in: lin(&self.audio_in),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln_eeg: ln(&b.ln_eeg),
                    ln_audio: ln(&b.ln_audio),
                    attn: Attention { q: lin(&b.attn.q), k: lin(&b.attn.k), v: lin(&b.attn.v), out: lin(&b.attn.out) },
                    ln_ffn: ln(&b.ln_ffn),
                    fc1: lin(&b.fc1),
                    fc2: lin(&b.fc2),
                })
                .collect(),
            fusion: lin(&self.fusion),
            probe: [lin(&self.probe[0]), lin(&self.probe[1])],
            classifier: self.classifier.iter().map(lin).collect(),
        }
    }

    /// Check that every tensor has the shape `cfg` implies.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = Self::init(cfg, 0)?;
        let want = reference.tensors();
        let have = self.tensors();
        if want.len() != have.len() {
            return Err(ModelError::Shape(format!("expected {} tensors, found {}", want.len(), have.len())));
        }
        for ((name, w), (_, h)) in want.iter().zip(&have) {
            if w.shape() != h.shape() {
                return Err(ModelError::Shape(format!("{name}: expected {:?}, found {:?}", w.shape(), h.shape())));
            }
        }
        Ok(())
    }
}
