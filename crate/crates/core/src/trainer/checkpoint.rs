//! Binary checkpoint: a flat list of named little-endian f32 tensors followed
//! by a UTF-8 block of `key=value` lines for configs, history and run metadata.
//!
//! ```text
//! "CLCK" | u32 version | u32 n_tensors
//! n_tensors × ( u32 name_len | name | u32 rank | rank × u32 dim | f32 × prod(dims) )
//! u32 text_len | text
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, IxDyn};

use super::{AdamState, EpochMetrics, FitConfig, Result, TrainError};
use crate::config::KeyValues;
use crate::csp::CspModel;
use crate::dataset::Standardization;
use crate::model::ModelParams;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or evaluate a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: FitConfig,
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    /// Stored at f32 precision.
    pub csp: CspModel,
    pub standardization: Standardization,
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
    /// Free-form run metadata (fold, window length, validation trials).
    /// Values must not contain newlines.
    pub meta: BTreeMap<String, String>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&u32::try_from(v).expect("checkpoint field exceeds u32").to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }

    fn tensor(&mut self, name: &str, shape: &[usize], values: impl Iterator<Item = f32>) {
        self.bytes(name.as_bytes());
        self.u32(shape.len());
        for &d in shape {
            self.u32(d);
        }
        for v in values {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }

    fn tensor(&mut self) -> std::result::Result<(String, ArrayD<f32>), String> {
        let name = self.string()?;
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("tensor too large")?;
        let raw = self.take(n.checked_mul(4).ok_or("tensor too large")?)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| e.to_string())?;
        Ok((name, arr))
    }
}

fn f32s(xs: &[f64]) -> impl Iterator<Item = f32> + '_ {
    xs.iter().map(|&v| v as f32)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("none".into(), |v| v.to_string())
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.parse().map_err(|_| format!("bad number `{s}`"))
}

fn write_params(w: &mut Writer, prefix: &str, p: &ModelParams<f32>) {
    for (name, t) in p.tensors() {
        w.tensor(&format!("{prefix}/{name}"), t.shape(), t.iter().copied());
    }
}

fn read_params(
    tensors: &mut BTreeMap<String, ArrayD<f32>>,
    prefix: &str,
    template: &ModelParams<f32>,
) -> std::result::Result<ModelParams<f32>, String> {
    let mut p = template.clone();
    for (name, mut t) in p.tensors_mut() {
        let key = format!("{prefix}/{name}");
        let stored = tensors.remove(&key).ok_or_else(|| format!("missing tensor {key}"))?;
        if stored.shape() != t.shape() {
            return Err(format!("{key}: stored shape {:?}, config implies {:?}", stored.shape(), t.shape()));
        }
        t.assign(&stored);
    }
    Ok(p)
}

fn take_vec(tensors: &mut BTreeMap<String, ArrayD<f32>>, key: &str) -> std::result::Result<Vec<f64>, String> {
    let t = tensors.remove(key).ok_or_else(|| format!("missing tensor {key}"))?;
    if t.ndim() != 1 {
        return Err(format!("{key}: expected a vector, got shape {:?}", t.shape()));
    }
    Ok(t.iter().map(|&v| v as f64).collect())
}

fn take_matrix(tensors: &mut BTreeMap<String, ArrayD<f32>>, key: &str) -> std::result::Result<Array2<f64>, String> {
    let t = tensors.remove(key).ok_or_else(|| format!("missing tensor {key}"))?;
    t.into_dimensionality().map(|m| m.mapv(|v| v as f64)).map_err(|_| format!("{key}: expected a matrix"))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(CHECKPOINT_MAGIC.to_vec());
        w.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let n_params = self.params.tensors().len();
        w.u32(3 * n_params + 7);
        write_params(&mut w, "param", &self.params);
        write_params(&mut w, "adam_m", &self.adam.m);
        write_params(&mut w, "adam_v", &self.adam.v);
        let csp = &self.csp;
        w.tensor("csp/filters", csp.filters.shape(), csp.filters.iter().map(|&v| v as f32));
        w.tensor("csp/eigenvalues", &[csp.eigenvalues.len()], f32s(&csp.eigenvalues));
        for (i, c) in csp.class_covariances.iter().enumerate() {
            w.tensor(&format!("csp/cov{i}"), c.shape(), c.iter().map(|&v| v as f32));
        }
        let s = &self.standardization;
        w.tensor("norm/feature_mean", &[s.feature_mean.len()], f32s(&s.feature_mean));
        w.tensor("norm/feature_std", &[s.feature_std.len()], f32s(&s.feature_std));
        w.tensor("norm/envelope", &[2], [s.envelope_mean as f32, s.envelope_std as f32].into_iter());
        w.bytes(self.metadata().as_bytes());
        w.0
    }

    fn metadata(&self) -> String {
        let c = &self.config;
        let mut lines: Vec<(String, String)> = Vec::new();
        lines.extend(c.model.entries());
        lines.extend(c.train.entries());
        lines.extend(c.loss.entries());
        lines.extend(c.augment.entries());
        lines.push(("epoch".into(), self.epoch.to_string()));
        lines.push(("adam.t".into(), self.adam.t.to_string()));
        lines.push(("csp.shrinkage".into(), self.csp.shrinkage.to_string()));
        for h in &self.history {
            let v = [h.claad_loss, h.classification_loss, h.train_accuracy].map(|x| x.to_string()).join(",");
            lines.push((format!("history.{}", h.epoch), format!("{v},{}", fmt_opt(h.val_accuracy))));
        }
        for (k, v) in &self.meta {
            lines.push((format!("meta.{k}"), v.replace('\n', " ")));
        }
        lines.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::decode(bytes).map_err(|reason| TrainError::Checkpoint { path: PathBuf::from("<bytes>"), reason })
    }

    fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let n = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let (name, t) = r.tensor()?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(format!("duplicate tensor {name}"));
            }
        }
        let text = r.string()?;
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }

        let mut config = FitConfig::default();
        let (mut epoch, mut adam_t, mut shrinkage) = (None, None, None);
        let mut history = Vec::new();
        let mut meta = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| format!("bad metadata line `{line}`"))?;
            if let Some(key) = k.strip_prefix("meta.") {
                meta.insert(key.to_string(), v.to_string());
            } else if let Some(i) = k.strip_prefix("history.") {
                let f: Vec<&str> = v.split(',').collect();
                if f.len() != 4 {
                    return Err(format!("bad history line `{line}`"));
                }
                history.push(EpochMetrics {
                    epoch: i.parse().map_err(|_| format!("bad history epoch `{i}`"))?,
                    claad_loss: parse_f64(f[0])?,
                    classification_loss: parse_f64(f[1])?,
                    train_accuracy: parse_f64(f[2])?,
                    val_accuracy: if f[3] == "none" { None } else { Some(parse_f64(f[3])?) },
                });
            } else {
                match k {
                    "epoch" => epoch = Some(v.parse().map_err(|_| format!("bad epoch `{v}`"))?),
                    "adam.t" => adam_t = Some(v.parse().map_err(|_| format!("bad adam.t `{v}`"))?),
                    "csp.shrinkage" => shrinkage = Some(parse_f64(v)?),
                    _ => {
                        let known = config.model.set(k, v)?
                            || config.train.set(k, v)?
                            || config.loss.set(k, v)?
                            || config.augment.set(k, v)?;
                        if !known {
                            return Err(format!("unknown metadata key `{k}`"));
                        }
                    }
                }
            }
        }
        config.model.validate().map_err(|e| e.to_string())?;

        let template = ModelParams::<f32>::init(&config.model, 0).map_err(|e| e.to_string())?;
        let params = read_params(&mut tensors, "param", &template)?;
        let m = read_params(&mut tensors, "adam_m", &template)?;
        let v = read_params(&mut tensors, "adam_v", &template)?;
        let csp = CspModel {
            filters: take_matrix(&mut tensors, "csp/filters")?,
            eigenvalues: take_vec(&mut tensors, "csp/eigenvalues")?,
            class_covariances: [take_matrix(&mut tensors, "csp/cov0")?, take_matrix(&mut tensors, "csp/cov1")?],
            shrinkage: shrinkage.ok_or("missing csp.shrinkage")?,
        };
        let env = take_vec(&mut tensors, "norm/envelope")?;
        if env.len() != 2 {
            return Err("norm/envelope must hold mean and std".into());
        }
        let standardization = Standardization {
            feature_mean: take_vec(&mut tensors, "norm/feature_mean")?,
            feature_std: take_vec(&mut tensors, "norm/feature_std")?,
            envelope_mean: env[0],
            envelope_std: env[1],
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(format!("unexpected tensor {extra}"));
        }
        Ok(Checkpoint {
            config,
            params,
            adam: AdamState { m, v, t: adam_t.ok_or("missing adam.t")? },
            csp,
            standardization,
            epoch: epoch.ok_or("missing epoch")?,
            history,
            meta,
        })
    }

    /// Write via a temporary sibling and rename, so readers never see a
    /// half-written file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let err = |e: std::io::Error| TrainError::Checkpoint { path: path.to_path_buf(), reason: e.to_string() };
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(err)?;
        fs::rename(&tmp, path).map_err(err)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| TrainError::Checkpoint { path: path.to_path_buf(), reason: e.to_string() })?;
        Self::decode(&bytes).map_err(|reason| TrainError::Checkpoint { path: path.to_path_buf(), reason })
    }
}
