//! `key = value` codec shared by run configs and checkpoint metadata.
//!
//! Each settings struct lists its entries under a fixed prefix and accepts
//! updates by the same key. Floats are written with `Display`, which prints
//! the shortest string that parses back to the identical value.

use std::fmt::Display;
use std::str::FromStr;

use crate::dataset::AugmentConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Outcome of offering a key to a settings struct.
pub type SetResult = Result<bool, String>;

pub trait KeyValues {
    /// Every key with its current value, in a stable order.
    fn entries(&self) -> Vec<(String, String)>;
    /// Update one key. `Ok(false)` means the key is not one of ours.
    fn set(&mut self, key: &str, value: &str) -> SetResult;
}

pub fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e| format!("{key}: cannot parse `{value}`: {e}"))
}

pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    value.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s)).collect()
}

pub fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn kv(key: &str, value: impl Display) -> (String, String) {
    (key.to_string(), value.to_string())
}

impl KeyValues for ModelConfig {
    fn entries(&self) -> Vec<(String, String)> {
        vec![
            kv("model.d_model", self.d_model),
            kv("model.n_heads", self.n_heads),
            kv("model.n_blocks", self.n_blocks),
            kv("model.d_repr", self.d_repr),
            kv("model.probe_hidden", self.probe_hidden),
            kv("model.clf_dims", join(&self.clf_dims)),
            kv("model.window_len", self.window_len),
            kv("model.in_channels", self.in_channels),
            kv("model.input_pe", self.input_pe),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> SetResult {
        match key {
            "model.d_model" => self.d_model = parse(key, value)?,
            "model.n_heads" => self.n_heads = parse(key, value)?,
            "model.n_blocks" => self.n_blocks = parse(key, value)?,
            "model.d_repr" => self.d_repr = parse(key, value)?,
            "model.probe_hidden" => self.probe_hidden = parse(key, value)?,
            "model.clf_dims" => self.clf_dims = parse_list(key, value)?,
            "model.window_len" => self.window_len = parse(key, value)?,
            "model.in_channels" => self.in_channels = parse(key, value)?,
            "model.input_pe" => self.input_pe = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl KeyValues for TrainConfig {
    fn entries(&self) -> Vec<(String, String)> {
        vec![
            kv("train.lr", self.lr),
            kv("train.beta1", self.beta1),
            kv("train.beta2", self.beta2),
            kv("train.epochs", self.epochs),
            kv("train.batch_size", self.batch_size),
            kv("train.eps_adam", self.eps_adam),
            kv("train.seed", self.seed),
            kv("train.grad_clip", self.grad_clip.map_or("none".to_string(), |c| c.to_string())),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> SetResult {
        match key {
            "train.lr" => self.lr = parse(key, value)?,
            "train.beta1" => self.beta1 = parse(key, value)?,
            "train.beta2" => self.beta2 = parse(key, value)?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.eps_adam" => self.eps_adam = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            "train.grad_clip" => {
                self.grad_clip = match value.trim() {
                    "none" | "off" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl KeyValues for LossConfig {
    fn entries(&self) -> Vec<(String, String)> {
        vec![
            kv("loss.temperature", self.temperature),
            kv("loss.normalize_embeddings", self.normalize_embeddings),
            kv("loss.epsilon", self.epsilon),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> SetResult {
        match key {
            "loss.temperature" => self.temperature = parse(key, value)?,
            "loss.normalize_embeddings" => self.normalize_embeddings = parse(key, value)?,
            "loss.epsilon" => self.epsilon = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl KeyValues for AugmentConfig {
    fn entries(&self) -> Vec<(String, String)> {
        vec![kv("augment.noise_sigma", self.noise_sigma), kv("augment.standardize", self.standardize)]
    }

    fn set(&mut self, key: &str, value: &str) -> SetResult {
        match key {
            "augment.noise_sigma" => self.noise_sigma = parse(key, value)?,
            "augment.standardize" => self.standardize = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Split one `key = value` line; blank lines and `#` comments give `None`.
pub fn split_line(line: &str) -> Option<Result<(&str, &str), String>> {
    let line = match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    };
    let line = line.trim();
    if line.is_empty() {
        return None;
    }
    Some(match line.split_once('=') {
        Some((k, v)) => Ok((k.trim(), v.trim())),
        None => Err(format!("expected `key = value`, got `{line}`")),
    })
}
