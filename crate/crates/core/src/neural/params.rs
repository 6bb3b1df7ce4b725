//! Named parameter tensors, trainability masks and gradient buffers.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

pub type ParamId = usize;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        id
    }

    /// Uniform initialisation with the given standard deviation.
    pub fn add_random(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let a = std * 3f64.sqrt();
        let m = Mat::from_fn(rows, cols, |_, _| rng.gen_range(-a..=a));
        self.add(name, m, true)
    }

    pub fn add_const(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Mat::from_vec(rows, cols, vec![v; rows * cols]), true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.params[id].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.id(name).map(|i| self.get(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.params[id].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.params[id].trainable = on;
    }

    pub fn n_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Which parameters receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    /// Everything except the flag embedding trains.
    #[default]
    Full,
    /// Decoder self-attention and feed-forward weights are frozen as well.
    FlagFinetune,
}

impl std::str::FromStr for FreezeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Self::Full),
            "flag_finetune" => Ok(Self::FlagFinetune),
            _ => Err(format!("unknown freeze mode `{s}` (full, flag_finetune)")),
        }
    }
}

pub const FLAG_EMBED: &str = "flag.embed";

pub fn is_frozen(name: &str, mode: FreezeMode) -> bool {
    if name == FLAG_EMBED {
        return true;
    }
    match mode {
        FreezeMode::Full => false,
        FreezeMode::FlagFinetune => {
            let mut parts = name.split('.');
            parts.next() == Some("dec")
                && parts.next().is_some_and(|l| l.parse::<usize>().is_ok())
                && matches!(parts.next(), Some("self" | "ffn"))
        }
    }
}

pub fn apply_freeze_mask(params: &mut ParamStore, mode: FreezeMode) {
    for id in 0..params.len() {
        let frozen = is_frozen(&params.param(id).name, mode);
        params.set_trainable(id, !frozen);
    }
}

/// Gradient per parameter; `None` where nothing flowed or the parameter is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub g: Vec<Option<Mat>>,
}

impl Grads {
    pub fn empty(n: usize) -> Self {
        Self { g: vec![None; n] }
    }

    pub fn accumulate(&mut self, id: ParamId, m: Mat) {
        match &mut self.g[id] {
            Some(acc) => acc.add_assign(&m),
            slot => *slot = Some(m),
        }
    }

    pub fn add(&mut self, other: Grads) {
        for (id, g) in other.g.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(id, g);
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.g.iter().flatten().map(Mat::sq_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.g.iter_mut().flatten() {
            g.scale(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_patterns() {
        assert!(is_frozen("flag.embed", FreezeMode::Full));
        assert!(!is_frozen("dec.0.self.wq", FreezeMode::Full));
        assert!(is_frozen("dec.0.self.wq", FreezeMode::FlagFinetune));
        assert!(is_frozen("dec.1.ffn.b2", FreezeMode::FlagFinetune));
        assert!(!is_frozen("dec.1.cross.wq", FreezeMode::FlagFinetune));
        assert!(!is_frozen("enc.0.self.wq", FreezeMode::FlagFinetune));
        assert!(!is_frozen("dec.ln.g", FreezeMode::FlagFinetune));
    }
}
