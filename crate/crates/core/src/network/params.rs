use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Array;
use crate::error::{Error, Result};

pub const MODEL_CONFIG_VERSION: u32 = 1;

/// Architecture hyperparameters. Widths are full-scale and multiplied by
/// `scale` when the model is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub version: u32,
    pub scale: f64,
    pub radii: Vec<f64>,
    pub nsamples: Vec<usize>,
    pub sc1_widths: Vec<Vec<usize>>,
    pub sc1_out: usize,
    pub cost_neighbors: usize,
    pub cost_widths: Vec<usize>,
    pub sc2_widths: Vec<Vec<usize>>,
    pub sc2_out: usize,
    pub head_widths: Vec<usize>,
    /// GRU update of the global feature across frames of a clip.
    pub temporal: bool,
    /// Frames after which inference resets the hidden state.
    pub clip_len: usize,
    pub eta_b: f64,
    /// Multipliers applied to `(rrv, rcs)` before they enter the network.
    pub feature_scale: [f64; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            version: MODEL_CONFIG_VERSION,
            scale: 1.0,
            radii: vec![2.0, 4.0, 8.0, 16.0],
            nsamples: vec![4, 8, 16, 32],
            sc1_widths: vec![vec![32, 32, 64]; 4],
            sc1_out: 256,
            cost_neighbors: 8,
            cost_widths: vec![512, 512, 512],
            sc2_widths: vec![vec![512, 256, 64]; 4],
            sc2_out: 256,
            head_widths: vec![256, 128, 64],
            temporal: true,
            clip_len: 5,
            eta_b: 0.5,
            feature_scale: [0.1, 0.1],
        }
    }
}

/// Concrete layer widths after scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Arch {
    pub scales: Vec<(f64, usize)>,
    pub sc1: Vec<Vec<usize>>,
    pub sc1_out: usize,
    pub cost_k: usize,
    pub cost: Vec<usize>,
    pub sc2: Vec<Vec<usize>>,
    pub sc2_out: usize,
    pub head: Vec<usize>,
    pub temporal: bool,
}

pub const INPUT_FEATURES: usize = 2;
const INIT_BIAS: f64 = 0.01;

impl ModelConfig {
    pub fn with_scale(scale: f64) -> Self {
        Self {
            scale,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.version != MODEL_CONFIG_VERSION {
            return bad("unsupported model config version");
        }
        if !(self.scale > 0.0 && self.scale <= 4.0) {
            return bad("scale must be in (0, 4]");
        }
        let n = self.radii.len();
        if n == 0
            || self.nsamples.len() != n
            || self.sc1_widths.len() != n
            || self.sc2_widths.len() != n
        {
            return bad("radii, nsamples and per-scale widths must have equal non-zero length");
        }
        if self.radii.iter().any(|r| !(*r > 0.0)) || self.nsamples.iter().any(|&k| k == 0) {
            return bad("radii and nsamples must be positive");
        }
        let empty = |v: &Vec<Vec<usize>>| v.iter().any(|w| w.is_empty() || w.contains(&0));
        if empty(&self.sc1_widths) || empty(&self.sc2_widths) {
            return bad("set conv widths must be non-empty and positive");
        }
        if self.cost_widths.is_empty()
            || self.cost_widths.contains(&0)
            || self.head_widths.contains(&0)
        {
            return bad("layer widths must be positive");
        }
        if self.sc1_out == 0 || self.sc2_out == 0 || self.cost_neighbors == 0 {
            return bad("sc1_out, sc2_out and cost_neighbors must be positive");
        }
        if self.clip_len == 0 {
            return bad("clip_len must be at least 1");
        }
        if !(self.eta_b > 0.0 && self.eta_b < 1.0) {
            return bad("eta_b must be in (0, 1)");
        }
        Ok(())
    }

    pub fn arch(&self) -> Arch {
        let s = |w: usize| ((w as f64 * self.scale).round() as usize).max(1);
        let sv = |v: &Vec<usize>| v.iter().map(|&w| s(w)).collect::<Vec<_>>();
        Arch {
            scales: self
                .radii
                .iter()
                .copied()
                .zip(self.nsamples.iter().copied())
                .collect(),
            sc1: self.sc1_widths.iter().map(sv).collect(),
            sc1_out: s(self.sc1_out),
            cost_k: self.cost_neighbors,
            cost: sv(&self.cost_widths),
            sc2: self.sc2_widths.iter().map(sv).collect(),
            sc2_out: s(self.sc2_out),
            head: sv(&self.head_widths),
            temporal: self.temporal,
        }
    }
}

impl Arch {
    /// Every parameter as `(name, rows, cols)`, in storage order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let dense = |out: &mut Vec<(String, usize, usize)>, name: String, i: usize, o: usize| {
            out.push((format!("{name}.w"), i, o));
            out.push((format!("{name}.b"), 1, o));
        };
        let grouped = |out: &mut Vec<(String, usize, usize)>,
                       prefix: &str,
                       widths: &[Vec<usize>],
                       c_in: usize| {
            for (j, w) in widths.iter().enumerate() {
                out.push((format!("{prefix}.s{j}.l0.w_feat"), c_in, w[0]));
                out.push((format!("{prefix}.s{j}.l0.w_off"), 3, w[0]));
                out.push((format!("{prefix}.s{j}.l0.b"), 1, w[0]));
                for m in 1..w.len() {
                    out.push((format!("{prefix}.s{j}.l{m}.w"), w[m - 1], w[m]));
                    out.push((format!("{prefix}.s{j}.l{m}.b"), 1, w[m]));
                }
            }
        };
        grouped(&mut out, "sc1", &self.sc1, INPUT_FEATURES);
        let sc1_cat: usize = self.sc1.iter().map(|w| w[w.len() - 1]).sum();
        dense(&mut out, "sc1.fuse".into(), sc1_cat, self.sc1_out);
        let lg = 2 * self.sc1_out;
        out.push(("cost.l0.w_src".into(), lg, self.cost[0]));
        out.push(("cost.l0.w_tgt".into(), lg, self.cost[0]));
        out.push(("cost.l0.w_off".into(), 3, self.cost[0]));
        out.push(("cost.l0.b".into(), 1, self.cost[0]));
        for m in 1..self.cost.len() {
            dense(
                &mut out,
                format!("cost.l{m}"),
                self.cost[m - 1],
                self.cost[m],
            );
        }
        let fe = self.cost[self.cost.len() - 1] + lg + INPUT_FEATURES;
        grouped(&mut out, "sc2", &self.sc2, fe);
        let sc2_cat: usize = self.sc2.iter().map(|w| w[w.len() - 1]).sum();
        dense(&mut out, "sc2.fuse".into(), sc2_cat, self.sc2_out);
        if self.temporal {
            let h = self.sc2_out;
            for g in ["z", "r", "n"] {
                out.push((format!("gru.w{g}"), h, h));
                out.push((format!("gru.u{g}"), h, h));
                out.push((format!("gru.b{g}"), 1, h));
            }
        }
        let e = 2 * self.sc2_out;
        for (head, out_dim) in [("flow", 3), ("seg", 1)] {
            let mut prev = e;
            for (m, &w) in self
                .head
                .iter()
                .chain(std::iter::once(&out_dim))
                .enumerate()
            {
                dense(&mut out, format!("{head}.l{m}"), prev, w);
                prev = w;
            }
        }
        out
    }
}

/// All learnable arrays of one model, keyed by unique names.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub config: ModelConfig,
    names: Vec<String>,
    arrays: Vec<Array>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    /// Glorot-uniform weights. Biases start slightly positive so no unit sits
    /// exactly on a ReLU kink when its input row is all zeros.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::seed::derive_rng(seed, "init");
        let (names, arrays) = config
            .arch()
            .layout()
            .into_iter()
            .map(|(name, r, c)| {
                let data = if name.ends_with(".b") || name.starts_with("gru.b") {
                    vec![INIT_BIAS; r * c]
                } else {
                    let limit = (6.0 / (r + c) as f64).sqrt();
                    (0..r * c)
                        .map(|_| rng.random_range(-limit..limit))
                        .collect()
                };
                (name, Array::with_shape(vec![r, c], data))
            })
            .unzip();
        Self::from_parts(config.clone(), names, arrays)
    }

    /// Checks names and shapes against the architecture layout.
    pub fn from_parts(config: ModelConfig, names: Vec<String>, arrays: Vec<Array>) -> Result<Self> {
        config.validate()?;
        let layout = config.arch().layout();
        if layout.len() != names.len() || names.len() != arrays.len() {
            return Err(Error::ShapeMismatch(format!(
                "model needs {} parameters, got {}",
                layout.len(),
                names.len()
            )));
        }
        for ((lname, r, c), (name, a)) in layout.iter().zip(names.iter().zip(&arrays)) {
            if lname != name || a.shape() != [*r, *c] {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name} {:?} does not match {lname} [{r}, {c}]",
                    a.shape()
                )));
            }
            if !a.all_finite() {
                return Err(Error::DomainError(format!(
                    "parameter {name} has non-finite values"
                )));
            }
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(Self {
            config,
            names,
            arrays,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn arrays(&self) -> &[Array] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Array] {
        &mut self.arrays
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.index.get(name).map(|&i| &self.arrays[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(Array::len).sum()
    }

    /// A store of the same model with `arrays` substituted.
    pub fn with_arrays(&self, arrays: Vec<Array>) -> Result<Self> {
        Self::from_parts(self.config.clone(), self.names.clone(), arrays)
    }
}
