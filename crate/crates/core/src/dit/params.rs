use std::collections::HashMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::DitConfig;
use crate::autodiff::Mat;
use crate::error::{Error, Result};

/// Named weight matrices of one transformer, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Mat>,
    index: HashMap<String, usize>,
}

/// Gradient (or any other per-parameter quantity) aligned with a
/// [`ModelParams`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec(pub Vec<Mat>);

pub fn layout(cfg: &DitConfig) -> Vec<(String, (usize, usize))> {
    let d = cfg.embed_dim;
    let m = cfg.mlp_ratio * d;
    let mut v = vec![
        ("embed.w".to_string(), (cfg.input_channels(), d)),
        ("embed.b".to_string(), (1, d)),
        ("time.w1".to_string(), (cfg.time_features, d)),
        ("time.b1".to_string(), (1, d)),
        ("time.w2".to_string(), (d, d)),
        ("time.b2".to_string(), (1, d)),
        ("text.table".to_string(), (cfg.vocab, d)),
    ];
    for i in 0..cfg.blocks {
        let p = format!("blk{i}");
        v.extend([
            (format!("{p}.attn.wqkv"), (d, 3 * d)),
            (format!("{p}.attn.wo"), (d, d)),
            (format!("{p}.xattn.wq"), (d, d)),
            (format!("{p}.xattn.wkv"), (d, 2 * d)),
            (format!("{p}.xattn.wo"), (d, d)),
            (format!("{p}.mlp.w1"), (d, m)),
            (format!("{p}.mlp.b1"), (1, m)),
            (format!("{p}.mlp.w2"), (m, d)),
            (format!("{p}.mlp.b2"), (1, d)),
        ]);
    }
    v.push(("out.w".to_string(), (d, cfg.latent_channels)));
    v.push(("out.b".to_string(), (1, cfg.latent_channels)));
    v
}

impl ModelParams {
    /// Seeded initialization: weights ~ N(0, 1/fan_in), biases zero, small
    /// output projection and unit-scale text table.
    pub fn init(cfg: &DitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, (r, c)) in layout(cfg) {
            let std = if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                0.0
            } else if name == "out.w" {
                0.02
            } else if name == "text.table" {
                1.0
            } else {
                (1.0 / r as f64).sqrt()
            };
            let t = if std == 0.0 {
                Array2::zeros((r, c))
            } else {
                let normal = Normal::new(0.0, std).expect("finite std");
                Array2::from_shape_simple_fn((r, c), || normal.sample(&mut rng))
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self::from_parts(names, tensors))
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Mat>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, tensors, index }
    }

    /// Checks that names and shapes match what `cfg` expects.
    pub fn check_layout(&self, cfg: &DitConfig) -> Result<()> {
        let want = layout(cfg);
        if want.len() != self.names.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, config expects {}",
                self.names.len(),
                want.len()
            )));
        }
        for ((name, shape), (have, t)) in want.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != have || *shape != t.dim() {
                return Err(Error::Shape(format!(
                    "tensor {have} {:?} where config expects {name} {shape:?}",
                    t.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    pub fn id(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Mat {
        &self.tensors[self.id(name)]
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Maps a flat coordinate to `(tensor id, row, col)`.
    pub fn locate(&self, mut flat: usize) -> (usize, usize, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            if flat < t.len() {
                return (i, flat / t.ncols(), flat % t.ncols());
            }
            flat -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn get_flat(&self, flat: usize) -> f64 {
        let (i, r, c) = self.locate(flat);
        self.tensors[i][[r, c]]
    }

    pub fn set_flat(&mut self, flat: usize, v: f64) {
        let (i, r, c) = self.locate(flat);
        self.tensors[i][[r, c]] = v;
    }

    /// `self += alpha · dir`
    pub fn axpy(&mut self, alpha: f64, dir: &ParamVec) {
        for (t, d) in self.tensors.iter_mut().zip(&dir.0) {
            t.scaled_add(alpha, d);
        }
    }

    pub fn zeros_like(&self) -> ParamVec {
        ParamVec(self.tensors.iter().map(|t| Array2::zeros(t.dim())).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Raw little-endian bytes of every value, for identity checks.
    pub fn fingerprint(&self) -> Vec<u8> {
        self.tensors
            .iter()
            .flat_map(|t| t.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

impl ParamVec {
    pub fn get_flat(&self, mut flat: usize) -> f64 {
        for t in &self.0 {
            if flat < t.len() {
                return t[[flat / t.ncols(), flat % t.ncols()]];
            }
            flat -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &ParamVec) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.scaled_add(alpha, b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.0 {
            a.mapv_inplace(|v| v * s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = DitConfig::tiny();
        let a = ModelParams::init(&cfg, 7).unwrap();
        let b = ModelParams::init(&cfg, 7).unwrap();
        let c = ModelParams::init(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.all_finite());
        a.check_layout(&cfg).unwrap();
    }

    #[test]
    fn flat_indexing_covers_every_tensor() {
        let cfg = DitConfig::tiny();
        let mut p = ModelParams::init(&cfg, 1).unwrap();
        let n = p.len();
        p.set_flat(n - 1, 42.0);
        assert_eq!(p.get("out.b")[[0, cfg.latent_channels - 1]], 42.0);
        p.set_flat(0, -1.0);
        assert_eq!(p.get("embed.w")[[0, 0]], -1.0);
        assert_eq!(p.get_flat(0), -1.0);
    }
}
