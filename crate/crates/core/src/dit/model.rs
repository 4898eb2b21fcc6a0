//! Transformer forward pass over latent tokens.
//!
//! Each latent cell `(t, h, w)` is one token whose input row concatenates the
//! noisy latent channels, any auxiliary channels, the condition channels and
//! the occupancy mask. Blocks are pre-norm: rotary self-attention, cross
//! attention to the prompt tokens, then an MLP, each added to the residual
//! stream. The timestep enters once, as an additive embedding.

use std::rc::Rc;

use ndarray::{Array2, Array4};

use super::config::DitConfig;
use super::params::ModelParams;
use crate::autodiff::{Mat, Tape, Var};
use crate::conditioning::ConditionLayout;
use crate::error::{Error, Result};

/// Token rows plus the rotary position each row is rotated with.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    pub features: Mat,
    pub positions: Vec<[usize; 3]>,
    /// Rows `0..targets` are predicted; any rows after them are context only.
    pub targets: usize,
}

/// Cosine/sine tables `[N, head_dim / 2]` for the given token positions.
pub fn rope_tables(cfg: &DitConfig, positions: &[[usize; 3]]) -> (Mat, Mat) {
    let half = cfg.head_dim() / 2;
    let mut freqs = Vec::with_capacity(half);
    for (axis, &dim) in cfg.rope_split.iter().enumerate() {
        for j in 0..dim / 2 {
            let f = cfg.rope_base.powf(-(2.0 * j as f64) / dim as f64);
            freqs.push((axis, f));
        }
    }
    let mut cos = Array2::zeros((positions.len(), half));
    let mut sin = Array2::zeros((positions.len(), half));
    for (r, pos) in positions.iter().enumerate() {
        for (i, &(axis, f)) in freqs.iter().enumerate() {
            let angle = pos[axis] as f64 * f;
            cos[[r, i]] = angle.cos();
            sin[[r, i]] = angle.sin();
        }
    }
    (cos, sin)
}

/// Sinusoidal timestep features `[1, F]`.
pub fn time_features(t: f64, n: usize) -> Mat {
    let half = n / 2;
    let mut out = Array2::zeros((1, n));
    for k in 0..half {
        let w = if half > 1 {
            100f64.powf(k as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out[[0, k]] = (w * t).sin();
        out[[0, half + k]] = (w * t).cos();
    }
    out
}

/// Row-major `(t, h, w)` positions of a full latent grid.
pub fn grid_positions(t: usize, h: usize, w: usize) -> Vec<[usize; 3]> {
    let mut pos = Vec::with_capacity(t * h * w);
    for a in 0..t {
        for b in 0..h {
            for c in 0..w {
                pos.push([a, b, c]);
            }
        }
    }
    pos
}

/// Token inputs for the base model: `[noise | aux | cond | mask]` per cell.
pub fn grid_tokens(
    cfg: &DitConfig,
    x_t: &Array4<f64>,
    aux: Option<&Array4<f64>>,
    layout: &ConditionLayout,
) -> Result<TokenSeq> {
    let (t, h, w, c) = x_t.dim();
    if c != cfg.latent_channels {
        return Err(Error::Shape(format!(
            "latent has {c} channels, model expects {}",
            cfg.latent_channels
        )));
    }
    if layout.grid() != (t, h, w) {
        return Err(Error::Shape(format!(
            "layout grid {:?} does not match latent grid {:?}",
            layout.grid(),
            (t, h, w)
        )));
    }
    let aux_c = aux.map(|a| a.dim().3).unwrap_or(0);
    if aux_c != cfg.aux_channels {
        return Err(Error::Shape(format!(
            "{aux_c} auxiliary channels given, model expects {}",
            cfg.aux_channels
        )));
    }
    if let Some(a) = aux {
        if (a.dim().0, a.dim().1, a.dim().2) != (t, h, w) {
            return Err(Error::Shape("auxiliary input grid mismatch".into()));
        }
    }
    let cin = cfg.input_channels();
    let mut features = Array2::zeros((t * h * w, cin));
    let mut row = 0;
    for a in 0..t {
        for b in 0..h {
            for d in 0..w {
                let mut col = 0;
                for ch in 0..c {
                    features[[row, col]] = x_t[[a, b, d, ch]];
                    col += 1;
                }
                if let Some(aux) = aux {
                    for ch in 0..aux_c {
                        features[[row, col]] = aux[[a, b, d, ch]];
                        col += 1;
                    }
                }
                for ch in 0..c {
                    features[[row, col]] = layout.cond[[a, b, d, ch]];
                    col += 1;
                }
                features[[row, col]] = layout.mask[a];
                row += 1;
            }
        }
    }
    Ok(TokenSeq {
        features,
        positions: grid_positions(t, h, w),
        targets: t * h * w,
    })
}

fn check_prompt(cfg: &DitConfig, prompt: &[usize]) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::Invalid("prompt needs at least one token".into()));
    }
    if let Some(&bad) = prompt.iter().find(|&&p| p >= cfg.vocab) {
        return Err(Error::Range {
            what: "prompt token",
            index: bad,
            len: cfg.vocab,
        });
    }
    Ok(())
}

/// Parameter leaves bound onto a tape.
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn new(tape: &mut Tape, params: &ModelParams) -> Self {
        Self(
            params
                .tensors()
                .iter()
                .enumerate()
                .map(|(i, t)| tape.param(i, t.clone()))
                .collect(),
        )
    }

    fn get(&self, params: &ModelParams, name: &str) -> Var {
        self.0[params.id(name)]
    }
}

fn multi_head(tape: &mut Tape, cfg: &DitConfig, q: Var, k: Var, v: Var, rope: Option<(&Rc<Mat>, &Rc<Mat>)>) -> Var {
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for hh in 0..cfg.heads {
        let mut qh = tape.slice_cols(q, hh * dh, dh);
        let mut kh = tape.slice_cols(k, hh * dh, dh);
        let vh = tape.slice_cols(v, hh * dh, dh);
        if let Some((cos, sin)) = rope {
            qh = tape.rope(qh, cos.clone(), sin.clone());
            kh = tape.rope(kh, cos.clone(), sin.clone());
        }
        let logits = tape.matmul_nt(qh, kh);
        let logits = tape.scale(logits, scale);
        let attn = tape.softmax_rows(logits);
        heads.push(tape.matmul(attn, vh));
    }
    tape.concat_cols(&heads)
}

/// Records the forward pass and returns the `[targets, C]` prediction.
pub fn forward_tokens(
    tape: &mut Tape,
    bound: &Bound,
    params: &ModelParams,
    cfg: &DitConfig,
    seq: &TokenSeq,
    t: f64,
    prompt: &[usize],
) -> Result<Var> {
    check_prompt(cfg, prompt)?;
    if seq.features.ncols() != cfg.input_channels() {
        return Err(Error::Shape(format!(
            "token rows have {} channels, model expects {}",
            seq.features.ncols(),
            cfg.input_channels()
        )));
    }
    if seq.positions.len() != seq.features.nrows() || seq.targets > seq.features.nrows() {
        return Err(Error::Shape("token positions do not match token rows".into()));
    }
    let d = cfg.embed_dim;
    let p = |name: &str| bound.get(params, name);

    let (cos, sin) = rope_tables(cfg, &seq.positions);
    let (cos, sin) = (Rc::new(cos), Rc::new(sin));

    let x = tape.constant(seq.features.clone());
    let h = tape.matmul(x, p("embed.w"));
    let mut h = tape.add_row(h, p("embed.b"));

    let tf = tape.constant(time_features(t, cfg.time_features));
    let te = tape.matmul(tf, p("time.w1"));
    let te = tape.add_row(te, p("time.b1"));
    let te = tape.silu(te);
    let te = tape.matmul(te, p("time.w2"));
    let te = tape.add_row(te, p("time.b2"));
    h = tape.add_row(h, te);

    let text = tape.gather_rows(p("text.table"), prompt);

    for i in 0..cfg.blocks {
        let name = |s: &str| format!("blk{i}.{s}");

        let a = tape.layer_norm(h);
        let qkv = tape.matmul(a, p(&name("attn.wqkv")));
        let q = tape.slice_cols(qkv, 0, d);
        let k = tape.slice_cols(qkv, d, d);
        let v = tape.slice_cols(qkv, 2 * d, d);
        let o = multi_head(tape, cfg, q, k, v, Some((&cos, &sin)));
        let o = tape.matmul(o, p(&name("attn.wo")));
        h = tape.add(h, o);

        let a = tape.layer_norm(h);
        let q = tape.matmul(a, p(&name("xattn.wq")));
        let kv = tape.matmul(text, p(&name("xattn.wkv")));
        let k = tape.slice_cols(kv, 0, d);
        let v = tape.slice_cols(kv, d, d);
        let o = multi_head(tape, cfg, q, k, v, None);
        let o = tape.matmul(o, p(&name("xattn.wo")));
        h = tape.add(h, o);

        let a = tape.layer_norm(h);
        let m = tape.matmul(a, p(&name("mlp.w1")));
        let m = tape.add_row(m, p(&name("mlp.b1")));
        let m = tape.silu(m);
        let m = tape.matmul(m, p(&name("mlp.w2")));
        let m = tape.add_row(m, p(&name("mlp.b2")));
        h = tape.add(h, m);
    }

    if seq.targets < seq.features.nrows() {
        h = tape.slice_rows(h, 0, seq.targets);
    }
    let a = tape.layer_norm(h);
    let out = tape.matmul(a, p("out.w"));
    Ok(tape.add_row(out, p("out.b")))
}

/// Reshapes `[T·H·W, C]` rows back into a latent grid.
pub fn rows_to_grid(rows: &Mat, grid: (usize, usize, usize)) -> Array4<f64> {
    let (t, h, w) = grid;
    let c = rows.ncols();
    rows.to_shape((t, h, w, c)).expect("row count matches grid").to_owned()
}

/// Flattens a latent grid into `[T·H·W, C]` rows.
pub fn grid_to_rows(x: &Array4<f64>) -> Mat {
    let (t, h, w, c) = x.dim();
    x.to_shape((t * h * w, c)).expect("contiguous").to_owned()
}

/// Velocity prediction `v̂(x_t, t | layout, prompt)` for the base model.
pub fn velocity(
    params: &ModelParams,
    cfg: &DitConfig,
    x_t: &Array4<f64>,
    t: f64,
    layout: &ConditionLayout,
    prompt: &[usize],
) -> Result<Array4<f64>> {
    let seq = grid_tokens(cfg, x_t, None, layout)?;
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let out = forward_tokens(&mut tape, &bound, params, cfg, &seq, t, prompt)?;
    let (tt, h, w, _) = x_t.dim();
    Ok(rows_to_grid(tape.value(out), (tt, h, w)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn output_shape_matches_input() {
        let cfg = DitConfig::tiny();
        let params = ModelParams::init(&cfg, 0).unwrap();
        let x = randn((3, 2, 2, 3), 1);
        let layout = ConditionLayout::empty(3, 2, 2);
        let v = velocity(&params, &cfg, &x, 0.3, &layout, &[1]).unwrap();
        assert_eq!(v.dim(), x.dim());
        // Other grids work too; positions are explicit.
        let x2 = randn((2, 3, 1, 3), 2);
        let v2 = velocity(&params, &cfg, &x2, 0.3, &ConditionLayout::empty(2, 3, 1), &[1]).unwrap();
        assert_eq!(v2.dim(), x2.dim());
    }

    #[test]
    fn condition_channels_are_read() {
        let cfg = DitConfig::tiny();
        let params = ModelParams::init(&cfg, 0).unwrap();
        let x = randn((3, 2, 2, 3), 1);
        let empty = ConditionLayout::empty(3, 2, 2);
        let mut cond = empty.clone();
        cond.cond.index_axis_mut(ndarray::Axis(0), 1).fill(0.7);
        cond.mask[1] = 1.0;
        let a = velocity(&params, &cfg, &x, 0.5, &empty, &[0]).unwrap();
        let b = velocity(&params, &cfg, &x, 0.5, &cond, &[0]).unwrap();
        let diff: f64 = (&a - &b).iter().map(|v| v.abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn bad_prompt_is_rejected() {
        let cfg = DitConfig::tiny();
        let params = ModelParams::init(&cfg, 0).unwrap();
        let x = randn((3, 2, 2, 3), 1);
        let layout = ConditionLayout::empty(3, 2, 2);
        assert!(velocity(&params, &cfg, &x, 0.5, &layout, &[cfg.vocab]).is_err());
        assert!(velocity(&params, &cfg, &x, 0.5, &layout, &[]).is_err());
    }

    #[test]
    fn rotary_logits_depend_on_offsets_only() {
        let cfg = DitConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dh = cfg.head_dim();
        let q = Array2::from_shape_simple_fn((1, dh), || StandardNormal.sample(&mut rng));
        let k = Array2::from_shape_simple_fn((1, dh), || StandardNormal.sample(&mut rng));
        let logit = |pq: [usize; 3], pk: [usize; 3]| {
            let (cq, sq) = rope_tables(&cfg, &[pq]);
            let (ck, sk) = rope_tables(&cfg, &[pk]);
            let rq = crate::autodiff::rotate_pairs(&q, &cq, &sq, false);
            let rk = crate::autodiff::rotate_pairs(&k, &ck, &sk, false);
            rq.row(0).dot(&rk.row(0))
        };
        let base = logit([1, 2, 3], [4, 0, 5]);
        let shifted = logit([8, 9, 13], [11, 7, 15]);
        assert!((base - shifted).abs() < 1e-9, "{base} vs {shifted}");
        assert!((logit([3, 3, 3], [3, 3, 3]) - q.row(0).dot(&k.row(0))).abs() < 1e-12);
    }
}
