//! Angle-aware multi-head attention over spatial tokens.
//!
//! Each cell of a `[C, H, W]` map is one token at coordinate `(col, row)`.
//! Logits are `QKᵀ/√d + γ·B_ori + β·B_fg`, where `B_ori[h,p,q] = w_h·u_pq`
//! uses the normalized relative direction `u_pq` and `B_fg[p,q] = m_p(2m_q − 1)`
//! comes from an optional detached foreground map. The output is
//! `GN(X + P_o(A·V))`.

use fgaa_tensor::nn::join;
use fgaa_tensor::{
    dropout_mask, Conv2d, Graph, GroupNorm, Init, Module, Param, Result, Tensor, TensorError, Var,
};

pub const DEFAULT_HEADS: usize = 8;
pub const DEFAULT_GAMMA: f64 = 0.7;
pub const DEFAULT_BETA: f64 = 0.6;
pub const DEFAULT_DROPOUT: f64 = 0.1;
pub const DIR_EPS: f64 = 1e-6;

/// Normalized relative directions between all token pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionField {
    pub n: usize,
    /// Row-major `[N, N, 2]`: `u[(p·N + q)·2 + {0,1}]`.
    pub u: Vec<f64>,
    pub coords: Vec<(f64, f64)>,
}

impl DirectionField {
    pub fn get(&self, p: usize, q: usize) -> (f64, f64) {
        let o = (p * self.n + q) * 2;
        (self.u[o], self.u[o + 1])
    }

    /// `uᵀ` as a `[2, N·N]` tensor.
    pub fn transposed(&self) -> Tensor {
        let nn = self.n * self.n;
        Tensor::from_fn(&[2, nn], |i| {
            let (axis, pq) = (i / nn, i % nn);
            self.u[pq * 2 + axis]
        })
    }
}

/// `u_pq = (c_p − c_q)/(‖c_p − c_q‖ + ε)` with `c_p = (col, row)`.
pub fn direction_field(h: usize, w: usize, eps: f64) -> DirectionField {
    let coords: Vec<(f64, f64)> = (0..h * w)
        .map(|p| ((p % w) as f64, (p / w) as f64))
        .collect();
    let n = coords.len();
    let mut u = vec![0.0; n * n * 2];
    for p in 0..n {
        for q in 0..n {
            let (dx, dy) = (coords[p].0 - coords[q].0, coords[p].1 - coords[q].1);
            let den = dx.hypot(dy) + eps;
            u[(p * n + q) * 2] = dx / den;
            u[(p * n + q) * 2 + 1] = dy / den;
        }
    }
    DirectionField { n, u, coords }
}

/// `B_ori = W·uᵀ` reshaped to `[H_a, N, N]`.
pub fn orientation_bias<'g>(dir: &DirectionField, orient: Var<'g>) -> Result<Var<'g>> {
    let heads = orient.shape()[0];
    let ut = orient.graph().constant(dir.transposed());
    orient.matmul(ut)?.reshape(&[heads, dir.n, dir.n])
}

/// `B_fg[p,q] = m_p·(2m_q − 1)` for a flat `[N]` map.
pub fn foreground_bias<'g>(m: Var<'g>) -> Result<Var<'g>> {
    let n = m.shape().iter().product::<usize>();
    let mp = m.reshape(&[n, 1])?;
    let mq = m.reshape(&[1, n])?.scale(2.0).add_scalar(-1.0);
    mp.mul(mq)
}

#[derive(Clone, Debug)]
pub struct Aamha {
    pub proj_q: Conv2d,
    pub proj_k: Conv2d,
    pub proj_v: Conv2d,
    pub proj_o: Conv2d,
    /// `[H_a, 2]` orientation prototypes.
    pub orient_vecs: Param,
    pub gn: GroupNorm,
    pub heads: usize,
    pub dim: usize,
    pub gamma: f64,
    pub beta: f64,
    pub dropout: f64,
    pub eps_dir: f64,
}

/// Query, key and value as `[H_a, N, d]`.
#[derive(Clone, Copy, Debug)]
pub struct Tokens<'g> {
    pub q: Var<'g>,
    pub k: Var<'g>,
    pub v: Var<'g>,
}

#[derive(Clone, Copy, Debug)]
pub struct AamhaOutput<'g> {
    pub out: Var<'g>,
    /// Post-softmax, pre-dropout attention `[H_a, N, N]`.
    pub attn: Var<'g>,
}

impl Aamha {
    /// `dim` is the attention width `D`; it must be divisible by `heads`.
    pub fn new(channels: usize, dim: usize, heads: usize, init: &mut Init) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "aamha",
                detail: format!("attention width {dim} not divisible by {heads} heads"),
            });
        }
        let orient = Tensor::from_fn(&[heads, 2], |i| {
            let a = std::f64::consts::TAU * (i / 2) as f64 / heads as f64;
            if i % 2 == 0 {
                a.cos()
            } else {
                a.sin()
            }
        });
        Ok(Aamha {
            proj_q: Conv2d::new(channels, dim, 1, 1, init),
            proj_k: Conv2d::new(channels, dim, 1, 1, init),
            proj_v: Conv2d::new(channels, dim, 1, 1, init),
            proj_o: Conv2d::new(dim, channels, 1, 1, init),
            orient_vecs: Param::new("orient_vecs", orient),
            gn: GroupNorm::new(channels),
            heads,
            dim,
            gamma: DEFAULT_GAMMA,
            beta: DEFAULT_BETA,
            dropout: DEFAULT_DROPOUT,
            eps_dir: DIR_EPS,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn split_heads<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        let n = s[1] * s[2];
        x.reshape(&[self.heads, self.head_dim(), n])?
            .transpose_last2()
    }

    pub fn tokenize<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Tokens<'g>> {
        Ok(Tokens {
            q: self.split_heads(self.proj_q.forward(g, x)?)?,
            k: self.split_heads(self.proj_k.forward(g, x)?)?,
            v: self.split_heads(self.proj_v.forward(g, x)?)?,
        })
    }

    /// Pre-softmax logits `S`.
    pub fn logits<'g>(
        &self,
        g: &'g Graph,
        x: Var<'g>,
        tokens: &Tokens<'g>,
        mask: Option<Var<'g>>,
    ) -> Result<Var<'g>> {
        let s = x.shape();
        let (h, w) = (s[1], s[2]);
        let scale = 1.0 / (self.head_dim() as f64).sqrt();
        let mut logits = tokens.q.matmul(tokens.k.transpose_last2()?)?.scale(scale);
        let dir = direction_field(h, w, self.eps_dir);
        let ori = orientation_bias(&dir, g.param(&self.orient_vecs))?;
        logits = logits.add(ori.scale(self.gamma))?;
        if let Some(m) = mask {
            let m = m.stop_gradient().bilinear_resize(h, w)?;
            let fg = foreground_bias(m)?.reshape(&[1, h * w, h * w])?;
            logits = logits.add(fg.scale(self.beta))?;
        }
        if !logits.value().all_finite() {
            return Err(TensorError::NonFinite { op: "aamha logits" });
        }
        Ok(logits)
    }

    /// Dropout is applied only when `rng` is given.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        x: Var<'g>,
        mask: Option<Var<'g>>,
        rng: Option<&mut (dyn rand::RngCore + '_)>,
    ) -> Result<AamhaOutput<'g>> {
        let s = x.shape();
        let (h, w) = (s[1], s[2]);
        let tokens = self.tokenize(g, x)?;
        let attn = self.logits(g, x, &tokens, mask)?.softmax(2)?;
        let dropped = match rng {
            Some(mut rng) if self.dropout > 0.0 => {
                let keep = dropout_mask(&attn.shape(), self.dropout, &mut rng);
                attn.mul(g.constant(keep))?
            }
            _ => attn,
        };
        let o = dropped
            .matmul(tokens.v)?
            .transpose_last2()?
            .reshape(&[self.dim, h, w])?;
        let y = self.proj_o.forward(g, o)?;
        let out = self.gn.forward(g, x.add(y)?)?;
        Ok(AamhaOutput { out, attn })
    }

    /// Multiply-accumulates of the attention products for `n` tokens.
    pub fn attention_macs(&self, n: usize) -> u64 {
        (2 * self.dim * n * n) as u64
    }
}

impl Module for Aamha {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.proj_q.visit_params(&join(prefix, "proj_q"), f);
        self.proj_k.visit_params(&join(prefix, "proj_k"), f);
        self.proj_v.visit_params(&join(prefix, "proj_v"), f);
        self.proj_o.visit_params(&join(prefix, "proj_o"), f);
        f(join(prefix, "orient_vecs"), &self.orient_vecs);
        self.gn.visit_params(&join(prefix, "gn"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.proj_q.visit_params_mut(&join(prefix, "proj_q"), f);
        self.proj_k.visit_params_mut(&join(prefix, "proj_k"), f);
        self.proj_v.visit_params_mut(&join(prefix, "proj_v"), f);
        self.proj_o.visit_params_mut(&join(prefix, "proj_o"), f);
        f(join(prefix, "orient_vecs"), &mut self.orient_vecs);
        self.gn.visit_params_mut(&join(prefix, "gn"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn identity_conv(c: usize) -> Conv2d {
        let mut conv = Conv2d::zeroed(c, c, 1, 1);
        let eye = Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 });
        conv.weight.set(eye).unwrap();
        conv
    }

    #[test]
    fn token_shapes() {
        let m = Aamha::new(8, 8, 2, &mut Init::new(0)).unwrap();
        for (h, w) in [(1, 1), (4, 4), (8, 2), (5, 7)] {
            let g = Graph::new();
            let t = m.tokenize(&g, g.constant(random(&[8, h, w], 1))).unwrap();
            assert_eq!(t.q.shape(), vec![2, h * w, 4]);
            assert_eq!(t.v.shape(), vec![2, h * w, 4]);
        }
    }

    #[test]
    fn identity_projection_preserves_values() {
        let mut m = Aamha::new(8, 8, 2, &mut Init::new(0)).unwrap();
        m.proj_v = identity_conv(8);
        let x = random(&[8, 3, 4], 2);
        let g = Graph::new();
        let v = m.tokenize(&g, g.constant(x.clone())).unwrap().v;
        // head h, token p, lane j ↔ channel h·d + j at cell p
        let vv = v.value();
        for h in 0..2 {
            for p in 0..12 {
                for j in 0..4 {
                    assert_eq!(vv.get(&[h, p, j]), x.data()[(h * 4 + j) * 12 + p]);
                }
            }
        }
    }

    #[test]
    fn direction_field_contracts() {
        let d = direction_field(3, 4, DIR_EPS);
        // q at (0,0) is token 0, p at (1,0) is token 1
        let (ux, uy) = d.get(1, 0);
        assert!((ux - 1.0).abs() < 1e-5 && uy == 0.0);
        for p in 0..d.n {
            assert_eq!(d.get(p, p), (0.0, 0.0));
            for q in 0..d.n {
                let (a, b) = (d.get(p, q), d.get(q, p));
                assert_eq!(a.0, -b.0);
                assert_eq!(a.1, -b.1);
                if p != q {
                    let norm = a.0.hypot(a.1);
                    assert!((1.0 - 1e-6..=1.0).contains(&norm), "{norm}");
                }
            }
        }
    }

    #[test]
    fn orientation_bias_cases() {
        let d = direction_field(1, 3, DIR_EPS);
        let g = Graph::new();
        let w = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let b = orientation_bias(&d, w).unwrap().value();
        assert!((b.get(&[0, 1, 0]) - 1.0).abs() < 1e-5);
        assert!((b.get(&[0, 0, 1]) + 1.0).abs() < 1e-5);
        assert!(b.data()[9..].iter().all(|&v| v == 0.0));
        let d = direction_field(3, 3, DIR_EPS);
        let w = g.constant(random(&[4, 2], 3));
        let b = orientation_bias(&d, w).unwrap().value();
        for h in 0..4 {
            for p in 0..9 {
                for q in 0..9 {
                    assert_eq!(b.get(&[h, p, q]), -b.get(&[h, q, p]));
                }
            }
        }
    }

    #[test]
    fn foreground_bias_cases() {
        let g = Graph::new();
        let m = g.constant(Tensor::new(&[3], vec![1.0, 0.0, 0.3]).unwrap());
        let b = foreground_bias(m).unwrap().value();
        assert_eq!(b.get(&[0, 0]), 1.0);
        assert_eq!(b.get(&[0, 1]), -1.0);
        assert!(b.data()[3..6].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rows_are_stochastic_with_biases() {
        let m = Aamha::new(8, 8, 2, &mut Init::new(4)).unwrap();
        let g = Graph::new();
        let x = g.constant(random(&[8, 5, 5], 5));
        let mask = g.constant(random(&[1, 9, 9], 6).map(|v| 0.5 * (v + 1.0)));
        let out = m.forward(&g, x, Some(mask), None).unwrap();
        let a = out.attn.value();
        for row in a.data().chunks(25) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(out.out.shape(), vec![8, 5, 5]);
    }

    #[test]
    fn dropout_only_with_rng() {
        let m = Aamha::new(8, 8, 2, &mut Init::new(7)).unwrap();
        let x = random(&[8, 3, 3], 8);
        let g = Graph::new();
        let a = m
            .forward(&g, g.constant(x.clone()), None, None)
            .unwrap()
            .out
            .value();
        let b = m
            .forward(&g, g.constant(x.clone()), None, None)
            .unwrap()
            .out
            .value();
        assert_eq!(a.data(), b.data());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = m
            .forward(&g, g.constant(x), None, Some(&mut rng))
            .unwrap()
            .out
            .value();
        assert!(a.max_abs_diff(&c) > 0.0);
    }
}
