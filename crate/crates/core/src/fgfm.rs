//! Foreground-guided feature modulation.
//!
//! A lightweight head predicts a foreground probability map `M`, a learnable
//! calibration sharpens it into `M̃`, a small generator turns `[F, M̃]` into
//! channel-aware weights `M′`, and the feature is rescaled residually as
//! `F ⊙ (1 + α·M′)`. The modulation path consumes a detached copy of `M`, so
//! only the foreground loss trains the estimation head.

use fgaa_tensor::nn::join;
use fgaa_tensor::{concat0, Conv2d, Graph, GroupNorm, Init, Module, Param, Result, Tensor, Var};

/// `softplus⁻¹(y) = y + ln(1 − e^{−y})`, for `y > 0`.
pub fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// `σ⁻¹(p)` for `p ∈ (0, 1)`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub const INIT_K: f64 = 5.0;
pub const INIT_ALPHA: f64 = 0.05;
pub const INIT_LAMBDA_RAW: f64 = -4.0;

#[derive(Clone, Debug)]
pub struct Fgfm {
    pub head_conv1: Conv2d,
    pub head_conv2: Conv2d,
    pub fcc_k_raw: Param,
    pub fcc_b: Param,
    pub fcc_lambda_raw: Param,
    pub gen_conv3: Conv2d,
    pub gen_gn: GroupNorm,
    pub gen_conv1: Conv2d,
    pub alpha_raw: Param,
    channels: usize,
}

/// Graph handles for one FGFM evaluation.
#[derive(Clone, Copy, Debug)]
pub struct FgfmOutput<'g> {
    pub modulated: Var<'g>,
    /// Un-detached `M`, for the foreground loss.
    pub fg_map: Var<'g>,
    pub calibrated: Var<'g>,
    pub weights: Var<'g>,
}

/// Hidden width of both the estimation head and the weight generator.
pub fn hidden_width(channels: usize) -> usize {
    (channels / 4).max(1)
}

fn scalar_param(name: &str, v: f64) -> Param {
    Param::new(name, Tensor::scalar(v))
}

impl Fgfm {
    pub fn new(channels: usize, init: &mut Init) -> Self {
        let hid = hidden_width(channels);
        Fgfm {
            head_conv1: Conv2d::new(channels, hid, 3, 1, init),
            head_conv2: Conv2d::new(hid, 1, 3, 1, init),
            fcc_k_raw: scalar_param("fcc_k_raw", inv_softplus(INIT_K)),
            fcc_b: scalar_param("fcc_b", 0.0),
            fcc_lambda_raw: scalar_param("fcc_lambda_raw", INIT_LAMBDA_RAW),
            gen_conv3: Conv2d::new(channels + 1, hid, 3, 1, init),
            gen_gn: GroupNorm::new(hid),
            gen_conv1: Conv2d::new(hid, channels, 1, 1, init),
            alpha_raw: scalar_param("alpha_raw", inv_softplus(INIT_ALPHA)),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `M = σ(K₂(ReLU(K₁(F))))`, shape `[1, H, W]`.
    pub fn estimate_foreground<'g>(&self, g: &'g Graph, f: Var<'g>) -> Result<Var<'g>> {
        let h = self.head_conv1.forward(g, f)?.relu();
        Ok(self.head_conv2.forward(g, h)?.sigmoid())
    }

    /// Derived `(k, b, λ)` as graph scalars.
    pub fn calibration_scalars<'g>(&self, g: &'g Graph) -> (Var<'g>, Var<'g>, Var<'g>) {
        (
            g.param(&self.fcc_k_raw).softplus(),
            g.param(&self.fcc_b),
            g.param(&self.fcc_lambda_raw).sigmoid(),
        )
    }

    pub fn calibrate<'g>(&self, g: &'g Graph, m: Var<'g>) -> Result<Var<'g>> {
        let (k, b, lambda) = self.calibration_scalars(g);
        calibrate_with(m, k, b, lambda)
    }

    /// `M′ = σ(K₁(ReLU(GN(K₃([F, M̃])))))`.
    pub fn generate_weights<'g>(
        &self,
        g: &'g Graph,
        f: Var<'g>,
        calibrated: Var<'g>,
    ) -> Result<Var<'g>> {
        let x = concat0(&[f, calibrated])?;
        let h = self.gen_conv3.forward(g, x)?;
        let h = self.gen_gn.forward(g, h)?.relu();
        Ok(self.gen_conv1.forward(g, h)?.sigmoid())
    }

    pub fn alpha<'g>(&self, g: &'g Graph) -> Var<'g> {
        g.param(&self.alpha_raw).softplus()
    }

    /// `F̂ = F ⊙ (1 + α·M′)`.
    pub fn modulate<'g>(&self, g: &'g Graph, f: Var<'g>, weights: Var<'g>) -> Result<Var<'g>> {
        modulate_with(f, weights, self.alpha(g))
    }

    pub fn forward<'g>(&self, g: &'g Graph, f: Var<'g>) -> Result<FgfmOutput<'g>> {
        let fg_map = self.estimate_foreground(g, f)?;
        let calibrated = self.calibrate(g, fg_map.stop_gradient())?;
        let weights = self.generate_weights(g, f, calibrated)?;
        let modulated = self.modulate(g, f, weights)?;
        Ok(FgfmOutput {
            modulated,
            fg_map,
            calibrated,
            weights,
        })
    }
}

/// `M̃ = M + λ(σ(k(M − (0.5 + b))) − M)`; `k`, `b`, `λ` broadcast as scalars.
pub fn calibrate_with<'g>(m: Var<'g>, k: Var<'g>, b: Var<'g>, lambda: Var<'g>) -> Result<Var<'g>> {
    let s = m.add_scalar(-0.5).sub(b)?.mul(k)?.sigmoid();
    m.add(s.sub(m)?.mul(lambda)?)
}

pub fn modulate_with<'g>(f: Var<'g>, weights: Var<'g>, alpha: Var<'g>) -> Result<Var<'g>> {
    f.mul(weights.mul(alpha)?.add_scalar(1.0))
}

impl Module for Fgfm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.head_conv1.visit_params(&join(prefix, "head_conv1"), f);
        self.head_conv2.visit_params(&join(prefix, "head_conv2"), f);
        f(join(prefix, "fcc_k_raw"), &self.fcc_k_raw);
        f(join(prefix, "fcc_b"), &self.fcc_b);
        f(join(prefix, "fcc_lambda_raw"), &self.fcc_lambda_raw);
        self.gen_conv3.visit_params(&join(prefix, "gen_conv3"), f);
        self.gen_gn.visit_params(&join(prefix, "gen_gn"), f);
        self.gen_conv1.visit_params(&join(prefix, "gen_conv1"), f);
        f(join(prefix, "alpha_raw"), &self.alpha_raw);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.head_conv1
            .visit_params_mut(&join(prefix, "head_conv1"), f);
        self.head_conv2
            .visit_params_mut(&join(prefix, "head_conv2"), f);
        f(join(prefix, "fcc_k_raw"), &mut self.fcc_k_raw);
        f(join(prefix, "fcc_b"), &mut self.fcc_b);
        f(join(prefix, "fcc_lambda_raw"), &mut self.fcc_lambda_raw);
        self.gen_conv3
            .visit_params_mut(&join(prefix, "gen_conv3"), f);
        self.gen_gn.visit_params_mut(&join(prefix, "gen_gn"), f);
        self.gen_conv1
            .visit_params_mut(&join(prefix, "gen_conv1"), f);
        f(join(prefix, "alpha_raw"), &mut self.alpha_raw);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn init_derivations() {
        let m = Fgfm::new(8, &mut Init::new(0));
        let g = Graph::new();
        let (k, b, l) = m.calibration_scalars(&g);
        assert!((k.item() - 5.0).abs() < 1e-12);
        assert_eq!(b.item(), 0.0);
        assert!((l.item() - sigmoid(-4.0)).abs() < 1e-15);
        assert!((m.alpha(&g).item() - 0.05).abs() < 1e-12);
        assert!((logit(sigmoid(0.3)) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn zero_head_gives_half() {
        let mut m = Fgfm::new(8, &mut Init::new(1));
        m.head_conv2 = Conv2d::zeroed(2, 1, 3, 1);
        for n in [7, 16, 33] {
            let g = Graph::new();
            let f = g.constant(random(&[8, n, n], n as u64));
            let out = m.estimate_foreground(&g, f).unwrap();
            assert_eq!(out.shape(), vec![1, n, n]);
            assert!(out.value().data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn calibration_scalar_cases() {
        let g = Graph::new();
        let m = g.constant(Tensor::new(&[1, 1, 3], vec![0.1, 0.5, 0.9]).unwrap());
        let id = calibrate_with(m, g.scalar(3.0), g.scalar(0.2), g.scalar(0.0)).unwrap();
        assert_eq!(id.value().data(), m.value().data());
        let fixed = calibrate_with(m, g.scalar(7.0), g.scalar(0.0), g.scalar(0.6)).unwrap();
        assert_eq!(fixed.value().data()[1], 0.5);
        let sharp = calibrate_with(m, g.scalar(12.0), g.scalar(0.0), g.scalar(1.0)).unwrap();
        assert!((sharp.value().data()[2] - 0.9918374288468401).abs() < 1e-12);
    }

    #[test]
    fn identity_degeneration_at_small_lambda() {
        let g = Graph::new();
        let vals: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let m = g.constant(Tensor::new(&[1, 1, 11], vals.clone()).unwrap());
        let lam = g.scalar(sigmoid(-10.0));
        let out = calibrate_with(m, g.scalar(5.0), g.scalar(0.1), lam).unwrap();
        let gap = vals
            .iter()
            .map(|&v| (sigmoid(5.0 * (v - 0.6)) - v).abs())
            .fold(0.0, f64::max);
        let diff = out.value().max_abs_diff(&m.value());
        assert!(diff < 1e-4 * gap, "{diff} vs {gap}");
    }

    #[test]
    fn sharpening_is_monotone_and_crosses_half() {
        let g = Graph::new();
        let vals: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let m = g.constant(Tensor::new(&[1, 1, 101], vals).unwrap());
        let out = calibrate_with(m, g.scalar(5.0), g.scalar(0.0), g.scalar(1.0)).unwrap();
        let o = out.value();
        assert!(o.data().windows(2).all(|w| w[1] > w[0]));
        assert_eq!(o.data()[50], 0.5);
    }

    #[test]
    fn zero_generator_gives_half_weights() {
        let mut m = Fgfm::new(8, &mut Init::new(2));
        m.gen_conv1 = Conv2d::zeroed(2, 8, 1, 1);
        assert_eq!(m.gen_conv3.c_in(), 9);
        let g = Graph::new();
        let f = g.constant(random(&[8, 5, 6], 3));
        let out = m.forward(&g, f).unwrap();
        assert!(out.weights.value().data().iter().all(|&v| v == 0.5));
        assert_eq!(out.modulated.shape(), vec![8, 5, 6]);
    }

    #[test]
    fn modulation_bounds_and_sign() {
        let m = Fgfm::new(8, &mut Init::new(4));
        let g = Graph::new();
        let f = g.constant(random(&[8, 6, 6], 5));
        let out = m.forward(&g, f).unwrap();
        let alpha = m.alpha(&g).item();
        let (fv, mv) = (f.value(), out.modulated.value());
        for (&a, &b) in fv.data().iter().zip(mv.data()) {
            assert!(b.abs() <= (1.0 + alpha) * a.abs() + 1e-15);
            assert!((a - b).abs() <= alpha * a.abs() + 1e-15);
            assert!(a == 0.0 || a.signum() == b.signum());
        }
        for v in [out.fg_map, out.calibrated, out.weights] {
            assert!(v.value().data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        let g2 = Graph::new();
        let doubled = modulate_with(
            g2.constant(fv.as_ref().clone()),
            g2.constant(Tensor::ones(&[8, 6, 6])),
            g2.scalar(1.0),
        )
        .unwrap();
        assert_eq!(doubled.value().data(), fv.map(|v| 2.0 * v).data());
    }

    #[test]
    fn forward_matches_manual_composition_bitwise() {
        let m = Fgfm::new(8, &mut Init::new(6));
        let x = random(&[8, 7, 5], 7);
        let g = Graph::new();
        let out = m.forward(&g, g.constant(x.clone())).unwrap();

        let h = Graph::new();
        let f = h.constant(x);
        fn c<'g>(conv: &Conv2d, v: Var<'g>) -> Var<'g> {
            let hh = v.graph();
            let (w, b) = (
                hh.constant(conv.weight.value().clone()),
                hh.constant(conv.bias.value().clone()),
            );
            v.conv2d(w, Some(b), conv.stride, conv.pad).unwrap()
        }
        let mm = c(&m.head_conv2, c(&m.head_conv1, f).relu()).sigmoid();
        let k = h.constant(m.fcc_k_raw.value().clone()).softplus();
        let lam = h.constant(m.fcc_lambda_raw.value().clone()).sigmoid();
        let b = h.constant(m.fcc_b.value().clone());
        let mt = mm
            .add(
                mm.add_scalar(-0.5)
                    .sub(b)
                    .unwrap()
                    .mul(k)
                    .unwrap()
                    .sigmoid()
                    .sub(mm)
                    .unwrap()
                    .mul(lam)
                    .unwrap(),
            )
            .unwrap();
        let gn = &m.gen_gn;
        let z = c(&m.gen_conv3, concat0(&[f, mt]).unwrap())
            .group_norm(
                gn.groups,
                h.constant(gn.gamma.value().clone()),
                h.constant(gn.beta.value().clone()),
                gn.eps,
            )
            .unwrap()
            .relu();
        let w = c(&m.gen_conv1, z).sigmoid();
        let alpha = h.constant(m.alpha_raw.value().clone()).softplus();
        let fhat = f.mul(w.mul(alpha).unwrap().add_scalar(1.0)).unwrap();

        assert_eq!(out.fg_map.value().data(), mm.value().data());
        assert_eq!(out.weights.value().data(), w.value().data());
        assert_eq!(out.modulated.value().data(), fhat.value().data());
    }

    #[test]
    fn modulation_path_sends_no_gradient_to_head() {
        let m = Fgfm::new(8, &mut Init::new(8));
        let g = Graph::new();
        let f = g.leaf(random(&[8, 6, 6], 9));
        let out = m.forward(&g, f).unwrap();
        g.backward(out.modulated.sum()).unwrap();
        for p in [
            &m.head_conv1.weight,
            &m.head_conv1.bias,
            &m.head_conv2.weight,
            &m.head_conv2.bias,
        ] {
            let gr = g.param_grad(p.id());
            assert!(gr.map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
        }
        assert!(g.param_grad(m.gen_conv1.weight.id()).unwrap().max_abs() > 0.0);
        assert!(g.param_grad(m.fcc_lambda_raw.id()).unwrap().max_abs() > 0.0);
    }
}
