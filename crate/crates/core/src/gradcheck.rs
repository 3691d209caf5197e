//! Finite-difference suite over every differentiable operation and the
//! composite modules, at small shapes.

use fgaa_tensor::gradcheck::DEFAULT_STEP;
use fgaa_tensor::{
    concat0, grad_check_inputs, grad_check_module, Coords, Graph, Init, Tensor, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aamha::Aamha;
use crate::data::synth::{gen_synthetic, SceneSpec};
use crate::data::RunConfig;
use crate::fgfm::Fgfm;
use crate::losses::{dice_loss, weighted_bce};
use crate::model::Detector;
use crate::train::scene_loss;
use crate::Result;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_err: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn rand(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn worst(errs: impl IntoIterator<Item = f64>) -> f64 {
    errs.into_iter().fold(0.0, f64::max)
}

struct Suite {
    seed: u64,
    entries: Vec<SuiteEntry>,
}

impl Suite {
    fn record(&mut self, name: &str, err: f64) {
        match self.entries.iter_mut().find(|e| e.name == name) {
            Some(e) => e.max_rel_err = e.max_rel_err.max(err),
            None => self.entries.push(SuiteEntry {
                name: name.to_string(),
                max_rel_err: err,
            }),
        }
    }

    fn op(
        &mut self,
        name: &str,
        inputs: &[Tensor],
        f: impl for<'g> Fn(&'g Graph, &[Var<'g>]) -> fgaa_tensor::Result<Var<'g>>,
    ) -> Result<()> {
        let errs = grad_check_inputs(f, inputs, DEFAULT_STEP, Coords::All)?;
        self.record(name, worst(errs));
        Ok(())
    }

    fn s(&self, k: u64) -> u64 {
        self.seed.wrapping_mul(1000).wrapping_add(k)
    }
}

/// Contract against fixed random weights so every output entry gets gradient.
fn c<'g>(g: &'g Graph, y: Var<'g>, seed: u64) -> fgaa_tensor::Result<Var<'g>> {
    let w = rand(&y.shape(), -1.0, 1.0, seed);
    y.mul(g.constant(w)).map(|v| v.sum())
}

fn ops(s: &mut Suite) -> Result<()> {
    let x = rand(&[2, 3, 4], -2.0, 2.0, s.s(1));
    let pos = rand(&[2, 3, 4], 0.2, 3.0, s.s(2));
    let row = rand(&[1, 3, 4], 0.5, 2.0, s.s(3));
    s.op("sigmoid", &[x.clone()], |g, v| c(g, v[0].sigmoid(), 1))?;
    s.op("relu", &[x.clone()], |g, v| c(g, v[0].relu(), 2))?;
    s.op("exp", &[x.clone()], |g, v| c(g, v[0].exp(), 3))?;
    s.op("log", &[pos.clone()], |g, v| c(g, v[0].log()?, 4))?;
    s.op("softplus", &[x.clone()], |g, v| c(g, v[0].softplus(), 5))?;
    s.op("smooth_l1", &[x.clone()], |g, v| c(g, v[0].smooth_l1(), 6))?;
    s.op("clamp", &[x.clone()], |g, v| c(g, v[0].clamp(-0.7, 0.9), 7))?;
    s.op("scale", &[x.clone()], |g, v| {
        c(g, v[0].scale(-1.7).add_scalar(0.3).neg(), 8)
    })?;
    s.op("add", &[x.clone(), row.clone()], |g, v| {
        c(g, v[0].add(v[1])?, 9)
    })?;
    s.op("sub", &[x.clone(), row.clone()], |g, v| {
        c(g, v[0].sub(v[1])?, 10)
    })?;
    s.op("mul", &[x.clone(), row.clone()], |g, v| {
        c(g, v[0].mul(v[1])?, 11)
    })?;
    s.op("div", &[x.clone(), row.clone()], |g, v| {
        c(g, v[0].div(v[1])?, 12)
    })?;
    let a = rand(&[2, 3, 4], -1.0, 1.0, s.s(4));
    let b = rand(&[2, 4, 5], -1.0, 1.0, s.s(5));
    s.op("matmul", &[a, b], |g, v| c(g, v[0].matmul(v[1])?, 13))?;
    let xi = rand(&[3, 7, 6], -1.0, 1.0, s.s(6));
    let w = rand(&[4, 3, 3, 3], -1.0, 1.0, s.s(7));
    let bias = rand(&[4], -1.0, 1.0, s.s(8));
    for stride in [1, 2] {
        s.op(
            "conv2d",
            &[xi.clone(), w.clone(), bias.clone()],
            move |g, v| c(g, v[0].conv2d(v[1], Some(v[2]), stride, 1)?, 14),
        )?;
    }
    for axis in 0..3 {
        s.op("softmax", &[x.clone()], move |g, v| {
            c(g, v[0].softmax(axis)?, 15)
        })?;
    }
    let gamma = rand(&[4], 0.5, 1.5, s.s(9));
    let beta = rand(&[4], -0.5, 0.5, s.s(10));
    let xg = rand(&[4, 3, 5], -2.0, 2.0, s.s(11));
    s.op("group_norm", &[xg.clone(), gamma, beta], |g, v| {
        c(g, v[0].group_norm(2, v[1], v[2], 1e-5)?, 16)
    })?;
    s.op("bilinear_resize", &[xg.clone()], |g, v| {
        c(g, v[0].bilinear_resize(5, 2)?, 17)
    })?;
    s.op("reshape_transpose", &[xg.clone()], |g, v| {
        c(g, v[0].reshape(&[12, 5])?.transpose_last2()?, 18)
    })?;
    let y1 = rand(&[1, 3, 5], -1.0, 1.0, s.s(12));
    s.op("concat_slice", &[xg, y1], |g, v| {
        c(g, concat0(&[v[0], v[1]])?.slice0(2, 3)?, 19)
    })?;
    s.op("sum_mean", &[x.clone()], |_, v| {
        Ok(v[0].sum().add(v[0].mean().scale(3.0))?)
    })?;
    s.op("stop_gradient", &[x], |g, v| {
        c(g, v[0].stop_gradient().mul(v[0])?, 20)
    })?;
    Ok(())
}

fn fgfm_suite(s: &mut Suite) -> Result<()> {
    let mut m = Fgfm::new(8, &mut Init::new(s.s(20)));
    let x = rand(&[8, 6, 6], -1.0, 1.0, s.s(21));
    let xm = x.clone();
    let report = grad_check_module(
        &mut m,
        move |g, m| {
            let out = m.forward(g, g.constant(xm.clone()))?;
            c(g, out.modulated, 31)?.add(c(g, out.fg_map, 32)?)
        },
        DEFAULT_STEP,
        Coords::All,
    )?;
    s.record("fgfm_forward", worst(report.into_iter().map(|r| r.1)));
    let errs = grad_check_inputs(
        |g, v| {
            let out = m.forward(g, v[0])?;
            c(g, out.modulated, 31)?.add(c(g, out.fg_map, 32)?)
        },
        &[x],
        DEFAULT_STEP,
        Coords::All,
    )?;
    s.record("fgfm_forward", worst(errs));
    Ok(())
}

fn aamha_suite(s: &mut Suite) -> Result<()> {
    let mut m = Aamha::new(8, 8, 2, &mut Init::new(s.s(30)))?;
    let x = rand(&[8, 4, 4], -1.0, 1.0, s.s(31));
    let mask = rand(&[1, 4, 4], 0.0, 1.0, s.s(32));
    let (xm, mm) = (x.clone(), mask.clone());
    let report = grad_check_module(
        &mut m,
        move |g, m| {
            let out = m.forward(
                g,
                g.constant(xm.clone()),
                Some(g.constant(mm.clone())),
                None,
            )?;
            c(g, out.out, 41)
        },
        DEFAULT_STEP,
        Coords::All,
    )?;
    s.record("aamha_forward", worst(report.into_iter().map(|r| r.1)));
    let errs = grad_check_inputs(
        |g, v| {
            let out = m.forward(g, v[0], Some(v[1]), None)?;
            c(g, out.out, 41)
        },
        &[x, mask],
        DEFAULT_STEP,
        Coords::All,
    )?;
    s.record("aamha_forward", worst(errs));
    Ok(())
}

fn loss_suite(s: &mut Suite) -> Result<()> {
    let pred = rand(&[1, 5, 5], 0.05, 0.95, s.s(40));
    let gt = Tensor::from_fn(&[1, 5, 5], |i| ((i * 7) % 3 == 0) as u8 as f64);
    let gt2 = gt.clone();
    s.op("weighted_bce", &[pred.clone()], move |_, v| {
        weighted_bce(v[0], &gt, 1e-7).map_err(to_tensor)
    })?;
    s.op("dice", &[pred], move |_, v| {
        dice_loss(v[0], &gt2, 1.0).map_err(to_tensor)
    })?;
    Ok(())
}

/// Detector forward plus training loss at C = 8 on a 64×64 scene, sampling
/// coordinates of every parameter tensor and of the image.
fn full_suite(s: &mut Suite) -> Result<()> {
    let cfg = RunConfig {
        channels: 8,
        heads: 2,
        dropout: 0.0,
        seed: s.s(50),
        ..RunConfig::default()
    };
    let spec = SceneSpec {
        boxes: 3,
        ..cfg.scene()
    };
    let scene = gen_synthetic(&spec, s.s(51))?;
    let mut model = Detector::from_config(&cfg)?;
    let sc = scene.clone();
    let cfg2 = cfg.clone();
    let report = grad_check_module(
        &mut model,
        move |g, m| {
            scene_loss(g, m, &sc, &cfg2, None)
                .map(|r| r.0)
                .map_err(to_tensor)
        },
        DEFAULT_STEP,
        Coords::Sample {
            n: 8,
            seed: s.s(52),
        },
    )?;
    s.record("fgaa_forward", worst(report.into_iter().map(|r| r.1)));
    let errs = grad_check_inputs(
        |g, v| {
            let out = model.forward(g, v[0], None).map_err(to_tensor)?;
            c(g, out.head.obj, 61)?.add(c(g, out.head.reg, 62)?)
        },
        &[scene.image.clone()],
        DEFAULT_STEP,
        Coords::Sample {
            n: 64,
            seed: s.s(53),
        },
    )?;
    s.record("fgaa_forward", worst(errs));
    Ok(())
}

fn to_tensor(e: crate::CoreError) -> fgaa_tensor::TensorError {
    match e {
        crate::CoreError::Tensor(t) => t,
        other => fgaa_tensor::TensorError::InvalidArgument {
            op: "gradcheck",
            detail: other.to_string(),
        },
    }
}

/// Run every check; one entry per operation or module holding its worst error.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut s = Suite {
        seed,
        entries: Vec::new(),
    };
    ops(&mut s)?;
    loss_suite(&mut s)?;
    fgfm_suite(&mut s)?;
    aamha_suite(&mut s)?;
    full_suite(&mut s)?;
    Ok(s.entries)
}
