#![allow(dead_code)]

pub mod oracles;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vaemo::config::{ModelConfig, Stage, TrainConfig};
use vaemo::graph::{Graph, Var};
use vaemo::params::{ParamStore, Session};
use vaemo::{Result, Tensor};

/// Step of the fourth-order central stencil. Smaller steps drown in f32
/// rounding of the forward pass.
pub const FD_STEP: f64 = 3e-2;

/// Fourth-order central difference at 0, where `f(x)` evaluates the
/// objective at offset `x`.
fn central(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(r: &mut impl Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.gen_range(-1.0f32..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Relative error. Components below `floor` compare absolutely against it.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Gradient floor for an objective whose terms have total magnitude `mag`:
/// below it central differences in f32 cannot resolve a 1e-3 relative error.
pub fn floor_for(mag: f64) -> f64 {
    1e-2 * mag.max(1.0)
}

/// Projects an output of any shape onto fixed random weights, returning
/// the f64 value of `Σ w·y`.
fn project(y: &Tensor, w: &[f32]) -> f64 {
    y.data()
        .iter()
        .zip(w)
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

fn weights(n: usize) -> Vec<f32> {
    let mut r = rng(0xfd);
    (0..n).map(|_| r.gen_range(-1.0f32..1.0)).collect()
}

/// Largest relative error between reverse-mode gradients of `Σ w·f(x)` and
/// central differences, over every input coordinate.
pub fn grad_check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let y = f(&mut g, &vars).unwrap();
    let w = weights(g.value(y).numel());
    let mag: f64 = g
        .value(y)
        .data()
        .iter()
        .zip(&w)
        .map(|(&a, &b)| (a * b).abs() as f64)
        .sum();
    let floor = floor_for(mag);
    let wt = g.constant(Tensor::new(g.shape(y).to_vec(), w.clone()).unwrap());
    let prod = g.mul(y, wt).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let y = f(&mut g, &vars).unwrap();
        project(g.value(y), &w)
    };
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let at = |x: f64| {
                let mut xs = inputs.to_vec();
                let v = &mut xs[i].data_mut()[j];
                *v = (*v as f64 + x) as f32;
                eval(&xs)
            };
            let numeric = central(at, FD_STEP);
            worst = worst.max(rel_err(analytic[i][j] as f64, numeric, floor));
        }
    }
    worst
}

/// Same check for a session-built output over named parameters; only the
/// listed coordinates `(name, index)` are perturbed.
pub fn param_grad_check(
    store: &ParamStore,
    coords: &[(String, usize)],
    step: f64,
    f: impl Fn(&mut Session) -> Result<Var>,
) -> f64 {
    let mut sess = Session::new(store, |_| true);
    let y = f(&mut sess).unwrap();
    let w = weights(sess.graph.value(y).numel());
    let mag: f64 = sess
        .graph
        .value(y)
        .data()
        .iter()
        .zip(&w)
        .map(|(&a, &b)| (a * b).abs() as f64)
        .sum();
    let floor = floor_for(mag);
    let wt = sess
        .graph
        .constant(Tensor::new(sess.graph.shape(y).to_vec(), w.clone()).unwrap());
    let prod = sess.graph.mul(y, wt).unwrap();
    let loss = sess.graph.sum(prod);
    let grads = sess.gradients(loss).unwrap();
    let eval = |s: &ParamStore| -> f64 {
        let mut sess = Session::frozen(s);
        let y = f(&mut sess).unwrap();
        project(sess.graph.value(y), &w)
    };
    let mut worst = 0.0f64;
    for (name, j) in coords {
        let at = |x: f64| {
            let mut s = store.clone();
            let v = &mut s.get_mut(name).unwrap().data_mut()[*j];
            *v = (*v as f64 + x) as f32;
            eval(&s)
        };
        let numeric = central(at, step);
        let analytic = grads.get(name).map_or(0.0, |g| g[*j] as f64);
        worst = worst.max(rel_err(analytic, numeric, floor));
    }
    worst
}

/// Smallest shapes that still have two tokens per modality.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        audio_frames: 32,
        mel_bins: 16,
        video_frames: 2,
        height: 16,
        width: 32,
        dim: 16,
        heads: 2,
        depth_f: 1,
        depth_g: 1,
        mlp_ratio: 2,
        dec_dim: 16,
        dec_depth: 1,
        dec_heads: 2,
        text_dim: 8,
        modality_embed: true,
    }
}

/// Desk-scale training configuration for `stage` with `seed`.
pub fn desk(stage: Stage, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::defaults(stage);
    c.seed = seed;
    c
}

/// Small-shaped configuration for fast tests.
pub fn small(stage: Stage, seed: u64) -> TrainConfig {
    let mut c = desk(stage, seed);
    c.model = ModelConfig {
        audio_frames: 32,
        mel_bins: 32,
        video_frames: 4,
        height: 32,
        width: 32,
        dim: 32,
        heads: 4,
        depth_f: 2,
        depth_g: 1,
        mlp_ratio: 2,
        dec_dim: 32,
        dec_depth: 1,
        dec_heads: 4,
        text_dim: 64,
        modality_embed: true,
    };
    c.batch_size = 4;
    c.epochs = 2;
    c
}
