//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::finetune::{cosface_loss, landmark_reg};
use crate::kernels::patch_offsets;
use crate::pretrain::{lafs_loss, DinoHead, DinoHeadConfig};
use crate::rng::CounterRng;
use crate::tensor::Tensor;
use crate::vit::{Vit, VitConfig};

/// Relative error with a unit floor: `|a − n| / max(|a|, |n|, 1)`.
pub fn relative_error(analytic: f32, numeric: f32) -> f32 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares tape gradients of the scalar `f` against `(f(x+h) − f(x−h)) / 2h`
/// for every element of every input. Returns the largest relative error.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], h: f32) -> Result<f32>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&h) {
        return Err(Error::Parameter(format!("step {h} outside [1e-4, 1e-2]")));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item() as f64)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f32;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape());
        let analytic = grads.get(*v).unwrap_or(&zeros);
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = ((up - down) / (2.0 * h as f64)) as f32;
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Maximum relative error tolerated by [`check_all`].
pub const TOLERANCE: f32 = 1e-3;

/// Outcome of one operation on one random instance.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub instance: usize,
    pub max_rel_err: f32,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn randn(shape: &[usize], std: f32, rng: &mut CounterRng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal() as f32 * std)
}

fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut CounterRng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.range(lo as f64, hi as f64) as f32)
}

/// Contracts `out` with fixed random weights so every output element matters.
fn project(tape: &mut Tape, out: Var, rng: &mut CounterRng) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let n = tape.value(out).numel() as f32;
    let w = tape.constant_owned(randn(&shape, 1.0 / n.sqrt(), rng));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Pixel positions whose fractional parts stay clear of the sampler's kinks
/// by more than `margin` for every offset in `offsets`.
fn kink_free(lo: f32, hi: f32, offsets: &[f32], margin: f32, rng: &mut CounterRng) -> f32 {
    loop {
        let v = rng.range(lo as f64, hi as f64) as f32;
        if offsets.iter().all(|o| {
            let f = (v + o).rem_euclid(1.0);
            f > margin && f < 1.0 - margin
        }) {
            return v;
        }
    }
}

type Case = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One random instance of operation `op`: the scalar function and its inputs.
fn instance(op: &str, rng: &mut CounterRng) -> Result<(Case, Vec<Tensor>)> {
    let seed = rng.next_u64();
    let mut wr = CounterRng::new(seed);
    let proj_rng = move || CounterRng::new(seed ^ 0x5A5A);
    Ok(match op {
        "matmul" => {
            let (m, k, n) = (1 + wr.below(4) as usize, 1 + wr.below(5) as usize, 1 + wr.below(4) as usize);
            (
                Box::new(move |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    project(t, y, &mut proj_rng())
                }),
                vec![randn(&[m, k], 1.0, &mut wr), randn(&[k, n], 1.0, &mut wr)],
            )
        }
        "conv2d" => {
            let stride = 1 + wr.below(2) as usize;
            let (n, ci, co) = (1 + wr.below(2) as usize, 1 + wr.below(2) as usize, 1 + wr.below(3) as usize);
            let hw = 5 + wr.below(3) as usize;
            (
                Box::new(move |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), stride)?;
                    project(t, y, &mut proj_rng())
                }),
                vec![
                    randn(&[n, ci, hw, hw], 1.0, &mut wr),
                    randn(&[co, ci, 3, 3], 0.5, &mut wr),
                    randn(&[co], 0.5, &mut wr),
                ],
            )
        }
        "softmax_t" => {
            let temp = [0.5f32, 1.0, 2.0][wr.below(3) as usize];
            (
                Box::new(move |t, v| {
                    let y = t.softmax(v[0], temp)?;
                    project(t, y, &mut proj_rng())
                }),
                vec![randn(&[1 + wr.below(4) as usize, 2 + wr.below(6) as usize], 1.0, &mut wr)],
            )
        }
        "layer_norm" => {
            let d = 2 + wr.below(7) as usize;
            (
                Box::new(move |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    project(t, y, &mut proj_rng())
                }),
                vec![
                    randn(&[1 + wr.below(4) as usize, d], 1.0, &mut wr),
                    uniform(&[d], 0.5, 1.5, &mut wr),
                    randn(&[d], 0.5, &mut wr),
                ],
            )
        }
        "gelu" => (
            Box::new(move |t, v| {
                let y = t.gelu(v[0]);
                project(t, y, &mut proj_rng())
            }),
            vec![randn(&[3, 1 + wr.below(6) as usize], 1.5, &mut wr)],
        ),
        "attention_block" => {
            let heads = 1 + wr.below(2) as usize;
            let cfg = VitConfig { channels: 1, patch: 2, dim: 4 * heads, depth: 1, heads, mlp_ratio: 2, max_patches: 4 };
            let vit = Vit::new(cfg, wr.next_u64())?;
            let (seqs, len) = (1 + wr.below(2) as usize, 2 + wr.below(3) as usize);
            let d = vit.dim();
            (
                Box::new(move |t, v| {
                    let vars = vit.bind(t, false);
                    let y = vit.encode_var(t, &vars, v[0], seqs)?;
                    project(t, y, &mut proj_rng())
                }),
                vec![randn(&[seqs * len, d], 1.0, &mut wr)],
            )
        }
        "bilinear_sample" => {
            let (c, h, w) = (1 + wr.below(2) as usize, 3 + wr.below(3) as usize, 3 + wr.below(3) as usize);
            let m = 1 + wr.below(4) as usize;
            let mut pts = Vec::with_capacity(2 * m);
            for _ in 0..m {
                pts.push(kink_free(-0.9, w as f32 - 0.1, &[0.0], 0.05, &mut wr));
                pts.push(kink_free(-0.9, h as f32 - 0.1, &[0.0], 0.05, &mut wr));
            }
            (
                Box::new(move |t, v| {
                    let y = t.bilinear_sample(v[0], v[1])?;
                    project(t, y, &mut proj_rng())
                }),
                vec![randn(&[c, h, w], 1.0, &mut wr), Tensor::new(&[m, 2], pts)?],
            )
        }
        "sample_patches" => {
            let (n, hw, r) = (1 + wr.below(2) as usize, 5 + wr.below(3) as usize, 1 + wr.below(3) as usize);
            let patch = 2 + wr.below(2) as usize;
            let offs: Vec<f32> = patch_offsets(patch).collect();
            let scale = (hw - 1) as f32;
            let mut coords = Vec::new();
            for _ in 0..n * r * 2 {
                coords.push(kink_free(0.5, scale - 0.5, &offs, 0.05, &mut wr) / scale);
            }
            (
                Box::new(move |t, v| {
                    let y = t.sample_patches(v[0], v[1], patch)?;
                    project(t, y, &mut proj_rng())
                }),
                vec![randn(&[n, 1, hw, hw], 1.0, &mut wr), Tensor::new(&[n, r, 2], coords)?],
            )
        }
        "cosface_loss" => {
            let (n, classes, d) = (2 + wr.below(3) as usize, 2 + wr.below(4) as usize, 3 + wr.below(4) as usize);
            let labels: Vec<usize> = (0..n).map(|_| wr.below(classes as u64) as usize).collect();
            (
                Box::new(move |t, v| cosface_loss(t, v[0], v[1], &labels, 4.0, 0.2)),
                vec![randn(&[n, d], 1.0, &mut wr), randn(&[classes, d], 1.0, &mut wr)],
            )
        }
        "landmark_reg" => {
            let (n, r) = (1 + wr.below(2) as usize, 2 + wr.below(4) as usize);
            let r_hat = uniform(&[n, r, 2], 0.0, 1.0, &mut wr);
            (
                Box::new(move |t, v| landmark_reg(t, &r_hat, v[0])),
                vec![uniform(&[n, r, 2], 0.0, 1.0, &mut wr)],
            )
        }
        "lafs_loss_student" => {
            let (batch, views, dim) = (1 + wr.below(2) as usize, 3 + wr.below(2) as usize, 4);
            let head = DinoHead::new(dim, &DinoHeadConfig { hidden: 6, bottleneck: 4, out_dim: 5 }, wr.next_u64())?;
            let k = head.out_dim();
            let teacher = Tensor::from_fn(&[2 * batch, k], |_| wr.uniform() as f32 + 0.05);
            let mut probs = teacher.data().to_vec();
            for row in probs.chunks_mut(k) {
                let s: f32 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= s);
            }
            let probs = Tensor::new(&[2 * batch, k], probs)?;
            let pairs = crate::pretrain::loss_pairs(&[0, 1], views);
            (
                Box::new(move |t, v| {
                    let hv = head.bind(t, false);
                    let logits = head.forward_var(t, &hv, v[0])?;
                    lafs_loss(t, &probs, logits, batch, &pairs, 0.5)
                }),
                vec![randn(&[views * batch, dim], 1.0, &mut wr)],
            )
        }
        "min_max_scale" => (
            Box::new(move |t, v| {
                let y = t.min_max_scale(v[0])?;
                project(t, y, &mut proj_rng())
            }),
            vec![randn(&[1 + wr.below(2) as usize, 3 + wr.below(3) as usize, 2], 1.0, &mut wr)],
        ),
        "l2_normalize_rows" => (
            Box::new(move |t, v| {
                let y = t.l2_normalize_rows(v[0], 1e-8);
                project(t, y, &mut proj_rng())
            }),
            vec![randn(&[2, 2 + wr.below(4) as usize], 1.0, &mut wr)],
        ),
        other => return Err(Error::Parameter(format!("no gradient check for {other}"))),
    })
}

/// Operations covered by [`check_all`].
pub const OPS: &[&str] = &[
    "matmul",
    "conv2d",
    "softmax_t",
    "layer_norm",
    "gelu",
    "attention_block",
    "bilinear_sample",
    "sample_patches",
    "cosface_loss",
    "landmark_reg",
    "lafs_loss_student",
    "min_max_scale",
    "l2_normalize_rows",
];

/// Runs `instances` random checks of every operation in [`OPS`].
pub fn check_all(instances: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for (o, op) in OPS.iter().enumerate() {
        let mut rng = CounterRng::from_parts(&[seed, o as u64]);
        for i in 0..instances {
            let (f, inputs) = instance(op, &mut rng)?;
            let err = gradcheck(f, &inputs, 1e-3)?;
            out.push(OpCheck { op, instance: i, max_rel_err: err });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let err = gradcheck(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn every_op_passes_one_instance() {
        for c in check_all(1, 3).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn rejects_step_outside_range() {
        let x = Tensor::scalar(1.0);
        assert!(gradcheck(|t, v| Ok(t.sum(v[0])), &[x], 0.5).is_err());
    }
}
