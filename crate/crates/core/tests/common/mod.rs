//! Shared helpers for the integration tests: central finite differences and
//! random loss instances.
#![allow(dead_code)]

use geofew::geometry::Aggregate;
use geofew::losses::{aws_loss, cls_loss, total_loss, wcfc_loss, LossConfig, Stage2Batch};
use geofew::tape::{Tape, Var};
use geofew::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Largest element-wise relative error between the tape gradient of `build`
/// and central differences, over every element of every input.
pub fn max_gradient_error(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).expect("scalar loss");
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t)).collect();
        let out = build(&mut tape, &vars);
        tape.scalar_value(out)
    };
    let mut worst: f64 = 0.0;
    for (j, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        for e in 0..inputs[j].numel() {
            let mut xs = inputs.to_vec();
            xs[j].data_mut()[e] += FD_STEP;
            let plus = eval(&xs);
            xs[j].data_mut()[e] -= 2.0 * FD_STEP;
            let minus = eval(&xs);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[e], numeric));
        }
    }
    worst
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// A random stage-2 batch: `d ≤ 8`, at most 6 categories in total, `k ≤ 5`.
#[derive(Clone, Debug)]
pub struct Instance {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub groups: Vec<Vec<usize>>,
    pub w_base: Tensor,
    pub w_novel: Tensor,
    pub scale: Tensor,
}

impl Instance {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(2..=8);
        let n_base = rng.random_range(1..=3);
        let n_novel = rng.random_range(1..=6 - n_base);
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        for c in 0..n_novel {
            let k = rng.random_range(1..=5);
            groups.push((labels.len()..labels.len() + k).collect());
            labels.extend(std::iter::repeat_n(n_base + c, k));
        }
        // a few rows labelled with base columns too
        for _ in 0..rng.random_range(0..=2) {
            labels.push(rng.random_range(0..n_base));
        }
        Self {
            features: gaussian(&mut rng, &[labels.len(), d]),
            labels,
            groups,
            w_base: gaussian(&mut rng, &[d, n_base]),
            w_novel: gaussian(&mut rng, &[d, n_novel]),
            scale: Tensor::scalar(rng.random_range(1.0..15.0)),
        }
    }

    /// A margin at the middle of the widest gap between consecutive positive
    /// cosines (and zero), so some pairs are active and none sit on the edge.
    pub fn aws_margin(&self) -> f64 {
        let mut tape = Tape::new();
        let b = tape.constant(&self.w_base);
        let n = tape.constant(&self.w_novel);
        let u = geofew::geometry::angular_distance_on_tape(&mut tape, Some(b), n).unwrap();
        let mut v: Vec<f64> = std::iter::once(0.0)
            .chain(tape.value(u).iter().copied().filter(|x| *x > 0.0))
            .collect();
        if v.len() == 1 {
            return 0.5;
        }
        v.sort_by(f64::total_cmp);
        let w = v
            .windows(2)
            .max_by(|a, b| (a[1] - a[0]).total_cmp(&(b[1] - b[0])))
            .unwrap();
        0.5 * (w[0] + w[1])
    }

    pub fn cls_error(&self) -> f64 {
        let labels = self.labels.clone();
        max_gradient_error(
            &[self.features.clone(), self.w_base.clone(), self.w_novel.clone(), self.scale.clone()],
            |t, v| {
                let w = t.concat_cols(v[1], v[2]).unwrap();
                cls_loss(t, v[0], &labels, w, v[3]).unwrap()
            },
        )
    }

    pub fn wcfc_error(&self, kind: Aggregate) -> f64 {
        let groups = self.groups.clone();
        max_gradient_error(&[self.features.clone(), self.w_novel.clone()], |t, v| {
            wcfc_loss(t, v[0], &groups, v[1], kind, 1e-7).unwrap()
        })
    }

    pub fn aws_error(&self) -> f64 {
        let m = self.aws_margin();
        max_gradient_error(&[self.w_base.clone(), self.w_novel.clone()], |t, v| {
            aws_loss(t, Some(v[0]), v[1], m, 1e-7).unwrap().0
        })
    }

    pub fn total_error(&self, cfg: &LossConfig) -> f64 {
        let cfg = LossConfig {
            margin_m: self.aws_margin(),
            ..cfg.clone()
        };
        let labels = self.labels.clone();
        let groups = self.groups.clone();
        max_gradient_error(
            &[self.features.clone(), self.w_base.clone(), self.w_novel.clone(), self.scale.clone()],
            |t, v| {
                let batch = Stage2Batch {
                    features: v[0],
                    labels: labels.clone(),
                    groups: groups.clone(),
                    base_weights: Some(v[1]),
                    novel_weights: v[2],
                    scale: v[3],
                };
                total_loss(t, &batch, &cfg).unwrap().0
            },
        )
    }
}
