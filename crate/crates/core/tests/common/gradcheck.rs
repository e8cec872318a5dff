//! Finite-difference gradient checks shared by the gradient and acceptance
//! test targets.

use super::*;
use fedseg_core::model::{build_model, loss_and_grad, ModelConfig, SegBatch};
use fedseg_core::tensor::{BnMode, Shape, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 20;
const FD_STEP: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-3;
pub const NET_TOL: f64 = 5e-3;
const ERR_FLOOR: f64 = 1e-3;

struct Input {
    shape: Shape,
    data: Vec<f32>,
}

impl Input {
    fn t64(&self) -> T64 {
        T64::new(self.shape, self.as_f64())
    }

    fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f32, hi: f32) -> Input {
    let n = shape.iter().product();
    Input {
        shape,
        data: (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    }
}

/// Values bounded away from zero, so a relu never sits within an FD step
/// of its kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape) -> Input {
    let mut x = uniform(rng, shape, 0.05, 1.5);
    for v in &mut x.data {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    x
}

/// Pairwise distinct values on a 0.05 grid, so no pooling window has a tie.
fn distinct(rng: &mut ChaCha8Rng, shape: Shape) -> Input {
    let n: usize = shape.iter().product();
    let mut data: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - n as f32 * 0.025).collect();
    data.shuffle(rng);
    Input { shape, data }
}

fn random_shape(rng: &mut ChaCha8Rng) -> Shape {
    [
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        2 * rng.random_range(1..=3),
        2 * rng.random_range(1..=3),
    ]
}

/// Builds `op` on a tape over leaves for `inputs`, probes the output with a
/// random linear functional, and compares every input coordinate's
/// gradient with central differences of the same functional applied to
/// `reference`. Returns the largest relative error seen.
fn check(
    rng: &mut ChaCha8Rng,
    inputs: &[Input],
    op: impl Fn(&mut Tape, &[Var]) -> Var,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(Tensor::new(x.shape, x.data.clone()).unwrap(), true))
        .collect();
    let out = op(&mut tape, &vars);
    let probe: Vec<f32> = (0..tape.value(out).len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let loss = tape.weighted_sum(out, &probe).unwrap();
    let grads = tape.backward(loss).unwrap();

    let probe64: Vec<f64> = probe.iter().map(|&v| v as f64).collect();
    let base: Vec<Vec<f64>> = inputs.iter().map(Input::as_f64).collect();
    let mut worst = 0.0f64;
    for (j, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("input gradient").data();
        for i in 0..base[j].len() {
            let mut objective = |xj: &[f64]| {
                let mut xs = base.clone();
                xs[j] = xj.to_vec();
                reference(&xs).iter().zip(&probe64).map(|(a, b)| a * b).sum()
            };
            let numeric = central_diff(&base[j], i, FD_STEP, &mut objective);
            worst = worst.max(rel_err(analytic[i] as f64, numeric, ERR_FLOOR));
        }
    }
    worst
}

/// Worst relative error over `INSTANCES` random instances.
fn worst_over_instances(seed: u64, mut instance: impl FnMut(&mut ChaCha8Rng) -> f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..INSTANCES)
        .map(|_| instance(&mut rng))
        .fold(0.0f64, f64::max)
}

fn conv2d_k(k: usize, seed: u64) -> f64 {
    worst_over_instances(seed, |rng| {
        let [n, cin, h, w] = random_shape(rng);
        let cout = rng.random_range(1..=3);
        let inputs = [
            uniform(rng, [n, cin, h, w], -1.0, 1.0),
            uniform(rng, [cout, cin, k, k], -1.0, 1.0),
            uniform(rng, [cout, 1, 1, 1], -1.0, 1.0),
        ];
        let shape = inputs[0].shape;
        check(
            rng,
            &inputs,
            |t, v| t.conv2d(v[0], v[1], v[2]).unwrap(),
            |x| conv2d(&T64::new(shape, x[0].clone()), &x[1], &x[2], cout, k).data,
        )
    })
}

fn conv2d_3x3() -> f64 {
    conv2d_k(3, 1)
}

fn conv2d_1x1() -> f64 {
    conv2d_k(1, 2)
}

fn bn_train_op() -> f64 {
    worst_over_instances(3, |rng| {
        let shape = random_shape(rng);
        let c = shape[1];
        let inputs = [
            uniform(rng, shape, -2.0, 2.0),
            uniform(rng, [c, 1, 1, 1], 0.5, 1.5),
            uniform(rng, [c, 1, 1, 1], -0.5, 0.5),
        ];
        check(
            rng,
            &inputs,
            |t, v| {
                let (mut rm, mut rv) = (vec![0.0; c], vec![1.0; c]);
                let mode = BnMode::Train {
                    running_mean: &mut rm,
                    running_var: &mut rv,
                    momentum: 0.1,
                };
                t.batch_norm(v[0], v[1], v[2], mode, BN_EPS as f32).unwrap()
            },
            |x| batch_norm_train(&T64::new(shape, x[0].clone()), &x[1], &x[2]).data,
        )
    })
}

fn bn_eval_op() -> f64 {
    worst_over_instances(4, |rng| {
        let shape = random_shape(rng);
        let c = shape[1];
        let inputs = [
            uniform(rng, shape, -2.0, 2.0),
            uniform(rng, [c, 1, 1, 1], 0.5, 1.5),
            uniform(rng, [c, 1, 1, 1], -0.5, 0.5),
        ];
        let mean: Vec<f32> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let var: Vec<f32> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
        let (m64, v64): (Vec<f64>, Vec<f64>) = (
            mean.iter().map(|&v| v as f64).collect(),
            var.iter().map(|&v| v as f64).collect(),
        );
        check(
            rng,
            &inputs,
            |t, v| {
                let mode = BnMode::Eval {
                    running_mean: &mean,
                    running_var: &var,
                };
                t.batch_norm(v[0], v[1], v[2], mode, BN_EPS as f32).unwrap()
            },
            |x| batch_norm_eval(&T64::new(shape, x[0].clone()), &x[1], &x[2], &m64, &v64).data,
        )
    })
}

fn relu_op() -> f64 {
    worst_over_instances(5, |rng| {
        let shape = random_shape(rng);
        let inputs = [away_from_zero(rng, shape)];
        check(
            rng,
            &inputs,
            |t, v| t.relu(v[0]).unwrap(),
            |x| relu(&T64::new(shape, x[0].clone())).data,
        )
    })
}

fn max_pool() -> f64 {
    worst_over_instances(6, |rng| {
        let shape = random_shape(rng);
        let inputs = [distinct(rng, shape)];
        check(
            rng,
            &inputs,
            |t, v| t.max_pool2(v[0]).unwrap(),
            |x| max_pool2(&T64::new(shape, x[0].clone())).data,
        )
    })
}

fn upsample() -> f64 {
    worst_over_instances(7, |rng| {
        let shape = random_shape(rng);
        let inputs = [uniform(rng, shape, -1.0, 1.0)];
        check(
            rng,
            &inputs,
            |t, v| t.upsample_nearest2(v[0]).unwrap(),
            |x| upsample2(&T64::new(shape, x[0].clone())).data,
        )
    })
}

fn concat_op() -> f64 {
    worst_over_instances(8, |rng| {
        let [n, ca, h, w] = random_shape(rng);
        let cb = rng.random_range(1..=3);
        let inputs = [
            uniform(rng, [n, ca, h, w], -1.0, 1.0),
            uniform(rng, [n, cb, h, w], -1.0, 1.0),
        ];
        let (sa, sb) = (inputs[0].shape, inputs[1].shape);
        check(
            rng,
            &inputs,
            |t, v| t.concat_channels(v[0], v[1]).unwrap(),
            |x| concat(&T64::new(sa, x[0].clone()), &T64::new(sb, x[1].clone())).data,
        )
    })
}

fn sigmoid_op() -> f64 {
    worst_over_instances(9, |rng| {
        let shape = random_shape(rng);
        let inputs = [uniform(rng, shape, -4.0, 4.0)];
        check(
            rng,
            &inputs,
            |t, v| t.sigmoid(v[0]).unwrap(),
            |x| sigmoid(&T64::new(shape, x[0].clone())).data,
        )
    })
}

fn bce_op() -> f64 {
    worst_over_instances(10, |rng| {
        let shape = random_shape(rng);
        let inputs = [uniform(rng, shape, 0.05, 0.95)];
        let n: usize = shape.iter().product();
        let target: Vec<f32> = (0..n).map(|_| rng.random_range(0..2) as f32).collect();
        let target64: Vec<f64> = target.iter().map(|&v| v as f64).collect();
        let target = Tensor::new(shape, target).unwrap();
        check(
            rng,
            &inputs,
            |t, v| t.bce_loss(v[0], &target).unwrap(),
            |x| vec![bce(&x[0], &target64)],
        )
    })
}

fn sum_op() -> f64 {
    worst_over_instances(11, |rng| {
        let shape = random_shape(rng);
        let inputs = [uniform(rng, shape, -1.0, 1.0)];
        check(rng, &inputs, |t, v| t.sum(v[0]).unwrap(), |x| vec![x[0].iter().sum()])
    })
}

fn weighted_sum_op() -> f64 {
    worst_over_instances(12, |rng| {
        let shape = random_shape(rng);
        let inputs = [uniform(rng, shape, -1.0, 1.0)];
        let w: Vec<f32> = (0..inputs[0].data.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w64: Vec<f64> = w.iter().map(|&v| v as f64).collect();
        check(
            rng,
            &inputs,
            |t, v| t.weighted_sum(v[0], &w).unwrap(),
            |x| vec![x[0].iter().zip(&w64).map(|(a, b)| a * b).sum()],
        )
    })
}

fn scale_op() -> f64 {
    worst_over_instances(13, |rng| {
        let shape = random_shape(rng);
        let inputs = [uniform(rng, shape, -1.0, 1.0)];
        let f: f32 = rng.random_range(-3.0..3.0);
        check(
            rng,
            &inputs,
            |t, v| t.scale(v[0], f).unwrap(),
            |x| x[0].iter().map(|v| v * f as f64).collect(),
        )
    })
}

fn add_op() -> f64 {
    worst_over_instances(14, |rng| {
        let shape = random_shape(rng);
        let inputs = [uniform(rng, shape, -1.0, 1.0), uniform(rng, shape, -1.0, 1.0)];
        check(
            rng,
            &inputs,
            |t, v| t.add(v[0], v[1]).unwrap(),
            |x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect(),
        )
    })
}

/// Every tape op with its worst relative error over `INSTANCES` instances.
pub const OPS: &[(&str, fn() -> f64)] = &[
    ("conv2d 3x3", conv2d_3x3),
    ("conv2d 1x1", conv2d_1x1),
    ("batch_norm train", bn_train_op),
    ("batch_norm eval", bn_eval_op),
    ("relu", relu_op),
    ("max_pool2", max_pool),
    ("upsample_nearest2", upsample),
    ("concat_channels", concat_op),
    ("sigmoid", sigmoid_op),
    ("bce_loss", bce_op),
    ("sum", sum_op),
    ("weighted_sum", weighted_sum_op),
    ("scale", scale_op),
    ("add", add_op),
];

pub struct NetCheck {
    /// `|L_tape − L_reference|`.
    pub loss_gap: f64,
    pub worst: f64,
    pub worst_at: String,
    pub coordinates: usize,
}

/// Gradient of the desk U-Net's BCE on one 1×1×16×16 input: every entry of
/// small segments and 12 random entries of each larger trainable segment.
pub fn full_unet() -> NetCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut params = build_model(ModelConfig::desk(), 15).unwrap();
    let shape = [1, 1, 16, 16];
    let image = uniform(&mut rng, shape, 0.0, 1.0);
    let mask: Vec<f32> = (0..256)
        .map(|i| {
            let (y, x) = ((i / 16) as f32 - 7.5, (i % 16) as f32 - 6.0);
            if y * y + x * x < 16.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let batch = SegBatch::new(
        Tensor::new(shape, image.data.clone()).unwrap(),
        Tensor::new(shape, mask.clone()).unwrap(),
    )
    .unwrap();
    let reference_params = params.clone();
    let step = loss_and_grad(&mut params, &batch).unwrap();

    let x = image.t64();
    let mask64: Vec<f64> = mask.iter().map(|&v| v as f64).collect();
    let theta: Vec<f64> = reference_params.values().iter().map(|&v| v as f64).collect();
    let mut loss =
        |values: &[f64]| bce(&unet_forward_train(&reference_params, values, &x).data, &mask64);
    let mut check = NetCheck {
        loss_gap: (loss(&theta) - step.loss).abs(),
        worst: 0.0,
        worst_at: String::new(),
        coordinates: 0,
    };
    for seg in reference_params.segments().iter().filter(|s| s.kind.is_trainable()) {
        let picks: Vec<usize> = if seg.len <= 12 {
            seg.range().collect()
        } else {
            (0..12).map(|_| rng.random_range(seg.range())).collect()
        };
        for i in picks {
            let numeric = central_diff(&theta, i, FD_STEP, &mut loss);
            let err = rel_err(step.grad[i] as f64, numeric, ERR_FLOOR);
            check.coordinates += 1;
            if err > check.worst {
                check.worst = err;
                check.worst_at = format!("{}[{}]", seg.name, i - seg.offset);
            }
        }
    }
    check
}
