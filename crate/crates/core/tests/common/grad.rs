//! Central finite-difference gradient checks (f64, h = 1e-3), shared by the
//! gradcheck and acceptance targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reachnet::tensor::ops::{AttentionParams, Pads};
use reachnet::{Result, Tape, Tensor, Var};

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-6;
pub const TOL_E2E: f64 = 1e-4;
const SEEDS: u64 = 20;
const ZERO_GRAD: f64 = 1e-9;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks are never straddled by +-H.
fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

/// Max over inputs of `|analytic - numeric|_inf / max(|analytic|_inf, |numeric|_inf)`.
fn grad_error<F>(inputs: &[Tensor<f64>], weights_seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let loss_of = |vals: &[Tensor<f64>], with_grad: bool| -> (f64, Vec<Option<Tensor<f64>>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
        let w = random(&mut rng, tape.shape(out));
        let w = tape.constant(w);
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        let value = tape.value(loss).item();
        if !with_grad {
            return (value, vec![]);
        }
        tape.backward(loss).unwrap();
        (value, vars.iter().map(|&v| tape.grad(v)).collect())
    };

    let (_, analytic) = loss_of(inputs, true);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = analytic[i]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            *slot = (loss_of(&plus, false).0 - loss_of(&minus, false).0) / (2.0 * H);
        }
        let scale = analytic
            .data()
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        // Inputs the output does not depend on (e.g. the key bias under softmax
        // shift invariance): both routes must agree the gradient vanishes.
        if scale < ZERO_GRAD {
            continue;
        }
        let diff = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        worst = worst.max(diff / scale);
    }
    worst
}

fn check<G, F>(name: &'static str, gen: G, f: F) -> (&'static str, f64)
where
    G: Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Copy,
{
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 13);
        let inputs = gen(&mut rng);
        worst = worst.max(grad_error(&inputs, seed + 1000, f));
    }
    println!("gradcheck {name:<24} max rel err {worst:.3e}");
    (name, worst)
}

pub fn elementwise_ops() -> Vec<(&'static str, f64)> {
    vec![
        check(
            "add",
            |r| vec![random(r, &[2, 3]), random(r, &[2, 3])],
            |t, v| t.add(v[0], v[1]),
        ),
        check(
            "mul",
            |r| vec![random(r, &[7]), random(r, &[7])],
            |t, v| t.mul(v[0], v[1]),
        ),
        check(
            "add_tiled",
            |r| vec![random(r, &[3, 2, 2]), random(r, &[2, 2])],
            |t, v| t.add_tiled(v[0], v[1]),
        ),
        check("sum", |r| vec![random(r, &[5])], |t, v| t.sum(v[0])),
        check(
            "relu",
            |r| vec![random_away_from_zero(r, &[8])],
            |t, v| t.relu(v[0]),
        ),
    ]
}

pub fn conv2d() -> Vec<(&'static str, f64)> {
    vec![
        check(
            "conv2d 3x3 s1 p1",
            |r| {
                vec![
                    random(r, &[1, 2, 2, 2]),
                    random(r, &[2, 2, 3, 3]),
                    random(r, &[2]),
                ]
            },
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        ),
        check(
            "conv2d 3x3 s2 p1",
            |r| {
                vec![
                    random(r, &[2, 1, 3, 3]),
                    random(r, &[2, 1, 3, 3]),
                    random(r, &[2]),
                ]
            },
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        ),
        check(
            "conv2d 2x2 s2 (down)",
            |r| vec![random(r, &[1, 2, 2, 4]), random(r, &[3, 2, 2, 2])],
            |t, v| t.conv2d(v[0], v[1], None, 2, 0),
        ),
        check(
            "conv2d 4x4 s4 (down)",
            |r| {
                vec![
                    random(r, &[1, 1, 4, 8]),
                    random(r, &[2, 1, 4, 4]),
                    random(r, &[2]),
                ]
            },
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 4, 0),
        ),
        check(
            "conv2d 1x1",
            |r| {
                vec![
                    random(r, &[2, 2, 1, 2]),
                    random(r, &[3, 2, 1, 1]),
                    random(r, &[3]),
                ]
            },
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0),
        ),
    ]
}

pub fn normalisation() -> Vec<(&'static str, f64)> {
    vec![
        check(
            "batch_norm (batch stats)",
            |r| vec![random(r, &[2, 2, 2, 2]), random(r, &[2]), random(r, &[2])],
            |t, v| {
                t.batch_norm_train(v[0], v[1], v[2], 1e-5)
                    .map(|(y, _, _)| y)
            },
        ),
        check(
            "batch_norm (running)",
            |r| vec![random(r, &[2, 2, 1, 2]), random(r, &[2]), random(r, &[2])],
            |t, v| t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.3], &[0.5, 2.0], 1e-5),
        ),
    ]
}

pub fn resampling_and_layout() -> Vec<(&'static str, f64)> {
    vec![
        check(
            "resize up 2x3->5x4",
            |r| vec![random(r, &[1, 1, 2, 3])],
            |t, v| t.resize_bilinear(v[0], 5, 4),
        ),
        check(
            "resize down 2x4->1x3",
            |r| vec![random(r, &[1, 1, 2, 4])],
            |t, v| t.resize_bilinear(v[0], 1, 3),
        ),
        check(
            "concat",
            |r| {
                vec![
                    random(r, &[1, 1, 2, 2]),
                    random(r, &[1, 2, 1, 2]).reshape(&[1, 1, 2, 2]).unwrap(),
                ]
            },
            |t, v| t.concat_channels(v[0], v[1]),
        ),
        check(
            "reflect_pad",
            |r| vec![random(r, &[1, 1, 2, 3])],
            |t, v| {
                t.reflect_pad(
                    v[0],
                    Pads {
                        top: 1,
                        bottom: 3,
                        left: 2,
                        right: 1,
                    },
                )
            },
        ),
        check(
            "crop",
            |r| vec![random(r, &[1, 2, 2, 2])],
            |t, v| t.crop(v[0], 1, 0, 1, 2),
        ),
        check(
            "to_tokens",
            |r| vec![random(r, &[2, 2, 1, 2])],
            |t, v| t.to_tokens(v[0]),
        ),
        check(
            "from_tokens",
            |r| vec![random(r, &[1, 4, 2])],
            |t, v| t.from_tokens(v[0], 2, 2),
        ),
    ]
}

pub fn linear_and_attention() -> Vec<(&'static str, f64)> {
    vec![
        check(
            "linear",
            |r| vec![random(r, &[2, 3]), random(r, &[2, 3]), random(r, &[2])],
            |t, v| t.linear(v[0], v[1], v[2]),
        ),
        check(
            "scaled_dot_product_attn",
            |r| {
                vec![
                    random(r, &[1, 3, 2]),
                    random(r, &[1, 3, 2]),
                    random(r, &[1, 3, 2]),
                ]
            },
            |t, v| t.scaled_dot_product_attention(v[0], v[1], v[2], 2),
        ),
        check(
            "multi_head_attention",
            |r| {
                let mut v = vec![random(r, &[1, 2, 4])];
                for _ in 0..4 {
                    v.push(random(r, &[4, 4]));
                    v.push(random(r, &[4]));
                }
                v
            },
            |t, v| {
                let p = AttentionParams {
                    wq: v[1],
                    bq: v[2],
                    wk: v[3],
                    bk: v[4],
                    wv: v[5],
                    bv: v[6],
                    wo: v[7],
                    bo: v[8],
                };
                t.multi_head_attention(v[0], 2, &p)
            },
        ),
    ]
}

pub fn bce_with_logits() -> Vec<(&'static str, f64)> {
    vec![check(
        "bce_with_logits",
        |r| vec![random(r, &[6]).map(|v| v * 3.0)],
        |t, v| {
            let targets = Tensor::new(&[6], vec![0.0, 0.3, 0.5, 0.9, 1.0, 0.1]).unwrap();
            t.bce_with_logits(v[0], &targets)
        },
    )]
}

/// Every per-operator case.
pub fn per_op() -> Vec<(&'static str, f64)> {
    [
        elementwise_ops,
        conv2d,
        normalisation,
        resampling_and_layout,
        linear_and_attention,
        bce_with_logits,
    ]
    .iter()
    .flat_map(|g| g())
    .collect()
}

/// End-to-end check on 50 random coordinates of the tiny model. Finite
/// differences are only a valid reference when `+-H` stays on one linear
/// piece of every ReLU, so coordinates whose perturbation flips any ReLU
/// input sign are redrawn.
pub fn tiny_model_end_to_end() -> (f64, usize) {
    use reachnet::model::{Model, ModelConfig};
    use reachnet::tensor::Mode;

    const COORDS: usize = 50;
    let config = ModelConfig {
        base_filters: 2,
        ..Default::default()
    };
    let model = Model::<f64>::build(&config, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    // Training batch size; the 1x1 bottleneck normalises across the batch.
    const N: usize = 8;
    let input = random(&mut rng, &[N, 1, 128, 128]);
    let target = Tensor::new(
        &[N, 3, 128, 128],
        (0..N * 3 * 128 * 128)
            .map(|_| rng.random_range(0.0..1.0))
            .collect(),
    )
    .unwrap();
    let run = |m: &Model<f64>, with_grad: bool| -> (f64, Vec<bool>, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, with_grad);
        let x = tape.constant(input.clone());
        let out = m.forward(&mut tape, &vars, x, Mode::Train).unwrap();
        let loss = tape.bce_with_logits(out.logits, &target).unwrap();
        let value = tape.value(loss).item();
        let pattern = tape.relu_pattern();
        if !with_grad {
            return (value, pattern, vec![]);
        }
        tape.backward(loss).unwrap();
        (
            value,
            pattern,
            vars.iter().map(|&v| tape.grad_or_zeros(v)).collect(),
        )
    };
    let (_, base_pattern, grads) = run(&model, true);

    let sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
    let total: usize = sizes.iter().sum();
    let (mut analytic, mut numeric, mut redrawn) = (Vec::new(), Vec::new(), 0);
    while analytic.len() < COORDS {
        let mut flat = rng.random_range(0..total);
        let mut p = 0;
        while flat >= sizes[p] {
            flat -= sizes[p];
            p += 1;
        }
        let at = |delta: f64| {
            let mut m = model.clone();
            m.params_mut()[p].data_mut()[flat] += delta;
            run(&m, false)
        };
        let ((plus, pp, _), (minus, pm, _)) = (at(H), at(-H));
        if pp != base_pattern || pm != base_pattern {
            redrawn += 1;
            assert!(
                redrawn < 20 * COORDS,
                "almost every coordinate crosses a ReLU kink"
            );
            continue;
        }
        numeric.push((plus - minus) / (2.0 * H));
        analytic.push(grads[p].data()[flat]);
    }
    // Same norm as the per-operator checks, over the sampled coordinates.
    let scale = analytic
        .iter()
        .chain(&numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = analytic
        .iter()
        .zip(&numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale;
    println!(
        "gradcheck {:<24} max rel err {worst:.3e} ({redrawn} kink-crossing coordinates redrawn)",
        "tiny model end-to-end"
    );
    (worst, redrawn)
}
