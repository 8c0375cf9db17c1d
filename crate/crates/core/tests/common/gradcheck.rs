//! Central-difference gradient checks in f64.

use orthovit::model::{Autoencoder, ModelConfig, ProbeClassifier};
use orthovit::nn::{blocks, unpatchify_var, Binding, LayerNorm, Linear, ParamStore, PatchGrid};
use orthovit::tensor::{Tape, Tensor, Var};
use orthovit::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
/// Denominator floor for relative errors of near-zero gradients.
const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol && self.checked > 0
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Uniform on [-2, 2].
pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-2.0..2.0))
}

/// Records `f` and contracts its output with fixed random weights, so the
/// upstream gradient is not uniform.
fn weighted_loss(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random(tape.shape(out), seed ^ 0x5eed));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn eval_inputs(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let loss = weighted_loss(&mut tape, out, seed).expect("loss");
    tape.value(loss).item()
}

/// Checks the gradient of `f` with respect to every element of every input.
pub fn check(name: &str, inputs: &[Tensor<f64>], tol: f64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> GradReport {
    let seed = name.bytes().fold(17u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let loss = weighted_loss(&mut tape, out, seed).expect("loss");
    let grads = tape.backward(loss).expect("backward");

    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("leaf gradient").data().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval_inputs(&plus, &f, seed) - eval_inputs(&minus, &f, seed)) / (2.0 * H);
            max_rel_err = max_rel_err.max(rel_err(a, numeric));
            checked += 1;
        }
    }
    GradReport {
        name: name.to_string(),
        max_rel_err,
        tol,
        checked,
    }
}

/// Checks gradients with respect to every parameter in `store`.
pub fn check_params(
    name: &str,
    store: &ParamStore<f64>,
    tol: f64,
    f: impl Fn(&mut Tape<f64>, &Binding, &ParamStore<f64>) -> Result<Var>,
) -> GradReport {
    let loss_of = |s: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, |_| false);
        let out = f(&mut tape, &b, s).expect("forward");
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let b = store.bind(&mut tape, |_| true);
    let loss = f(&mut tape, &b, store).expect("forward");
    let grads = tape.backward(loss).expect("backward");

    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    let mut work = store.clone();
    for id in store.ids() {
        let analytic = grads.get(b.var(id)).expect("param gradient").data().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + H;
            let up = loss_of(&work);
            work.get_mut(id).data_mut()[j] = orig - H;
            let down = loss_of(&work);
            work.get_mut(id).data_mut()[j] = orig;
            max_rel_err = max_rel_err.max(rel_err(a, (up - down) / (2.0 * H)));
            checked += 1;
        }
    }
    GradReport {
        name: name.to_string(),
        max_rel_err,
        tol,
        checked,
    }
}

pub fn op_suite() -> Vec<GradReport> {
    let r = random;
    let positive = |shape: &[usize], seed| r(shape, seed).map(|v| 0.5 + v.abs());
    vec![
        check("add", &[r(&[2, 3], 1), r(&[2, 3], 2)], OP_TOL, |t, v| t.add(v[0], v[1])),
        check("add_broadcast_row", &[r(&[2, 3, 4], 3), r(&[4], 4)], OP_TOL, |t, v| {
            t.add(v[0], v[1])
        }),
        check("add_broadcast_both", &[r(&[2, 1, 4], 5), r(&[3, 1], 6)], OP_TOL, |t, v| {
            t.add(v[0], v[1])
        }),
        check("sub_broadcast", &[r(&[3, 4], 7), r(&[3, 1], 8)], OP_TOL, |t, v| {
            t.sub(v[0], v[1])
        }),
        check("mul", &[r(&[2, 5], 9), r(&[2, 5], 10)], OP_TOL, |t, v| t.mul(v[0], v[1])),
        check("mul_broadcast", &[r(&[2, 3, 4], 11), r(&[1, 3, 1], 12)], OP_TOL, |t, v| {
            t.mul(v[0], v[1])
        }),
        check("scale", &[r(&[4, 3], 13)], OP_TOL, |t, v| t.scale(v[0], -1.7)),
        check("powf", &[positive(&[6], 14)], OP_TOL, |t, v| t.powf(v[0], 1.5)),
        check("powf_square", &[r(&[6], 15)], OP_TOL, |t, v| t.powf(v[0], 2.0)),
        check("gelu", &[r(&[3, 4], 16).map(|v| 3.0 * v)], OP_TOL, |t, v| t.gelu(v[0])),
        check(
            "gelu_fixed_points",
            &[Tensor::new([4], vec![-2.0, -0.5, 0.5, 2.0]).unwrap()],
            OP_TOL,
            |t, v| t.gelu(v[0]),
        ),
        check("matmul", &[r(&[3, 4], 17), r(&[4, 5], 18)], OP_TOL, |t, v| {
            t.matmul(v[0], v[1])
        }),
        check(
            "matmul_batch_by_matrix",
            &[r(&[2, 3, 4], 19), r(&[4, 2], 20)],
            OP_TOL,
            |t, v| t.matmul(v[0], v[1]),
        ),
        check(
            "matmul_batched",
            &[r(&[2, 2, 3, 4], 21), r(&[2, 2, 4, 3], 22)],
            OP_TOL,
            |t, v| t.matmul(v[0], v[1]),
        ),
        check(
            "matmul_broadcast_batch",
            &[r(&[2, 3, 4], 23), r(&[1, 4, 2], 24)],
            OP_TOL,
            |t, v| t.matmul(v[0], v[1]),
        ),
        check("softmax", &[r(&[2, 3, 5], 25).map(|v| 2.0 * v)], OP_TOL, |t, v| {
            t.softmax(v[0])
        }),
        check(
            "layer_norm",
            &[r(&[2, 3, 6], 26), r(&[6], 27), r(&[6], 28)],
            OP_TOL,
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6),
        ),
        check("mse", &[r(&[2, 4], 29), r(&[2, 4], 30)], OP_TOL, |t, v| t.mse(v[0], v[1])),
        check("sum", &[r(&[3, 3], 31)], OP_TOL, |t, v| t.sum(v[0])),
        check("mean", &[r(&[3, 3], 32)], OP_TOL, |t, v| t.mean(v[0])),
        check("mean_axis_0", &[r(&[3, 2, 4], 33)], OP_TOL, |t, v| t.mean_axis(v[0], 0)),
        check("mean_axis_1", &[r(&[3, 2, 4], 34)], OP_TOL, |t, v| t.mean_axis(v[0], 1)),
        check("mean_axis_2", &[r(&[3, 2, 4], 35)], OP_TOL, |t, v| t.mean_axis(v[0], 2)),
        check("reshape", &[r(&[2, 6], 36)], OP_TOL, |t, v| t.reshape(v[0], &[3, 4])),
        check("permute", &[r(&[2, 3, 4], 37)], OP_TOL, |t, v| t.permute(v[0], &[2, 0, 1])),
        check("narrow", &[r(&[3, 5, 2], 38)], OP_TOL, |t, v| t.narrow(v[0], 1, 1, 3)),
        check("cross_entropy", &[r(&[4, 3], 39).map(|v| 2.0 * v)], OP_TOL, |t, v| {
            t.cross_entropy(v[0], &[0, 2, 1, 2])
        }),
        check("fan_out", &[r(&[2, 3], 40)], OP_TOL, |t, v| {
            let a = t.mul(v[0], v[0])?;
            let b = t.gelu(v[0])?;
            let c = t.add(a, b)?;
            t.add(c, v[0])
        }),
        check("unpatchify", &[r(&[2, 4, 8], 41)], OP_TOL, |t, v| {
            let grid = PatchGrid::new(4, 4, 2, 2)?;
            unpatchify_var(t, v[0], &grid)
        }),
        linear_layer(),
        attention_block(),
    ]
}

fn linear_layer() -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 5, 3, &mut rng).unwrap();
    store.iter_mut().for_each(|(_, t)| *t = t.map(|v| v * 50.0 + 0.1));
    let x = random(&[4, 5], 43);
    check_params("linear", &store, OP_TOL, |t, b, _| {
        let xv = t.constant(x.clone());
        let y = lin.forward(t, b, xv)?;
        let y = t.gelu(y)?;
        t.mean(y)
    })
}

fn attention_block() -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut store = ParamStore::new();
    let blk = blocks(&mut store, "blk", 1, 8, 2, &mut rng).unwrap();
    perturb_params(&mut store, 45);
    let x = random(&[2, 3, 8], 46);
    check_params("attention_block", &store, OP_TOL, |t, b, _| {
        let xv = t.constant(x.clone());
        let y = blk[0].forward(t, b, xv)?;
        let w = t.constant(random(&[2, 3, 8], 47));
        let y = t.mul(y, w)?;
        t.sum(y)
    })
}

/// Spreads parameters away from their initial values (zero biases, unit
/// gains) so every path carries a gradient.
pub fn perturb_params(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

/// Two pre-norm blocks plus a final norm and linear readout, gradients
/// with respect to every parameter and to the input tokens.
pub fn transformer_check() -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut store = ParamStore::new();
    let blks = blocks(&mut store, "tf", 2, 8, 2, &mut rng).unwrap();
    let norm = LayerNorm::new(&mut store, "tf.norm", 8).unwrap();
    let head = Linear::new(&mut store, "tf.head", 8, 3, &mut rng).unwrap();
    perturb_params(&mut store, 51);
    let x = random(&[2, 4, 8], 52);
    let targets = [0usize, 2];
    let forward = |t: &mut Tape<f64>, b: &Binding, xv: Var| -> Result<Var> {
        let mut h = xv;
        for blk in &blks {
            h = blk.forward(t, b, h)?;
        }
        let h = norm.forward(t, b, h)?;
        let pooled = t.mean_axis(h, 1)?;
        let logits = head.forward(t, b, pooled)?;
        t.cross_entropy(logits, &targets)
    };
    let params = check_params("transformer_2_block_params", &store, END_TO_END_TOL, |t, b, _| {
        let xv = t.constant(x.clone());
        forward(t, b, xv)
    });
    let inputs = check(
        "transformer_2_block_input",
        std::slice::from_ref(&x),
        END_TO_END_TOL,
        |t, v| {
            let b = store.bind(t, |_| false);
            forward(t, &b, v[0])
        },
    );
    vec![params, inputs]
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_h: 8,
        image_w: 8,
        channels: 1,
        patch_size: 4,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        probe_depth: 1,
    }
}

/// Full dual-reconstruction loss and the probe head, end to end.
pub fn model_checks() -> Vec<GradReport> {
    let cfg = tiny_config();
    let mut model = Autoencoder::<f64>::new(cfg.clone(), 60).unwrap();
    perturb_params(model.params_mut(), 61);
    let clean = random(&[2, 1, 8, 8], 62).map(|v| 0.5 + 0.5 * v);
    let synthetic = clean.map(|v| (v * 0.7 + 0.1).clamp(0.0, 1.0));
    let ae = check_params("autoencoder_loss", model.params(), END_TO_END_TOL, |t, b, _| {
        Ok(model.loss_var(t, b, &clean, &synthetic)?.total)
    });

    let mut probe = ProbeClassifier::<f64>::new(cfg, 3, 63).unwrap();
    probe.set_encoder_loaded();
    perturb_params(probe.params_mut(), 64);
    let head = check_params("probe_head", probe.params(), END_TO_END_TOL, |t, b, _| {
        let logits = probe.forward_var(t, b, &clean)?;
        t.cross_entropy(logits, &[1, 2])
    });
    vec![ae, head]
}

/// Every check in the suite.
pub fn full_suite() -> Vec<GradReport> {
    let mut all = op_suite();
    all.extend(transformer_check());
    all.extend(model_checks());
    all
}
