//! Central finite-difference gradient checks shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repcount::autodiff::{Tape, Tensor, Var};
use repcount::matcher::TargetSet;
use repcount::objective::total_loss;
use repcount::synth::generate_sample;
use repcount::{GeneratorConfig, LossWeights, ModelConfig, QueryModel, Result};

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute gap when both are tiny.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

pub fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random tensor whose entries keep at least `gap` away from zero.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

type OpFn<'a> = dyn Fn(&Tape, &[Var]) -> Result<Var> + 'a;

/// Largest relative error over all inputs of `f`, reduced to a scalar through
/// a fixed random projection of its output.
pub fn check_op(inputs: &[Tensor], f: &OpFn<'_>) -> f64 {
    let eval = |vals: &[Tensor]| -> (f64, Vec<Tensor>) {
        let tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars).unwrap();
        let shape = tape.shape(out);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w = tape.constant(random(&shape, -1.0, 1.0, &mut rng));
        let loss = tape.sum(tape.mul(out, w).unwrap()).unwrap();
        let value = tape.value(loss).item();
        tape.backward(loss).unwrap();
        let grads = vars
            .iter()
            .zip(vals)
            .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (value, grads)
    };
    let (_, analytic) = eval(inputs);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            *slot = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
        }
        worst = worst.max(rel_err(analytic[i].data(), &numeric));
    }
    worst
}

/// Relative error of every differentiable tape operation.
pub fn op_suite() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let r = |shape: &[usize], rng: &mut ChaCha8Rng| random(shape, -1.0, 1.0, rng);
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor>, f: &OpFn<'_>| out.push((name, check_op(&inputs, f)));

    let (a34, b45) = (r(&[3, 4], &mut rng), r(&[4, 5], &mut rng));
    run("matmul", vec![a34.clone(), b45], &|t, v| t.matmul(v[0], v[1]));
    run("transpose", vec![a34.clone()], &|t, v| t.transpose(v[0]));
    run("add_row", vec![a34.clone(), r(&[4], &mut rng)], &|t, v| t.add_row(v[0], v[1]));
    let b34 = r(&[3, 4], &mut rng);
    run("add", vec![a34.clone(), b34.clone()], &|t, v| t.add(v[0], v[1]));
    run("sub", vec![a34.clone(), b34.clone()], &|t, v| t.sub(v[0], v[1]));
    run("mul", vec![a34.clone(), b34.clone()], &|t, v| t.mul(v[0], v[1]));
    run("div", vec![a34.clone(), away_from_zero(&[3, 4], 0.3, &mut rng)], &|t, v| t.div(v[0], v[1]));
    let shifted = {
        let mut s = a34.clone();
        for (x, y) in s.data_mut().iter_mut().zip(b34.data()) {
            if (*x - y).abs() < 0.1 {
                *x += 0.3;
            }
        }
        s
    };
    run("minimum", vec![shifted.clone(), b34.clone()], &|t, v| t.minimum(v[0], v[1]));
    run("maximum", vec![shifted, b34], &|t, v| t.maximum(v[0], v[1]));
    run("scale", vec![a34.clone()], &|t, v| t.scale(v[0], -2.5));
    run("add_scalar", vec![a34.clone()], &|t, v| t.add_scalar(v[0], 0.7));
    run("gelu", vec![r(&[3, 4], &mut rng)], &|t, v| t.gelu(v[0]));
    let kinked = away_from_zero(&[3, 4], 0.05, &mut rng);
    run("relu", vec![kinked.clone()], &|t, v| t.relu(v[0]));
    run("abs", vec![kinked.clone()], &|t, v| t.abs(v[0]));
    run("exp", vec![a34.clone()], &|t, v| t.exp(v[0]));
    run("log", vec![random(&[3, 4], 0.2, 2.0, &mut rng)], &|t, v| t.log(v[0]));
    run("sigmoid", vec![r(&[3, 4], &mut rng)], &|t, v| t.sigmoid(v[0]));
    let clampable = {
        let mut s = kinked.clone();
        for x in s.data_mut() {
            if (x.abs() - 0.5).abs() < 0.05 {
                *x *= 0.8;
            }
        }
        s
    };
    run("clamp", vec![clampable], &|t, v| t.clamp(v[0], -0.5, 0.5));
    run("softmax_rows", vec![r(&[3, 4], &mut rng)], &|t, v| t.softmax(v[0], 1));
    run("softmax_cols", vec![r(&[3, 4], &mut rng)], &|t, v| t.softmax(v[0], 0));
    run(
        "layer_norm",
        vec![r(&[3, 5], &mut rng), r(&[5], &mut rng), r(&[5], &mut rng)],
        &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
    );
    run("sum", vec![a34.clone()], &|t, v| t.sum(v[0]));
    run("sum_rows", vec![a34.clone()], &|t, v| t.sum_rows(v[0]));
    run("gather", vec![a34.clone()], &|t, v| t.gather(v[0], &[0, 5, 5, 11]));
    run("column", vec![a34.clone()], &|t, v| t.column(v[0], 2));
    run("gather_rows", vec![a34.clone()], &|t, v| t.gather_rows(v[0], &[2, 0, 2]));
    run("normalize_rows", vec![away_from_zero(&[3, 4], 0.2, &mut rng)], &|t, v| t.normalize_rows(v[0]));

    let (q, k, val) = (r(&[7, 4], &mut rng), r(&[7, 4], &mut rng), r(&[7, 4], &mut rng));
    for (name, window) in [("attention_dense", None), ("attention_windowed", Some(2))] {
        run(name, vec![q.clone(), k.clone()], &move |t, v| t.attention_probs(v[0], v[1], 2, window));
        let apply_name = if window.is_some() { "attention_apply_windowed" } else { "attention_apply_dense" };
        run(apply_name, vec![q.clone(), k.clone(), val.clone()], &move |t, v| {
            let p = t.attention_probs(v[0], v[1], 2, window)?;
            t.attention_apply(p, v[2], window)
        });
    }
    let kc = r(&[5, 4], &mut rng);
    let vc = r(&[5, 4], &mut rng);
    run("attention_cross", vec![r(&[3, 4], &mut rng), kc, vc], &|t, v| {
        let p = t.attention_probs(v[0], v[1], 2, None)?;
        t.attention_apply(p, v[2], None)
    });
    out
}

/// Model with fewer than 5k parameters, 4 queries and 32 frames.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        seq_len: 32,
        input_dim: 4,
        width: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 2,
        queries: 4,
        window: 4,
        ffn_dim: 16,
        head_hidden: 8,
        ..ModelConfig::desk()
    }
}

pub fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        seq_len: 32,
        input_dim: 4,
        count_range: [2, 3],
        period_range: [6, 10],
        ..GeneratorConfig::default()
    }
}

/// `(parameter count, worst per-tensor relative error)` of the total loss.
pub fn total_loss_gradcheck(cfg: &ModelConfig, seed: u64) -> (usize, f64) {
    let sample = generate_sample(&tiny_generator(), seed).unwrap();
    let features = sample.features_tensor();
    let cycles = TargetSet::new(sample.cycles.clone(), cfg.queries).unwrap();
    let weights = LossWeights::default();
    let mut model = QueryModel::new(cfg.clone(), seed).unwrap();

    let loss_of = |m: &QueryModel| -> f64 {
        let tape = Tape::new();
        let p = m.params().bind_frozen(&tape);
        let out = m.forward(&tape, &p, &features).unwrap();
        let (loss, _) = total_loss(&tape, &cycles, &out, &weights, cfg.alpha, cfg.use_icl).unwrap();
        let v = tape.value(loss).item();
        v
    };

    let tape = Tape::new();
    let p = model.params().bind(&tape);
    let out = model.forward(&tape, &p, &features).unwrap();
    let (loss, _) = total_loss(&tape, &cycles, &out, &weights, cfg.alpha, cfg.use_icl).unwrap();
    tape.backward(loss).unwrap();
    let analytic = p.grads(&tape, model.params());
    drop(tape);

    let h = 1e-6;
    let ids: Vec<_> = model.params().ids().collect();
    let mut worst: f64 = 0.0;
    for (id, grad) in ids.into_iter().zip(&analytic) {
        let n = model.params().get(id).len();
        let mut numeric = vec![0.0; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = model.params().get(id).data()[j];
            model.params_mut().get_mut(id).data_mut()[j] = orig + h;
            let plus = loss_of(&model);
            model.params_mut().get_mut(id).data_mut()[j] = orig - h;
            let minus = loss_of(&model);
            model.params_mut().get_mut(id).data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        worst = worst.max(rel_err(grad.data(), &numeric));
    }
    (model.num_parameters(), worst)
}
