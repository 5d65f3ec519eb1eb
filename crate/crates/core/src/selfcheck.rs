//! Fast invariant suite run by `copanet selfcheck`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::copa::{compose_winners, CoPaUnit, CoPaUnitSpec, PathwayKind, PathwaySpec};
use crate::data::{Normalizer, IMAGE_BYTES};
use crate::error::{Error, Result};
use crate::model::{collect_grads, ForwardOptions, Model, NetworkConfig, ParamKind, ParamStore, Session};
use crate::tensor::{Fault, Tape, Tensor, Var};
use crate::trainer::{he_init, sgd_step, Checkpoint, SgdConfig};

/// Largest accepted relative error of analytic against central-difference
/// gradients.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const GRADIENT_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so that gradients that are zero
/// up to rounding do not count as mismatches.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default)]
pub struct Options {
    /// Defect injected into every tape the checks create.
    pub fault: Option<Fault>,
}

impl Options {
    fn tape(&self) -> Tape<f64> {
        let mut t = Tape::new();
        if let Some(f) = self.fault {
            t.inject_fault(f);
        }
        t
    }
}

pub struct Invariant {
    pub module: &'static str,
    pub name: &'static str,
    run: fn(&Options) -> std::result::Result<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub module: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

pub fn registry() -> Vec<Invariant> {
    vec![
        Invariant { module: "tensor_engine", name: "gradient_conv2d", run: check_grad_conv },
        Invariant { module: "tensor_engine", name: "gradient_batch_norm", run: check_grad_bn },
        Invariant { module: "tensor_engine", name: "gradient_pool_concat_linear", run: check_grad_head },
        Invariant { module: "copa_unit", name: "gradient_competitive_stack", run: check_grad_stack },
        Invariant { module: "copa_unit", name: "routing_conservation", run: check_routing },
        Invariant { module: "copa_unit", name: "single_pathway_equivalence", run: check_k1 },
        Invariant { module: "copa_unit", name: "winner_composition", run: check_composition },
        Invariant { module: "trainer", name: "zero_lr_step_identity", run: check_zero_lr },
        Invariant { module: "trainer", name: "checkpoint_round_trip", run: check_checkpoint },
        Invariant { module: "data", name: "normalization_round_trip", run: check_normalization },
    ]
}

/// Runs every registered invariant once, in registry order.
pub fn run(opts: &Options) -> Vec<Outcome> {
    registry()
        .into_iter()
        .map(|inv| {
            let t = Instant::now();
            let result = (inv.run)(opts);
            let seconds = t.elapsed().as_secs_f64();
            let (passed, detail) = match result {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            Outcome {
                module: inv.module,
                name: inv.name,
                passed,
                detail,
                seconds,
            }
        })
        .collect()
}

type Eval<'a> = dyn Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<(Var, Vec<Option<Var>>)> + 'a;

/// Largest relative error between backward-pass gradients and central
/// differences of the scalar built by `eval`. At most `probes` elements per
/// input are perturbed, spread evenly.
pub fn gradient_check(
    inputs: &[Tensor<f64>],
    eval: &Eval<'_>,
    make_tape: &dyn Fn() -> Tape<f64>,
    probes: usize,
) -> Result<f64> {
    let mut tape = make_tape();
    let (loss, vars) = eval(&mut tape, inputs)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|(x, v)| {
            v.and_then(|v| tape.grad(v).cloned())
                .unwrap_or_else(|| Tensor::zeros(x.shape()))
        })
        .collect();
    let value = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = make_tape();
        let (l, _) = eval(&mut t, xs)?;
        Ok(t.value(l).data()[0])
    };
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let n = x.numel();
        let stride = n.div_ceil(probes.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = x.data()[j];
            xs[i].data_mut()[j] = orig + GRADIENT_STEP;
            let up = value(&xs)?;
            xs[i].data_mut()[j] = orig - GRADIENT_STEP;
            let down = value(&xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * GRADIENT_STEP);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape matches")
}

/// He-initialized weights plus non-trivial batch-norm affine parameters and
/// running statistics.
pub fn randomize_params(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    he_init(store, rng);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let kind = store.spec(id).kind;
        for v in store.get_mut(id).data_mut() {
            match kind {
                ParamKind::BnGamma => *v = rng.random_range(0.5..1.5),
                ParamKind::BnBeta | ParamKind::LinearBias => *v = rng.random_range(-0.3..0.3),
                _ => {}
            }
        }
    }
    for bn in store.bn_states_mut() {
        for m in bn.running_mean.iter_mut() {
            *m = rng.random_range(-0.5..0.5);
        }
        for v in bn.running_var.iter_mut() {
            *v = rng.random_range(0.5..2.0);
        }
    }
}

fn verdict(what: &str, err: f64) -> std::result::Result<String, String> {
    if err < GRADIENT_TOLERANCE {
        Ok(format!("{what}: max relative error {err:.2e}"))
    } else {
        Err(format!("{what}: max relative error {err:.2e} exceeds {GRADIENT_TOLERANCE:e}"))
    }
}

fn run_grad(opts: &Options, what: &str, inputs: &[Tensor<f64>], eval: &Eval<'_>) -> std::result::Result<String, String> {
    let err = gradient_check(inputs, eval, &|| opts.tape(), 40).map_err(|e| e.to_string())?;
    verdict(what, err)
}

fn check_grad_conv(opts: &Options) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = Vec::new();
    for &(k, stride) in &[(3usize, 1usize), (3, 2), (1, 1)] {
        let x = randn(&[2, 3, 5, 5], 1.0, &mut rng);
        let w = randn(&[4, 3, k, k], 0.5, &mut rng);
        let ho = (5 + 2 * (k / 2) - k) / stride + 1;
        let weights = randn(&[2, 4, ho, ho], 1.0, &mut rng);
        let eval = |t: &mut Tape<f64>, xs: &[Tensor<f64>]| {
            let a = t.variable(xs[0].clone());
            let b = t.variable(xs[1].clone());
            let y = t.conv2d(a, b, stride, k / 2)?;
            Ok((t.weighted_sum(y, &weights)?, vec![Some(a), Some(b)]))
        };
        worst.push(run_grad(opts, &format!("conv {k}x{k}/{stride}"), &[x, w], &eval)?);
    }
    Ok(worst.join("; "))
}

fn check_grad_bn(opts: &Options) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut out = Vec::new();
    for training in [true, false] {
        let x = randn(&[3, 4, 3, 3], 1.0, &mut rng);
        let g = randn(&[4], 1.0, &mut rng);
        let b = randn(&[4], 1.0, &mut rng);
        let weights = randn(&[3, 4, 3, 3], 1.0, &mut rng);
        let mut state = crate::tensor::BatchNormState::new(4);
        state.running_mean = vec![0.1, -0.2, 0.3, 0.0];
        state.running_var = vec![1.5, 0.7, 1.0, 2.0];
        let eval = |t: &mut Tape<f64>, xs: &[Tensor<f64>]| {
            let mut st = state.clone();
            let vx = t.variable(xs[0].clone());
            let vg = t.variable(xs[1].clone());
            let vb = t.variable(xs[2].clone());
            let y = t.batch_norm(vx, vg, vb, &mut st, training)?;
            Ok((t.weighted_sum(y, &weights)?, vec![Some(vx), Some(vg), Some(vb)]))
        };
        let mode = if training { "batch statistics" } else { "running statistics" };
        out.push(run_grad(opts, &format!("batch norm ({mode})"), &[x, g, b], &eval)?);
    }
    Ok(out.join("; "))
}

fn check_grad_head(opts: &Options) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = randn(&[2, 2, 4, 4], 1.0, &mut rng);
    let b = randn(&[2, 3, 4, 4], 1.0, &mut rng);
    let w = randn(&[5, 3], 1.0, &mut rng);
    let bias = randn(&[3], 1.0, &mut rng);
    let scale = randn(&[2, 5, 2, 2], 1.0, &mut rng);
    let eval = |t: &mut Tape<f64>, xs: &[Tensor<f64>]| {
        let va = t.variable(xs[0].clone());
        let vb = t.variable(xs[1].clone());
        let vw = t.variable(xs[2].clone());
        let vbias = t.variable(xs[3].clone());
        let c = t.concat_channels(&[va, vb])?;
        let p = t.avg_pool2d(c, 2, 2)?;
        let d = t.dropout(p, 0.3, false, &mut crate::model::NoRng)?;
        let s = t.weighted_sum(d, &scale)?;
        let r = t.relu(d);
        let g = t.global_avg_pool(r)?;
        let logits = t.linear(g, vw, vbias)?;
        let ce = t.softmax_cross_entropy(logits, &[2, 0])?;
        let half = t.scale(s, 0.5);
        let total = t.add(ce, half)?;
        Ok((t.sum(total), vec![Some(va), Some(vb), Some(vw), Some(vbias)]))
    };
    run_grad(opts, "concat/pool/dropout/relu/linear/cross-entropy", &[a, b, w, bias], &eval)
}

/// Three identity-shortcut two-pathway units on a small input.
pub fn small_stack(store: &mut ParamStore<f64>, units: usize, pathways: usize, kind: PathwayKind) -> Result<Vec<CoPaUnit>> {
    let spec = CoPaUnitSpec {
        pathways,
        pathway: PathwaySpec {
            kind,
            in_channels: 4,
            mid_channels: 3,
            out_channels: 4,
            stride: 1,
        },
    };
    (0..units)
        .map(|u| CoPaUnit::register(spec, store, &format!("unit{u}")))
        .collect()
}

fn check_grad_stack(opts: &Options) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let units = small_stack(&mut store, 3, 2, PathwayKind::Bottleneck).map_err(|e| e.to_string())?;
    randomize_params(&mut store, &mut rng);
    let x = randn(&[2, 4, 4, 4], 1.0, &mut rng);
    let weights = randn(&[2, 4, 4, 4], 1.0, &mut rng);
    let mut inputs = vec![x];
    inputs.extend(store.values().iter().cloned());
    let eval = |t: &mut Tape<f64>, xs: &[Tensor<f64>]| {
        let mut local = store.clone();
        for (id, v) in local.ids().collect::<Vec<_>>().into_iter().zip(&xs[1..]) {
            *local.get_mut(id) = v.clone();
        }
        let vx = t.variable(xs[0].clone());
        let mut s = Session::new(t, &mut local, true, true);
        let mut h = vx;
        for u in &units {
            h = u.forward(&mut s, h, false)?.0;
        }
        let bindings = s.into_bindings();
        let loss = t.weighted_sum(h, &weights)?;
        let mut vars = vec![Some(vx)];
        vars.extend(bindings);
        Ok((loss, vars))
    };
    run_grad(opts, "3-unit two-pathway stack", &inputs, &eval)
}

fn check_routing(opts: &Options) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for trial in 0..200 {
        let k = rng.random_range(2..=4);
        let n = rng.random_range(1..=24);
        let candidates: Vec<Tensor<f64>> = (0..k)
            .map(|_| {
                // Small integer values make ties common.
                let data = (0..n).map(|_| rng.random_range(-2..=2) as f64).collect();
                Tensor::new(&[n], data).expect("shape matches")
            })
            .collect();
        let upstream: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut t = opts.tape();
        let vars: Vec<Var> = candidates.iter().map(|c| t.variable(c.clone())).collect();
        let (y, mask) = t.max_k(&vars, true).map_err(|e| e.to_string())?;
        let mask = mask.ok_or("no routing mask captured")?;
        let w = Tensor::new(&[n], upstream.clone()).expect("shape matches");
        let loss = t.weighted_sum(y, &w).map_err(|e| e.to_string())?;
        t.backward(loss).map_err(|e| e.to_string())?;
        for i in 0..n {
            let column: Vec<f64> = candidates.iter().map(|c| c.data()[i]).collect();
            let best = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = column.iter().position(|&v| v == best).expect("non-empty");
            if t.value(y).data()[i] != best {
                return Err(format!("trial {trial}: output is not the elementwise max"));
            }
            if mask.winners[i] as usize != first {
                return Err(format!("trial {trial}: tie not resolved to the lowest index"));
            }
            let total: f64 = vars.iter().map(|&v| t.grad(v).map_or(0.0, |g| g.data()[i])).sum();
            if total != upstream[i] {
                return Err(format!(
                    "trial {trial}: pathway gradients sum to {total}, upstream is {}",
                    upstream[i]
                ));
            }
        }
    }
    Ok("200 random merges: max, tie rule and gradient conservation hold".into())
}

fn tiny_config(k: usize) -> NetworkConfig {
    NetworkConfig {
        depth: 11,
        k,
        widths: [4, 6, 8],
        mids: [2, 3, 4],
        num_classes: 3,
        dropout_rate: 0.2,
        input_size: 8,
        ..NetworkConfig::default()
    }
}

fn tiny_input(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    randn(&[n, 3, 8, 8], 1.0, rng)
}

fn check_k1(_opts: &Options) -> std::result::Result<String, String> {
    let run = || -> Result<bool> {
        let cfg = tiny_config(1);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut copa: Model<f64> = Model::build(&cfg)?;
        randomize_params(&mut copa.params, &mut rng);
        let mut resnet: Model<f64> = Model::build_residual_baseline(&cfg)?;
        resnet.params.copy_from(&copa.params)?;
        for batch in 0..5 {
            let x = tiny_input(&mut rng, 3);
            let labels = [0, 1, 2];
            let mut outs = Vec::new();
            for model in [&mut copa, &mut resnet] {
                let mut t = Tape::new();
                let mut drop_rng = ChaCha8Rng::seed_from_u64(batch);
                let pass = model.forward(&mut t, x.clone(), ForwardOptions::train(), &mut drop_rng)?;
                let loss = t.softmax_cross_entropy(pass.logits, &labels)?;
                let logits = t.value(pass.logits).clone();
                t.backward(loss)?;
                outs.push((logits, collect_grads(&model.params, &t, &pass.bindings)));
            }
            if outs[0] != outs[1] {
                return Ok(false);
            }
        }
        Ok(copa.params.bn_states() == resnet.params.bn_states())
    };
    match run() {
        Ok(true) => Ok("5 batches: logits, gradients and running statistics bit-identical".into()),
        Ok(false) => Err("single-pathway network diverges from the residual baseline".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn check_composition(opts: &Options) -> std::result::Result<String, String> {
    let run = || -> Result<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new();
        let units = small_stack(&mut store, 3, 2, PathwayKind::Bottleneck)?;
        randomize_params(&mut store, &mut rng);
        let mut mismatches = 0;
        for _ in 0..20 {
            let x = randn(&[2, 4, 4, 4], 1.0, &mut rng);
            let mut t = opts.tape();
            let mut s = Session::new(&mut t, &mut store, false, false);
            let mut h = s.tape.constant(x.clone());
            let mut masks = Vec::new();
            for (i, u) in units.iter().enumerate() {
                let (y, m) = u.forward(&mut s, h, true)?;
                let mut m = m.ok_or_else(|| Error::usage("no mask"))?;
                m.unit = i;
                masks.push(m);
                h = y;
            }
            let stacked = s.tape.value(h).clone();
            let composed = compose_winners(&mut s, &x, &units, &masks)?;
            if composed != stacked {
                mismatches += 1;
            }
        }
        Ok(mismatches)
    };
    match run() {
        Ok(0) => Ok("20 inputs: winner composition matches the stacked output bit for bit".into()),
        Ok(n) => Err(format!("{n} of 20 inputs differ from the stacked output")),
        Err(e) => Err(e.to_string()),
    }
}

fn check_zero_lr(_opts: &Options) -> std::result::Result<String, String> {
    let run = || -> Result<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut model: Model<f64> = Model::build(&tiny_config(2))?;
        randomize_params(&mut model.params, &mut rng);
        let before = model.params.values().to_vec();
        let mut t = Tape::new();
        let pass = model.forward(&mut t, tiny_input(&mut rng, 2), ForwardOptions::train(), &mut rng)?;
        let loss = t.softmax_cross_entropy(pass.logits, &[0, 1])?;
        t.backward(loss)?;
        let grads = collect_grads(&model.params, &t, &pass.bindings);
        let mut velocity: Vec<Tensor<f64>> = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        sgd_step(&mut model.params, &grads, &mut velocity, SgdConfig { lr: 0.0, momentum: 0.9, weight_decay: 1e-4 })?;
        Ok(model.params.values() == before.as_slice())
    };
    match run() {
        Ok(true) => Ok("parameters unchanged".into()),
        Ok(false) => Err("a step with learning rate 0 changed parameters".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn check_checkpoint(_opts: &Options) -> std::result::Result<String, String> {
    let run = || -> Result<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut model: Model<f64> = Model::build(&tiny_config(2))?;
        randomize_params(&mut model.params, &mut rng);
        let x = tiny_input(&mut rng, 4);
        let before = model.predict(x.clone())?;
        let bytes = Checkpoint::capture(&model, None).to_bytes()?;
        let mut restored: Model<f64> = Checkpoint::from_bytes(&bytes)?.restore_model()?;
        Ok(restored.predict(x)? == before)
    };
    match run() {
        Ok(true) => Ok("eval logits bit-identical after save and load".into()),
        Ok(false) => Err("restored model produces different logits".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn check_normalization(_opts: &Options) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let pixels: Vec<u8> = (0..IMAGE_BYTES).map(|_| rng.random()).collect();
    let norm = Normalizer {
        mean: [125.3, 123.0, 113.9],
        std: [63.0, 62.1, 66.7],
    };
    let back = norm.denormalize(&norm.normalize::<f64>(&pixels));
    let worst = pixels
        .iter()
        .zip(&back)
        .map(|(&p, &b)| (p as f64 - b).abs())
        .fold(0.0, f64::max);
    if worst < 1e-6 {
        Ok(format!("max round-trip deviation {worst:.1e}"))
    } else {
        Err(format!("round-trip deviation {worst:e} exceeds 1e-6"))
    }
}
