//! Acceptance criteria, one line each. Pass criterion numbers as arguments
//! to run a subset: `cargo test --test acceptance -- 1 3`.

use std::cell::OnceCell;
use std::fs;
use std::path::Path;

use act2goal::flow::euler_integrate;
use act2goal::harness::{ablate_msth, evaluate, run_cli, train_offline, EvalOptions, RunConfig};
use act2goal::layers::Linear;
use act2goal::msth::{compute_schedule, distal_offsets_with_base, MsthParams};
use act2goal::onlinehpr::{adapt, collect, run_improvement, RoundConfig, RoundReport, Strategy};
use act2goal::rng;
use act2goal::simenv::{EnvConfig, Variant};
use act2goal::tensorcore::{finite_diff_check, finite_diff_check_params, Adam, Graph, ParamSet, Tensor, Trainable, Var};
use act2goal::trainkit::{
    generate_demos, loss_a, loss_a_regression, loss_v, train_stage1, Batch, BundleSpec, Dataset, LatentSet,
    ModelBundle, Noise, TrainConfig,
};
use act2goal::Error;
use act2goal_acceptance::{run, selected, Verdict};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1 --------------------------------------------------------------------------

fn random_params(r: &mut impl Rng) -> MsthParams {
    loop {
        let stride = r.random_range(1..=4);
        let proximal = stride * r.random_range(1..=10);
        let distal = r.random_range(1..=8);
        let horizon = proximal + distal + r.random_range(0..=200);
        let p = MsthParams::new(horizon, proximal, stride, distal);
        if p.validate().is_ok() {
            return p;
        }
    }
}

fn msth_formula() -> Check {
    let example = compute_schedule(&MsthParams::new(100, 10, 1, 3)).map_err(err)?;
    let example_ok = example.distal_action_offsets() == [55, 81, 100];
    let mut r = rng::stream(2024);
    let (mut structural, mut base_dep, mut gap_bad) = (0, 0, 0);
    let mut counterexample = None;
    for _ in 0..1000 {
        let p = random_params(&mut r);
        let d = compute_schedule(&p).map_err(err)?.distal_action_offsets().to_vec();
        let monotone = d.windows(2).all(|w| w[0] < w[1]);
        if *d.last().unwrap() != p.horizon || !monotone || d.iter().any(|&x| x <= p.proximal) {
            structural += 1;
        }
        if [2.0, 10.0].iter().any(|&b| distal_offsets_with_base(&p, b) != d) {
            base_dep += 1;
        }
        let gaps: Vec<usize> = d.windows(2).map(|w| w[1] - w[0]).collect();
        if gaps.windows(2).any(|g| g[1] > g[0]) {
            gap_bad += 1;
            counterexample.get_or_insert((p, d.clone()));
        }
    }
    let mut detail = format!(
        "K=100,P=10,M=3 -> {:?}; over 1000 sets: {structural} structural, {base_dep} base-dependent, {gap_bad} with increasing floored gaps",
        example.distal_action_offsets()
    );
    if let Some((p, d)) = counterexample {
        detail += &format!(
            " (e.g. K={},P={},M={} -> {d:?})",
            p.horizon, p.proximal, p.distal
        );
    }
    Ok((example_ok && structural == 0 && base_dep == 0 && gap_bad == 0, detail))
}

// 2 --------------------------------------------------------------------------

type OpCase = (&'static str, Vec<Vec<usize>>, fn(&mut Graph<'_>, &[Var]) -> act2goal::Result<Var>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            Ok(g.mean_square(y))
        }),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            Ok(g.mean_square(y))
        }),
        ("add", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let y = g.add(v[0], v[1])?;
            Ok(g.mean_square(y))
        }),
        ("sub", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let y = g.sub(v[0], v[1])?;
            Ok(g.mean_square(y))
        }),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let y = g.mul(v[0], v[1])?;
            Ok(g.mean_square(y))
        }),
        ("scale", vec![vec![2, 3]], |g, v| {
            let y = g.scale(v[0], -1.7);
            Ok(g.mean_square(y))
        }),
        ("add_row", vec![vec![3, 4], vec![4]], |g, v| {
            let y = g.add_row(v[0], v[1])?;
            Ok(g.mean_square(y))
        }),
        ("mul_row", vec![vec![3, 4], vec![4]], |g, v| {
            let y = g.mul_row(v[0], v[1])?;
            Ok(g.mean_square(y))
        }),
        ("tanh", vec![vec![3, 3]], |g, v| {
            let y = g.tanh_act(v[0]);
            Ok(g.mean_square(y))
        }),
        ("gelu", vec![vec![3, 3]], |g, v| {
            let y = g.gelu_act(v[0]);
            Ok(g.mean_square(y))
        }),
        ("layer_norm", vec![vec![3, 5]], |g, v| {
            let y = g.layer_norm(v[0], 1e-5)?;
            let w = g.scale(v[0], 0.3);
            let y = g.mul(y, w)?;
            Ok(g.mean(y))
        }),
        ("softmax", vec![vec![3, 4]], |g, v| {
            let y = g.softmax_lastdim(v[0]);
            let w = g.tanh_act(v[0]);
            let y = g.mul(y, w)?;
            Ok(g.sum(y))
        }),
        ("attention", vec![vec![3, 4], vec![5, 4], vec![5, 4]], |g, v| {
            let y = g.attention(v[0], v[1], v[2])?;
            Ok(g.mean_square(y))
        }),
        ("attention_grouped", vec![vec![4, 4], vec![6, 4], vec![6, 4]], |g, v| {
            let y = g.attention_grouped(v[0], v[1], v[2], 2, 2)?;
            Ok(g.mean_square(y))
        }),
        ("gather_rows", vec![vec![4, 3]], |g, v| {
            let y = g.gather_rows(v[0], vec![3, 0, 3, 1])?;
            Ok(g.mean_square(y))
        }),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |g, v| {
            let y = g.concat_rows(&[v[0], v[1]])?;
            Ok(g.mean_square(y))
        }),
        ("sum", vec![vec![2, 3]], |g, v| {
            let y = g.tanh_act(v[0]);
            Ok(g.sum(y))
        }),
        ("mean", vec![vec![2, 3]], |g, v| {
            let y = g.tanh_act(v[0]);
            Ok(g.mean(y))
        }),
        ("mse", vec![vec![2, 3], vec![2, 3]], |g, v| g.mse(v[0], v[1])),
    ]
}

fn tiny_spec(a_max: f64) -> BundleSpec {
    let mut s = BundleSpec::for_schedule(MsthParams::new(12, 4, 2, 2), a_max);
    s.wm.width = 8;
    s.wm.heads = 2;
    s.wm.mlp_hidden = 8;
    s.wm.d_z = 4;
    s.wm.time_dim = 4;
    s.ae.width = 4;
    s.ae.heads = 2;
    s.ae.mlp_hidden = 4;
    s.ae.time_dim = 4;
    s.ae.p_exec = 2;
    s
}

fn tiny_bundle(env: &EnvConfig, steps: usize) -> act2goal::Result<(Dataset, ModelBundle)> {
    let data = generate_demos(env, 3, 5)?;
    let tc = TrainConfig {
        steps,
        batch: 2,
        ..TrainConfig::default()
    };
    let (b, _) = train_stage1(&data, tiny_spec(env.a_max), &tc)?;
    Ok((data, b))
}

fn gradient_integrity() -> Check {
    let mut worst_op: (f64, &str) = (0.0, "");
    let mut r = rng::stream(7);
    for (name, shapes, f) in op_cases() {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rng::normal_tensor(&mut r, s)).collect();
        let e = finite_diff_check(f, &inputs, 1e-5).map_err(err)?;
        if e >= worst_op.0 {
            worst_op = (e, name);
        }
    }

    let env = EnvConfig::push();
    let (data, mut b) = tiny_bundle(&env, 1).map_err(err)?;
    b.attach_adapters(2, 3).map_err(err)?;
    // adapters start at zero; move them so their gradients are exercised
    let ids: Vec<_> = b.params.ids().collect();
    for &id in &ids {
        if b.params.name(id).contains(".lora_") {
            let t = rng::normal_tensor(&mut r, b.params.get(id).shape()).scale(0.1);
            b.params.set(id, t).map_err(err)?;
        }
    }
    let set = LatentSet::build(&b, &data).map_err(err)?;
    let ex: Vec<_> = (0..2).map(|i| set.example(&b, i)).collect::<Result<_, _>>().map_err(err)?;
    let batch = Batch::stack(&ex.iter().collect::<Vec<_>>()).map_err(err)?;
    let noise = Noise::sample(&mut r, &batch);
    let net_ids: Vec<_> = ids
        .iter()
        .copied()
        .filter(|&id| {
            let n = b.params.name(id);
            n.starts_with("wm.") || n.starts_with("ae.")
        })
        .filter(|&id| !b.params.name(id).starts_with("wm.encoder"))
        .collect();
    let joint = finite_diff_check_params(
        &b.params,
        &net_ids,
        |g| {
            let lv = loss_v(g, &b, &batch, &noise)?;
            let la = loss_a(g, &b, &batch, &noise)?;
            let la = g.scale(la, 0.1);
            g.add(lv, la)
        },
        1e-5,
    )
    .map_err(err)?;
    let regression = finite_diff_check_params(&b.params, &net_ids, |g| loss_a_regression(g, &b, &batch, &noise), 1e-5)
        .map_err(err)?;
    let worst = worst_op.0.max(joint).max(regression);
    Ok((
        worst < 1e-4,
        format!(
            "max rel err {worst:.2e} (ops {:.2e} at {}, joint loss {joint:.2e}, regression loss {regression:.2e}, {} parameter tensors)",
            worst_op.0,
            worst_op.1,
            net_ids.len()
        ),
    ))
}

// 3 --------------------------------------------------------------------------

fn euler_sampler() -> Check {
    let z0 = Tensor::vector(vec![0.3, -1.2, 2.5]);
    let c = Tensor::vector(vec![1.0, -0.25, 0.7]);
    let expect = z0.add(&c).map_err(err)?;
    let mut const_err: f64 = 0.0;
    for n in [1, 2, 3, 7, 10, 64, 1000] {
        let z = euler_integrate(z0.clone(), n, |_, _| Ok(c.clone())).map_err(err)?;
        for (a, b) in z.data().iter().zip(expect.data()) {
            const_err = const_err.max((a - b).abs());
        }
    }
    let z = euler_integrate(z0.clone(), 1000, |x, _| Ok(x.clone())).map_err(err)?;
    let mut lin_rel: f64 = 0.0;
    for (a, b) in z.data().iter().zip(z0.data()) {
        let e = std::f64::consts::E * b;
        lin_rel = lin_rel.max((a - e).abs() / e.abs());
    }
    Ok((
        const_err < 1e-12 && lin_rel < 2e-3,
        format!("constant field max err {const_err:.1e}; linear field N=1000 rel err {:.4}%", lin_rel * 100.0),
    ))
}

// 4 --------------------------------------------------------------------------

const MIX_MEANS: [[f64; 2]; 2] = [[-1.5, -1.0], [1.5, 1.0]];
const MIX_WEIGHT: f64 = 0.3;
const MIX_STD: f64 = 0.3;

fn mixture_sample(r: &mut impl Rng) -> [f64; 2] {
    let c = if r.random::<f64>() < MIX_WEIGHT { 0 } else { 1 };
    let (a, b): (f64, f64) = (r.sample(StandardNormal), r.sample(StandardNormal));
    [MIX_MEANS[c][0] + MIX_STD * a, MIX_MEANS[c][1] + MIX_STD * b]
}

struct FieldNet {
    layers: Vec<Linear>,
}

impl FieldNet {
    fn new(ps: &mut ParamSet, r: &mut ChaCha8Rng) -> Self {
        let dims = [3, 64, 64, 2];
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("field.{i}"), w[0], w[1], true, 1.0, r))
            .collect();
        FieldNet { layers }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> act2goal::Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.gelu_act(h);
            }
        }
        Ok(h)
    }

    fn velocity(&self, ps: &ParamSet, x: &Tensor, t: f64) -> act2goal::Result<Tensor> {
        let n = x.rows();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![x.at(i, 0), x.at(i, 1), t]).collect();
        let mut g = Graph::with_params(ps, Trainable::Nothing);
        let inp = g.leaf(Tensor::from_rows(&rows)?);
        let v = self.forward(&mut g, inp)?;
        Ok(g.value(v).clone())
    }
}

fn flow_transport() -> Check {
    let mut r = rng::stream(11);
    let mut ps = ParamSet::new();
    let net = FieldNet::new(&mut ps, &mut r);
    let mut opt = Adam::new(3e-3);
    let (steps, batch) = (2000, 128);
    for step in 0..steps {
        opt.lr = 3e-3 * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos()));
        let mut inp = Vec::with_capacity(batch);
        let mut tgt = Vec::with_capacity(batch);
        for _ in 0..batch {
            let x0 = rng::normal_tensor(&mut r, &[2]);
            let x1 = mixture_sample(&mut r);
            let t: f64 = r.random();
            let (a, b) = (x0.data()[0], x0.data()[1]);
            inp.push(vec![(1.0 - t) * a + t * x1[0], (1.0 - t) * b + t * x1[1], t]);
            tgt.push(vec![x1[0] - a, x1[1] - b]);
        }
        let grads = {
            let mut g = Graph::with_params(&ps, Trainable::All);
            let x = g.leaf(Tensor::from_rows(&inp).map_err(err)?);
            let v = net.forward(&mut g, x).map_err(err)?;
            let y = g.leaf(Tensor::from_rows(&tgt).map_err(err)?);
            let l = g.mse(v, y).map_err(err)?;
            g.backward(l).map_err(err)?.into_params()
        };
        opt.step(&mut ps, &grads).map_err(err)?;
    }
    let n = 5000;
    let z0 = rng::normal_tensor(&mut r, &[n, 2]);
    let x = euler_integrate(z0, 50, |x, t| net.velocity(&ps, x, t)).map_err(err)?;
    let mut mean = [0.0; 2];
    let mut first = 0usize;
    for i in 0..n {
        let p = [x.at(i, 0), x.at(i, 1)];
        mean[0] += p[0] / n as f64;
        mean[1] += p[1] / n as f64;
        let d = |m: [f64; 2]| (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2);
        if d(MIX_MEANS[0]) < d(MIX_MEANS[1]) {
            first += 1;
        }
    }
    let true_mean = [
        MIX_WEIGHT * MIX_MEANS[0][0] + (1.0 - MIX_WEIGHT) * MIX_MEANS[1][0],
        MIX_WEIGHT * MIX_MEANS[0][1] + (1.0 - MIX_WEIGHT) * MIX_MEANS[1][1],
    ];
    let mean_err = (mean[0] - true_mean[0]).abs().max((mean[1] - true_mean[1]).abs());
    let share = first as f64 / n as f64;
    let prop_err = (share - MIX_WEIGHT).abs();
    Ok((
        mean_err < 0.1 && prop_err < 0.1,
        format!(
            "mean ({:.3}, {:.3}) vs ({:.3}, {:.3}), err {mean_err:.3}; component share {share:.3} vs {MIX_WEIGHT}",
            mean[0], mean[1], true_mean[0], true_mean[1]
        ),
    ))
}

// 5 --------------------------------------------------------------------------

fn eval_opts(cfg: &RunConfig, episodes: usize) -> EvalOptions {
    EvalOptions {
        episodes,
        seed: rng::derive_named(cfg.seed, "eval"),
        max_cycles: cfg.eval_max_cycles,
        disturb: false,
    }
}

fn offline_pipeline(cfg: &RunConfig, bundle: &ModelBundle) -> Check {
    let s = evaluate(&cfg.env, bundle, &eval_opts(cfg, 50)).map_err(err)?;
    let rate = s.success_rate();
    Ok((
        rate >= 0.8 && cfg.demos == 500 && cfg.train.lambda == 0.1 && cfg.env.resolution == 16,
        format!(
            "ID success {rate:.2} ({}/50) after {} + {} steps on {} demos, lambda {}",
            s.successes(),
            cfg.budget.stage1_steps,
            cfg.budget.stage2_steps,
            cfg.demos,
            cfg.train.lambda
        ),
    ))
}

// 6 --------------------------------------------------------------------------

fn msth_ablation() -> Check {
    let cfg = RunConfig::trace();
    let rows = ablate_msth(&cfg).map_err(err)?;
    let rate = |policy: &str, class: &str| {
        rows.iter()
            .find(|r| r.policy == policy && r.variant == "id" && r.length_class == class)
            .map(|r| r.success_rate())
            .unwrap_or(f64::NAN)
    };
    let (ml, bl) = (rate("msth", "long"), rate("fixed_horizon", "long"));
    let (ms, bs) = (rate("msth", "short"), rate("fixed_horizon", "short"));
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("{}/{}/{}={:.2}", r.policy, r.variant, r.length_class, r.success_rate()))
        .collect();
    Ok((
        ml > 0.0 && ml >= 2.0 * bl && (ms - bs).abs() <= 0.15,
        format!(
            "ID long msth {ml:.2} vs fixed {bl:.2}; ID short {ms:.2} vs {bs:.2} [{}]",
            table.join(" ")
        ),
    ))
}

// 7, 8 -----------------------------------------------------------------------

/// The OOD PushWorld variant used for online improvement.
fn online_config(base: &RunConfig) -> RunConfig {
    let mut cfg = base.clone();
    cfg.ood.shifted_spawn = false;
    cfg.ood.novel_shape = true;
    cfg
}

fn improve(cfg: &RunConfig, bundle: &ModelBundle, strategy: Strategy) -> Result<Vec<RoundReport>, String> {
    let env = cfg.env_for(Variant::Ood);
    let round = RoundConfig {
        strategy,
        ..cfg.round.clone()
    };
    let mut b = bundle.clone();
    run_improvement(&env, &mut b, 5, 50, &round, cfg.seed, 0, None).map_err(err)
}

fn curve_text(c: &[RoundReport]) -> String {
    c.iter()
        .map(|r| format!("{:.2}", r.eval_success_rate))
        .collect::<Vec<_>>()
        .join(" ")
}

fn online_trend(curve: &[RoundReport]) -> Check {
    let r0 = curve[0].eval_success_rate;
    let best = curve[1..]
        .iter()
        .map(|r| r.eval_success_rate)
        .fold(0.0, f64::max);
    let checksums = curve.iter().all(|r| r.base_checksum == curve[0].base_checksum);
    let buffers = curve.iter().all(|r| r.buffer_after == 0);
    let used = curve[1..].iter().all(|r| r.buffer_used == 20);
    Ok((
        r0 <= 0.5 && best > r0 && best >= 2.0 * r0 && checksums && buffers,
        format!(
            "round-0 {r0:.2}, best of rounds 1-5 {best:.2} (curve {}); base checksum constant {checksums}; buffer empty after every round {buffers}; 20 transitions per round {used}",
            curve_text(curve)
        ),
    ))
}

fn strategy_order(all: &[RoundReport], failed: &[RoundReport]) -> Check {
    let r0 = all[0].eval_success_rate;
    let fa = all.last().unwrap().eval_success_rate;
    let ff = failed.last().unwrap().eval_success_rate;
    Ok((
        fa >= ff && ff > r0,
        format!(
            "final all {fa:.2} >= failed_only {ff:.2} > round-0 {r0:.2} (all: {}; failed_only: {})",
            curve_text(all),
            curve_text(failed)
        ),
    ))
}

// 9 --------------------------------------------------------------------------

fn reward_freedom() -> Check {
    let env = EnvConfig::push();
    let (_, mut b) = tiny_bundle(&env, 20).map_err(err)?;
    b.attach_adapters(2, 1).map_err(err)?;
    let round = RoundConfig {
        max_cycles: 4,
        ..RoundConfig::default()
    };
    let (mut buffer, _, _) = collect(&env, &b, &round, 3).map_err(err)?;
    let honest = buffer.drain();
    let poisoned: Vec<_> = honest
        .iter()
        .cloned()
        .map(|mut t| {
            t.success_flag = !t.success_flag;
            t
        })
        .collect();
    let (mut b1, mut b2) = (b.clone(), b.clone());
    let l1 = adapt(&mut b1, &honest, &round, 8).map_err(err)?;
    let l2 = adapt(&mut b2, &poisoned, &round, 8).map_err(err)?;
    let same = b1.to_bytes()== b2.to_bytes() && l1.to_bits() == l2.to_bits();
    let moved = b1.adapter_checksum() != b.adapter_checksum();
    Ok((
        same && moved,
        format!(
            "{} transitions ({} flagged successful before flipping); adapters bit-identical {same}; update applied {moved}",
            honest.len(),
            honest.iter().filter(|t| t.success_flag).count()
        ),
    ))
}

// 10 -------------------------------------------------------------------------

const CLI_CONFIG: &str = "task = push
seed = 3
demos = 4
eval.episodes = 3
msth.K = 12
msth.P = 4
msth.r = 2
msth.M = 2
wm.d_z = 4
wm.width = 8
wm.heads = 2
wm.mlp_hidden = 8
ae.width = 4
ae.heads = 2
ae.mlp_hidden = 4
ae.p_exec = 2
train.batch = 2
train.stage1_steps = 3
train.stage2_steps = 2
online.buffer = 3
online.epochs = 1
online.minibatch = 2
";

fn cli(dir: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["act2goal".to_string()];
    argv.extend(args.iter().map(|a| {
        if a.starts_with('@') {
            dir.join(&a[1..]).display().to_string()
        } else {
            a.to_string()
        }
    }));
    run_cli(argv)
}

fn cli_pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    fs::write(dir.join("run.cfg"), CLI_CONFIG).map_err(err)?;
    let steps: [&[&str]; 6] = [
        &["gen-demos", "--config", "@run.cfg", "--n", "4", "--out", "@demos.a2g"],
        &["train-stage1", "--config", "@run.cfg", "--dataset", "@demos.a2g", "--out", "@s1.a2gw"],
        &["train-stage2", "--config", "@run.cfg", "--dataset", "@demos.a2g", "--bundle", "@s1.a2gw", "--out", "@s2.a2gw"],
        &["eval", "--config", "@run.cfg", "--bundle", "@s2.a2gw", "--out", "@eval.csv", "--disturb"],
        &["ablate-msth", "--config", "@run.cfg", "--episodes", "1", "--out", "@ablate.csv"],
        &["online-improve", "--config", "@run.cfg", "--bundle", "@s2.a2gw", "--rounds", "2", "--episodes", "2", "--variant", "ood", "--out", "@online"],
    ];
    for s in steps {
        let code = cli(dir, s);
        if code != 0 {
            return Err(format!("{} exited with {code}", s[0]));
        }
    }
    let mut files = Vec::new();
    for name in [
        "demos.a2g",
        "s1.a2gw",
        "s1.stage1.csv",
        "s2.a2gw",
        "s2.stage2.csv",
        "eval.csv",
        "ablate.csv",
        "online/curve.csv",
        "online/round2.a2gw",
    ] {
        files.push((name.to_string(), fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"))?));
    }
    Ok(files)
}

fn determinism() -> Check {
    let a = tempfile::tempdir().map_err(err)?;
    let b = tempfile::tempdir().map_err(err)?;
    let fa = cli_pipeline(a.path())?;
    let fb = cli_pipeline(b.path())?;
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();

    let path = a.path().join("s2.a2gw");
    let bytes = fs::read(&path).map_err(err)?;
    let loaded = ModelBundle::load(&path).map_err(err)?;
    let round_trip = loaded.to_bytes() == bytes;

    let mut bad_version = bytes.clone();
    bad_version[4] ^= 0x7f;
    let version_rejected = ModelBundle::from_bytes(&bad_version).is_err();
    let data_bytes = fs::read(a.path().join("demos.a2g")).map_err(err)?;
    let mut bad_data = data_bytes.clone();
    bad_data[4] ^= 0x7f;
    let data_version_rejected = Dataset::from_bytes(&bad_data).is_err();
    let mut other = RunConfig::parse(CLI_CONFIG).map_err(err)?;
    other.spec.wm.d_z = 5;
    let fingerprint_rejected = matches!(
        ModelBundle::load_expecting(&path, &other.spec),
        Err(Error::Fingerprint { .. })
    );
    fs::write(a.path().join("other.cfg"), CLI_CONFIG.replace("wm.d_z = 4", "wm.d_z = 5")).map_err(err)?;
    let cli_rejects = cli(a.path(), &["eval", "--config", "@other.cfg", "--bundle", "@s2.a2gw", "--out", "@x.csv"]) != 0;

    let pass = differing.is_empty()
        && round_trip
        && version_rejected
        && data_version_rejected
        && fingerprint_rejected
        && cli_rejects;
    Ok((
        pass,
        format!(
            "{} artifacts compared, differing {:?}; bundle round-trip {round_trip}; bad checkpoint version rejected {version_rejected}; bad dataset version rejected {data_version_rejected}; fingerprint mismatch rejected {fingerprint_rejected} (cli {cli_rejects})",
            fa.len(),
            differing
        ),
    ))
}

// ---------------------------------------------------------------------------

const NAMES: [&str; 10] = [
    "MSTH formula exactness",
    "gradient integrity",
    "Euler sampler",
    "flow-matching transport",
    "offline push pipeline",
    "MSTH ablation trend",
    "online improvement trend",
    "rollout-selection ordering",
    "reward-freedom probe",
    "determinism and persistence",
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let wanted = selected(&args, NAMES.len());
    let push = RunConfig::push();
    let offline: OnceCell<Result<ModelBundle, String>> = OnceCell::new();
    let trained = || {
        offline
            .get_or_init(|| train_offline(&push, push.spec.clone()).map_err(err))
            .clone()
    };
    let online_cfg = online_config(&push);
    let all_curve: OnceCell<Result<Vec<RoundReport>, String>> = OnceCell::new();
    let curve_all = || {
        all_curve
            .get_or_init(|| improve(&online_cfg, &trained()?, Strategy::All))
            .clone()
    };

    let mut verdicts: Vec<Verdict> = Vec::new();
    for id in wanted {
        let name = NAMES[id - 1];
        let v = match id {
            1 => run(id, name, msth_formula),
            2 => run(id, name, gradient_integrity),
            3 => run(id, name, euler_sampler),
            4 => run(id, name, flow_transport),
            5 => run(id, name, || offline_pipeline(&push, &trained()?)),
            6 => run(id, name, msth_ablation),
            7 => run(id, name, || online_trend(&curve_all()?)),
            8 => run(id, name, || {
                let failed = improve(&online_cfg, &trained()?, Strategy::FailedOnly)?;
                strategy_order(&curve_all()?, &failed)
            }),
            9 => run(id, name, reward_freedom),
            _ => run(id, name, determinism),
        };
        println!("{}", v.line());
        verdicts.push(v);
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        verdicts.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
