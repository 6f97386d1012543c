use std::fmt::Display;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use underq_core::agent::{
    generate_dataset, make_env, preset, train_with, EvalReport, ExperimentConfig, PolicyBundle, TrainObserver,
};
use underq_core::approx::checkpoint::Checkpoint;
use underq_core::dataset::OfflineDataset;
use underq_core::error::Result as CoreResult;
use underq_core::finite_mdp::{random_mdp, FiniteMdp};
use underq_core::gumbel::{
    error_curve, error_curve_argmax, simulate_nested_chain, theorem3_consistency, ErrorCurveParams, EstimatorMode,
    NestedChainSpec,
};
use underq_core::operators::{fixed_point, verify_contraction, Interpretation, UnderestimateConfig};
use underq_core::rng;

use crate::params::{read_config, Params};
use crate::{Cli, Command, Failure, MdpArgs};

type Outcome = Result<(), Failure>;

/// Shortest round-trip form, switching to exponent notation for tiny values.
fn num(x: f64) -> String {
    format!("{x:?}")
}

fn opt<T: Display>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(|x| x.to_string())
}

fn path_opt(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

const MDP_DEFAULTS: &[(&str, &str)] = &[
    ("states", "10"),
    ("actions", "4"),
    ("sparsity", "1"),
    ("iota", "0.8"),
    ("gamma", "0.9"),
    ("interp", "scaling"),
    ("noise_scale", "1"),
    ("noise_samples", "1000"),
    ("tau", "0.3"),
];

fn mdp_flags(a: &MdpArgs) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("states", opt(&a.states)),
        ("actions", opt(&a.actions)),
        ("sparsity", opt(&a.sparsity)),
        ("iota", opt(&a.iota)),
        ("gamma", opt(&a.gamma)),
        ("interp", a.interp.clone()),
        ("noise_scale", opt(&a.noise_scale)),
        ("noise_samples", opt(&a.noise_samples)),
        ("tau", opt(&a.tau)),
    ]
}

/// Command name, its keys with defaults, and the flags given explicitly.
fn describe(cmd: &Command) -> (&'static str, Vec<(&'static str, &'static str)>, Vec<(&'static str, Option<String>)>) {
    match cmd {
        Command::SimulateError(a) => (
            "simulate-error",
            vec![
                ("horizon", "10"),
                ("gamma", "0.9"),
                ("beta", "1"),
                ("samples", "100000"),
                ("mode", "analytic"),
                ("seed", "0"),
            ],
            vec![
                ("horizon", opt(&a.horizon)),
                ("gamma", opt(&a.gamma)),
                ("beta", opt(&a.beta)),
                ("samples", opt(&a.samples)),
                ("mode", a.mode.clone()),
            ],
        ),
        Command::ErrorCurve(a) => (
            "error-curve",
            vec![("gamma", "0.99"), ("beta", "1"), ("offset", "1"), ("x_max", "")],
            vec![
                ("gamma", opt(&a.gamma)),
                ("beta", opt(&a.beta)),
                ("offset", opt(&a.offset)),
                ("x_max", opt(&a.x_max)),
            ],
        ),
        Command::VerifyContraction(a) => {
            let mut keys = MDP_DEFAULTS.to_vec();
            keys.extend([("pairs", "200"), ("q_range", "10"), ("seed", "0")]);
            let mut flags = mdp_flags(&a.mdp);
            flags.extend([("pairs", opt(&a.pairs)), ("q_range", opt(&a.q_range))]);
            ("verify-contraction", keys, flags)
        }
        Command::FixedPoint(a) => {
            let mut keys = MDP_DEFAULTS.to_vec();
            keys.extend([("tol", "1e-10"), ("max_iters", "100000"), ("seed", "0")]);
            let mut flags = mdp_flags(&a.mdp);
            flags.extend([("tol", opt(&a.tol)), ("max_iters", opt(&a.max_iters))]);
            ("fixed-point", keys, flags)
        }
        Command::GenDataset => ("gen-dataset", vec![], vec![]),
        Command::Train(a) => ("train", vec![("dataset", "")], vec![("dataset", path_opt(&a.dataset))]),
        Command::Eval(a) => (
            "eval",
            vec![("checkpoint", ""), ("episodes", "")],
            vec![("checkpoint", path_opt(&a.checkpoint)), ("episodes", opt(&a.episodes))],
        ),
        Command::ProbeOverestimation(a) => (
            "probe-overestimation",
            vec![("checkpoint", ""), ("dataset", ""), ("pairs", "200"), ("rollouts", "10")],
            vec![
                ("checkpoint", path_opt(&a.checkpoint)),
                ("dataset", path_opt(&a.dataset)),
                ("pairs", opt(&a.pairs)),
                ("rollouts", opt(&a.rollouts)),
            ],
        ),
    }
}

fn uses_experiment(cmd: &Command) -> bool {
    matches!(cmd, Command::GenDataset | Command::Train(_) | Command::Eval(_) | Command::ProbeOverestimation(_))
}

/// Output directory plus echo of primary records to stdout.
struct Out {
    dir: PathBuf,
}

impl Out {
    fn write(&self, name: &str, content: &str) -> Outcome {
        fs::write(self.dir.join(name), content)?;
        Ok(())
    }

    /// Writes and echoes a header plus records.
    fn table(&self, name: &str, header: &str, rows: &[String]) -> Outcome {
        let mut text = format!("{header}\n");
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        print!("{text}");
        self.write(name, &text)
    }
}

pub fn run(cli: &Cli) -> Outcome {
    let (name, defaults, flags) = describe(&cli.command);
    let mut params = Params::new(name, &defaults);
    let entries = match &cli.config {
        Some(p) => read_config(p)?,
        None => Vec::new(),
    };
    let mut exp = None;
    if uses_experiment(&cli.command) {
        let mut cfg = match &cli.preset {
            Some(p) => preset(p)?,
            None => ExperimentConfig::default(),
        };
        params.apply_entries(&entries, Some(&mut cfg))?;
        if let Some(seed) = cli.seed {
            match cli.command {
                Command::GenDataset => cfg.task.dataset_seed = seed,
                _ => cfg.agent.seed = seed,
            }
        }
        cfg.validate()?;
        exp = Some(cfg);
    } else {
        if cli.preset.is_some() {
            return Err(Failure::usage(format!("--preset does not apply to `{name}`")));
        }
        params.apply_entries(&entries, None)?;
        if let Some(seed) = cli.seed {
            params.set("seed", seed.to_string());
        }
    }
    for (k, v) in flags {
        if let Some(v) = v {
            params.set(k, v);
        }
    }

    fs::create_dir_all(&cli.out)?;
    let out = Out { dir: cli.out.clone() };
    let mut snapshot = params.snapshot();
    if let Some(cfg) = &exp {
        snapshot.push_str(&cfg.to_text());
    }
    out.write("run.config", &snapshot)?;

    match &cli.command {
        Command::SimulateError(_) => simulate_error(&params, &out),
        Command::ErrorCurve(_) => curve(&params, &out),
        Command::VerifyContraction(_) => contraction(&params, &out),
        Command::FixedPoint(_) => iterate(&params, &out),
        Command::GenDataset => gen_dataset(exp.as_ref().expect("experiment commands"), &out),
        Command::Train(_) => train_cmd(&params, exp.as_ref().expect("experiment commands"), &out),
        Command::Eval(_) => eval_cmd(&params, exp.as_ref().expect("experiment commands"), &out),
        Command::ProbeOverestimation(_) => probe_cmd(&params, exp.as_ref().expect("experiment commands"), &out),
    }
}

fn simulate_error(p: &Params, out: &Out) -> Outcome {
    let mode = match p.raw("mode") {
        "analytic" => EstimatorMode::AnalyticBias,
        "fitted" => EstimatorMode::FittedMean,
        other => return Err(Failure::usage(format!("mode must be `analytic` or `fitted`, got `{other}`"))),
    };
    let spec = NestedChainSpec::new(p.get("horizon")?, p.get("beta")?, p.get("gamma")?)
        .with_samples(p.get("samples")?)
        .with_seed(p.get("seed")?)
        .with_mode(mode);
    let est = simulate_nested_chain(&spec)?;
    let mut rows = Vec::with_capacity(est.levels.len());
    for l in &est.levels {
        rows.push(format!(
            "{},{},{},{},{},{},{},{}",
            l.t,
            num(l.closed_form_q),
            num(l.closed_form_v),
            num(l.q_bias),
            num(l.q_se),
            num(l.v_bias),
            num(l.v_se),
            num(theorem3_consistency(&spec, l.t)?)
        ));
    }
    out.table(
        "simulate_error.csv",
        "t,closed_form_thm1,closed_form_thm2,mc_bias,mc_se,mc_v_bias,mc_v_se,consistency_residual",
        &rows,
    )
}

fn curve(p: &Params, out: &Out) -> Outcome {
    let gamma: f64 = p.get("gamma")?;
    let params = ErrorCurveParams::for_scale(p.get("beta")?, gamma, p.get("offset")?, 0.0)?;
    let argmax = error_curve_argmax(gamma)?;
    let x_max = match p.get_opt::<usize>("x_max")? {
        Some(x) => x,
        None => (10.0 * argmax).ceil() as usize,
    };
    let f: Vec<f64> = (0..=x_max).map(|x| error_curve(&params.at(x as f64))).collect();
    let rows: Vec<String> = f.iter().enumerate().map(|(x, v)| format!("{x},{}", num(*v))).collect();
    fs::write(out.dir.join("error_curve.csv"), format!("x,f\n{}\n", rows.join("\n")))?;

    let peak = f.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0);
    let far = error_curve(&params.at(10.0 * argmax));
    let summary = format!("{},{peak},{},{},{}", num(argmax), num(f[peak]), num(far), num(far / f[peak]));
    out.table("error_curve_summary.csv", "argmax,peak_index,peak_value,f_at_10x_argmax,tail_ratio", &[summary])
}

fn build_mdp(p: &Params) -> Result<(FiniteMdp, UnderestimateConfig), Failure> {
    let seed: u64 = p.get("seed")?;
    let mdp = random_mdp(p.get("states")?, p.get("actions")?, rng::derive_seed(seed, &[1]), p.get("sparsity")?)?
        .with_discount(p.get("gamma")?)?;
    let interp: Interpretation = p.raw("interp").parse()?;
    let noise = (p.get("noise_samples")?, rng::derive_seed(seed, &[2]));
    let cfg = match interp {
        Interpretation::Scaling => UnderestimateConfig::scaling(p.get("iota")?),
        Interpretation::NoisyQuantile => {
            UnderestimateConfig::noisy_quantile(p.get("iota")?, p.get("noise_scale")?).with_noise(noise.0, noise.1)
        }
        Interpretation::Expectile => {
            UnderestimateConfig::expectile(p.get("tau")?, p.get("noise_scale")?).with_noise(noise.0, noise.1)
        }
    };
    cfg.validate()?;
    Ok((mdp, cfg))
}

fn contraction(p: &Params, out: &Out) -> Outcome {
    let (mdp, cfg) = build_mdp(p)?;
    let seed = rng::derive_seed(p.get("seed")?, &[3]);
    let r = verify_contraction(&mdp, &cfg, p.get("pairs")?, p.get("q_range")?, seed)?;
    let row = format!(
        "{},{},{},{},{},{}",
        r.interpretation,
        r.pairs_tested,
        num(r.max_ratio),
        num(r.shift_pair_ratio),
        num(r.bound),
        r.passed
    );
    out.table("contraction.csv", "interpretation,pairs_tested,max_ratio,shift_pair_ratio,bound,passed", &[row])?;
    if !r.passed {
        return Err(Failure::Check(format!("observed modulus {} exceeds the bound {}", r.max_ratio, r.bound)));
    }
    Ok(())
}

fn iterate(p: &Params, out: &Out) -> Outcome {
    let (mdp, cfg) = build_mdp(p)?;
    let fp = fixed_point(&mdp, &cfg, p.get("tol")?, p.get("max_iters")?)?;
    let mut text = String::from("iteration,residual\n");
    for (i, r) in fp.residuals.iter().enumerate() {
        let _ = writeln!(text, "{},{}", i + 1, num(*r));
    }
    out.write("fixed_point.csv", &text)?;
    let mut q = String::from("state,action,q\n");
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let _ = writeln!(q, "{s},{a},{}", num(fp.q.get(s, a)));
        }
    }
    out.write("fixed_point_q.csv", &q)?;
    // geometric mean of the residual ratios
    let n = fp.residuals.len();
    let rate = if n >= 2 && fp.residuals[0] > 0.0 && fp.residuals[n - 1] > 0.0 {
        (fp.residuals[n - 1] / fp.residuals[0]).powf(1.0 / (n - 1) as f64)
    } else {
        0.0
    };
    let row = format!(
        "{},{},{},{}",
        fp.iterations,
        num(fp.final_residual),
        num(rate),
        num(cfg.modulus_bound(mdp.discount()))
    );
    out.table("fixed_point_summary.csv", "iterations,final_residual,observed_rate,modulus_bound", &[row])
}

fn input_file(path: &str, what: &str) -> Result<PathBuf, Failure> {
    if path.is_empty() {
        return Err(Failure::usage(format!("--{what} is required")));
    }
    let p = PathBuf::from(path);
    if !p.is_file() {
        return Err(Failure::usage(format!("{what} file `{path}` does not exist")));
    }
    Ok(p)
}

fn load_or_generate(path: &str, cfg: &ExperimentConfig) -> Result<OfflineDataset, Failure> {
    if path.is_empty() {
        let env = make_env(&cfg.task)?;
        Ok(generate_dataset(env.as_ref(), cfg.task.dataset_episodes, cfg.task.expert_fraction, cfg.task.dataset_seed)?)
    } else {
        Ok(OfflineDataset::read_from(input_file(path, "dataset")?)?)
    }
}

fn load_checkpoint(p: &Params) -> Result<Checkpoint, Failure> {
    let path = input_file(p.raw("checkpoint"), "checkpoint")?;
    Ok(Checkpoint::read_from(Path::new(&path))?)
}

fn gen_dataset(cfg: &ExperimentConfig, out: &Out) -> Outcome {
    let data = load_or_generate("", cfg)?;
    data.write_to(out.dir.join("dataset.txt"))?;
    let returns = data.episode_returns(1.0)?;
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    let row = format!("{},{},{},{}", cfg.task.env, data.len(), returns.len(), num(mean));
    println!("env,records,episodes,mean_return\n{row}");
    Ok(())
}

/// Streams evaluation records to stdout and collects them for the file.
struct Metrics {
    lines: Vec<String>,
}

impl TrainObserver for Metrics {
    fn on_eval(&mut self, report: &EvalReport) -> CoreResult<()> {
        let line = report.to_csv();
        println!("{line}");
        self.lines.push(line);
        Ok(())
    }
}

fn train_cmd(p: &Params, cfg: &ExperimentConfig, out: &Out) -> Outcome {
    let data = load_or_generate(p.raw("dataset"), cfg)?;
    let env = make_env(&cfg.task)?;
    println!("{}", EvalReport::CSV_HEADER);
    let mut metrics = Metrics { lines: Vec::new() };
    let result = train_with(&data, env.as_ref(), &cfg.agent, &mut metrics)?;
    let mut text = format!("{}\n", EvalReport::CSV_HEADER);
    for l in &metrics.lines {
        text.push_str(l);
        text.push('\n');
    }
    out.write("metrics.csv", &text)?;
    let mut best = result.best;
    best.meta.insert("normalized_score".into(), result.best_score.to_string());
    best.write_to(&out.dir.join("best.ckpt"))?;
    result.last.write_to(&out.dir.join("last.ckpt"))?;
    Ok(())
}

fn eval_cmd(p: &Params, cfg: &ExperimentConfig, out: &Out) -> Outcome {
    let ck = load_checkpoint(p)?;
    let bundle = PolicyBundle::from_checkpoint(&ck)?;
    let env = make_env(&cfg.task)?;
    let episodes = p.get_opt::<usize>("episodes")?.unwrap_or(cfg.agent.eval_episodes);
    let e = bundle.evaluate(env.as_ref(), episodes, cfg.agent.seed)?;
    let row = format!("{},{},{},{}", ck.step, episodes, num(e.mean_return), num(e.normalized_score));
    out.table("eval.csv", "checkpoint_step,episodes,mean_return,normalized_score", &[row])
}

fn probe_cmd(p: &Params, cfg: &ExperimentConfig, out: &Out) -> Outcome {
    let ck = load_checkpoint(p)?;
    let bundle = PolicyBundle::from_checkpoint(&ck)?;
    let env = make_env(&cfg.task)?;
    let data = load_or_generate(p.raw("dataset"), cfg)?;
    let r = bundle.probe(&data, env.as_ref(), p.get("pairs")?, p.get("rollouts")?, cfg.agent.seed)?;
    let row = format!(
        "{},{},{},{},{},{},{}",
        num(r.mean_q),
        num(r.mc_return),
        num(r.gap),
        num(r.mc_se),
        r.n_pairs,
        r.rollouts_per_pair,
        r.rollout_length
    );
    out.table("probe.csv", "mean_q,mc_return,gap,mc_se,n_pairs,rollouts_per_pair,rollout_length", &[row])
}
