use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mano::bench::{fit_scaling_exponent, run_scaling, BenchConfig};
use mano::config::KvMap;
use mano::darcy::{generate_dataset, generate_sample, manufactured_error, read_dataset, write_dataset, CoefficientSpec};
use mano::gradcheck::{grad_check, GradCheckConfig};
use mano::model::{AttentionKind, ModelConfig, OperatorModel, SupervisedObjective};
use mano::rng::{indexed_seed, named_seed};
use mano::training::{evaluate, load_checkpoint, mean, TrainConfig, Trainer};
use mano::Error;

use crate::{BenchArgs, Cli, Command, EvalArgs, GenDataArgs, GradCheckArgs, TrainArgs, VerifySolverArgs};

#[derive(Debug)]
pub enum CliError {
    Lib(Error),
    /// A check ran to completion and failed.
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Lib(e) => match e {
                Error::Config(_)
                | Error::ShapeMismatch { .. }
                | Error::Dimension { .. }
                | Error::ParamShape { .. }
                | Error::Contract(_) => 2,
                Error::Io(_) | Error::Format(_) => 3,
                Error::Numerical(_) | Error::NonConvergence { .. } => 4,
            },
            CliError::Verification(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Lib(e) => write!(f, "{e}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(Error::Io(e))
    }
}

type Result<T> = std::result::Result<T, CliError>;

struct Context {
    seed: u64,
    outdir: PathBuf,
    /// File entries overlaid with flags, consumed by the subcommand.
    settings: KvMap,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self> {
        let mut settings = match &cli.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
                KvMap::parse(&text)?
            }
            None => KvMap::new(),
        };
        if let Some(s) = cli.seed {
            settings.set("seed", s);
        }
        let seed = settings.take::<u64>("seed")?.unwrap_or(0);
        let outdir = cli
            .outdir
            .clone()
            .or_else(|| std::env::var_os("MANO_OUTDIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Self { seed, outdir, settings })
    }

    fn flag(&mut self, key: &str, value: Option<impl fmt::Display>) {
        if let Some(v) = value {
            self.settings.set(key, v);
        }
    }

    /// Writes `<dir>/config.resolved` with a header naming the command.
    fn echo(&self, dir: &Path, command: &str, resolved: &KvMap) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut text = format!("# mano {command}\nseed = {}\n", self.seed);
        text.push_str(&resolved.render());
        fs::write(dir.join("config.resolved"), text)?;
        Ok(())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut ctx = Context::new(&cli)?;
    match cli.command {
        Command::GenData(a) => gen_data(&mut ctx, a),
        Command::Train(a) => train(&mut ctx, a),
        Command::Eval(a) => eval(ctx, a),
        Command::GradCheck(a) => grad_check_cmd(ctx, a),
        Command::VerifySolver(a) => verify_solver(ctx, a),
        Command::Bench(a) => bench(&mut ctx, a),
    }
}

fn gen_data(ctx: &mut Context, a: GenDataArgs) -> Result<()> {
    ctx.flag("n", a.n);
    ctx.flag("count", a.count);
    ctx.flag("low", a.low);
    ctx.flag("high", a.high);
    ctx.flag("alpha", a.alpha);
    ctx.flag("tau", a.tau);
    let s = &mut ctx.settings;
    let n = s.take("n")?.unwrap_or(16usize);
    let count = s.take("count")?.unwrap_or(100usize);
    let mut spec = CoefficientSpec::default();
    s.take_into("low", &mut spec.low)?;
    s.take_into("high", &mut spec.high)?;
    s.take_into("alpha", &mut spec.alpha)?;
    s.take_into("tau", &mut spec.tau)?;
    std::mem::take(s).finish()?;
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()).into());
    }
    let out = a.out.unwrap_or_else(|| ctx.outdir.join("data.bin"));

    let mut resolved = KvMap::new();
    resolved.set("n", n);
    resolved.set("count", count);
    resolved.set("low", spec.low);
    resolved.set("high", spec.high);
    resolved.set("alpha", spec.alpha);
    resolved.set("tau", spec.tau);
    resolved.set("out", out.display());
    ctx.echo(&ctx.outdir, "gen-data", &resolved)?;

    let data = generate_dataset(n, count, named_seed(ctx.seed, "data"), &spec)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_dataset(&out, &data)?;
    let summary = data.summary();
    println!(
        "count={} n={} mean_u={:.6e} std_u={:.6e} path={}",
        summary.count,
        summary.n,
        summary.mean_u,
        summary.std_u,
        out.display()
    );
    Ok(())
}

fn train(ctx: &mut Context, a: TrainArgs) -> Result<()> {
    ctx.flag("dim", a.dim);
    ctx.flag("depth", a.depth);
    ctx.flag("heads", a.heads);
    ctx.flag("d_head", a.d_head);
    ctx.flag("mlp_dim", a.mlp_dim);
    ctx.flag("window", a.window);
    ctx.flag("window_stride", a.window_stride);
    ctx.flag("levels", a.levels);
    ctx.flag("attention", a.attention);
    ctx.flag("sampler", a.sampler);
    ctx.flag("share_du", a.share_du);
    ctx.flag("emb_dropout", a.emb_dropout);
    ctx.flag("att_dropout", a.att_dropout);
    ctx.flag("epochs", a.epochs);
    ctx.flag("batch_size", a.batch_size);
    ctx.flag("lr", a.lr);
    ctx.flag("lr_min", a.lr_min);
    ctx.flag("weight_decay", a.weight_decay);
    let run_dir = a.out.unwrap_or_else(|| ctx.outdir.clone());
    let data = read_dataset(&a.data)?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let epochs = ctx.settings.take::<usize>("epochs")?;
            std::mem::take(&mut ctx.settings).finish().map_err(|e| {
                Error::Config(format!("a resumed run only accepts --epochs: {e}"))
            })?;
            Trainer::resume(load_checkpoint(path)?, epochs)?
        }
        None => {
            let s = &mut ctx.settings;
            let mut model_cfg = ModelConfig::default();
            model_cfg.read_kv(s, "")?;
            let mut train_cfg = TrainConfig {
                seed: ctx.seed,
                ..TrainConfig::default()
            };
            train_cfg.read_kv(s, "")?;
            if !s.contains("init_seed") {
                model_cfg.init_seed = named_seed(ctx.seed, "init");
            }
            std::mem::take(s).finish()?;
            Trainer::new(OperatorModel::new(model_cfg)?, train_cfg, &data)?
        }
    };
    let mut resolved = KvMap::new();
    trainer.model.config.write_kv(&mut resolved, "");
    trainer.config.write_kv(&mut resolved, "");
    resolved.set("data", a.data.display());
    ctx.echo(&run_dir, "train", &resolved)?;

    println!(
        "training {} parameters on {} samples at n={}",
        trainer.model.count_params(),
        data.len(),
        data.n
    );
    let metrics = trainer.run(&data, Some(&run_dir))?;
    for r in &metrics.records {
        println!(
            "epoch {:>3}  lr {:.3e}  train_mse {:.4e}  val_rel_mse {:.4e}  {:.1}s",
            r.epoch, r.lr, r.train_mse, r.val_rel_mse, r.seconds
        );
    }
    println!(
        "best val_rel_mse={} at epoch {}",
        trainer.progress.best_val, trainer.progress.best_epoch
    );
    Ok(())
}

fn eval(ctx: Context, a: EvalArgs) -> Result<()> {
    ctx.settings.finish()?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let data = read_dataset(&a.data)?;
    let (_, val) = ckpt.train.split(data.len())?;
    let samples = &data.samples[val.clone()];
    let errors = evaluate(&ckpt.model, samples)?;
    let mean_err = mean(&errors)?;
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };

    fs::create_dir_all(&ctx.outdir)?;
    let mut csv = String::from("sample,rel_mse\n");
    for (i, e) in val.zip(&errors) {
        csv.push_str(&format!("{i},{e}\n"));
    }
    let path = ctx.outdir.join("eval.csv");
    fs::File::create(&path)?.write_all(csv.as_bytes())?;
    println!(
        "count={} mean_rel_mse={} median_rel_mse={} csv={}",
        errors.len(),
        mean_err,
        median,
        path.display()
    );
    Ok(())
}

fn grad_check_cmd(ctx: Context, a: GradCheckArgs) -> Result<()> {
    ctx.settings.finish()?;
    let dims: Vec<usize> = a
        .dims
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("--dims expects n,dim,depth,levels, got `{}`", a.dims)))?;
    let &[n, dim, depth, levels] = dims.as_slice() else {
        return Err(Error::Config(format!("--dims expects four values, got {}", dims.len())).into());
    };
    if a.heads == 0 || dim % a.heads != 0 {
        return Err(Error::Config(format!("dim {dim} is not divisible by {} heads", a.heads)).into());
    }
    let cfg = ModelConfig {
        dim,
        depth,
        heads: a.heads,
        d_head: dim / a.heads,
        mlp_dim: dim,
        levels: Some(levels),
        emb_dropout: 0.0,
        att_dropout: 0.0,
        init_seed: named_seed(ctx.seed, "init"),
        ..ModelConfig::default()
    };
    let mixer = cfg.mixer_config(n)?;
    if mixer.levels != levels {
        return Err(Error::Config(format!("a {n}x{n} grid supports at most {} levels", mixer.levels)).into());
    }
    let spec = CoefficientSpec::default();
    let samples = (0..2)
        .map(|i| generate_sample(n, indexed_seed(named_seed(ctx.seed, "data"), i), &spec))
        .collect::<mano::Result<Vec<_>>>()?;
    let mut model = OperatorModel::new(cfg)?;
    // Keep the loss O(1) so absolute roundoff stays small.
    mano::training::fit_normalization(&mut model, &samples);
    let mut objective = SupervisedObjective { model, samples };
    let report = grad_check(
        &mut objective,
        &GradCheckConfig {
            tolerance: a.tolerance,
            seed: ctx.seed,
            corrupt_gelu_backward: a.corrupt_gelu,
            ..GradCheckConfig::default()
        },
    )?;
    for p in &report.params {
        println!(
            "{:<32} checked {:>3}  worst rel err {:.3e}  {}",
            p.name,
            p.checked,
            p.max_rel_error,
            if p.passed { "ok" } else { "FAIL" }
        );
    }
    println!("worst relative error {:.3e} (tolerance {:e})", report.worst(), report.tolerance);
    if report.passed() {
        Ok(())
    } else {
        let failed = report.params.iter().filter(|p| !p.passed).count();
        Err(CliError::Verification(format!("{failed} parameter tensor(s) exceed the tolerance")))
    }
}

fn verify_solver(ctx: Context, a: VerifySolverArgs) -> Result<()> {
    ctx.settings.finish()?;
    if a.sizes.len() < 2 {
        return Err(Error::Config("need at least two sizes".into()).into());
    }
    for &n in &a.sizes {
        if n < 4 || !n.is_power_of_two() || n > 1024 {
            return Err(Error::Config(format!("unsupported size {n}: use powers of two in 4..=1024")).into());
        }
    }
    println!("{:>6} {:>14} {:>8} {:>8}", "n", "max_error", "ratio", "cg_iters");
    let mut prev: Option<(usize, f64)> = None;
    let mut bad = Vec::new();
    for &n in &a.sizes {
        let r = manufactured_error(n)?;
        let ratio = match prev {
            Some((pn, pe)) if n == 2 * pn => {
                let q = pe / r.max_error;
                if !(3.5..=4.5).contains(&q) {
                    bad.push(format!("{pn}->{n}: {q:.3}"));
                }
                format!("{q:.3}")
            }
            _ => "-".into(),
        };
        println!("{:>6} {:>14.6e} {:>8} {:>8}", n, r.max_error, ratio, r.iterations);
        prev = Some((n, r.max_error));
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("ratios outside [3.5, 4.5]: {}", bad.join(", "))))
    }
}

fn bench(ctx: &mut Context, a: BenchArgs) -> Result<()> {
    ctx.flag("dim", a.dim);
    ctx.flag("heads", a.heads);
    ctx.flag("repeats", a.repeats);
    ctx.flag("dense_max_n", a.dense_max_n);
    let mut cfg = BenchConfig {
        variants: a
            .variants
            .iter()
            .map(|v| AttentionKind::parse(v))
            .collect::<mano::Result<_>>()?,
        sizes: a.sizes,
        seed: ctx.seed,
        ..BenchConfig::default()
    };
    let s = &mut ctx.settings;
    s.take_into("dim", &mut cfg.dim)?;
    s.take_into("heads", &mut cfg.heads)?;
    s.take_into("repeats", &mut cfg.repeats)?;
    s.take_into("dense_max_n", &mut cfg.dense_max_n)?;
    s.take_into("window", &mut cfg.window)?;
    s.take_into("window_stride", &mut cfg.window_stride)?;
    std::mem::take(s).finish()?;

    let mut resolved = KvMap::new();
    resolved.set(
        "variants",
        cfg.variants.iter().map(|v| v.as_str()).collect::<Vec<_>>().join(","),
    );
    resolved.set(
        "sizes",
        cfg.sizes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","),
    );
    resolved.set("dim", cfg.dim);
    resolved.set("heads", cfg.heads);
    resolved.set("repeats", cfg.repeats);
    resolved.set("dense_max_n", cfg.dense_max_n);
    resolved.set("window", cfg.window);
    resolved.set("window_stride", cfg.window_stride);
    ctx.echo(&ctx.outdir, "bench", &resolved)?;

    let report = run_scaling(&cfg)?;
    let path = ctx.outdir.join("bench.csv");
    report.append_csv(&path)?;
    print!("{}", report.to_csv());
    for note in &report.notes {
        println!("note: {note}");
    }
    let mut fittable = report.records.clone();
    fittable.retain(|r| report.records.iter().filter(|o| o.variant == r.variant).count() >= 3);
    if !fittable.is_empty() {
        for f in fit_scaling_exponent(&fittable)? {
            println!(
                "{}: flops slope {:.4}, score slope {:.4}, wall slope {:.4}",
                f.variant, f.flops_slope, f.score_slope, f.wall_slope
            );
        }
    }
    Ok(())
}
