use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use himap::dataset::{prepare, BaselineKind, Sample};
use himap::harness::{self, DEFAULT_KS};
use himap::model::{AblationFlags, ModelConfig, ModelKind};
use himap::plot;
use himap::scenario::{self, CorruptionSpec, GeneratorConfig, Scenario};
use himap::trainkit::{log_csv, Checkpoint, TrainConfig, TrainEvent, Trainer};

#[derive(Parser)]
#[command(name = "himap", version, about = "Tracking-free trajectory forecasting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Output directory (for `plot`, the SVG path).
    #[arg(long)]
    out: PathBuf,
    /// Seed; overrides the config file's seed when given.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML config (generator config for `gen`, training config otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario corpus.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Generator preset; only `default` exists, adjust it with --config.
        #[arg(long, default_value = "default")]
        spec: String,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0.0)]
        drop_prob: f64,
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        #[arg(long, default_value_t = 0.0)]
        clutter: f64,
    },
    /// Train a model on a corpus.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Corpus scored for the reconstruction column of the log.
        #[arg(long)]
        holdout: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// `full`, `none`, `row1`..`row5`, or `tracked` for the baseline.
        #[arg(long)]
        model: Option<String>,
        /// Baseline history access: `full`, `partial:N` or `masked:R`.
        #[arg(long)]
        history: Option<String>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated K values.
        #[arg(long, default_value = "1,6")]
        k: String,
        /// Baseline history access: `full` or `partial:N`.
        #[arg(long, default_value = "full")]
        history: String,
    },
    /// Compare the identity-free model with the baseline under limited tracking.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        himap: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated n values; defaults to 0..=T_obs.
        #[arg(long)]
        n: Option<String>,
    },
    /// Train and score ablated configurations over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        holdout: Option<PathBuf>,
        /// Comma-separated configurations (`none`, `row1`..`row5`, `full`).
        #[arg(long, default_value = "none,row1,row2,row3,row4,row5")]
        rows: String,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        steps: Option<usize>,
        /// Also profile prediction latency against history length.
        #[arg(long)]
        latency: bool,
    },
    /// Render a sweep CSV as SVG with a companion CSV.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sweep: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(v) = std::env::var("HIMAP_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => himap::par::set_threads(n),
            _ => {
                eprintln!("error: HIMAP_THREADS must be a positive integer, got `{v}`");
                return ExitCode::from(1);
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            common,
            spec,
            count,
            drop_prob,
            jitter,
            clutter,
        } => gen(&common, &spec, count, drop_prob, jitter, clutter),
        Command::Train {
            common,
            corpus,
            holdout,
            steps,
            model,
            history,
            resume,
        } => train(&common, &corpus, holdout.as_deref(), steps, model.as_deref(), history.as_deref(), resume.as_deref()),
        Command::Eval {
            common,
            ckpt,
            corpus,
            k,
            history,
        } => eval(&common, &ckpt, &corpus, &k, &history),
        Command::Sweep {
            common,
            himap,
            baseline,
            corpus,
            n,
        } => sweep(&common, &himap, &baseline, &corpus, n.as_deref()),
        Command::Ablate {
            common,
            corpus,
            test,
            holdout,
            rows,
            seeds,
            steps,
            latency,
        } => ablate(&common, &corpus, &test, holdout.as_deref(), &rows, &seeds, steps, latency),
        Command::Plot { common, sweep } => plot_cmd(&common, &sweep),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn make_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Records what ran, with which resolved config, and what it produced.
fn write_manifest(path: &Path, command: &str, seed: Option<u64>, config: Value, inputs: Value, artifacts: &[PathBuf]) -> Result<()> {
    let config_text = serde_json::to_string(&config)?;
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "argv": std::env::args().skip(1).collect::<Vec<_>>(),
        "seed": seed,
        "config_hash": sha256_hex(config_text.as_bytes()),
        "config": config,
        "inputs": inputs,
        "artifacts": artifacts.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    write(path, &(serde_json::to_string_pretty(&manifest)? + "\n"))
}

fn load(path: &Path) -> Result<Vec<Scenario>> {
    let corpus = scenario::load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))?;
    if corpus.is_empty() {
        bail!("corpus {} is empty", path.display());
    }
    Ok(corpus)
}

fn load_samples(path: &Path, cfg: &ModelConfig) -> Result<Vec<Sample>> {
    Ok(prepare(&load(path)?, cfg)?)
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| anyhow::anyhow!("bad {what} `{s}`")))
        .collect()
}

fn parse_model(name: &str) -> Result<ModelKind> {
    Ok(match name {
        "tracked" => ModelKind::Tracked,
        "full" => ModelKind::Himap {
            flags: AblationFlags::full(),
        },
        "none" => ModelKind::Himap {
            flags: AblationFlags::none(),
        },
        row if row.starts_with("row") => ModelKind::Himap {
            flags: AblationFlags::cumulative(row[3..].parse().with_context(|| format!("bad row `{row}`"))?)?,
        },
        other => bail!("unknown model `{other}` (full, none, row1..row5, tracked)"),
    })
}

fn parse_history(text: &str) -> Result<BaselineKind> {
    let kind = match text.split_once(':') {
        None if text == "full" => BaselineKind::TrackedFull,
        Some(("partial", n)) => BaselineKind::TrackedPartial { n: n.parse()? },
        Some(("masked", r)) => BaselineKind::MaskedFinetune { ratio: r.parse()? },
        _ => bail!("unknown history access `{text}` (full, partial:N, masked:R)"),
    };
    kind.validate()?;
    Ok(kind)
}

fn train_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::from_toml(&read(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn gen(common: &Common, spec: &str, count: usize, drop_prob: f64, jitter: f64, clutter: f64) -> Result<()> {
    if spec != "default" {
        bail!("unknown generator preset `{spec}`");
    }
    let cfg: GeneratorConfig = match &common.config {
        Some(p) => toml::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => GeneratorConfig::default(),
    };
    cfg.validate()?;
    let seed = common.seed.unwrap_or(0);
    let corruption = CorruptionSpec {
        drop_prob,
        jitter_sigma: jitter,
        occlusion: Vec::new(),
        clutter_rate: clutter,
    };
    let mut corpus = scenario::generate_corpus(&cfg, seed, count)?;
    if drop_prob > 0.0 || jitter > 0.0 || clutter > 0.0 {
        corpus = corpus
            .iter()
            .map(|s| s.corrupted(&corruption, s.seed))
            .collect::<Result<_, _>>()?;
    }
    make_out(&common.out)?;
    let mut artifacts = Vec::with_capacity(count);
    for (i, s) in corpus.iter().enumerate() {
        let p = common.out.join(format!("scenario_{i:06}.json"));
        scenario::write(s, &p)?;
        artifacts.push(p);
    }
    write_manifest(
        &common.out.join("manifest.json"),
        "gen",
        Some(seed),
        json!({"generator": cfg, "corruption": corruption, "count": count, "spec": spec}),
        json!({}),
        &artifacts,
    )
}

fn train(
    common: &Common,
    corpus: &Path,
    holdout: Option<&Path>,
    steps: Option<usize>,
    model: Option<&str>,
    history: Option<&str>,
    resume: Option<&Path>,
) -> Result<()> {
    let mut trainer = match resume {
        Some(p) => {
            if common.config.is_some() || model.is_some() || history.is_some() {
                bail!("--resume takes its config from the checkpoint; drop --config, --model and --history");
            }
            Trainer::from_checkpoint(Checkpoint::load(p)?, steps)?
        }
        None => {
            let mut cfg = train_config(common)?;
            if let Some(s) = steps {
                cfg.steps = s;
                cfg.warmup_steps = cfg.warmup_steps.min(s);
            }
            if let Some(m) = model {
                cfg.kind = parse_model(m)?;
            }
            if let Some(h) = history {
                cfg.baseline = parse_history(h)?;
            }
            Trainer::new(cfg)?
        }
    };
    let cfg = trainer.config.clone();
    let train_set = load_samples(corpus, &cfg.model)?;
    let hold = match holdout {
        Some(p) => load_samples(p, &cfg.model)?,
        None => Vec::new(),
    };
    make_out(&common.out)?;
    let mut artifacts = Vec::new();
    let final_path = common.out.join("checkpoint.json");
    trainer.run(&train_set, &hold, |ev| {
        if let TrainEvent::Checkpoint(t) = ev {
            let path = if t.step == t.config.steps {
                final_path.clone()
            } else {
                common.out.join(format!("checkpoint_step{:06}.json", t.step))
            };
            t.checkpoint().save(&path)?;
            artifacts.push(path);
        }
        Ok(())
    })?;
    if !artifacts.contains(&final_path) {
        trainer.checkpoint().save(&final_path)?;
        artifacts.push(final_path);
    }
    let log_path = common.out.join("train_log.csv");
    write(&log_path, &log_csv(&trainer.history))?;
    let cfg_path = common.out.join("config.toml");
    write(&cfg_path, &cfg.to_toml())?;
    artifacts.extend([log_path, cfg_path]);
    write_manifest(
        &common.out.join("manifest.json"),
        "train",
        Some(cfg.seed),
        serde_json::to_value(&cfg)?,
        json!({"corpus": corpus, "holdout": holdout, "resume": resume}),
        &artifacts,
    )
}

fn eval(common: &Common, ckpt: &Path, corpus: &Path, k: &str, history: &str) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    if common.config.is_some() {
        let expected = train_config(common)?;
        ck.expect_model(&expected.model, &expected.kind)?;
    }
    let ks: Vec<usize> = parse_list(k, "K")?;
    let access = parse_history(history)?;
    let samples = load_samples(corpus, &ck.config.model)?;
    let ev = harness::evaluate(&ck.model()?, &samples, &ks, &access)?;
    make_out(&common.out)?;
    let (m, p) = (common.out.join("metrics.csv"), common.out.join("per_scenario.csv"));
    write(&m, &ev.csv())?;
    write(&p, &ev.per_scenario_csv())?;
    print!("{}", ev.csv());
    write_manifest(
        &common.out.join("manifest.json"),
        "eval",
        common.seed,
        json!({"k": ks, "history": access, "fingerprint": ck.fingerprint}),
        json!({"ckpt": ckpt, "corpus": corpus}),
        &[m, p],
    )
}

fn sweep(common: &Common, himap: &Path, baseline: &Path, corpus: &Path, n: Option<&str>) -> Result<()> {
    let (hk, bk) = (Checkpoint::load(himap)?, Checkpoint::load(baseline)?);
    if bk.config.kind != ModelKind::Tracked {
        bail!("{} is not a tracked baseline checkpoint", baseline.display());
    }
    let scenarios = load(corpus)?;
    let t_obs = scenarios[0].t_obs;
    let ns: Vec<usize> = match n {
        Some(t) => parse_list(t, "n")?,
        None => (0..=t_obs).collect(),
    };
    let hs = prepare(&scenarios, &hk.config.model)?;
    let bs = prepare(&scenarios, &bk.config.model)?;
    if hk.config.model != bk.config.model {
        bail!("the two checkpoints use different model configs");
    }
    let result = harness::run_tracking_sweep(&hk.model()?, &bk.model()?, &hs, &ns)?;
    drop(bs);
    make_out(&common.out)?;
    let (c, s) = (common.out.join("sweep.csv"), common.out.join("summary.txt"));
    write(&c, &result.csv())?;
    write(&s, &result.summary())?;
    print!("{}", result.summary());
    write_manifest(
        &common.out.join("manifest.json"),
        "sweep",
        common.seed,
        json!({"n": ns, "himap": hk.fingerprint, "baseline": bk.fingerprint}),
        json!({"himap": himap, "baseline": baseline, "corpus": corpus}),
        &[c, s],
    )
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    common: &Common,
    corpus: &Path,
    test: &Path,
    holdout: Option<&Path>,
    rows: &str,
    seeds: &str,
    steps: Option<usize>,
    latency: bool,
) -> Result<()> {
    let mut base = train_config(common)?;
    if let Some(s) = steps {
        base.steps = s;
        base.warmup_steps = base.warmup_steps.min(s);
    }
    let configs: Vec<(String, AblationFlags)> = rows
        .split(',')
        .map(|r| match parse_model(r.trim())? {
            ModelKind::Himap { flags } => Ok((r.trim().to_string(), flags)),
            ModelKind::Tracked => bail!("the tracked baseline is not an ablation row"),
        })
        .collect::<Result<_>>()?;
    let seeds: Vec<u64> = parse_list(seeds, "seed")?;
    let train_set = load_samples(corpus, &base.model)?;
    let test_set = load_samples(test, &base.model)?;
    let hold = match holdout {
        Some(p) => load_samples(p, &base.model)?,
        None => Vec::new(),
    };
    let table = harness::run_ablation(&configs, &seeds, &base, &train_set, &hold, &test_set)?;
    make_out(&common.out)?;
    let path = common.out.join("ablation.csv");
    let mut csv = format!("{}\n", harness::ABLATION_HEADER);
    for r in &table {
        csv.push_str(&r.to_csv());
        csv.push('\n');
    }
    write(&path, &csv)?;
    print!("{csv}");
    let mut artifacts = vec![path];
    if latency {
        let scenarios = load(test)?;
        let sample = &scenarios[..scenarios.len().min(32)];
        let steps: Vec<usize> = (0..=base.model.history_steps).collect();
        let profile = harness::latency_profile(&base.model, sample, &steps, base.seed)?;
        let mut text = String::from("history_steps,seconds\n");
        for (t, s) in &profile {
            text.push_str(&format!("{t},{s:.9}\n"));
        }
        if let Some(g) = harness::latency_growth(&profile) {
            text.push_str(&format!("# growth per step: {:.2}%\n", 100.0 * g));
        }
        let p = common.out.join("latency.csv");
        write(&p, &text)?;
        artifacts.push(p);
    }
    write_manifest(
        &common.out.join("manifest.json"),
        "ablate",
        Some(base.seed),
        json!({"train": base, "rows": configs.iter().map(|c| &c.0).collect::<Vec<_>>(), "seeds": seeds, "ks": DEFAULT_KS}),
        json!({"corpus": corpus, "test": test, "holdout": holdout}),
        &artifacts,
    )
}

fn plot_cmd(common: &Common, sweep: &Path) -> Result<()> {
    let points = plot::parse_sweep(&read(sweep)?).with_context(|| format!("reading sweep {}", sweep.display()))?;
    let svg_path = common.out.clone();
    if let Some(parent) = svg_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        make_out(parent)?;
    }
    let csv_path = svg_path.with_extension("csv");
    write(&svg_path, &plot::render(&points))?;
    write(&csv_path, &plot::companion_csv(&points))?;
    write_manifest(
        &svg_path.with_extension("manifest.json"),
        "plot",
        common.seed,
        json!({"kind": "sweep", "margin": plot::MARGIN}),
        json!({"sweep": sweep}),
        &[svg_path, csv_path],
    )
}
