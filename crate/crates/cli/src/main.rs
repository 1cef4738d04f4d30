use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use disem::agent::{AgentNet, Scheme};
use disem::autodiff::checkpoint::Checkpoint;
use disem::config::RunConfig;
use disem::env::{Setting, Task};
use disem::harness::{self, Matrix};
use disem::trainer::{self, Progress, Variant};
use disem::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_PROPERTY: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "disem", version, about = "Discrete entropy minimization for multi-agent communication")]
struct Cli {
    /// Worker threads for rollouts (defaults to all cores).
    #[arg(long, global = true, env = "DISEM_THREADS")]
    threads: Option<usize>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, env = "DISEM_OUT_DIR", default_value = "disem-out/train")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint with quantized messages and greedy actions.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = harness::DESK_EVAL_EPISODES)]
        episodes: usize,
        /// Write every evaluated message as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train tasks × settings × variants × seeds and tabulate the results.
    Matrix {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "th,pp,tj")]
        tasks: Vec<Task>,
        #[arg(long, value_delimiter = ',', default_value = "A,B")]
        settings: Vec<Setting>,
        #[arg(long, value_delimiter = ',', default_value = "ori,zc,difem,disem")]
        variants: Vec<Variant>,
        /// Explicit seeds; defaults to 0..2 (0..5 with --paper-scale).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Full-length schedules, five seeds and 500 evaluation episodes.
        #[arg(long)]
        paper_scale: bool,
        #[arg(long, env = "DISEM_OUT_DIR", default_value = "disem-out/matrix")]
        out: PathBuf,
    },
    /// Train over several message lengths and emit (entropy, perf) points.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "ori,disem")]
        variants: Vec<Variant>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        paper_scale: bool,
        #[arg(long, env = "DISEM_OUT_DIR", default_value = "disem-out/sweep")]
        out: PathBuf,
    },
    /// Check the single-step descent guarantees on random batches.
    LemmaCheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Huffman-code an evaluation trace per agent and digit; prints CSV.
    CodecReport {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = disem::quantization::DEFAULT_DELTA)]
        delta: f64,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Config file plus per-key overrides.
#[derive(Args, Debug, Clone, Default)]
struct RunArgs {
    /// TOML config; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    setting: Option<Setting>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    scheme: Option<Scheme>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    msg_len: Option<usize>,
    #[arg(long)]
    share_params: Option<bool>,
    #[arg(long)]
    straight_through: Option<bool>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    t_n: Option<usize>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    alpha_p: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    episodes_per_epoch: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_seed: Option<u64>,
    /// Start from the task's reduced desk-scale schedule.
    #[arg(long)]
    desk: bool,
}

enum Failure {
    Usage(String),
    Property(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            e => Failure::Runtime(e),
        }
    }
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(t) = self.task {
            c.env.task = t;
        }
        if let Some(s) = self.setting {
            c.env.setting = s;
        }
        if self.desk {
            if self.config.is_none() {
                c.agent = harness::desk_config(c.env.task, c.env.setting).agent;
            }
            harness::apply_desk(&mut c);
        }
        if let Some(v) = self.variant {
            c.train.variant = v;
        }
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set!(
            scheme => c.agent.scheme,
            hidden => c.agent.hidden,
            msg_len => c.agent.msg_len,
            share_params => c.agent.share_params,
            straight_through => c.agent.straight_through,
            delta => c.quantizer.delta,
            epsilon => c.entropy.epsilon,
            seed => c.run.seed,
            eval_seed => c.run.eval_seed,
        );
        macro_rules! set_opt {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field { c.train.$field = Some(v); })*
            };
        }
        set_opt!(t_n, t_max, alpha_p, lr, momentum, episodes_per_epoch, eval_episodes, eval_every, grad_clip);
        c.validate()?;
        Ok(c)
    }
}

fn reporter(quiet: bool) -> impl FnMut(&RunConfig, Progress<'_>) {
    move |c, p| {
        if quiet {
            return;
        }
        match p {
            Progress::Epoch(s) => eprintln!(
                "[{}] epoch {:>4} return {:>8.3} perf {:>7.3} train H {:>7.3} alpha {}",
                c.label(),
                s.epoch,
                s.mean_return,
                s.train_perf,
                s.gradient.train_entropy_bits,
                s.gradient.alpha
            ),
            Progress::Eval(r) => eprintln!(
                "[{}] eval after {:>4} epochs: perf {:.3} entropy {:.3} bits return {:.3}",
                c.label(),
                r.epoch,
                r.perf_metric,
                r.entropy_bits,
                r.mean_return
            ),
        }
    }
}

fn train_cmd(run: &RunArgs, out: &Path, quiet: bool) -> Result<(), Failure> {
    let config = run.resolve()?;
    let mut report = reporter(quiet);
    let outcome = trainer::train(&config, Some(out), |p| report(&config, p))?;
    harness::write_trace(&out.join("eval_trace.jsonl"), &outcome.last.messages)?;
    println!(
        "{}: perf {:.3} entropy {:.3} bits (at t_n: perf {:.3} entropy {:.3} bits); outputs in {}",
        config.label(),
        outcome.last.perf,
        outcome.last.entropy_bits,
        outcome.at_t_n.perf,
        outcome.at_t_n.entropy_bits,
        out.display()
    );
    Ok(())
}

fn eval_cmd(run: &RunArgs, checkpoint: &Path, episodes: usize, trace: Option<&Path>) -> Result<(), Failure> {
    let config = run.resolve()?;
    let spec = config.spec()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let params = ckpt
        .sets
        .first()
        .ok_or_else(|| Failure::Runtime(Error::Checkpoint("no parameter set".into())))?;
    let net = AgentNet::from_params(&config.agent, &spec, params.clone())?;
    let q = config.quantizer()?;
    let policy = trainer::Policy {
        net: &net,
        spec: &spec,
        variant: config.train.variant,
        quantizer: &q,
    };
    let report = trainer::evaluate(&policy, episodes, config.run.eval_seed)?;
    if let Some(path) = trace {
        harness::write_trace(path, &report.messages)?;
    }
    println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
    Ok(())
}

fn scaled(run: &RunArgs, paper_scale: bool) -> Result<(RunConfig, bool), Failure> {
    let mut base = run.resolve()?;
    if paper_scale {
        base.train.eval_episodes = base.train.eval_episodes.or(Some(harness::FULL_EVAL_EPISODES));
    } else if run.config.is_none() && run.hidden.is_none() {
        // The desk net size does not depend on the task.
        base.agent.hidden = harness::desk_config(base.env.task, base.env.setting).agent.hidden;
    }
    Ok((base, !paper_scale))
}

#[allow(clippy::too_many_arguments)]
fn matrix_cmd(
    run: &RunArgs,
    tasks: &[Task],
    settings: &[Setting],
    variants: &[Variant],
    seeds: Option<&[u64]>,
    paper_scale: bool,
    out: &Path,
    quiet: bool,
) -> Result<(), Failure> {
    let (base, desk) = scaled(run, paper_scale)?;
    let n_seeds = if paper_scale { harness::FULL_SEEDS } else { harness::DESK_SEEDS };
    let seeds = seeds.map(<[u64]>::to_vec).unwrap_or_else(|| (0..n_seeds as u64).collect());
    let matrix = Matrix {
        base,
        desk,
        tasks: tasks.to_vec(),
        settings: settings.to_vec(),
        variants: variants.to_vec(),
        seeds,
    };
    let output = harness::run_matrix(&matrix, out, reporter(quiet))?;
    print!("{}", harness::render_summary(&output.summary));
    let failed = output.results.iter().filter(|r| !r.error.is_empty()).count();
    if failed > 0 {
        return Err(Failure::Runtime(Error::Config(format!("{failed} cell(s) failed; see results.csv"))));
    }
    Ok(())
}

fn sweep_cmd(
    run: &RunArgs,
    lengths: &[usize],
    variants: &[Variant],
    seeds: &[u64],
    paper_scale: bool,
    out: &Path,
    quiet: bool,
) -> Result<(), Failure> {
    let (mut base, desk) = scaled(run, paper_scale)?;
    if desk {
        harness::apply_desk(&mut base);
    }
    if lengths.contains(&0) {
        return Err(Failure::Usage("message lengths must be positive".into()));
    }
    let points = harness::sweep_msg_len(&base, lengths, variants, seeds, out, reporter(quiet))?;
    println!("msg_len,variant,seed,entropy_bits,perf_metric");
    for p in &points {
        println!("{},{},{},{:.4},{:.4}", p.msg_len, p.variant, p.seed, p.entropy_bits, p.perf_metric);
    }
    Ok(())
}

fn lemma_cmd(trials: usize, seed: u64) -> Result<(), Failure> {
    if trials == 0 {
        return Err(Failure::Usage("--trials must be at least 1".into()));
    }
    let r = harness::lemma_check(trials, seed)?;
    for (name, rep) in [("random", &r.random), ("grid-only", &r.grid_only)] {
        println!(
            "{name}: trials {} updates {} transfers {} | violations: sign {} transfer {} monotonicity {} | max dH {:.3e}",
            rep.trials,
            rep.updates,
            rep.transfers,
            rep.sign_violations,
            rep.transfer_violations,
            rep.monotonicity_violations,
            rep.max_entropy_change
        );
    }
    if r.passed() {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure::Property("lemma check found violations".into()))
    }
}

fn codec_cmd(trace: &Path, delta: f64, out: Option<&Path>) -> Result<(), Failure> {
    let q = disem::Quantizer::new(delta).map_err(|e| Failure::Usage(e.to_string()))?;
    let records = harness::read_trace(trace)?;
    let rows = harness::codec_report(&records, &q)?;
    println!("agent,digit,symbols,entropy_bits,mean_code_len,within_bound,lossless");
    for r in &rows {
        println!(
            "{},{},{},{:.6},{:.6},{},{}",
            r.agent, r.digit, r.symbols, r.entropy_bits, r.mean_code_len, r.within_bound, r.lossless
        );
    }
    if let Some(path) = out {
        harness::write_csv(path, &rows)?;
    }
    if rows.iter().all(|r| r.within_bound && r.lossless) {
        Ok(())
    } else {
        Err(Failure::Property("coding bound or round trip violated".into()))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let quiet = cli.quiet;
    match &cli.command {
        Command::Train { run, out } => train_cmd(run, out, quiet),
        Command::Eval {
            run,
            checkpoint,
            episodes,
            trace,
        } => eval_cmd(run, checkpoint, *episodes, trace.as_deref()),
        Command::Matrix {
            run,
            tasks,
            settings,
            variants,
            seeds,
            paper_scale,
            out,
        } => matrix_cmd(run, tasks, settings, variants, seeds.as_deref(), *paper_scale, out, quiet),
        Command::Sweep {
            run,
            lengths,
            variants,
            seeds,
            paper_scale,
            out,
        } => sweep_cmd(run, lengths, variants, seeds, *paper_scale, out, quiet),
        Command::LemmaCheck { trials, seed } => lemma_cmd(*trials, *seed),
        Command::CodecReport { trace, delta, out } => codec_cmd(trace, *delta, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Property(m)) => {
            eprintln!("property failure: {m}");
            ExitCode::from(EXIT_PROPERTY)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
