//! Experiment runner for `ltadapt`: single runs, the ablation ladder, one-key
//! sweeps, the marginal-ratio study, attention export and self-checks.

pub mod config;
pub mod runner;
pub mod verify;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ltadapt::Error;
use serde_json::Value;

use config::{parse_f64_list, ExperimentConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_ABORT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ltadapt", version, about = "Long-tailed adapter fine-tuning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration over every seed.
    Run(ExperimentArgs),
    /// Run the five-row cumulative ablation ladder.
    Ablation(ExperimentArgs),
    /// Vary one numeric key, e.g. `--param alpha --values 0.05,0.1,0.2`.
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long)]
        values: String,
        #[command(flatten)]
        args: ExperimentArgs,
    },
    /// Training/test marginal ratio against class size on a Gaussian model.
    Study(StudyArgs),
    /// Export raw attention of the frozen, baseline and full models.
    Attention {
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[command(flatten)]
        args: ExperimentArgs,
    },
    /// Gradient and identity self-checks.
    Verify,
}

#[derive(Debug, Default, Args)]
pub struct ExperimentArgs {
    /// Flat JSON config with dotted keys; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub n1: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// One seed or a comma list.
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    /// Components to switch off: any of sg,init,cf,fit.
    #[arg(long)]
    pub ablate: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ExperimentArgs {
    pub fn overrides(&self) -> Vec<(String, Value)> {
        let mut o: Vec<(String, Value)> = Vec::new();
        let mut num = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        num("beta", self.beta.map(Value::from));
        num("classes", self.classes.map(Value::from));
        num("n1", self.n1.map(Value::from));
        num("epochs", self.epochs.map(Value::from));
        num("batch-size", self.batch_size.map(Value::from));
        num("lr", self.lr.map(Value::from));
        num("momentum", self.momentum.map(Value::from));
        num("seed", self.seed.clone().map(Value::from));
        num("alpha", self.alpha.map(Value::from));
        num("mu", self.mu.map(Value::from));
        num("gamma", self.gamma.map(Value::from));
        num("lambda1", self.lambda1.map(Value::from));
        num("lambda2", self.lambda2.map(Value::from));
        num("lambda3", self.lambda3.map(Value::from));
        num("ablate", self.ablate.clone().map(Value::from));
        num("out", self.out.as_ref().map(|p| Value::from(p.to_string_lossy().into_owned())));
        o
    }

    pub fn resolve(&self) -> ltadapt::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&self.overrides())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Default, Args)]
pub struct StudyArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub n1: Option<u64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

impl StudyArgs {
    pub fn apply_to(&self, c: &mut runner::StudyConfig) {
        c.classes = self.classes.unwrap_or(c.classes);
        c.n1 = self.n1.unwrap_or(c.n1);
        c.beta = self.beta.unwrap_or(c.beta);
        c.seed = self.seed.unwrap_or(c.seed);
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_ABORT,
    }
}

/// Executes a parsed command, printing a short report to stdout.
pub fn execute(cli: &Cli) -> ltadapt::Result<()> {
    match &cli.command {
        Command::Run(a) => {
            let cfg = a.resolve()?;
            let rec = runner::run(&cfg)?;
            report("run", &rec);
            println!("wrote {}", cfg.out.display());
        }
        Command::Ablation(a) => {
            let cfg = a.resolve()?;
            for (i, (ab, rec)) in runner::run_ablation(&cfg)?.iter().enumerate() {
                report(&format!("row {} sg={} init={} cf={} fit={}", i + 1, ab.sg, ab.init, ab.cf, ab.fit), rec);
            }
            println!("wrote {}", cfg.out.join("ablation.csv").display());
        }
        Command::Sweep { param, values, args } => {
            let cfg = args.resolve()?;
            let values = parse_f64_list(values, "values")?;
            for (v, rec) in runner::run_sweep(&cfg, param, &values)? {
                report(&format!("{param}={v}"), &rec);
            }
        }
        Command::Study(a) => {
            let mut c = runner::StudyConfig::default();
            a.apply_to(&mut c);
            let r = runner::run_study(&c, &a.out)?;
            println!(
                "pearson r = {:?}, p = {:?}, best mu = {}, best gamma = {}",
                r.pearson_r, r.p_value, r.best_mu, r.best_gamma
            );
        }
        Command::Attention { samples, args } => {
            let cfg = args.resolve()?;
            let entries = runner::run_attention(&cfg, *samples)?;
            println!("exported {} attention stacks to {}", entries.len(), cfg.out.join("attention").display());
        }
        Command::Verify => {
            let enc = ltadapt::encoder::EncoderConfig::default();
            let r = verify::gradient_suite(enc, 5, 3, 0)?;
            let worst = ltadapt::gradcheck::worst(&r);
            println!("gradient check: {} ({} arrays, worst rel err {worst:.2e})", verdict(ltadapt::gradcheck::all_passed(&r)), r.len());
            let d = verify::decomposition_suite(50, 0)?;
            println!("attention expansion: {} (max discrepancy {d:.2e})", verdict(d < 1e-8));
            let s = runner::run_study(&runner::StudyConfig::default(), &std::env::temp_dir().join("ltadapt-verify"))?;
            let ok = s.pearson_r.is_some_and(|r| r > 0.0) && s.p_value.is_some_and(|p| p < 0.05);
            println!("marginal ratio vs class size: {} (r = {:?}, p = {:?})", verdict(ok), s.pearson_r, s.p_value);
        }
    }
    Ok(())
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAILED"
    }
}

fn report(label: &str, rec: &runner::RunRecord) {
    let a = &rec.aggregate;
    let med = |s: Option<runner::Stat>| s.map_or("-".to_string(), |s| format!("{:.4}", s.median));
    println!(
        "{label}: acc_all {} head {} med {} tail {} over {} seed(s)",
        med(a.acc_all),
        med(a.acc_head),
        med(a.acc_med),
        med(a.acc_tail),
        a.completed
    );
}
