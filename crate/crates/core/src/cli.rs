//! Command-line front end: `gen-data`, `train`, `eval`, `sweep`, `report`.

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::datagen::{self, DomainDataset, DomainId, Family, GenSpec};
use crate::error::{Error, Result};
use crate::evalhub::protocols::{self, Prepared, CROSS_DATASET, LODO};
use crate::evalhub::report::{EvalReport, ReportRow, CSV_HEADER};
use crate::fed::{ParamMessage, TrainedModel};

pub const OUT_ENV: &str = "FDSPG_OUT";
pub const CONFIG_FILE: &str = "config.txt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LOG_FILE: &str = "log.jsonl";
pub const SWEEP_HEADER: &str = "axis,axis_value,target_domain,accuracy,macro_f1,seed,config_hash";

#[derive(Debug, Parser)]
#[command(
    name = "fdspg",
    version,
    about = "Federated domain generalization with generated soft prompts"
)]
pub struct Cli {
    /// Output directory for everything the command writes.
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train one model per protocol fold and write checkpoints and a log.
    Train(TrainArgs),
    /// Evaluate checkpoints written by `train`.
    Eval(EvalArgs),
    /// Run one experiment per value of a config axis.
    Sweep(SweepArgs),
    /// Merge report CSVs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 4)]
    pub domains: usize,
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    #[arg(long, default_value_t = 64)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0.8)]
    pub shift: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset family preset; its seed offset is added to `--seed`.
    #[arg(long, value_enum, default_value_t = FamilyArg::A)]
    pub family: FamilyArg,
    /// Sub-directory of the output directory.
    #[arg(long, default_value = "dataset")]
    pub name: String,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    A,
    B,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::A => Family::A,
            FamilyArg::B => Family::B,
        }
    }
}

/// Config sources shared by every experiment command. Later sources win:
/// preset, then `--config`, then `--set`, then the dedicated flags.
#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the published epoch counts and learning rates.
    #[arg(long)]
    pub paper_profile: bool,
    /// Override any config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Sets data, model and noise seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub prompt_mode: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epochs_per_round: Option<f64>,
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long)]
    pub overlap: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = if self.paper_profile {
            ExperimentConfig::paper()
        } else {
            ExperimentConfig::desk()
        };
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            c.apply_text(&text)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            c.set(k, v)?;
        }
        if let Some(s) = self.seed {
            c.set_seed(s);
        }
        if let Some(p) = &self.dataset {
            c.dataset = Some(p.clone());
        }
        let flags: [(&str, Option<String>); 6] = [
            ("prompt-mode", self.prompt_mode.clone()),
            ("alpha", self.alpha.map(|x| x.to_string())),
            (
                "epochs-per-round",
                self.epochs_per_round.map(|x| x.to_string()),
            ),
            ("clients", self.clients.map(|x| x.to_string())),
            ("overlap", self.overlap.map(|x| x.to_string())),
            ("epochs", self.epochs.map(|x| x.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                c.set(k, &v)?;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    /// Hold each domain out in turn.
    Lodo,
    /// Train on every source domain, test on another dataset.
    CrossDataset,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, value_enum, default_value_t = Protocol::Lodo)]
    pub protocol: Protocol,
    /// Sub-directory of the output directory.
    #[arg(long, default_value = "train")]
    pub name: String,
    /// Write a server checkpoint every N aggregation rounds (0 = final only).
    #[arg(long, default_value_t = 1)]
    pub checkpoint_every: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Protocol::Lodo)]
    pub protocol: Protocol,
    /// Target dataset for cross-dataset evaluation.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Target family preset, used when `--target` is absent.
    #[arg(long, value_enum)]
    pub target_family: Option<FamilyArg>,
    /// Report file stem inside the output directory.
    #[arg(long, default_value = "report")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// One of alpha, epochs-per-round, clients, shots, overlap, prompt-mode.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    /// Run up to N configurations at once.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// CSV files written by `eval` or `sweep`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Merged file name inside the output directory.
    #[arg(long, default_value = "merged.csv")]
    pub name: String,
}

pub const SWEEP_AXES: [&str; 6] = [
    "alpha",
    "epochs-per-round",
    "clients",
    "shots",
    "overlap",
    "prompt-mode",
];

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Refuses to reuse a non-empty directory unless `force` is set.
fn claim_dir(path: &Path, force: bool) -> Result<()> {
    if !force {
        if let Ok(mut entries) = fs::read_dir(path) {
            if entries.next().is_some() {
                return Err(Error::WouldOverwrite(path.to_path_buf()));
            }
        }
    }
    create_dir(path)
}

pub fn cmd_gen_data(out: &Path, args: &GenDataArgs) -> Result<PathBuf> {
    let dir = out.join(&args.name);
    claim_dir(&dir, args.force)?;
    let spec = GenSpec {
        classes: args.classes,
        domains: args.domains,
        shots: args.shots,
        feature_dim: args.feature_dim,
        shift_strength: args.shift,
        seed: args
            .seed
            .wrapping_add(Family::from(args.family).seed_offset()),
    };
    let ds = datagen::gen_dataset(&spec)?;
    datagen::save_dataset(&ds, &dir)
}

/// Folds of a protocol: `(directory name, held-out domain)`.
fn folds(protocol: Protocol, ds: &DomainDataset) -> Vec<(String, Option<DomainId>)> {
    match protocol {
        Protocol::Lodo => ds
            .domains
            .iter()
            .map(|d| (format!("holdout-{}", d.name), Some(d.id)))
            .collect(),
        Protocol::CrossDataset => vec![("all-sources".to_string(), None)],
    }
}

fn log_line(value: serde_json::Value) -> String {
    let mut s = value.to_string();
    s.push('\n');
    s
}

pub fn cmd_train(out: &Path, args: &TrainArgs) -> Result<PathBuf> {
    let cfg = args.cfg.resolve()?;
    let dir = out.join(&args.name);
    claim_dir(&dir, args.force)?;
    let dataset = cfg.load_dataset()?;
    let hash = cfg.hash(&dataset);
    write(
        &dir.join(CONFIG_FILE),
        format!("# config hash {hash}\n{}", cfg.to_text()),
    )?;
    let prep = Prepared::new(&cfg, dataset)?;
    for (name, holdout) in folds(args.protocol, &prep.dataset) {
        let fold_dir = dir.join(&name);
        create_dir(&fold_dir)?;
        let sources: Vec<DomainId> = prep
            .dataset
            .domain_ids()
            .into_iter()
            .filter(|&d| Some(d) != holdout)
            .collect();
        let log_path = fold_dir.join(LOG_FILE);
        let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let every = args.checkpoint_every;
        let run = protocols::train_on(&cfg, &prep, &sources, &mut |round, state| {
            let line = log_line(json!({"event": "round", "config_hash": hash, "round": round}));
            log.write_all(line.as_bytes())
                .map_err(|e| Error::io(&log_path, e))?;
            if every > 0 && (round.round as usize).is_multiple_of(every) {
                let msg = ParamMessage::new(
                    crate::fed::trainer::SERVER_ID,
                    round.round,
                    state.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
                )?;
                msg.write(&fold_dir.join(format!("round_{:05}.ckpt", round.round)))?;
            }
            Ok(())
        })?;
        if let Some(h) = holdout {
            crate::fed::trainer::assert_unseen(&run, h)?;
        }
        let summary = json!({
            "event": "summary",
            "config_hash": hash,
            "holdout": holdout.and_then(|h| prep.dataset.domain_name(h)),
            "aggregation_events": run.logs.len(),
            "stage1_events": run.logs.iter().filter(|l| l.stage == 1).count(),
            "stage2_events": run.logs.iter().filter(|l| l.stage == 2).count(),
            "prompt_updates": run.prompt_updates,
            "gan_updates": run.gan_updates,
            "lineage": run.lineage,
        });
        log.write_all(log_line(summary).as_bytes())
            .map_err(|e| Error::io(&log_path, e))?;
        run.model
            .to_message(run.logs.len() as u32)?
            .write(&fold_dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(dir)
}

fn load_model(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    sources: &[DomainId],
    path: &Path,
) -> Result<TrainedModel> {
    let msg = ParamMessage::read(path)?;
    TrainedModel::from_message(&cfg.fed, &prep.encoders, sources, &msg)
}

pub fn cmd_eval(out: &Path, args: &EvalArgs) -> Result<EvalReport> {
    let cfg = ExperimentConfig::from_file(&args.checkpoint.join(CONFIG_FILE))?;
    let dataset = cfg.load_dataset()?;
    let hash = cfg.hash(&dataset);
    let prep = Prepared::new(&cfg, dataset)?;
    let report = match args.protocol {
        Protocol::Lodo => {
            let mut rows = Vec::new();
            for (name, holdout) in folds(Protocol::Lodo, &prep.dataset) {
                let target = holdout.expect("lodo folds hold a domain out");
                let sources: Vec<DomainId> = prep
                    .dataset
                    .domain_ids()
                    .into_iter()
                    .filter(|&d| d != target)
                    .collect();
                let model = load_model(
                    &cfg,
                    &prep,
                    &sources,
                    &args.checkpoint.join(name).join(FINAL_CHECKPOINT),
                )?;
                let s = protocols::evaluate(&cfg, &prep, &model, target)?;
                rows.push(ReportRow {
                    target_domain: prep
                        .dataset
                        .domain_name(target)
                        .unwrap_or_default()
                        .to_string(),
                    accuracy: s.accuracy,
                    macro_f1: s.macro_f1,
                    n: s.n,
                });
            }
            EvalReport::new(LODO, cfg.seed(), hash, rows)?
        }
        Protocol::CrossDataset => {
            let target = match (&args.target, args.target_family) {
                (Some(p), _) => datagen::load_dataset(p)?,
                (None, Some(f)) => {
                    let mut spec = cfg.data.clone();
                    spec.seed = cfg.data.seed.wrapping_add(Family::from(f).seed_offset());
                    datagen::gen_dataset(&spec)?
                }
                (None, None) => {
                    return Err(Error::Config(
                        "cross-dataset needs --target or --target-family".into(),
                    ))
                }
            };
            let hash = protocols::cross_dataset_hash(&cfg, &prep.dataset, &target);
            let sources = prep.dataset.domain_ids();
            let model = load_model(
                &cfg,
                &prep,
                &sources,
                &args.checkpoint.join("all-sources").join(FINAL_CHECKPOINT),
            )?;
            let tprep = prep.with_dataset(target)?;
            EvalReport::new(
                CROSS_DATASET,
                cfg.seed(),
                hash,
                protocols::score_all_domains(&cfg, &tprep, &model)?,
            )?
        }
    };
    report.write(out, &args.name)?;
    Ok(report)
}

fn sweep_rows(axis: &str, value: &str, report: &EvalReport) -> String {
    report
        .rows
        .iter()
        .map(|r| {
            format!(
                "{axis},{value},{},{:.6},{:.6},{},{}\n",
                r.target_domain, r.accuracy, r.macro_f1, report.seed, report.config_hash
            )
        })
        .collect()
}

/// Runs every value, appending rows to `<out>/sweep-<axis>.csv` as runs finish
/// in value order. Returns the CSV path.
pub fn cmd_sweep(out: &Path, args: &SweepArgs) -> Result<PathBuf> {
    if !SWEEP_AXES.contains(&args.axis.as_str()) {
        return Err(Error::Config(format!(
            "unknown sweep axis {:?} (expected one of {})",
            args.axis,
            SWEEP_AXES.join(", ")
        )));
    }
    let base = args.cfg.resolve()?;
    let configs = args
        .values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            c.set(&args.axis, v)?;
            c.validate()?;
            Ok((v.clone(), c))
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    let path = out.join(format!("sweep-{}.csv", args.axis));
    write(&path, format!("{SWEEP_HEADER}\n"))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.parallel.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    for chunk in configs.chunks(args.parallel.max(1)) {
        let reports: Vec<Result<EvalReport>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|(_, c)| protocols::leave_one_domain_out(c).map(|(r, _)| r))
                .collect()
        });
        let mut file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        for ((value, _), report) in chunk.iter().zip(reports) {
            let report = report?;
            file.write_all(sweep_rows(&args.axis, value, &report).as_bytes())
                .map_err(|e| Error::io(&path, e))?;
        }
        file.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(path)
}

/// Concatenates CSVs that share a header.
pub fn cmd_report(out: &Path, args: &ReportArgs) -> Result<PathBuf> {
    let mut header: Option<String> = None;
    let mut body = String::new();
    for p in &args.inputs {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let mut lines = text.lines();
        let h = lines
            .next()
            .ok_or_else(|| Error::Schema(format!("{} is empty", p.display())))?;
        if h != CSV_HEADER && h != SWEEP_HEADER {
            return Err(Error::Schema(format!(
                "{} has an unknown header",
                p.display()
            )));
        }
        match &header {
            None => header = Some(h.to_string()),
            Some(prev) if prev != h => {
                return Err(Error::Schema(format!(
                    "{} has a different header",
                    p.display()
                )))
            }
            Some(_) => {}
        }
        for l in lines.filter(|l| !l.is_empty()) {
            body.push_str(l);
            body.push('\n');
        }
    }
    create_dir(out)?;
    let path = out.join(&args.name);
    write(&path, format!("{}\n{body}", header.unwrap_or_default()))?;
    Ok(path)
}

/// Parses `argv` and runs the chosen command, printing what was written.
pub fn run<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // --help and --version land here too.
            return if e.use_stderr() {
                Err(Error::Config("invalid command line".into()))
            } else {
                Ok(())
            };
        }
    };
    match &cli.command {
        Command::GenData(a) => println!("{}", cmd_gen_data(&cli.out, a)?.display()),
        Command::Train(a) => println!("{}", cmd_train(&cli.out, a)?.display()),
        Command::Eval(a) => {
            let r = cmd_eval(&cli.out, a)?;
            print!("{}", r.to_csv());
        }
        Command::Sweep(a) => println!("{}", cmd_sweep(&cli.out, a)?.display()),
        Command::Report(a) => println!("{}", cmd_report(&cli.out, a)?.display()),
    }
    Ok(())
}
