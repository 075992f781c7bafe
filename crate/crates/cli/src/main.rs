use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use asd_core::config::Config;
use asd_core::error::{AsdError, Result};
use asd_core::eval::{
    compute_eer, degradation_sweep, run_ablation, run_streaming, score_streaming, sweep_rates, BenchmarkRecords,
};
use asd_core::model::{train, AsdModel, Dataset, Precision, Toggles};
use asd_core::scalar::Scalar;
use asd_core::sim::{generate, load_meeting, save_meeting, MeetingRecord};
use asd_core::streaming::{cost_model, rows_to_csv};
use clap::{Parser, Subcommand};

/// Active speaker detection on a 360° meeting camera.
#[derive(Parser, Debug)]
#[command(name = "asd", version)]
struct Cli {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate one synthetic meeting into a directory.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the benchmark train split, early-stopping on validation.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Ablation preset C1..C9 (full model by default).
        #[arg(long)]
        preset: Option<String>,
    },
    /// Stream a meeting through a trained model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        meeting: PathBuf,
        /// Prediction CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and test ablation presets on the frozen benchmark; writes a JSON
    /// report and one checkpoint per preset beside it.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "C4,C5,C6,C8,C9")]
        presets: Vec<String>,
    },
    /// EER on the test split as the per-participant prediction rate drops.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the cost model and per-layer FLOPs of the configured model.
    Flops,
}

fn exit_code(e: &AsdError) -> u8 {
    match e {
        AsdError::NonFinite(_) => 3,
        _ => 2,
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(fs::write(path, text)?)
}

fn load_model(path: &Path) -> Result<AsdModel<f64>> {
    AsdModel::load(std::io::BufReader::new(fs::File::open(path)?))
}

fn train_with<T: Scalar>(cfg: &Config, preset: Option<&str>, out: &Path) -> Result<()> {
    let mut mc = cfg.model.clone();
    if let Some(p) = preset {
        mc.toggles = Toggles::preset(p)?;
    }
    let data = BenchmarkRecords::generate(cfg.benchmark.splits()?)?;
    let mut model: AsdModel<T> = AsdModel::new(&cfg.frontend, &mc, cfg.seed)?;
    let train_set = Dataset::build(&data.train, &model)?;
    let val_set = Dataset::build(&data.val, &model)?;
    let outcome = train(&mut model, &train_set, Some(&val_set), &cfg.train, cfg.seed, |e| {
        eprintln!("epoch {:>3}  loss {:.5}  val EER {:?}  {:.1}s", e.epoch, e.train_loss, e.val_eer, e.seconds);
    })?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    model.save(std::io::BufWriter::new(fs::File::create(out)?))?;
    write(&out.with_extension("history.csv"), &outcome.history.to_csv())?;
    println!("best epoch {} val EER {:?}", outcome.best_epoch, outcome.best_val_eer);
    Ok(())
}

fn ablate_with<T: Scalar>(cfg: &Config, presets: &[String], out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let data = BenchmarkRecords::generate(cfg.benchmark.splits()?)?;
    let names: Vec<&str> = presets.iter().map(String::as_str).collect();
    let runs = run_ablation::<T>(cfg, &data, &names, |name, e| {
        eprintln!("{name} epoch {:>3}  loss {:.5}  val EER {:?}", e.epoch, e.train_loss, e.val_eer);
    })?;
    for run in &runs {
        let r = &run.row;
        println!("{:<3} test EER {:6.2}%  best epoch {}  {:.0}s", r.name, r.test_eer, r.best_epoch, r.train_seconds);
        // checkpoints land next to the report, e.g. ablation.C8.ckpt
        let ckpt = out.with_extension(format!("{}.ckpt", r.name));
        run.model.save(std::io::BufWriter::new(fs::File::create(ckpt)?))?;
    }
    let rows: Vec<_> = runs.iter().map(|r| &r.row).collect();
    write(out, &(serde_json::to_string_pretty(&rows)? + "\n"))
}

fn eval(cfg: &Config, model: &Path, meeting: &Path, out: Option<&Path>) -> Result<()> {
    let model = load_model(model)?;
    let record: MeetingRecord = load_meeting(meeting)?;
    let outputs = run_streaming(&model, &record, &cfg.streaming, |_| cfg.streaming.budget.tick_budget_kflops)?;
    let rows: Vec<_> = outputs.iter().flat_map(|o| o.rows.iter().cloned()).collect();
    let csv = rows_to_csv(&rows);
    match out {
        Some(p) => write(p, &csv)?,
        None => std::io::stdout().lock().write_all(csv.as_bytes())?,
    }
    let eer = compute_eer(&score_streaming(&record, &outputs))?;
    eprintln!("EER {eer:.3}%");
    Ok(())
}

fn sweep(cfg: &Config, model: &Path, out: &Path) -> Result<()> {
    let model = load_model(model)?;
    let splits = cfg.benchmark.splits()?;
    let test: Vec<MeetingRecord> = splits.test.iter().map(generate).collect::<Result<_>>()?;
    let points = degradation_sweep(&model, &test, &cfg.streaming, &sweep_rates())?;
    let mut csv = String::from("rate,eer,achieved_rate,max_tick_kflops\n");
    for p in &points {
        csv.push_str(&format!("{},{},{},{}\n", p.rate, p.eer, p.achieved_rate, p.max_tick_kflops));
        println!("rate {:5.3}  EER {:6.2}%  achieved {:.3}", p.rate, p.eer, p.achieved_rate);
    }
    write(out, &csv)
}

fn flops(cfg: &Config) -> Result<()> {
    let mut out = std::io::stdout().lock();
    for k in [1, 14] {
        let c = cost_model(k)?;
        writeln!(out, "cost_model({k}) = {c} = {:.3} MFLOPs/participant", *c.numer() as f64 / *c.denom() as f64)?;
    }
    let model: AsdModel<f64> = AsdModel::new(&cfg.frontend, &cfg.model, cfg.seed)?;
    let (shared, per) = model.flops()?;
    writeln!(out, "shared per tick: {} FLOPs", shared.total)?;
    for (name, f) in &shared.per_layer {
        writeln!(out, "  {name:<24} {f}")?;
    }
    writeln!(out, "per participant per prediction: {} FLOPs", per.total)?;
    for (name, f) in &per.per_layer {
        writeln!(out, "  {name:<24} {f}")?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Simulate { out } => {
            let spec = cfg.benchmark.meeting(cfg.seed);
            save_meeting(&generate(&spec)?, out)?;
            println!("{} participants, {:.1} s -> {}", spec.participants.len(), spec.duration_s, out.display());
            Ok(())
        }
        Command::Train { out, preset } => match cfg.train.precision {
            Precision::F32 => train_with::<f32>(&cfg, preset.as_deref(), out),
            Precision::F64 => train_with::<f64>(&cfg, preset.as_deref(), out),
        },
        Command::Eval { model, meeting, out } => eval(&cfg, model, meeting, out.as_deref()),
        Command::Ablate { out, presets } => match cfg.train.precision {
            Precision::F32 => ablate_with::<f32>(&cfg, presets, out),
            Precision::F64 => ablate_with::<f64>(&cfg, presets, out),
        },
        Command::Sweep { model, out } => sweep(&cfg, model, out),
        Command::Flops => flops(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        // a closed pipe (`| head`) is not a failure
        Err(AsdError::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
