use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use log::info;

use e2e_phy::config::ExperimentConfig;
use e2e_phy::eval::{self, ChannelKind, System};
use e2e_phy::io::write_atomic;
use e2e_phy::nets::{self, Model, SequenceDecoder, Transmitter};
use e2e_phy::nn::{NetParams, WeightFile};
use e2e_phy::training::{self, Phase1Trainer, RecordedStream};
use e2e_phy::Error;

#[derive(Parser, Debug)]
#[command(name = "e2ephy", version, about = "Learned physical layer: training, synchronization and BLER evaluation")]
struct Cli {
    /// Flat `key = value` experiment config; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set seed=7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective configuration with key descriptions.
    Config,
    /// Phase-one end-to-end training on the stochastic channel.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train the offset estimator against the phase-one transmitter.
    TrainOe,
    /// Record drifting-channel streams for finetuning.
    Record,
    /// Finetune the receiver on the recorded streams.
    Finetune,
    /// BLER curve of one system over one channel.
    Eval {
        #[arg(long, default_value = "autoencoder")]
        system: String,
        #[arg(long, default_value = "stochastic")]
        channel: String,
        /// Model weights (default: the trained model in the output directory).
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Autoencoder before and after finetuning against the DQPSK baseline.
    Compare {
        #[arg(long, default_value = "drifting")]
        channel: String,
    },
    /// Export every message's transmit symbols.
    Constellation {
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Scale to unit average symbol energy first.
        #[arg(long)]
        rescale: bool,
    },
    /// List the tensors of a weights file.
    InspectWeights { path: PathBuf },
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, body: &str) -> anyhow::Result<PathBuf> {
        let p = self.path(name);
        write_atomic(&p, body.as_bytes()).with_context(|| format!("writing {}", p.display()))?;
        info!("wrote {}", p.display());
        Ok(p)
    }

    fn load_model(&self, path: &Path) -> anyhow::Result<Model> {
        let file = WeightFile::load(path).with_context(|| format!("loading weights {}", path.display()))?;
        Model::import(&self.cfg.system(), self.cfg.power_mode, &file)
            .with_context(|| format!("weights {} do not match the configured networks", path.display()))
    }
}

const PHASE1_CKPT: &str = "phase1.ckpt";
const PHASE1_WEIGHTS: &str = "phase1.weights";
const MODEL_WEIGHTS: &str = "model.weights";
const FINETUNED_WEIGHTS: &str = "model_finetuned.weights";
const RECORDINGS: &str = "recordings";

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    if !cli.overrides.is_empty() {
        let mut base = e2e_phy::kv::parse(&text)?;
        for o in &cli.overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
            base.insert(k.trim().to_string(), v.trim().to_string());
        }
        text = e2e_phy::kv::format(&base);
    }
    Ok(ExperimentConfig::parse(&text)?)
}

fn train(ctx: &Ctx, resume: bool) -> anyhow::Result<()> {
    let cfg = ctx.cfg.phase1()?;
    let ckpt = ctx.path(PHASE1_CKPT);
    let mut t = if resume {
        Phase1Trainer::resume(cfg, &ckpt).with_context(|| format!("resuming from {}", ckpt.display()))?
    } else {
        Phase1Trainer::new(cfg)?
    };
    let total = t.cfg.schedule.total_steps();
    let mut acc = (0.0, 0u64);
    t.run(Some((&ckpt, ctx.cfg.checkpoint_every)), |r| {
        acc.0 += r.loss;
        acc.1 += 1;
        if r.cursor.step % 100 == 0 || r.cursor.step + 1 == total {
            info!(
                "step {}/{} epoch {} batch {} loss {:.4}",
                r.cursor.step + 1,
                total,
                r.cursor.epoch + 1,
                r.batch,
                acc.0 / acc.1 as f64
            );
            acc = (0.0, 0);
        }
    })?;
    let mut file = WeightFile::new();
    t.tx.net.export("tx", &mut file);
    t.sd.pe.export("pe", &mut file);
    t.sd.fe.export("fe", &mut file);
    t.sd.rx.export("rx", &mut file);
    let p = ctx.path(PHASE1_WEIGHTS);
    file.save(&p)?;
    info!("wrote {}", p.display());
    Ok(())
}

fn load_phase1(ctx: &Ctx) -> anyhow::Result<(Transmitter, SequenceDecoder)> {
    let path = ctx.path(PHASE1_WEIGHTS);
    let file = WeightFile::load(&path).with_context(|| format!("loading {} (run `train` first)", path.display()))?;
    let p = ctx.cfg.system();
    let tx = Transmitter {
        net: NetParams::import(&nets::tx_specs(&p), "tx", &file)?,
        mode: ctx.cfg.power_mode,
        symbols_per_message: p.symbols_per_message,
    };
    let sd = SequenceDecoder {
        pe: NetParams::import(&nets::pe_specs(&p), "pe", &file)?,
        fe: NetParams::import(&nets::fe_specs(&p), "fe", &file)?,
        rx: NetParams::import(&nets::rx_specs(&p), "rx", &file)?,
        params: p,
    };
    Ok((tx, sd))
}

fn train_oe(ctx: &Ctx) -> anyhow::Result<()> {
    let (tx, sd) = load_phase1(ctx)?;
    let cfg = ctx.cfg.oe()?;
    let total = cfg.schedule.total_steps();
    let oe = training::train_oe(&tx, &cfg, |r| {
        if r.cursor.step % 100 == 0 || r.cursor.step + 1 == total {
            info!("oe step {}/{} batch {} loss {:.4}", r.cursor.step + 1, total, r.batch, r.loss);
        }
    })?;
    let mut file = WeightFile::new();
    Model { tx, sd, oe }.export(&mut file);
    let p = ctx.path(MODEL_WEIGHTS);
    file.save(&p)?;
    info!("wrote {}", p.display());
    Ok(())
}

fn record(ctx: &Ctx) -> anyhow::Result<()> {
    let model = ctx.load_model(&ctx.path(MODEL_WEIGHTS))?;
    let dir = ctx.path(RECORDINGS);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let streams = training::record_training_streams(&model.tx, &ctx.cfg.system(), &ctx.cfg.record(), ctx.cfg.record_streams)?;
    for (k, s) in streams.iter().enumerate() {
        s.save(&dir, k)?;
    }
    info!("recorded {} streams into {}", streams.len(), dir.display());
    Ok(())
}

fn finetune(ctx: &Ctx) -> anyhow::Result<()> {
    let mut model = ctx.load_model(&ctx.path(MODEL_WEIGHTS))?;
    let dir = ctx.path(RECORDINGS);
    let streams = RecordedStream::load_dir(&dir)?;
    if streams.is_empty() {
        return Err(anyhow!(Error::Config(format!("no recordings in {} (run `record` first)", dir.display()))));
    }
    let cfg = ctx.cfg.finetune();
    let ds = training::build_finetune_dataset(&streams, &model, &cfg)?;
    let mut csv = eval::csv_preamble(&ctx.cfg.hash(), ctx.cfg.seed);
    csv.push_str("stream,eb_n0_db,frames,compared,errors,bler,admitted,note\n");
    for a in &ds.admissions {
        let bler = a.bler.map(|b| format!("{b:.6e}")).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            a.stream, a.eb_n0_db, a.frames, a.compared, a.errors, bler, a.admitted, a.note
        ));
    }
    ctx.write("finetune_admission.csv", &csv)?;
    let admitted = ds.admissions.iter().filter(|a| a.admitted).count();
    info!("{admitted}/{} streams admitted, {} windows", ds.admissions.len(), ds.len());
    let report = training::finetune_receiver(&ds, &mut model.sd, &cfg)?;
    for (b, l) in report.batches.iter().zip(&report.epoch_losses) {
        info!("finetune batch {b}: loss {l:.4}");
    }
    let mut file = WeightFile::new();
    model.export(&mut file);
    let p = ctx.path(FINETUNED_WEIGHTS);
    file.save(&p)?;
    info!("wrote {}", p.display());
    Ok(())
}

fn run_eval(ctx: &Ctx, system: &str, channel: &str, weights: Option<PathBuf>) -> anyhow::Result<()> {
    let system: System = system.parse()?;
    let channel: ChannelKind = channel.parse()?;
    let model = match system {
        System::Autoencoder => Some(ctx.load_model(&weights.unwrap_or_else(|| ctx.path(MODEL_WEIGHTS)))?),
        System::Dqpsk => None,
    };
    let pts = eval::evaluate_bler(system, channel, model.as_ref(), &ctx.cfg.eval_grid.0, &ctx.cfg.eval())?;
    let csv = eval::bler_csv(&[(system, channel, &pts)], &ctx.cfg.hash(), ctx.cfg.seed);
    ctx.write(&format!("bler_{system}_{channel}.csv"), &csv)?;
    for p in &pts {
        println!("{system},{channel},{},{},{},{:.3e}", p.eb_n0_db, p.trials, p.errors, p.bler);
    }
    Ok(())
}

fn compare(ctx: &Ctx, channel: &str) -> anyhow::Result<()> {
    let channel: ChannelKind = channel.parse()?;
    let grid = &ctx.cfg.eval_grid.0;
    let ecfg = ctx.cfg.eval();
    let mut curves = Vec::new();
    let pre = ctx.load_model(&ctx.path(MODEL_WEIGHTS))?;
    curves.push(("autoencoder", eval::evaluate_bler(System::Autoencoder, channel, Some(&pre), grid, &ecfg)?));
    let post_path = ctx.path(FINETUNED_WEIGHTS);
    if post_path.exists() {
        let post = ctx.load_model(&post_path)?;
        curves.push(("finetuned", eval::evaluate_bler(System::Autoencoder, channel, Some(&post), grid, &ecfg)?));
    } else {
        log::warn!("{} not found; comparing without a finetuned curve", post_path.display());
    }
    curves.push(("dqpsk", eval::evaluate_bler(System::Dqpsk, channel, None, grid, &ecfg)?));
    let named: Vec<(&str, &[eval::BlerPoint])> = curves.iter().map(|(n, c)| (*n, c.as_slice())).collect();
    let csv = eval::compare_csv(&named, &ctx.cfg.hash(), ctx.cfg.seed)?;
    ctx.write(&format!("compare_{channel}.csv"), &csv)?;
    for (name, pts) in &curves {
        match eval::required_eb_n0(pts, 1e-2) {
            Some(x) => println!("{name}: BLER 1e-2 at {x:.2} dB"),
            None => println!("{name}: BLER 1e-2 not reached on the grid"),
        }
    }
    Ok(())
}

fn constellation(ctx: &Ctx, weights: Option<PathBuf>, rescale: bool) -> anyhow::Result<()> {
    let tx = match weights {
        Some(p) => ctx.load_model(&p)?.tx,
        None if ctx.path(MODEL_WEIGHTS).exists() => ctx.load_model(&ctx.path(MODEL_WEIGHTS))?.tx,
        None => load_phase1(ctx)?.0,
    };
    let mut table = tx.table()?;
    if rescale {
        table = table.rescaled_to_unit_power();
    }
    let pts = nets::constellation_points(&table);
    let csv = eval::constellation_csv(&pts, &ctx.cfg.hash(), ctx.cfg.seed);
    ctx.write("constellation.csv", &csv)?;
    println!("{} points, average energy {:.6}, peak amplitude {:.6}", pts.len(), table.average_energy(), table.peak_amplitude());
    Ok(())
}

fn inspect(path: &Path) -> anyhow::Result<()> {
    let file = WeightFile::load(path).with_context(|| format!("loading {}", path.display()))?;
    let mut total = 0;
    for (name, t) in &file.tensors {
        println!("{name:<24} {:?} {}", t.shape(), t.len());
        total += t.len();
    }
    println!("{} tensors, {total} values", file.tensors.len());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    let out = PathBuf::from(&cfg.output_dir);
    if !matches!(cli.command, Command::Config | Command::InspectWeights { .. }) {
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    }
    let ctx = Ctx { cfg, out };
    info!("config hash {}", ctx.cfg.hash());
    match cli.command {
        Command::Config => {
            print!("{}", ctx.cfg.render());
            Ok(())
        }
        Command::Train { resume } => train(&ctx, resume),
        Command::TrainOe => train_oe(&ctx),
        Command::Record => record(&ctx),
        Command::Finetune => finetune(&ctx),
        Command::Eval { system, channel, weights } => run_eval(&ctx, &system, &channel, weights),
        Command::Compare { channel } => compare(&ctx, &channel),
        Command::Constellation { weights, rescale } => constellation(&ctx, weights, rescale),
        Command::InspectWeights { path } => inspect(&path),
    }
}

/// 2: configuration, 3: I/O or file format, 4: numerical failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 2,
        Some(Error::Io(_) | Error::Format(_)) => 3,
        Some(Error::Divergence { .. } | Error::NonFiniteGradient(_)) => 4,
        Some(_) => 1,
        None if err.chain().any(|e| e.downcast_ref::<std::io::Error>().is_some()) => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
