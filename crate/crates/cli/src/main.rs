use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use harmonize_core::illumination::ShCoefficients;
use harmonize_core::networks::Checkpoint;
use harmonize_core::stm::Embedding;
use harmonize_core::synth_data::{
    load_mask, load_rgb, load_rgba, read_region, save_png, write_corpus, Corpus, DataConfig,
};
use harmonize_core::training::{
    append_csv, harmonize, identity_loss, prepare_all, shadow_direction_stats, write_csv,
    LossParts, Prepared, TrainConfig, TrainState,
};
use harmonize_core::{Error, Tensor};
use serde_json::{json, Value};

mod overrides;

use overrides::load_config;

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const LOSSES_FILE: &str = "losses.csv";

#[derive(Parser)]
#[command(name = "harmonize", version, about = "Shadow-aware image composition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with ground-truth shadows and lighting.
    GenData(GenDataArgs),
    /// Train the generator and both critics on a corpus.
    Train(TrainArgs),
    /// Insert a foreground into a background with a trained generator.
    Compose(ComposeArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration file; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set weights.clip_c=0.02`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of scenes.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// Seed of the first scene; scene i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory; defaults to the `corpus` configuration value.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory for the checkpoint and loss history.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the checkpoint in `--out`; `--set` still applies.
    #[arg(long, conflicts_with = "config")]
    resume: bool,
    /// Save the checkpoint and flush the loss history this often.
    #[arg(long, default_value_t = 500)]
    checkpoint_every: u64,
    #[arg(long, default_value_t = 100)]
    log_every: u64,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct ComposeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Background RGB image.
    #[arg(long)]
    bg: PathBuf,
    /// Foreground RGB or RGBA image.
    #[arg(long)]
    fg: PathBuf,
    /// Single-channel foreground mask, same size as the foreground;
    /// defaults to the foreground's alpha channel.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Target quadrilateral, `{"vertices": [x0, y0, ..., x3, y3]}`.
    #[arg(long)]
    region: PathBuf,
    /// Illumination coefficients.
    #[arg(long)]
    sh: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    /// Score the analytic ground-truth patches instead of a generator.
    #[arg(long, conflicts_with = "ckpt")]
    oracle: bool,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Compose(a) => compose(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for I/O failures, 2 for invalid input, 3 for numerical failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io(_) => 1,
                Error::Image(ie) => match std::error::Error::source(ie) {
                    Some(s) if s.is::<std::io::Error>() => 1,
                    _ => 2,
                },
                Error::NonFinite(_)
                | Error::NonInvertible { .. }
                | Error::DegenerateIllumination { .. } => 3,
                _ => 2,
            };
        }
        if cause.is::<std::io::Error>() {
            return 1;
        }
        if cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg: DataConfig = load_config(a.cfg.config.as_deref(), &a.cfg.sets)?;
    if a.n == 0 {
        bail!(Error::Config("--n must be at least 1".into()));
    }
    let start = Instant::now();
    let manifest = write_corpus(&a.out, a.seed, a.n, &cfg)?;
    eprintln!(
        "wrote {} scenes to {} in {:.1?} (config {})",
        manifest.scenes.len(),
        a.out.display(),
        start.elapsed(),
        &manifest.config_hash[..12]
    );
    Ok(())
}

fn load_corpus(path: &Path, cfg: &TrainConfig) -> Result<Vec<Prepared>> {
    let corpus = Corpus::load(path)?;
    let data = &corpus.manifest.config;
    cfg.check_sizes(data.local_size, data.global_size)?;
    Ok(prepare_all(corpus.scenes, &cfg.arch)?)
}

fn save_checkpoint(state: &TrainState, out: &Path) -> Result<()> {
    let tmp = out.join(format!("{CHECKPOINT_FILE}.tmp"));
    state.to_checkpoint().save(&tmp)?;
    fs::rename(&tmp, out.join(CHECKPOINT_FILE))?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let csv_path = a.out.join(LOSSES_FILE);
    let mut state = if a.resume {
        let mut ck = Checkpoint::load(&ckpt_path)
            .with_context(|| format!("loading {}", ckpt_path.display()))?;
        let mut sets = a.cfg.sets.clone();
        if let Some(seed) = a.seed {
            sets.push(format!("seed={seed}"));
        }
        ck.config = overrides::apply(ck.config, &sets)?;
        TrainState::from_checkpoint(&ck)?
    } else {
        let mut cfg: TrainConfig = load_config(a.cfg.config.as_deref(), &a.cfg.sets)?;
        if let Some(seed) = a.seed {
            cfg.seed = seed;
        }
        TrainState::new(cfg)?
    };
    let corpus = a
        .corpus
        .clone()
        .or_else(|| state.config.corpus.clone().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no corpus given (--corpus or the corpus key)".into()))?;
    let data = load_corpus(&corpus, &state.config)?;
    fs::write(
        a.out.join("config.json"),
        serde_json::to_string_pretty(&state.config)?,
    )?;
    if !a.resume {
        write_csv(&csv_path, &[])?;
        save_checkpoint(&state, &a.out)?;
    }

    eprintln!(
        "training steps {}..{} on {} scenes",
        state.step,
        state.config.steps,
        data.len()
    );
    let start = Instant::now();
    let mut pending: Vec<(u64, LossParts)> = Vec::new();
    while state.step < state.config.steps {
        let r = state.train_step(&data)?;
        pending.push((r.step, r.losses));
        if r.step % a.log_every.max(1) == 0 {
            let p = r.losses;
            eprintln!(
                "step {:>6}  L_D_L {:+.5}  L_G_L {:+.5}  L_D_G {:+.5}  L_G_G {:+.5}  L_S_idt {:.5}  ({:.1?})",
                r.step,
                p.l_d_l,
                p.l_g_l,
                p.l_d_g,
                p.l_g_g,
                p.l_s_idt,
                start.elapsed()
            );
        }
        if r.step % a.checkpoint_every.max(1) == 0 || r.step == state.config.steps {
            save_checkpoint(&state, &a.out)?;
            append_csv(&csv_path, &pending)?;
            pending.clear();
        }
    }
    eprintln!("checkpoint at step {} in {}", state.step, a.out.display());
    Ok(())
}

fn load_state(path: &Path) -> Result<TrainState> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(TrainState::from_checkpoint(&ck)?)
}

fn compose(a: ComposeArgs) -> Result<()> {
    let state = load_state(&a.ckpt)?;
    let bg = load_rgb(&a.bg)?;
    let (fg, mask) = match &a.mask {
        Some(m) => (load_rgb(&a.fg)?, load_mask(m)?),
        None => {
            let rgba = load_rgba(&a.fg)?;
            (rgba.channels(0, 3)?, rgba.channels(3, 4)?)
        }
    };
    let region = read_region(&a.region)?;
    let sh = ShCoefficients::load(&a.sh)?;
    let out = harmonize(
        &state.generator,
        &bg,
        &fg,
        &mask,
        &region,
        &sh,
        state.config.local_size,
    )?;
    fs::create_dir_all(&a.out)?;
    save_png(&a.out.join("direct.png"), &out.direct)?;
    save_png(&a.out.join("local.png"), &out.local)?;
    save_png(&a.out.join("global.png"), &out.global)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let corpus = Corpus::load(&a.corpus)?;
    let state = a.ckpt.as_deref().map(load_state).transpose()?;
    let arch = match &state {
        Some(s) => {
            let data = &corpus.manifest.config;
            s.config.check_sizes(data.local_size, data.global_size)?;
            s.config.arch.clone()
        }
        None => harmonize_core::networks::ArchConfig {
            sh_degree: corpus.manifest.config.sh_degree,
            ..Default::default()
        },
    };
    let scenes = prepare_all(corpus.scenes, &arch)?;

    let mut outputs = Vec::with_capacity(scenes.len());
    let (mut idt_sum, mut violations) = (0.0, 0);
    for p in &scenes {
        let (out, idt) = match &state {
            Some(s) => (
                s.generator.forward(&p.input)?.x_h,
                s.generator.forward(&p.identity_input)?.x_h,
            ),
            None => (p.sample.y.clone(), p.sample.y.clone()),
        };
        idt_sum += identity_loss(&idt, &p.sample.y)?;
        violations += partition_violations(&p.embedding, &p.sample.bg, &out)?;
        outputs.push(out);
    }
    let stats = shadow_direction_stats(scenes.iter().map(|p| &p.sample).zip(&outputs))?;
    let metrics = json!({
        "scenes": scenes.len(),
        "identity_loss_mean": idt_sum / scenes.len() as f64,
        "shadow_angle_median_deg": stats.median_deg,
        "shadow_angle_mean_deg": stats.mean_deg,
        "no_shadow_scenes": stats.no_shadow,
        "no_reference_scenes": stats.no_reference,
        "detected_fraction": stats.detected_fraction,
        "mask_partition_violations": violations,
        "source": if state.is_some() { Value::from("checkpoint") } else { Value::from("oracle") },
    });
    let text = serde_json::to_string_pretty(&metrics)?;
    println!("{text}");
    if let Some(path) = &a.out {
        fs::write(path, text + "\n")?;
    }
    Ok(())
}

fn partition_violations(emb: &Embedding, bg: &Tensor, local: &Tensor) -> Result<usize> {
    let global = emb.compose(bg, local)?;
    Ok(emb.partition_violations(bg, local, &global)?)
}
