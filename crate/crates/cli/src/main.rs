use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use relight_cli::commands::*;
use relight_cli::settings::Profile;
use relight_cli::{Error, Provider, Result, Settings};

#[derive(Parser)]
#[command(name = "relight", version, about = "Baked physically based relighting")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Trace teacher G-buffers for training and random poses.
    Pseudo(RunArgs),
    /// Distill the CNN G-buffer renderer from a pseudo dataset.
    TrainCnn(RunArgs),
    /// Distill the hash-grid material and visibility renderer.
    TrainHash(RunArgs),
    /// Render one view with the teacher or the baked providers.
    Render(RunArgs),
    /// Compare two PFM images.
    Eval {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Per-stage latency over a range of spp.
    Bench(RunArgs),
    /// Write a procedural sky environment map.
    GenEnv(RunArgs),
}

#[derive(Args, Default)]
struct RunArgs {
    /// TOML file of settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    env: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    provider: Option<Provider>,
    #[arg(long)]
    spp: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    bounces: Option<u8>,
    #[arg(long)]
    secondary_rays: Option<usize>,
    #[arg(long)]
    no_denoise: bool,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    azimuth: Option<f64>,
    #[arg(long)]
    elevation: Option<f64>,
    #[arg(long)]
    cnn: Option<PathBuf>,
    #[arg(long)]
    hash: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    n_random: Option<usize>,
    #[arg(long)]
    train_poses: Option<usize>,
    #[arg(long)]
    test_poses: Option<usize>,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    poses_per_batch: Option<usize>,
    #[arg(long)]
    points_per_batch: Option<usize>,
    #[arg(long)]
    dirs_per_point: Option<usize>,
    /// Checkpoint to continue training from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    calibrate_albedo: bool,
    #[arg(long, value_delimiter = ',')]
    bench_spp: Option<Vec<usize>>,
    #[arg(long)]
    repeats: Option<usize>,
}

macro_rules! set {
    ($s:ident, $a:ident, $($flag:ident => $field:ident),* $(,)?) => {
        $(if let Some(v) = $a.$flag.clone() { $s.$field = v.into(); })*
    };
}

impl RunArgs {
    fn settings(&self) -> Result<Settings> {
        let mut s = match &self.config {
            Some(p) => Settings::load(p)?,
            None => Settings::default(),
        };
        set!(s, self,
            seed => seed, provider => provider, spp => spp, bounces => bounces,
            secondary_rays => secondary_rays, width => width, height => height,
            azimuth => azimuth_deg, elevation => elevation_deg, n_random => n_random,
            train_poses => train_poses, test_poses => test_poses, profile => profile,
            bench_spp => bench_spp, repeats => repeats,
        );
        set!(s, self,
            scene => scene, env => env, out => out, threads => threads, cnn => cnn,
            hash => hash, data => data, steps => steps, lr => lr0,
            poses_per_batch => poses_per_batch, points_per_batch => points_per_batch,
            dirs_per_point => dirs_per_point, resume => resume,
        );
        if self.no_denoise {
            s.denoise = false;
        }
        if self.calibrate_albedo {
            s.calibrate_albedo = true;
        }
        s.validate()?;
        check_provider(&s)?;
        Ok(s)
    }
}

fn run(cmd: Cmd) -> Result<()> {
    let args = match &cmd {
        Cmd::Pseudo(a) | Cmd::TrainCnn(a) | Cmd::TrainHash(a) | Cmd::Render(a) | Cmd::Bench(a) | Cmd::GenEnv(a) => a,
        Cmd::Eval { run, .. } => run,
    };
    let s = args.settings()?;
    if let Some(n) = s.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cmd {
        Cmd::Pseudo(_) => cmd_pseudo(&s).map(drop),
        Cmd::TrainCnn(_) => cmd_train_cnn(&s).map(drop),
        Cmd::TrainHash(_) => cmd_train_hash(&s).map(drop),
        Cmd::Render(_) => cmd_render(&s).map(drop),
        Cmd::Eval { a, b, mask, .. } => cmd_eval(&s, &a, &b, mask.as_ref()).map(drop),
        Cmd::Bench(_) => cmd_bench(&s).map(drop),
        Cmd::GenEnv(_) => cmd_gen_env(&s).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
