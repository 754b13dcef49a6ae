use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use stbev_core::pipeline::{run_pipeline, with_heights, PipelineConfig, PipelineParams};
use stbev_core::synthetic::{peak_displacement_error, static_scene, MovingBlobFamily, Scene};
use stbev_core::tda::{
    batch_loss, naive_fuse, temporal_fuse, train_tda_offsets, TdaExample, TdaParams,
};
use stbev_core::tensor::{seeded_rng, ConvParams};
use stbev_core::verify::{self, Suite};
use stbev_core::Error;

mod pgm;
mod report;

use report::{MapStats, Metrics, StageErrors, StageMaps, TdaReport};

const TRAIN_SCENES: u64 = 4;
const EVAL_SCENES: u64 = 40;
/// Evaluation scenes are drawn from a disjoint index range.
const EVAL_OFFSET: u64 = 1000;

#[derive(Parser, Debug)]
#[command(
    name = "stbev",
    version,
    about = "BEV camera-LiDAR fusion with temporal alignment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the full pipeline on a scene and write stage maps and metrics.
    Demo(RunArgs),
    /// Run a self-check suite.
    Verify {
        #[arg(value_parser = parse_suite)]
        suite: Suite,
    },
    /// Fit temporal alignment on the moving-blob family and compare it with
    /// naive concatenation fusion.
    TrainTda {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
    },
    /// Time the pipeline stages (timings go to standard error).
    Bench(RunArgs),
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Scene JSON file; a seeded static scene is generated when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    /// Pillar heights in meters, comma separated; defaults to the scene's.
    #[arg(long, value_delimiter = ',')]
    heights: Option<Vec<f64>>,
    #[arg(long, default_value_t = 5)]
    frames: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    points: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl RunArgs {
    fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            layers: self.layers,
            heads: self.heads,
            points: self.points,
            frames: self.frames,
            seed: self.seed,
        }
    }

    fn load_scene(&self) -> Result<Scene, Failure> {
        let scene = match &self.scene {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
                Scene::from_json(&text)?
            }
            None => static_scene(self.seed, self.frames)?,
        };
        match &self.heights {
            Some(h) => Ok(with_heights(&scene, h.clone())?),
            None => Ok(scene),
        }
    }
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Numeric(String),
    Divergence(String),
    Io(String),
    /// A run that completed but did not meet its pass condition.
    Unmet(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::Divergence(_) => 4,
            Failure::Io(_) | Failure::Unmet(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m)
            | Failure::Numeric(m)
            | Failure::Divergence(m)
            | Failure::Io(m)
            | Failure::Unmet(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) | Error::Singular(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Demo(args) => cmd_demo(&args),
        Command::Verify { suite } => cmd_verify(suite),
        Command::TrainTda { run, steps, lr } => cmd_train_tda(&run, steps, lr),
        Command::Bench(args) => cmd_bench(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("stbev: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn cmd_demo(args: &RunArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let scene = args.load_scene()?;
    let config = args.pipeline_config();
    let params = PipelineParams::identity_style(scene.channels, &config)?;
    let out = run_pipeline(&scene, &config, &params)?;
    if !out.is_finite() {
        return Err(Failure::Numeric(
            "pipeline produced non-finite features".into(),
        ));
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Failure::Io(format!("{}: {e}", args.out.display())))?;
    let mut maps = Vec::new();
    for (name, feature) in out.stages() {
        let file = format!("{name}.pgm");
        let (min, max) = pgm::write_magnitude(&args.out.join(&file), feature)
            .map_err(|e| Failure::Io(format!("{file}: {e}")))?;
        maps.push(MapStats { file, min, max });
    }
    let [b_lidar, b_camera, fused, temporal]: [MapStats; 4] = maps.try_into().expect("four stages");

    let errors = (|| -> stbev_core::Result<StageErrors> {
        Ok(StageErrors {
            b_lidar: peak_displacement_error(&out.b_lidar, &out.truth)?,
            b_camera: peak_displacement_error(&out.b_camera, &out.truth)?,
            fused: peak_displacement_error(&out.fused, &out.truth)?,
            temporal: peak_displacement_error(&out.temporal, &out.truth)?,
        })
    })();
    let (peak_error, stage_peak_errors, peak_error_status) = match errors {
        Ok(e) => (Some(e.temporal), Some(e), None),
        Err(e) => {
            eprintln!("stbev: peak error unavailable: {e}");
            (None, None, Some(e.to_string()))
        }
    };
    let metrics = Metrics {
        scene_seed: scene.seed,
        seed: args.seed,
        frames: config.frames,
        layers: config.layers,
        heads: config.heads,
        points: config.points,
        heights: scene.spec.heights.clone(),
        peak_error,
        stage_peak_errors,
        peak_error_status,
        maps: StageMaps {
            b_lidar,
            b_camera,
            fused,
            temporal,
        },
    };
    write_file(&args.out.join("metrics.json"), &report::to_json(&metrics))?;
    match peak_error {
        Some(e) => println!("temporal peak error: {e:.3} cells"),
        None => println!("temporal peak error: unavailable"),
    }
    eprintln!("demo finished in {:.2?}", start.elapsed());
    Ok(())
}

fn cmd_verify(suite: Suite) -> Result<(), Failure> {
    let checks = verify::run(suite);
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!(
        "{} of {} checks passed",
        checks.len() - failed,
        checks.len()
    );
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Unmet(format!("{failed} checks failed")))
    }
}

fn mean_peak_error<F>(examples: &[TdaExample], mut fuse: F) -> stbev_core::Result<f64>
where
    F: FnMut(&TdaExample) -> stbev_core::Result<stbev_core::geometry::BevFeature>,
{
    let mut total = 0.0;
    for ex in examples {
        total += peak_displacement_error(&fuse(ex)?, &ex.target)?;
    }
    Ok(total / examples.len() as f64)
}

fn cmd_train_tda(args: &RunArgs, steps: usize, lr: f64) -> Result<(), Failure> {
    if steps == 0 {
        return Err(Failure::Usage("--steps must be at least 1".into()));
    }
    let start = Instant::now();
    let mut family = MovingBlobFamily::new(args.seed);
    family.frames = args.frames;
    let train = family.examples(0..TRAIN_SCENES)?;
    let eval = family.examples(EVAL_OFFSET..EVAL_OFFSET + EVAL_SCENES)?;
    let mut rng = seeded_rng(args.seed);
    let initial = TdaParams::init(family.channels, args.heads, args.points, &mut rng)?;
    let initial_loss = batch_loss(&train, &initial)?;
    let outcome = train_tda_offsets(&train, &initial, steps, lr).map_err(|e| match e {
        Error::NonFinite(m) => Failure::Divergence(format!("training diverged: {m}")),
        other => other.into(),
    })?;
    let naive = ConvParams::block_average(family.channels, family.frames);
    let naive_err = mean_peak_error(&eval, |ex| naive_fuse(&ex.seq, &naive))?;
    let untrained_err = mean_peak_error(&eval, |ex| temporal_fuse(&ex.seq, &initial))?;
    let tda_err = mean_peak_error(&eval, |ex| temporal_fuse(&ex.seq, &outcome.params))?;
    let report = TdaReport {
        seed: args.seed,
        steps,
        lr,
        frames: family.frames,
        train_scenes: TRAIN_SCENES as usize,
        eval_scenes: EVAL_SCENES as usize,
        initial_loss,
        final_loss: outcome.final_loss,
        naive_peak_error: naive_err,
        untrained_peak_error: untrained_err,
        tda_peak_error: tda_err,
        tda_beats_naive: tda_err < naive_err,
    };
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Failure::Io(format!("{}: {e}", args.out.display())))?;
    write_file(&args.out.join("tda_report.json"), &report::to_json(&report))?;
    println!("loss {initial_loss:.6} -> {:.6}", outcome.final_loss);
    println!("peak error: naive {naive_err:.3}, untrained {untrained_err:.3}, trained {tda_err:.3} cells");
    eprintln!("train-tda finished in {:.2?}", start.elapsed());
    if report.tda_beats_naive {
        Ok(())
    } else {
        Err(Failure::Unmet(
            "trained alignment did not beat the naive baseline".into(),
        ))
    }
}

fn cmd_bench(args: &RunArgs) -> Result<(), Failure> {
    let scene = args.load_scene()?;
    let config = args.pipeline_config();
    let params = PipelineParams::identity_style(scene.channels, &config)?;
    let t0 = Instant::now();
    let out = run_pipeline(&scene, &config, &params)?;
    let pipeline = t0.elapsed();
    let family = MovingBlobFamily::new(args.seed);
    let train = family.examples(0..TRAIN_SCENES)?;
    let mut rng = seeded_rng(args.seed);
    let initial = TdaParams::init(family.channels, args.heads, args.points, &mut rng)?;
    let t1 = Instant::now();
    train_tda_offsets(&train, &initial, 1, 1e-2)?;
    let step = t1.elapsed();
    println!(
        "grid {}x{}x{}",
        scene.spec.cells_x,
        scene.spec.cells_y,
        out.temporal.channels()
    );
    eprintln!(
        "pipeline ({} frames, {} layers): {pipeline:.2?}",
        config.frames, config.layers
    );
    eprintln!("one training step ({TRAIN_SCENES} scenes): {step:.2?}");
    Ok(())
}
