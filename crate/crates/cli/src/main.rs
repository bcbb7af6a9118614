//! Command-line front end for the simulation, reconstruction, fusion, and
//! training pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric
//! error. Diagnostics go to stderr; results and summaries to stdout.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use leafsar::dataset::{load_dataset, save_dataset, synth_dataset, Sample};
use leafsar::error::Error;
use leafsar::fusion::{cam, cnn_forward, gap, RgbImage};
use leafsar::io::config::RunConfig;
use leafsar::io::tensor::{read_tensor, write_tensor, Tensor};
use leafsar::model::{assemble_input, predict, ModelInput};
use leafsar::params::ModelParams;
use leafsar::radar::RadarConfig;
use leafsar::recon::{depth_stack, SarSlice};
use leafsar::scene::{phase_compensate, simulate_scan, RawDataCube, ScanGeometry, Scene};
use leafsar::train::{
    evaluate_under, history_to_csv, kfold_cv, metrics_to_csv, train, EvalCondition,
};

#[derive(Parser)]
#[command(name = "leafsar", version, about = "FMCW-SAR leaf wetness pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a raw data cube from a scene file.
    Simulate(SimulateArgs),
    /// Reconstruct a depth stack (and PGM slices) from a cube.
    Reconstruct(ReconstructArgs),
    /// Fuse a stack with an RGB image and export CAM heatmaps.
    Fuse(FuseArgs),
    /// Generate a synthetic labelled dataset directory.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Repeated stratified k-fold cross validation.
    Crossval(CrossvalArgs),
    /// Print the default configuration.
    DefaultConfig,
}

#[derive(Args)]
struct SimulateArgs {
    /// Run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene text file (`x y z sigma_re sigma_im wetness` per line).
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Output base path; writes `<out>.hyt1` and `<out>.meta`.
    #[arg(long)]
    out: PathBuf,
    /// Apply the monostatic phase compensation before writing.
    #[arg(long)]
    compensate: bool,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Cube base path (expects `<cube>.hyt1` and `<cube>.meta`).
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for `stack.hyt1`, `depths.hyt1`, and slice PGMs.
    #[arg(long)]
    out_dir: PathBuf,
    /// Skip writing per-slice PGM images.
    #[arg(long)]
    no_pgm: bool,
}

#[derive(Args)]
struct FuseArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Stack tensor (`[n_slices, h, w]` f64).
    #[arg(long)]
    stack: PathBuf,
    /// Depths tensor (`[n_slices]` f64).
    #[arg(long)]
    depths: PathBuf,
    /// Camera image (PPM P6).
    #[arg(long)]
    rgb: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory produced by `synth`.
    #[arg(long)]
    dataset: PathBuf,
    /// Output checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Optional training history CSV path.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Metrics CSV output path (stdout summary always printed).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluation condition: normal, blackout, or wind.
    #[arg(long, default_value = "normal")]
    condition: String,
    /// Wind amplitude in mm (used with `--condition wind`).
    #[arg(long, default_value_t = 2.0)]
    wind_mm: f64,
    /// Wind jitter seed.
    #[arg(long, default_value_t = 0)]
    wind_seed: u64,
}

#[derive(Args)]
struct CrossvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reuse an existing dataset directory instead of synthesizing one.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Fold metrics CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: &Option<PathBuf>) -> leafsar::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Write the cube sidecar describing radar, geometry, and processing state.
fn write_cube_meta(path: &Path, cube: &RawDataCube) -> leafsar::Result<()> {
    let g = &cube.geometry;
    let r = &cube.cfg;
    let text = format!(
        "[radar]\nf0 = {:e}\nbandwidth = {:e}\nchirp_duration = {:e}\nn_freq = {}\n\n\
         [geometry]\naperture_width = {}\naperture_height = {}\nn_x = {}\nn_y = {}\n\
         delta_t = {}\nz0 = {}\n\n[cube]\ncompensated = {}\n",
        r.f0,
        r.bandwidth,
        r.chirp_duration,
        r.n_freq,
        g.x_positions.last().unwrap() - g.x_positions[0],
        g.y_positions.last().unwrap() - g.y_positions[0],
        g.nx(),
        g.ny(),
        g.delta_t,
        g.z0,
        cube.compensated
    );
    leafsar::io::atomic_write(path, text.as_bytes())
}

fn read_cube(base: &Path) -> leafsar::Result<RawDataCube> {
    let meta_path = base.with_extension("meta");
    let text = std::fs::read_to_string(&meta_path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", meta_path.display())))?;
    let mut kv = std::collections::BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('[') || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::data(format!("bad meta line '{line}'")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &str| -> leafsar::Result<&String> {
        kv.get(key).ok_or_else(|| Error::data(format!("cube meta is missing {key}")))
    };
    let num = |key: &str| -> leafsar::Result<f64> {
        get(key)?.parse().map_err(|_| Error::data(format!("bad {key} in cube meta")))
    };
    let radar = RadarConfig::new(
        num("f0")?,
        num("bandwidth")?,
        num("chirp_duration")?,
        get("n_freq")?.parse().map_err(|_| Error::data("bad n_freq in cube meta"))?,
    )?;
    let geometry = ScanGeometry::centered(
        num("aperture_width")?,
        num("aperture_height")?,
        get("n_x")?.parse().map_err(|_| Error::data("bad n_x"))?,
        get("n_y")?.parse().map_err(|_| Error::data("bad n_y"))?,
        num("delta_t")?,
        num("z0")?,
    )?;
    let compensated: bool =
        get("compensated")?.parse().map_err(|_| Error::data("bad compensated flag"))?;

    let tensor = read_tensor(&base.with_extension("hyt1"))?;
    let data = match tensor {
        Tensor::C128(dims, data)
            if dims == vec![geometry.nx() as u32, geometry.ny() as u32, radar.n_freq as u32] =>
        {
            data
        }
        _ => return Err(Error::data("cube tensor shape does not match its meta")),
    };
    Ok(RawDataCube { data, geometry, cfg: radar, compensated })
}

fn cmd_simulate(args: &SimulateArgs) -> leafsar::Result<()> {
    let cfg = load_config(&args.config)?;
    let scene_path = args
        .scene
        .clone()
        .or(cfg.scene_file.clone())
        .ok_or_else(|| Error::config("no scene given: pass --scene or set [scene] scene_file"))?;
    let file = std::fs::File::open(&scene_path)
        .map_err(|e| Error::data(format!("cannot open scene {}: {e}", scene_path.display())))?;
    let scene = Scene::read_from(std::io::BufReader::new(file))?;
    let geom = cfg.generator.geometry()?;
    let mut cube = simulate_scan(&scene, &geom, &cfg.generator.radar)?;
    if args.compensate {
        cube = phase_compensate(&cube, cfg.generator.reference_depth())?;
    }
    write_tensor(
        &Tensor::C128(
            vec![cube.n_x() as u32, cube.n_y() as u32, cube.n_freq() as u32],
            cube.data.clone(),
        ),
        &args.out.with_extension("hyt1"),
    )?;
    write_cube_meta(&args.out.with_extension("meta"), &cube)?;
    eprintln!(
        "simulated {} scatterers over {}x{} aperture, {} frequencies",
        scene.scatterers.len(),
        cube.n_x(),
        cube.n_y(),
        cube.n_freq()
    );
    Ok(())
}

fn cmd_reconstruct(args: &ReconstructArgs) -> leafsar::Result<()> {
    let cfg = load_config(&args.config)?;
    let mut cube = read_cube(&args.cube)?;
    if !cube.compensated {
        cube = phase_compensate(&cube, cfg.generator.reference_depth())?;
    }
    let stack = depth_stack(&cube, cfg.generator.z_min, cfg.generator.z_max, cfg.generator.z_step)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let (h, w) = (stack.slices[0].pixels.h, stack.slices[0].pixels.w);
    let mut data = Vec::with_capacity(stack.slices.len() * h * w);
    for s in &stack.slices {
        data.extend_from_slice(&s.pixels.data);
    }
    write_tensor(
        &Tensor::F64(vec![stack.slices.len() as u32, h as u32, w as u32], data),
        &args.out_dir.join("stack.hyt1"),
    )?;
    write_tensor(
        &Tensor::F64(vec![stack.slices.len() as u32], stack.depths()),
        &args.out_dir.join("depths.hyt1"),
    )?;
    if !args.no_pgm {
        for (i, s) in stack.slices.iter().enumerate() {
            let n = s.normalized01();
            leafsar::io::pnm::write_pgm16(
                &args.out_dir.join(format!("slice_{i:03}.pgm")),
                &n.pixels.data,
                w,
                h,
            )?;
        }
    }
    eprintln!("reconstructed {} slices at {}x{}", stack.slices.len(), w, h);
    Ok(())
}

fn cmd_fuse(args: &FuseArgs) -> leafsar::Result<()> {
    let params = ModelParams::load_checkpoint(&args.checkpoint)?;
    let stack_t = read_tensor(&args.stack)?;
    let depths_t = read_tensor(&args.depths)?;
    let depths = match depths_t {
        Tensor::F64(_, v) => v,
        _ => return Err(Error::data("depths tensor must be f64")),
    };
    let (slices, h, w) = match stack_t {
        Tensor::F64(dims, data) if dims.len() == 3 => {
            let (ns, h, w) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
            if ns != depths.len() {
                return Err(Error::data("stack and depths disagree on slice count"));
            }
            let slices: Vec<SarSlice> = data
                .chunks_exact(h * w)
                .zip(&depths)
                .map(|(chunk, &z0)| {
                    Ok(SarSlice {
                        pixels: leafsar::raster::Grid2::from_data(w, h, chunk.to_vec())?,
                        z0,
                        x_min: 0.0,
                        y_min: 0.0,
                        pitch_x: 1.0,
                        pitch_y: 1.0,
                    })
                })
                .collect::<leafsar::Result<_>>()?;
            (slices, h, w)
        }
        _ => return Err(Error::data("stack tensor must be f64 rank 3")),
    };
    let rgb = RgbImage::read_ppm(&args.rgb)?;
    if rgb.w != w || rgb.h != h {
        return Err(Error::data(format!(
            "rgb is {}x{}, stack slices are {}x{}",
            rgb.w, rgb.h, w, h
        )));
    }

    std::fs::create_dir_all(&args.out_dir)?;
    let norm: Vec<SarSlice> = slices.iter().map(|s| s.normalized01()).collect();
    for (i, slice) in norm.iter().enumerate() {
        let fused = assemble_input(slice, &rgb, params.alpha, params.cfg.variant)?;
        write_tensor(
            &Tensor::F64(vec![4, h as u32, w as u32], fused.map.data.clone()),
            &args.out_dir.join(format!("fused_{i:03}.hyt1")),
        )?;
        let fm = cnn_forward(&fused, &params.conv)?;
        let heat = cam(&fm, &params.encoder.classifier.w)?;
        leafsar::io::pnm::write_pgm16(
            &args.out_dir.join(format!("cam_{i:03}.pgm")),
            &heat.data,
            heat.w,
            heat.h,
        )?;
        // pooled features are written for downstream inspection
        let feature = gap(&fm);
        write_tensor(
            &Tensor::F64(vec![feature.len() as u32], feature),
            &args.out_dir.join(format!("feature_{i:03}.hyt1")),
        )?;
    }
    let input = ModelInput { norm_slices: &norm, depths: &depths, rgb: &rgb };
    let prob = predict(&params, &input)?;
    println!("wet_probability {prob:.6}");
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> leafsar::Result<()> {
    let cfg = load_config(&args.config)?;
    let samples = synth_dataset(cfg.dataset_n, &cfg.generator, cfg.dataset_seed)?;
    save_dataset(&args.out_dir, &samples, &cfg.generator)?;
    eprintln!("wrote {} samples to {}", samples.len(), args.out_dir.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> leafsar::Result<()> {
    let cfg = load_config(&args.config)?;
    let (samples, _) = load_dataset(&args.dataset)?;
    let out = train(&samples, &cfg.hyper)?;
    out.params.save_checkpoint(&args.checkpoint)?;
    if let Some(history) = &args.history {
        leafsar::io::atomic_write(history, history_to_csv(&out.history).as_bytes())?;
    }
    let last = out.history.last().expect("non-empty history");
    eprintln!(
        "trained {} epochs, final loss {:.4}, training accuracy {:.3}",
        out.history.len(),
        last.loss,
        last.accuracy
    );
    Ok(())
}

fn parse_condition(args: &EvalArgs) -> leafsar::Result<EvalCondition> {
    match args.condition.as_str() {
        "normal" => Ok(EvalCondition::Normal),
        "blackout" => Ok(EvalCondition::RgbBlackout),
        "wind" => Ok(EvalCondition::Wind { amplitude_mm: args.wind_mm, seed: args.wind_seed }),
        other => Err(Error::config(format!("unknown eval condition '{other}'"))),
    }
}

fn cmd_eval(args: &EvalArgs) -> leafsar::Result<()> {
    let params = ModelParams::load_checkpoint(&args.checkpoint)?;
    let (samples, _) = load_dataset(&args.dataset)?;
    let metrics = evaluate_under(&params, &samples, parse_condition(args)?)?;
    let csv = metrics_to_csv(&metrics);
    if let Some(out) = &args.out {
        leafsar::io::atomic_write(out, csv.as_bytes())?;
    }
    println!(
        "{{\"accuracy\": {:.6}, \"tp\": {}, \"tn\": {}, \"fp\": {}, \"fn\": {}}}",
        metrics.accuracy, metrics.true_pos, metrics.true_neg, metrics.false_pos, metrics.false_neg
    );
    Ok(())
}

fn cmd_crossval(args: &CrossvalArgs) -> leafsar::Result<()> {
    let cfg = load_config(&args.config)?;
    let samples: Vec<Sample> = match &args.dataset {
        Some(dir) => load_dataset(dir)?.0,
        None => synth_dataset(cfg.dataset_n, &cfg.generator, cfg.dataset_seed)?,
    };
    let report = kfold_cv(&samples, cfg.cv_k, cfg.cv_repeats, &cfg.hyper, cfg.cv_seed)?;
    if let Some(out) = &args.out {
        leafsar::io::atomic_write(out, report.to_csv().as_bytes())?;
    }
    println!("{}", report.summary_json());
    println!("{}", report.summary_line());
    Ok(())
}

fn dispatch(cli: &Cli) -> leafsar::Result<()> {
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Reconstruct(args) => cmd_reconstruct(args),
        Command::Fuse(args) => cmd_fuse(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Crossval(args) => cmd_crossval(args),
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's help/version output is a success, not a usage error
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Numeric(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
