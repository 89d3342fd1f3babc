//! Command-line front end: PSF simulation, scene generation, training,
//! evaluation, gradient checks, rendering, aperture export and fine-tuning.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
//! 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::Array3;

use chromacode::cca::{export_cca, import_cca, CodedAperture};
use chromacode::data::{
    generate_indexed, load_dataset, load_measured_psfs, read_sdc, scene_file_name, write_sdc,
    SceneSpec, SCENE_KEYS,
};
use chromacode::decoder::decoder_forward;
use chromacode::kv::KvMap;
use chromacode::losses::LossWeights;
use chromacode::optics::{OpticalConfig, PsfStack, CONFIG_KEYS};
use chromacode::preview;
use chromacode::render::{render_with_stack, sensor_integrate};
use chromacode::train::{
    checkpoint_stack, evaluate, finetune_measured, gradcheck, gradcheck_fixture, train_e2e,
    Checkpoint, Mode, TrainConfig, TrainEnv, TrainOptions, TRAIN_KEYS,
};
use chromacode::{write_atomic, Error, Result};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "chromacode", version, about = "Color-coded aperture depth imaging toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the PSF stack of an aperture.
    Psf {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        cca: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory for a depth x band contact sheet of the kernels.
        #[arg(long)]
        preview: Option<PathBuf>,
    },
    /// Generate synthetic spectral-depth scenes.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Train a decoder (and, for learned modes, the aperture).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Start from this aperture instead of a random one.
        #[arg(long)]
        init_cca: Option<PathBuf>,
        /// Tab-separated per-epoch log (defaults to OUT with a .tsv extension).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        verbose: bool,
    },
    /// Print per-scene and mean metrics of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Render with these PSFs instead of the checkpoint's aperture.
        #[arg(long)]
        psfs: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// Optical configuration (defaults to the tiny configuration).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Decoder entries sampled per parameter tensor.
        #[arg(long, default_value_t = 2)]
        samples: usize,
    },
    /// Render a scene to a coded image and a depth map.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, conflicts_with = "cca", required_unless_present = "cca")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        cca: Option<PathBuf>,
        /// Optical configuration used with --cca (desk defaults otherwise).
        #[arg(long, requires = "cca")]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a checkpoint's aperture as CCA1 text plus an sRGB preview.
    ExportCca {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain the decoder against measured PSFs.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        psfs: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 3e-5)]
        lr: f64,
        #[arg(long)]
        verbose: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Image(_) => 3,
        Error::NonFinite { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Reads a `key = value` file, rejecting unknown keys. One file may carry
/// optical, training and scene settings; manifest keys (prefix `run.`) are
/// ignored so a manifest can be fed back as input.
fn load_config(path: &Path) -> Result<KvMap> {
    let known = [CONFIG_KEYS, TRAIN_KEYS, SCENE_KEYS];
    let kv = KvMap::load(path)?;
    let mut filtered = KvMap::new();
    for key in kv.keys() {
        if key.starts_with("run.") {
            continue;
        }
        if !known.iter().any(|set| set.contains(&key)) {
            return Err(Error::Config(format!("{}: unknown key `{key}`", path.display())));
        }
        filtered.set(key, kv.raw(key).unwrap_or_default());
    }
    Ok(filtered)
}

/// Resolved configuration plus provenance, written next to every output.
struct Manifest {
    kv: KvMap,
}

impl Manifest {
    fn new(command: &str) -> Self {
        let mut kv = KvMap::new();
        kv.set("run.command", command);
        kv.set("run.version", VERSION);
        Self { kv }
    }

    fn path(mut self, key: &str, p: &Path) -> Self {
        self.kv.set(&format!("run.{key}"), p.display());
        self
    }

    fn value(mut self, key: &str, v: impl ToString) -> Self {
        self.kv.set(&format!("run.{key}"), v.to_string());
        self
    }

    fn config(mut self, cfg: &KvMap) -> Self {
        self.kv.merge(cfg);
        self
    }

    fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.kv.to_text().as_bytes())
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest");
    out.with_file_name(name)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

/// Removes the listed files; used to roll back a failed multi-file command.
fn remove_all(paths: &[PathBuf]) {
    for p in paths {
        let _ = std::fs::remove_file(p);
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Psf {
            config,
            cca,
            out,
            preview,
        } => cmd_psf(&config, &cca, &out, preview.as_deref()),
        Command::GenData {
            spec,
            count,
            out,
            seed,
        } => cmd_gen_data(&spec, count, &out, seed),
        Command::Train {
            data,
            config,
            mode,
            out,
            epochs,
            seed,
            resume,
            init_cca,
            log,
            verbose,
        } => {
            let kv = load_config(&config)?;
            let optics = OpticalConfig::from_kv(&kv)?;
            let mut tc = TrainConfig::from_kv(&kv)?;
            tc.mode = mode;
            tc.epochs = epochs.unwrap_or(tc.epochs);
            tc.seed = seed.unwrap_or(tc.seed);
            tc.validate()?;
            let env = TrainEnv::new(optics.clone())?;
            let scenes = load_dataset(&data)?;
            let resume = resume.as_deref().map(Checkpoint::read).transpose()?;
            let initial_aperture = init_cca.as_deref().map(|p| import_cca(p).map(|i| i.aperture)).transpose()?;
            let log = log.unwrap_or_else(|| out.with_extension("tsv"));
            let opts = TrainOptions {
                resume,
                initial_aperture,
                checkpoint_path: Some(out.clone()),
                log_path: Some(log.clone()),
                dump_dir: out.parent().map(Path::to_path_buf),
                verbose,
            };
            let result = train_e2e(&scenes, &tc, &env, &opts);
            let output = match result {
                Ok(o) => o,
                Err(e) => {
                    if opts.resume.is_none() {
                        remove_all(&[out.clone(), log.clone()]);
                    }
                    return Err(e);
                }
            };
            output.checkpoint.write(&out)?;
            let mut resolved = optics.to_kv();
            resolved.merge(&tc.to_kv());
            Manifest::new("train")
                .path("data", &data)
                .path("output", &out)
                .path("log", &log)
                .value("seed", tc.seed)
                .config(&resolved)
                .write(&manifest_path(&out))?;
            Ok(0)
        }
        Command::Eval { ckpt, data, psfs } => {
            let ck = Checkpoint::read(&ckpt)?;
            let env = TrainEnv::new(ck.optics.clone())?;
            let scenes = load_dataset(&data)?;
            let report = match psfs {
                None => evaluate(&ck, &scenes, &env)?,
                Some(p) => {
                    let (stack, warnings) = load_measured_psfs(&p, &env.optics)?;
                    warnings.iter().for_each(|w| eprintln!("warning: {w}"));
                    chromacode::train::evaluate_with_stack(&ck.decoder, Some(&stack), &scenes, &env)?
                }
            };
            print!("{}", report.to_tsv());
            Ok(0)
        }
        Command::Gradcheck {
            config,
            seed,
            size,
            samples,
        } => {
            let optics = match config {
                Some(p) => OpticalConfig::from_kv(&load_config(&p)?)?,
                None => OpticalConfig::tiny(),
            };
            let env = TrainEnv::new(optics.clone())?;
            let (cca, decoder, scene) = gradcheck_fixture(&optics, 2, 2, size, seed)?;
            let r = gradcheck(&env, &cca, &decoder, &scene, &LossWeights::default(), samples, seed)?;
            println!("check\tcount\tmax_rel_error");
            println!("aperture_weights\t{}\t{:.3e}", r.weights_checked, r.weight_max_rel);
            println!("decoder_params\t{}\t{:.3e}", r.decoder_checked, r.decoder_max_rel);
            println!("max rel error {:.3e}", r.max_rel());
            Ok(if r.max_rel() < 1e-4 { 0 } else { 4 })
        }
        Command::Render {
            scene,
            ckpt,
            cca,
            config,
            out,
        } => cmd_render(&scene, ckpt.as_deref(), cca.as_deref(), config.as_deref(), &out),
        Command::ExportCca { ckpt, out } => {
            let ck = Checkpoint::read(&ckpt)?;
            let aperture = ck.effective_aperture()?;
            export_cca(&aperture, &out)?;
            Manifest::new("export-cca")
                .path("checkpoint", &ckpt)
                .path("output", &out)
                .value("mode", ck.train.mode)
                .write(&manifest_path(&out))?;
            Ok(0)
        }
        Command::Finetune {
            ckpt,
            psfs,
            data,
            out,
            epochs,
            lr,
            verbose,
        } => {
            let ck = Checkpoint::read(&ckpt)?;
            let env = TrainEnv::new(ck.optics.clone())?;
            let (stack, warnings) = load_measured_psfs(&psfs, &env.optics)?;
            warnings.iter().for_each(|w| eprintln!("warning: {w}"));
            let scenes = load_dataset(&data)?;
            let (tuned, _) = finetune_measured(&ck, &stack, &scenes, epochs, lr, &env, verbose)?;
            tuned.write(&out)?;
            Manifest::new("finetune")
                .path("checkpoint", &ckpt)
                .path("psfs", &psfs)
                .path("data", &data)
                .path("output", &out)
                .value("epochs", epochs)
                .value("lr", format!("{lr:?}"))
                .write(&manifest_path(&out))?;
            Ok(0)
        }
    }
}

fn cmd_psf(config: &Path, cca: &Path, out: &Path, preview_dir: Option<&Path>) -> Result<u8> {
    let kv = load_config(config)?;
    let optics = OpticalConfig::from_kv(&kv)?;
    let imported = import_cca(cca)?;
    if imported.unprojected {
        eprintln!("warning: {} is not projected onto the feasible set", cca.display());
    }
    let (stack, warnings) = PsfStack::simulate(&optics, &imported.aperture)?;
    warnings.iter().for_each(|w| eprintln!("warning: {w}"));
    stack.write(out)?;
    let mut written = vec![out.to_path_buf()];
    if let Some(dir) = preview_dir {
        let sheet = dir.join("psf_sheet.png");
        let res = ensure_dir(dir).and_then(|_| {
            let tiles: Vec<_> = (0..stack.num_depths())
                .flat_map(|j| (0..stack.num_bands()).map(move |l| (j, l)))
                .map(|(j, l)| stack.kernel(j, l).to_owned())
                .collect();
            preview::save_png(&preview::contact_sheet(&tiles, stack.num_bands()), &sheet)
        });
        if let Err(e) = res {
            remove_all(&written);
            return Err(e);
        }
        written.push(sheet);
    }
    Manifest::new("psf")
        .path("config", config)
        .path("cca", cca)
        .path("output", out)
        .config(&optics.to_kv())
        .write(&manifest_path(out))?;
    Ok(0)
}

fn cmd_gen_data(spec_path: &Path, count: usize, out: &Path, seed: u64) -> Result<u8> {
    let kv = load_config(spec_path)?;
    let optics = OpticalConfig::from_kv(&kv)?;
    let spec = SceneSpec::from_kv(&kv, seed)?;
    spec.validate(&optics)?;
    ensure_dir(out)?;
    let mut written = Vec::with_capacity(count);
    for i in 0..count {
        let path = out.join(scene_file_name(i));
        let res = generate_indexed(&spec, &optics, i)
            .and_then(|s| write_sdc(&path, &s.cube, Some(&s.depth)));
        if let Err(e) = res {
            remove_all(&written);
            return Err(e);
        }
        written.push(path);
    }
    let mut resolved = optics.to_kv();
    resolved.merge(&spec.to_kv());
    Manifest::new("gen-data")
        .path("spec", spec_path)
        .path("output", out)
        .value("count", count)
        .value("seed", seed)
        .config(&resolved)
        .write(&out.join("manifest.txt"))?;
    Ok(0)
}

/// `u32` H, W, C then `f64` values, row-major with channels last.
fn raw_bytes(values: &Array3<f64>) -> Vec<u8> {
    let (h, w, c) = values.dim();
    let mut out = Vec::with_capacity(12 + 8 * values.len());
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn cmd_render(
    scene: &Path,
    ckpt: Option<&Path>,
    cca: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
) -> Result<u8> {
    let (cube, depth) = read_sdc(scene)?;
    let depth = depth.ok_or_else(|| Error::Config(format!("{} has no depth plane", scene.display())))?;
    ensure_dir(out)?;
    let (coded, estimate, lo, hi) = match (ckpt, cca) {
        (Some(p), _) => {
            let ck = Checkpoint::read(p)?;
            let env = TrainEnv::new(ck.optics.clone())?;
            let coded = match checkpoint_stack(&ck, &env)? {
                Some(stack) => render_with_stack(&cube, &depth, &stack, &env.response)?,
                None => sensor_integrate(&cube, &env.response)?,
            };
            let (est, _) = decoder_forward(&ck.decoder, &coded)?;
            (coded, est.values, ck.optics.min_depth(), ck.optics.max_depth())
        }
        (None, Some(c)) => {
            let optics = match config {
                Some(p) => OpticalConfig::from_kv(&load_config(p)?)?,
                None => OpticalConfig::desk(),
            };
            let aperture: CodedAperture = import_cca(c)?.aperture;
            let (stack, warnings) = PsfStack::simulate(&optics, &aperture)?;
            warnings.iter().for_each(|w| eprintln!("warning: {w}"));
            let env = TrainEnv::new(optics.clone())?;
            let coded = render_with_stack(&cube, &depth, &stack, &env.response)?;
            // Without a decoder the reference depth is shown.
            (coded, depth.values.clone(), optics.min_depth(), optics.max_depth())
        }
        (None, None) => return Err(Error::Config("render needs --ckpt or --cca".into())),
    };
    let files = [
        out.join("coded.png"),
        out.join("depth.png"),
        out.join("coded.bin"),
        out.join("depth.bin"),
    ];
    let res = preview::save_png(&preview::rgb(&coded.values), &files[0])
        .and_then(|_| preview::save_png(&preview::viridis(&estimate, lo, hi), &files[1]))
        .and_then(|_| write_atomic(&files[2], &raw_bytes(&coded.values)))
        .and_then(|_| write_atomic(&files[3], &raw_bytes(&estimate.clone().insert_axis(ndarray::Axis(2)))));
    if let Err(e) = res {
        remove_all(&files);
        return Err(e);
    }
    let mut m = Manifest::new("render").path("scene", scene).path("output", out);
    if let Some(p) = ckpt {
        m = m.path("checkpoint", p);
    }
    if let Some(p) = cca {
        m = m.path("cca", p);
    }
    m.write(&out.join("manifest.txt"))?;
    Ok(0)
}
