//! Command-line surface: dataset synthesis, architecture search, genotype
//! derivation, compact training, evaluation, and DOT export.
//!
//! Exit codes: 0 on success, 1 for configuration/usage problems, 2 for
//! numeric failures (non-finite loss, degenerate SSIM).

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use hinas::ckpt::Checkpoint;
use hinas::compact::WidthSpec;
use hinas::config::{load_search_config, load_train_config, SearchConfig, TaskKind};
use hinas::data::{
    add_gaussian_noise, bicubic_degrade, save_png, synth_dataset, Image, Manifest, ManifestItem,
    SynthKind,
};
use hinas::decode::{derive_cell, viterbi_widths};
use hinas::error::{HinasError, Result};
use hinas::genotype::CellGenotype;
use hinas::run::{
    compact_from_checkpoint, derive_seed, run_eval, run_search, run_train,
    supernet_from_checkpoint, SearchResult,
};
use hinas::supernet::{RestorationTask, SharingMode};
use hinas::tensor::Tape;

#[derive(Parser)]
#[command(name = "hinas", version, about = "Hierarchical architecture search for image restoration")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Denoise,
    Sr,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Textures,
    Gradients,
    Mixed,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic clean/degraded dataset with a manifest.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = TaskArg::Denoise)]
        task: TaskArg,
        /// Noise level on the 0..255 scale (denoise task).
        #[arg(long, default_value_t = 25)]
        sigma: u32,
        /// Downscaling factor (sr task).
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, value_enum, default_value_t = KindArg::Mixed)]
        kind: KindArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the bilevel architecture search on a dataset.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decode genotypes and the width path from a search checkpoint.
    Derive {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a compact net from a finished search.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory of the search run (search_result.json + config_echo.json).
        #[arg(long)]
        search_dir: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a dataset with tiled inference.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 64)]
        tile: usize,
    },
    /// Render a genotype JSON file as Graphviz DOT.
    ExportDot {
        #[arg(long)]
        genotype: PathBuf,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = dispatch(cli.cmd) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { out_dir, task, sigma, scale, count, size, kind, seed } => {
            cmd_synth(&out_dir, task, sigma, scale, count, size, kind, seed)
        }
        Cmd::Search { config, data, out_dir, seed } => cmd_search(&config, &data, &out_dir, seed),
        Cmd::Derive { checkpoint, out_dir } => cmd_derive(&checkpoint, &out_dir),
        Cmd::Train { config, search_dir, data, out_dir, seed } => {
            cmd_train(&config, &search_dir, &data, &out_dir, seed)
        }
        Cmd::Eval { checkpoint, data, out_dir, tile } => cmd_eval(&checkpoint, &data, &out_dir, tile),
        Cmd::ExportDot { genotype, out } => cmd_export_dot(&genotype, out.as_deref()),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    out_dir: &Path,
    task: TaskArg,
    sigma: u32,
    scale: Option<usize>,
    count: usize,
    size: usize,
    kind: KindArg,
    seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(HinasError::io(out_dir))?;
    let kind = match kind {
        KindArg::Textures => SynthKind::Textures,
        KindArg::Gradients => SynthKind::Gradients,
        KindArg::Mixed => SynthKind::Mixed,
    };
    let clean = synth_dataset::<f32>(kind, count, size, seed);
    let mut items = Vec::with_capacity(count);
    for (i, img) in clean.iter().enumerate() {
        let degraded = match task {
            TaskArg::Denoise => add_gaussian_noise(img, sigma as f64, derive_seed(seed, i as u64, 1))?,
            TaskArg::Sr => {
                let s = scale
                    .ok_or_else(|| HinasError::Config("sr synthesis needs --scale".into()))?;
                bicubic_degrade(img, s)?
            }
        };
        let clean_path = format!("clean_{i:03}.png");
        let degraded_path = format!("degraded_{i:03}.png");
        save_png(img, &out_dir.join(&clean_path))?;
        save_png(&degraded, &out_dir.join(&degraded_path))?;
        items.push(ManifestItem { id: format!("img{i:03}"), clean_path, degraded_path });
    }
    let manifest = match task {
        TaskArg::Denoise => {
            Manifest { task: "denoise".into(), sigma: Some(sigma), scale: None, items }
        }
        TaskArg::Sr => Manifest {
            task: "sr".into(),
            sigma: None,
            scale: scale.map(|s| s as u32),
            items,
        },
    };
    manifest.validate()?;
    manifest.save(&out_dir.join("manifest.json"))?;
    println!("wrote {count} pairs and manifest.json to {}", out_dir.display());
    Ok(())
}

fn load_dataset(data: &Path) -> Result<(Manifest, Vec<hinas::data::ImagePair<f32>>)> {
    let manifest = Manifest::load(&data.join("manifest.json"))?;
    let pairs = manifest.load_pairs::<f32>(data)?;
    Ok((manifest, pairs))
}

fn check_task(manifest: &Manifest, cfg: &SearchConfig) -> Result<()> {
    let want = match cfg.task {
        TaskKind::Denoise => "denoise",
        TaskKind::Sr => "sr",
    };
    if manifest.task != want {
        return Err(HinasError::Config(format!(
            "config asks for {want} but the dataset manifest says {}",
            manifest.task
        )));
    }
    if cfg.task == TaskKind::Sr && manifest.scale.map(|s| s as usize) != cfg.scale {
        return Err(HinasError::Config(format!(
            "config scale {:?} does not match dataset scale {:?}",
            cfg.scale, manifest.scale
        )));
    }
    Ok(())
}

fn cmd_search(config: &Path, data: &Path, out_dir: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_search_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (manifest, pairs) = load_dataset(data)?;
    check_task(&manifest, &cfg)?;
    let result = run_search(&cfg, &pairs, out_dir)?;
    println!(
        "search done: best epoch {} val PSNR {:.3} dB SSIM {:.4}",
        result.best_epoch, result.best_val_psnr, result.best_val_ssim
    );
    println!("results in {}", out_dir.display());
    Ok(())
}

fn cmd_derive(checkpoint: &Path, out_dir: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (net, cfg) = supernet_from_checkpoint::<f32>(&ckpt)?;
    std::fs::create_dir_all(out_dir).map_err(HinasError::io(out_dir))?;
    let genotypes: Vec<CellGenotype> = if cfg.lwas {
        (0..cfg.l).map(|layer| derive_cell(net.alpha(layer))).collect()
    } else {
        vec![derive_cell(net.alpha(0))]
    };
    for (i, g) in genotypes.iter().enumerate() {
        g.validate()?;
        let path = out_dir.join(format!("genotype_layer_{i}.json"));
        std::fs::write(&path, g.to_json() + "\n").map_err(HinasError::io(&path))?;
        let dot_path = out_dir.join(format!("genotype_layer_{i}.dot"));
        let dot = g.to_dot(&format!("layer_{i}"));
        std::fs::write(&dot_path, dot).map_err(HinasError::io(&dot_path))?;
    }
    let widths = viterbi_widths(&net.beta_logits());
    widths.validate()?;
    let width_path = out_dir.join("width_path.json");
    std::fs::write(&width_path, widths.to_json() + "\n").map_err(HinasError::io(&width_path))?;
    println!(
        "derived {} genotype(s) and width path {:?} into {}",
        genotypes.len(),
        widths.levels,
        out_dir.display()
    );
    Ok(())
}

fn cmd_train(
    config: &Path,
    search_dir: &Path,
    data: &Path,
    out_dir: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let mut tcfg = load_train_config(config)?;
    if let Some(s) = seed {
        tcfg.seed = s;
    }
    let result_path = search_dir.join("search_result.json");
    let text = std::fs::read_to_string(&result_path).map_err(HinasError::io(&result_path))?;
    let search_result: SearchResult =
        serde_json::from_str(&text).map_err(HinasError::json(&result_path))?;
    let echo_path = search_dir.join("config_echo.json");
    let text = std::fs::read_to_string(&echo_path).map_err(HinasError::io(&echo_path))?;
    let scfg: SearchConfig = serde_json::from_str(&text).map_err(HinasError::json(&echo_path))?;

    let (manifest, pairs) = load_dataset(data)?;
    check_task(&manifest, &scfg)?;
    // The frame (task, scale) comes from the search; the residual choice
    // belongs to the training config.
    let task = match scfg.restoration_task()? {
        RestorationTask::Denoise { .. } => RestorationTask::Denoise { residual: tcfg.residual },
        RestorationTask::SuperResolve { upscale, .. } => {
            RestorationTask::SuperResolve { upscale, residual: tcfg.residual }
        }
    };
    let widths = WidthSpec::Path(search_result.width_path.clone());
    let (_, result) =
        run_train(&search_result.genotypes, &widths, scfg.w, task, &tcfg, &pairs, out_dir)?;
    println!(
        "training done: {} iterations, best val PSNR {:.3} dB SSIM {:.4}",
        result.iterations, result.best_val_psnr, result.best_val_ssim
    );
    println!("checkpoints in {}", out_dir.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, out_dir: &Path, tile: usize) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (_, pairs) = load_dataset(data)?;
    let report = match ckpt.kind.as_str() {
        "train" => {
            let (mut net, _) = compact_from_checkpoint::<f32>(&ckpt)?;
            run_eval(
                |img: &Image<f32>| {
                    let mut tape = Tape::inference();
                    let x = img.to_tensor(&mut tape);
                    let y = net.forward(&mut tape, &x, false)?;
                    Ok(Image::from_tensor(&y))
                },
                &pairs,
                tile,
            )?
        }
        "search" => {
            let (mut net, cfg) = supernet_from_checkpoint::<f32>(&ckpt)?;
            let mode =
                if cfg.cell_sharing { SharingMode::Shared } else { SharingMode::Unshared };
            run_eval(
                |img: &Image<f32>| {
                    let mut tape = Tape::inference();
                    let x = img.to_tensor(&mut tape);
                    let y = net.forward(&mut tape, &x, mode, false)?;
                    Ok(Image::from_tensor(&y))
                },
                &pairs,
                tile,
            )?
        }
        other => {
            return Err(HinasError::Config(format!(
                "cannot evaluate a {other:?} checkpoint (expected search or train)"
            )))
        }
    };
    std::fs::create_dir_all(out_dir).map_err(HinasError::io(out_dir))?;
    let report_path = out_dir.join("eval_report.json");
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )
    .map_err(HinasError::io(&report_path))?;
    println!(
        "evaluated {} images: mean PSNR {:.3} dB, mean SSIM {:.4}",
        report.per_image.len(),
        report.mean_psnr,
        report.mean_ssim
    );
    println!("report at {}", report_path.display());
    Ok(())
}

fn cmd_export_dot(genotype: &Path, out: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(genotype).map_err(HinasError::io(genotype))?;
    let g = CellGenotype::from_json(&text)?;
    let name = genotype
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("genotype")
        .to_string();
    let dot = g.to_dot(&name);
    match out {
        Some(path) => {
            std::fs::write(path, dot).map_err(HinasError::io(path))?;
            println!("wrote {}", path.display());
        }
        None => print!("{dot}"),
    }
    Ok(())
}
