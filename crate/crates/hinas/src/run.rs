//! Run orchestration: the alternating bilevel search loop, compact-net
//! training, and evaluation, with JSON-lines metric logging and
//! checkpointing.
//!
//! Determinism: every batch draws its randomness from a seed derived from
//! (run seed, epoch/iteration, purpose), never from shared mutable RNG
//! state, so identical configs reproduce identical runs bit for bit.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ckpt::Checkpoint;
use crate::compact::{build_compact_net, CompactNet, WidthSpec};
use crate::config::{SearchConfig, TrainConfig};
use crate::data::{sample_patch, split_wav, tiled_inference, Image, ImagePair, SplitSpec};
use crate::decode::{derive_cell, viterbi_widths};
use crate::error::{HinasError, NumericError, Result};
use crate::genotype::{CellGenotype, WidthPath};
use crate::loss::{guarded_restoration_loss, psnr, ssim, LossConfig, SsimConfig};
use crate::optim::{clip_grad_norm, cosine_lr, Adam, Sgd};
use crate::scalar::Scalar;
use crate::supernet::{RestorationTask, SharingMode, SuperNet};
use crate::tensor::ops::mse;
use crate::tensor::{Param, Shape, Tape};

/// One metrics line: `{"step":..,"split":..,"psnr":..,"ssim":..,"loss":..}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub split: String,
    pub psnr: f64,
    pub ssim: f64,
    pub loss: f64,
}

/// Collects metric records and mirrors them to a JSON-lines file.
pub struct MetricsLog {
    sink: Option<BufWriter<File>>,
    path: PathBuf,
    pub records: Vec<MetricRecord>,
}

impl MetricsLog {
    pub fn new(path: Option<&Path>) -> Result<Self> {
        let sink = match path {
            Some(p) => {
                Some(BufWriter::new(File::create(p).map_err(HinasError::io(p))?))
            }
            None => None,
        };
        Ok(MetricsLog {
            sink,
            path: path.map(Path::to_path_buf).unwrap_or_default(),
            records: Vec::new(),
        })
    }

    pub fn push(&mut self, record: MetricRecord) -> Result<()> {
        if let Some(sink) = &mut self.sink {
            let line = serde_json::to_string(&record).map_err(HinasError::json(&self.path))?;
            writeln!(sink, "{line}").map_err(HinasError::io(&self.path))?;
            sink.flush().map_err(HinasError::io(&self.path))?;
        }
        self.records.push(record);
        Ok(())
    }
}

/// Which subset a batch came from; gradient steps assert on it so
/// validation data can never leak into an update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    TrainW,
    TrainA,
    Val,
}

struct Batch<F> {
    clean: Vec<F>,
    degraded: Vec<F>,
    clean_shape: Shape,
    degraded_shape: Shape,
    split: Split,
}

/// SplitMix64; spreads structured (seed, epoch, iteration) triples into
/// independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Stateless per-purpose seed derivation: the same (base, a, b) triple
/// always yields the same stream seed, so resumed or repeated runs agree
/// without serializing RNG positions.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    mix(base ^ mix(a ^ mix(b)))
}

/// JSON form of a restoration task, for self-describing checkpoints.
pub fn task_to_doc(task: RestorationTask) -> serde_json::Value {
    match task {
        RestorationTask::Denoise { residual } => {
            serde_json::json!({"task": "denoise", "residual": residual})
        }
        RestorationTask::SuperResolve { upscale, residual } => {
            serde_json::json!({"task": "sr", "scale": upscale, "residual": residual})
        }
    }
}

/// Inverse of [`task_to_doc`].
pub fn task_from_doc(doc: &serde_json::Value) -> Result<RestorationTask> {
    let residual = doc["residual"]
        .as_bool()
        .ok_or_else(|| HinasError::Config("task document lacks a residual flag".into()))?;
    match doc["task"].as_str() {
        Some("denoise") => Ok(RestorationTask::Denoise { residual }),
        Some("sr") => {
            let upscale = doc["scale"]
                .as_u64()
                .ok_or_else(|| HinasError::Config("sr task document lacks a scale".into()))?;
            Ok(RestorationTask::SuperResolve { upscale: upscale as usize, residual })
        }
        other => Err(HinasError::Config(format!("unknown task tag {other:?}"))),
    }
}

fn sample_batch<F: Scalar>(
    pairs: &[ImagePair<F>],
    split: Split,
    batch: usize,
    patch: usize,
    augment: bool,
    seed: u64,
) -> Result<Batch<F>> {
    assert!(!pairs.is_empty(), "sampling from an empty split");
    let mut clean = Vec::new();
    let mut degraded = Vec::new();
    let mut shapes = None;
    for item in 0..batch {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, item as u64, 0));
        let pair = &pairs[rng.gen_range(0..pairs.len())];
        let crop_seed: u64 = rng.gen();
        let p = sample_patch(pair, patch, augment, crop_seed)?;
        let cs = Shape::new(batch, p.clean.c, p.clean.h, p.clean.w);
        let ds = Shape::new(batch, p.degraded.c, p.degraded.h, p.degraded.w);
        match &shapes {
            None => shapes = Some((cs, ds)),
            Some(prev) => assert_eq!(*prev, (cs, ds), "mixed patch shapes in one batch"),
        }
        clean.extend_from_slice(&p.clean.data);
        degraded.extend_from_slice(&p.degraded.data);
    }
    let (clean_shape, degraded_shape) = shapes.expect("batch is nonempty");
    Ok(Batch { clean, degraded, clean_shape, degraded_shape, split })
}

/// Mean loss value for logging: the training objective where defined, the
/// MSE part alone where the SSIM factor is non-positive (its log term has
/// no value there, and a metrics line must stay finite).
fn metric_loss<F: Scalar>(
    pred: &Image<F>,
    target: &Image<F>,
    loss_cfg: &LossConfig,
    ssim_cfg: &SsimConfig,
) -> (f64, f64) {
    let mut tape = Tape::inference();
    let p = pred.to_tensor(&mut tape);
    let t = target.to_tensor(&mut tape);
    let m = Scalar::to_f64(mse(&mut tape, &p, &t).item());
    let s = Scalar::to_f64(ssim(&mut tape, &p, &t, ssim_cfg).expect("eval shapes agree").item());
    let loss = if loss_cfg.use_ssim_term && loss_cfg.lambda > 0.0 && s > 0.0 {
        m + loss_cfg.lambda * (1.0 / s).log10()
    } else {
        m
    };
    (loss, s)
}

/// Everything a finished search hands to the training stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_epoch: u64,
    pub best_val_psnr: f64,
    pub best_val_ssim: f64,
    pub genotypes: Vec<CellGenotype>,
    pub width_path: WidthPath,
    pub checkpoint: PathBuf,
}

/// Per-image evaluation of a supernet on clean/degraded pairs: tiled
/// inference, outputs clamped to the unit range.
pub fn eval_supernet<F: Scalar>(
    net: &mut SuperNet<F>,
    mode: SharingMode,
    pairs: &[ImagePair<F>],
    tile: usize,
    loss_cfg: &LossConfig,
    ssim_cfg: &SsimConfig,
) -> Result<(f64, f64, f64)> {
    let (mut sum_p, mut sum_s, mut sum_l) = (0.0, 0.0, 0.0);
    for pair in pairs {
        let mut out = tiled_inference(&pair.degraded, tile, |img| -> Result<Image<F>> {
            let mut tape = Tape::inference();
            let x = img.to_tensor(&mut tape);
            let y = net.forward(&mut tape, &x, mode, false)?;
            Ok(Image::from_tensor(&y))
        })?;
        for v in &mut out.data {
            *v = (*v).max(F::zero()).min(F::one());
        }
        sum_p += psnr(&out.data, &pair.clean.data, 1.0);
        let (l, s) = metric_loss(&out, &pair.clean, loss_cfg, ssim_cfg);
        sum_s += s;
        sum_l += l;
    }
    let n = pairs.len() as f64;
    Ok((sum_p / n, sum_s / n, sum_l / n))
}

/// Groups the dataset by the W/A/V id split derived from the run seed.
pub fn split_pairs<F: Scalar>(
    pairs: &[ImagePair<F>],
    seed: u64,
) -> Result<(Vec<ImagePair<F>>, Vec<ImagePair<F>>, Vec<ImagePair<F>>)> {
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    let by_id: HashMap<&str, &ImagePair<F>> =
        pairs.iter().map(|p| (p.id.as_str(), p)).collect();
    if by_id.len() != pairs.len() {
        return Err(HinasError::Config("dataset ids are not unique".into()));
    }
    let (w, a, v) = split_wav(&ids, &SplitSpec { frac_val: 0.02, seed })?;
    let gather = |names: &[String]| names.iter().map(|n| by_id[n.as_str()].clone()).collect();
    Ok((gather(&w), gather(&a), gather(&v)))
}

/// One forward/backward pass of the supernet on a tagged batch. Returns the
/// loss value and the batch PSNR; gradients are left on the parameters.
fn supernet_step<F: Scalar>(
    net: &mut SuperNet<F>,
    mode: SharingMode,
    batch: Batch<F>,
    loss_cfg: &LossConfig,
    ssim_cfg: &SsimConfig,
    step: u64,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.degraded, batch.degraded_shape);
    let t = tape.constant(batch.clean, batch.clean_shape);
    let pred = net.forward(&mut tape, &x, mode, true)?;
    let loss = guarded_restoration_loss(&mut tape, &pred, &t, loss_cfg, ssim_cfg)?;
    let value = Scalar::to_f64(loss.item());
    if !value.is_finite() {
        return Err(NumericError::NonFiniteLoss { step }.into());
    }
    let batch_psnr = psnr(pred.data(), t.data(), 1.0);
    tape.backward(&loss)?;
    Ok((value, batch_psnr))
}

fn zero_grads<F: Scalar>(groups: &[&[Param<F>]]) {
    for group in groups {
        for p in group.iter() {
            p.zero_grad();
        }
    }
}

fn capture_state<F: Scalar>(
    kind: &str,
    config: serde_json::Value,
    seed: u64,
    params: &[Param<F>],
    visit: &mut dyn FnMut(&mut dyn FnMut(&str, &mut Vec<F>)),
) -> Checkpoint {
    let mut ckpt = Checkpoint::new(kind, config, seed);
    ckpt.capture_params(params);
    visit(&mut |name, values| ckpt.capture_buffer(name, values));
    ckpt
}

/// Restores parameters and running buffers from a checkpoint into a net
/// exposed through its parameter list and buffer visitor.
pub fn restore_state<F: Scalar>(
    ckpt: &Checkpoint,
    params: &[Param<F>],
    visit: &mut dyn FnMut(&mut dyn FnMut(&str, &mut Vec<F>)),
) -> Result<()> {
    ckpt.restore_params(params)?;
    let mut failure = Ok(());
    visit(&mut |name, values| {
        if failure.is_ok() {
            failure = ckpt.restore_buffer(name, values);
        }
    });
    failure.map_err(HinasError::from)
}

/// Rebuilds a supernet from a search checkpoint: the echoed config fixes
/// the topology, stored values overwrite the fresh initialization.
pub fn supernet_from_checkpoint<F: Scalar>(
    ckpt: &Checkpoint,
) -> Result<(SuperNet<F>, SearchConfig)> {
    ckpt.expect_kind("search")?;
    let cfg: SearchConfig = serde_json::from_value(ckpt.config.clone())
        .map_err(|e| HinasError::Config(format!("checkpoint config does not parse: {e}")))?;
    let task = cfg.restoration_task()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = SuperNet::<F>::new(cfg.w, cfg.n, cfg.l, task, cfg.lwas, &mut rng);
    let params: Vec<Param<F>> =
        net.kernel_params().into_iter().chain(net.arch_params()).collect();
    restore_state(ckpt, &params, &mut |f| net.visit_buffers(f))?;
    Ok((net, cfg))
}

/// Rebuilds a compact net from a train checkpoint's self-describing
/// document.
pub fn compact_from_checkpoint<F: Scalar>(
    ckpt: &Checkpoint,
) -> Result<(CompactNet<F>, TrainConfig)> {
    ckpt.expect_kind("train")?;
    let doc = &ckpt.config;
    let bad = |what: &str, e: serde_json::Error| {
        HinasError::Config(format!("checkpoint {what} does not parse: {e}"))
    };
    let cfg: TrainConfig =
        serde_json::from_value(doc["train"].clone()).map_err(|e| bad("train config", e))?;
    let genotypes: Vec<CellGenotype> =
        serde_json::from_value(doc["genotypes"].clone()).map_err(|e| bad("genotypes", e))?;
    let widths: WidthSpec =
        serde_json::from_value(doc["widths"].clone()).map_err(|e| bad("widths", e))?;
    let w = doc["w"]
        .as_u64()
        .ok_or_else(|| HinasError::Config("checkpoint lacks the base width".into()))?
        as usize;
    let task = task_from_doc(&doc["task"])?;
    let n = genotypes
        .first()
        .ok_or_else(|| HinasError::Config("checkpoint holds no genotypes".into()))?
        .n;
    let mut rng = ChaCha8Rng::seed_from_u64(ckpt.seed);
    let mut net = build_compact_net::<F>(&genotypes, &widths, w, n, task, &mut rng)?;
    let params = net.params();
    restore_state(ckpt, &params, &mut |f| net.visit_buffers(f))?;
    Ok((net, cfg))
}

/// The bilevel search: warmup epochs train kernels only, then every
/// iteration pairs one kernel step on Train W with one architecture step on
/// Train A. From `eval_from_epoch` the supernet is scored on V each epoch
/// and the best checkpoint kept; genotypes and the width path are decoded
/// from that best state.
pub fn run_search<F: Scalar>(
    cfg: &SearchConfig,
    pairs: &[ImagePair<F>],
    out_dir: &Path,
) -> Result<SearchResult> {
    std::fs::create_dir_all(out_dir).map_err(HinasError::io(out_dir))?;
    let cfg_json = serde_json::to_value(cfg).expect("config serializes");
    let echo = out_dir.join("config_echo.json");
    std::fs::write(&echo, serde_json::to_string_pretty(&cfg_json).expect("pretty") + "\n")
        .map_err(HinasError::io(&echo))?;

    let task = cfg.restoration_task()?;
    let mode = if cfg.cell_sharing { SharingMode::Shared } else { SharingMode::Unshared };
    let (train_w, train_a, val) = split_pairs(pairs, cfg.seed)?;
    if train_w.is_empty() || train_a.is_empty() || val.is_empty() {
        return Err(HinasError::Config(format!(
            "split left a subset empty: |W|={} |A|={} |V|={}",
            train_w.len(),
            train_a.len(),
            val.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = SuperNet::<F>::new(cfg.w, cfg.n, cfg.l, task, cfg.lwas, &mut rng);
    let kernels = net.kernel_params();
    let archs = net.arch_params();
    let all_params: Vec<Param<F>> = kernels.iter().chain(&archs).cloned().collect();
    let mut sgd = Sgd::new(cfg.sgd.momentum, cfg.sgd.weight_decay);
    let mut adam = Adam::new(cfg.adam.lr, cfg.adam.weight_decay);

    let mut metrics = MetricsLog::new(Some(&out_dir.join("metrics.jsonl")))?;
    let ssim_cfg = SsimConfig::default();
    let batch = cfg.batch_size();
    let iters = train_w.len().div_ceil(batch).max(1);
    let ckpt_path = out_dir.join("best.ckpt");
    let mut best: Option<Checkpoint> = None;
    let mut step: u64 = 0;

    for epoch in 1..=cfg.epochs_max as u64 {
        let lr = cosine_lr(
            (epoch - 1) as usize,
            cfg.epochs_max.saturating_sub(1).max(1),
            cfg.sgd.lr_max,
            cfg.sgd.lr_min,
        );
        let mut loss_sum = 0.0;
        let mut psnr_sum = 0.0;
        for iter in 0..iters as u64 {
            step += 1;
            // Kernel step: one Train-W batch, SGD on convolution weights.
            // Search-time augmentation is the random crop alone.
            let wb = sample_batch(
                &train_w,
                Split::TrainW,
                batch,
                cfg.patch,
                false,
                derive_seed(cfg.seed, epoch, 2 * iter),
            )?;
            assert_eq!(wb.split, Split::TrainW, "kernel update fed from the wrong split");
            zero_grads(&[&kernels, &archs]);
            let outcome = supernet_step(&mut net, mode, wb, &cfg.loss, &ssim_cfg, step);
            let (loss, batch_psnr) = match outcome {
                Ok(v) => v,
                Err(e) => {
                    return Err(dump_and_abort(e, &mut net, &all_params, cfg_json.clone(), cfg.seed, out_dir))
                }
            };
            sgd.step(&kernels, lr)?;
            loss_sum += loss;
            psnr_sum += batch_psnr;

            if epoch > cfg.warmup_epochs as u64 {
                // Architecture step: one Train-A batch, Adam on α and β.
                let ab = sample_batch(
                    &train_a,
                    Split::TrainA,
                    batch,
                    cfg.patch,
                    false,
                    derive_seed(cfg.seed, epoch, 2 * iter + 1),
                )?;
                assert_eq!(ab.split, Split::TrainA, "arch update fed from the wrong split");
                zero_grads(&[&kernels, &archs]);
                let outcome = supernet_step(&mut net, mode, ab, &cfg.loss, &ssim_cfg, step);
                if let Err(e) = outcome {
                    return Err(dump_and_abort(e, &mut net, &all_params, cfg_json.clone(), cfg.seed, out_dir));
                }
                adam.step(&archs)?;
            }
        }
        // Batch SSIM is not tracked during training; the field reads zero.
        metrics.push(MetricRecord {
            step: epoch,
            split: "train_w".into(),
            psnr: psnr_sum / iters as f64,
            ssim: 0.0,
            loss: loss_sum / iters as f64,
        })?;

        if epoch >= cfg.eval_from_epoch as u64 {
            let (vp, vs, vl) =
                eval_supernet(&mut net, mode, &val, cfg.patch, &cfg.loss, &ssim_cfg)?;
            metrics.push(MetricRecord {
                step: epoch,
                split: "val".into(),
                psnr: vp,
                ssim: vs,
                loss: vl,
            })?;
            if best.as_ref().map_or(true, |b| vp > b.val_psnr.unwrap_or(f64::NEG_INFINITY)) {
                let mut ckpt = capture_state(
                    "search",
                    cfg_json.clone(),
                    cfg.seed,
                    &all_params,
                    &mut |f| net.visit_buffers(f),
                );
                ckpt.progress = epoch;
                ckpt.val_psnr = Some(vp);
                ckpt.val_ssim = Some(vs);
                ckpt.sgd = Some(sgd.state());
                ckpt.adam = Some(adam.state());
                ckpt.save(&ckpt_path)?;
                best = Some(ckpt);
            }
        }
    }

    // Without any evaluation epoch the final state stands in as "best".
    let best = match best {
        Some(b) => b,
        None => {
            let mut ckpt = capture_state(
                "search",
                cfg_json.clone(),
                cfg.seed,
                &all_params,
                &mut |f| net.visit_buffers(f),
            );
            ckpt.progress = cfg.epochs_max as u64;
            ckpt.sgd = Some(sgd.state());
            ckpt.adam = Some(adam.state());
            ckpt.save(&ckpt_path)?;
            ckpt
        }
    };

    // Decode from the best checkpoint, not the final epoch.
    restore_state(&best, &all_params, &mut |f| net.visit_buffers(f))?;
    let genotypes: Vec<CellGenotype> = if cfg.lwas {
        (0..cfg.l).map(|layer| derive_cell(net.alpha(layer))).collect()
    } else {
        vec![derive_cell(net.alpha(0))]
    };
    for g in &genotypes {
        g.validate()?;
    }
    let width_path = viterbi_widths(&net.beta_logits());
    width_path.validate()?;

    let result = SearchResult {
        best_epoch: best.progress,
        best_val_psnr: best.val_psnr.unwrap_or(f64::NAN),
        best_val_ssim: best.val_ssim.unwrap_or(f64::NAN),
        genotypes,
        width_path,
        checkpoint: ckpt_path,
    };
    let result_path = out_dir.join("search_result.json");
    std::fs::write(
        &result_path,
        serde_json::to_string_pretty(&result).expect("result serializes") + "\n",
    )
    .map_err(HinasError::io(&result_path))?;
    Ok(result)
}

fn dump_and_abort<F: Scalar>(
    err: HinasError,
    net: &mut SuperNet<F>,
    params: &[Param<F>],
    cfg_json: serde_json::Value,
    seed: u64,
    out_dir: &Path,
) -> HinasError {
    let ckpt = capture_state("abort", cfg_json, seed, params, &mut |f| net.visit_buffers(f));
    let _ = ckpt.save(&out_dir.join("abort.ckpt"));
    err
}

/// Outcome of a compact training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainResult {
    pub iterations: u64,
    pub best_val_psnr: f64,
    pub best_val_ssim: f64,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

/// Trains a fresh compact net built from `genotypes` and `widths` with SGD
/// and a cosine schedule decaying to zero. A small validation split is
/// carved out for periodic scoring; best and final states are checkpointed.
pub fn run_train<F: Scalar>(
    genotypes: &[CellGenotype],
    widths: &WidthSpec,
    w: usize,
    task: RestorationTask,
    cfg: &TrainConfig,
    pairs: &[ImagePair<F>],
    out_dir: &Path,
) -> Result<(CompactNet<F>, TrainResult)> {
    cfg.validate()?;
    let n = genotypes
        .first()
        .ok_or_else(|| HinasError::Config("no genotypes to train".into()))?
        .n;
    std::fs::create_dir_all(out_dir).map_err(HinasError::io(out_dir))?;
    // The echoed document carries the full architecture alongside the
    // config, so a train checkpoint alone suffices to rebuild the net.
    let cfg_json = serde_json::json!({
        "train": cfg,
        "genotypes": genotypes,
        "widths": widths,
        "w": w,
        "task": task_to_doc(task),
    });
    let echo = out_dir.join("config_echo.json");
    std::fs::write(&echo, serde_json::to_string_pretty(&cfg_json).expect("pretty") + "\n")
        .map_err(HinasError::io(&echo))?;

    let (train_w, train_a, val) = split_pairs(pairs, cfg.seed)?;
    let mut train_pool = train_w;
    train_pool.extend(train_a);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = build_compact_net::<F>(genotypes, widths, w, n, task, &mut rng)?;
    let params = net.params();
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut metrics = MetricsLog::new(Some(&out_dir.join("metrics.jsonl")))?;
    let ssim_cfg = SsimConfig::default();

    let best_path = out_dir.join("best.ckpt");
    let final_path = out_dir.join("final.ckpt");
    let mut best: Option<(f64, f64)> = None;
    let mut window_loss = 0.0;
    let mut window_psnr = 0.0;
    let mut window_n = 0u64;

    for it in 1..=cfg.iterations {
        let lr = cosine_lr(
            (it - 1) as usize,
            cfg.iterations.saturating_sub(1).max(1) as usize,
            cfg.lr0,
            0.0,
        );
        let batch = sample_batch(
            &train_pool,
            Split::TrainW,
            cfg.batch,
            cfg.patch,
            cfg.augment,
            derive_seed(cfg.seed, it, 0),
        )?;
        for p in &params {
            p.zero_grad();
        }
        let mut tape = Tape::new();
        let x = tape.constant(batch.degraded, batch.degraded_shape);
        let t = tape.constant(batch.clean, batch.clean_shape);
        let pred = net.forward(&mut tape, &x, true)?;
        let loss = guarded_restoration_loss(&mut tape, &pred, &t, &cfg.loss, &ssim_cfg)?;
        let value = Scalar::to_f64(loss.item());
        if !value.is_finite() {
            let mut ckpt = capture_state("abort", cfg_json.clone(), cfg.seed, &params, &mut |f| {
                net.visit_buffers(f)
            });
            ckpt.progress = it;
            let _ = ckpt.save(&out_dir.join("abort.ckpt"));
            return Err(NumericError::NonFiniteLoss { step: it }.into());
        }
        window_loss += value;
        window_psnr += psnr(pred.data(), t.data(), 1.0);
        window_n += 1;
        tape.backward(&loss)?;
        if let Some(max_norm) = cfg.grad_clip {
            clip_grad_norm(&params, max_norm);
        }
        sgd.step(&params, lr)?;

        if it % cfg.eval_every == 0 || it == cfg.iterations {
            metrics.push(MetricRecord {
                step: it,
                split: "train".into(),
                psnr: window_psnr / window_n as f64,
                ssim: 0.0,
                loss: window_loss / window_n as f64,
            })?;
            (window_loss, window_psnr, window_n) = (0.0, 0.0, 0);

            let (vp, vs, vl) = eval_compact(&mut net, &val, cfg.patch, &cfg.loss, &ssim_cfg)?;
            metrics.push(MetricRecord {
                step: it,
                split: "val".into(),
                psnr: vp,
                ssim: vs,
                loss: vl,
            })?;
            if best.map_or(true, |(bp, _)| vp > bp) {
                best = Some((vp, vs));
                let mut ckpt = capture_state("train", cfg_json.clone(), cfg.seed, &params, &mut |f| {
                    net.visit_buffers(f)
                });
                ckpt.progress = it;
                ckpt.val_psnr = Some(vp);
                ckpt.val_ssim = Some(vs);
                ckpt.sgd = Some(sgd.state());
                ckpt.save(&best_path)?;
            }
        }
    }

    let mut final_ckpt =
        capture_state("train", cfg_json, cfg.seed, &params, &mut |f| net.visit_buffers(f));
    final_ckpt.progress = cfg.iterations;
    final_ckpt.sgd = Some(sgd.state());
    final_ckpt.save(&final_path)?;

    let (best_psnr, best_ssim) = best.unwrap_or((f64::NAN, f64::NAN));
    let result = TrainResult {
        iterations: cfg.iterations,
        best_val_psnr: best_psnr,
        best_val_ssim: best_ssim,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
    };
    Ok((net, result))
}

/// Per-image evaluation of a compact net; outputs clamped to the unit range.
pub fn eval_compact<F: Scalar>(
    net: &mut CompactNet<F>,
    pairs: &[ImagePair<F>],
    tile: usize,
    loss_cfg: &LossConfig,
    ssim_cfg: &SsimConfig,
) -> Result<(f64, f64, f64)> {
    let (mut sum_p, mut sum_s, mut sum_l) = (0.0, 0.0, 0.0);
    for pair in pairs {
        let mut out = tiled_inference(&pair.degraded, tile, |img| -> Result<Image<F>> {
            let mut tape = Tape::inference();
            let x = img.to_tensor(&mut tape);
            let y = net.forward(&mut tape, &x, false)?;
            Ok(Image::from_tensor(&y))
        })?;
        for v in &mut out.data {
            *v = (*v).max(F::zero()).min(F::one());
        }
        sum_p += psnr(&out.data, &pair.clean.data, 1.0);
        let (l, s) = metric_loss(&out, &pair.clean, loss_cfg, ssim_cfg);
        sum_s += s;
        sum_l += l;
    }
    let n = pairs.len() as f64;
    Ok((sum_p / n, sum_s / n, sum_l / n))
}

/// One evaluation row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalEntry {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Whole-dataset evaluation report, sorted by image id.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<EvalEntry>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Scores a restoration function over a dataset with tiled inference.
/// Results are ordered by id, so shuffling the input changes nothing.
pub fn run_eval<F: Scalar>(
    mut net: impl FnMut(&Image<F>) -> Result<Image<F>>,
    pairs: &[ImagePair<F>],
    tile: usize,
) -> Result<EvalReport> {
    let mut ordered: Vec<&ImagePair<F>> = pairs.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    let mut per_image = Vec::with_capacity(ordered.len());
    for pair in ordered {
        let mut out = tiled_inference(&pair.degraded, tile, &mut net)?;
        if (out.c, out.h, out.w) != (pair.clean.c, pair.clean.h, pair.clean.w) {
            return Err(HinasError::Config(format!(
                "network produced {}x{}x{} for a {}x{}x{} target; task and dataset disagree",
                out.c, out.h, out.w, pair.clean.c, pair.clean.h, pair.clean.w
            )));
        }
        for v in &mut out.data {
            *v = (*v).max(F::zero()).min(F::one());
        }
        let mut tape = Tape::<F>::inference();
        let a = out.to_tensor(&mut tape);
        let b = pair.clean.to_tensor(&mut tape);
        let s = Scalar::to_f64(ssim(&mut tape, &a, &b, &SsimConfig::default())?.item());
        per_image.push(EvalEntry {
            id: pair.id.clone(),
            psnr: psnr(&out.data, &pair.clean.data, 1.0),
            ssim: s,
        });
    }
    let n = per_image.len().max(1) as f64;
    Ok(EvalReport {
        mean_psnr: per_image.iter().map(|e| e.psnr).sum::<f64>() / n,
        mean_ssim: per_image.iter().map(|e| e.ssim).sum::<f64>() / n,
        per_image,
    })
}
