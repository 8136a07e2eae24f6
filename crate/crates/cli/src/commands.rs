use std::path::Path;

use serde::Serialize;
use textsr::diffusion::{load_checkpoint, Checkpoint, ModelConfig};
use textsr::evalkit::{load_eval_items, sweep as run_sweep, SweepResult, SweepSpec};
use textsr::experiment::{read_loss_log, smoothed, train as run_train, RunConfig, TrainOptions};
use textsr::geometry::{read_region_manifest, resize_to_height, TextRegion};
use textsr::guidance::GuidanceConfig;
use textsr::ocr::{OcrFactory, OcrSpec, Recognizer};
use textsr::parallel::worker_count;
use textsr::pipeline::{restore_full_image, restore_line, BackgroundUpscaler, Bicubic, CommandUpscaler, RestorationReport};
use textsr::synth::{build_dataset, GlyphAtlas};
use textsr::{Error, ImagePlane, Result};

use crate::{ConfigArgs, GenArgs, RestoreArgs, SweepArgs, TrainArgs};

const ATLAS_NAME: &str = "atlas.bin";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn print_hash(cfg: &RunConfig) {
    println!("config_hash {}", cfg.hash());
}

/// Loads the checkpoint and reconciles it with the run config: with an
/// explicit config the model sections must agree, otherwise the
/// checkpoint's model is adopted.
fn load_model(ckpt: &Path, cfg: &mut RunConfig, explicit: bool) -> Result<Checkpoint<f32>> {
    let ck = load_checkpoint::<f32>(ckpt)?;
    if explicit {
        ck.expect_config(&cfg.model)?;
    } else {
        cfg.model = ck.header.config.clone();
    }
    Ok(ck)
}

fn load_atlas(path: Option<&Path>) -> Result<GlyphAtlas> {
    match path {
        Some(p) => GlyphAtlas::load(p),
        None => Ok(GlyphAtlas::default_desk()),
    }
}

pub fn config(a: ConfigArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let model = match a.preset.as_str() {
                "desk" => ModelConfig::desk(),
                "paper" => ModelConfig::paper(),
                other => return Err(Error::Config(format!("unknown preset {other:?} (desk or paper)"))),
            };
            RunConfig {
                model,
                ..RunConfig::default()
            }
        }
    };
    let json = cfg.to_json_pretty() + "\n";
    match &a.out {
        Some(p) => {
            write_file(p, json.as_bytes())?;
            print_hash(&cfg);
        }
        None => {
            eprintln!("config_hash {}", cfg.hash());
            print!("{json}");
        }
    }
    Ok(())
}

fn read_charset(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = String::new();
    for c in text.chars().filter(|c| !c.is_whitespace()) {
        if !out.contains(c) {
            out.push(c);
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{}: no characters", path.display())));
    }
    Ok(out)
}

pub fn gen(a: GenArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let spec = &mut cfg.dataset;
    if let Some(p) = &a.charset_file {
        spec.charset = read_charset(p)?;
    }
    if let Some(n) = a.count {
        spec.n = n;
    }
    if let Some(d) = a.dup {
        spec.dup = d;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    cfg.validate()?;
    print_hash(&cfg);
    let atlas = GlyphAtlas::builtin(&cfg.dataset.charset)?;
    let manifest = build_dataset(&cfg.dataset, &atlas, &a.out, worker_count())?;
    atlas.save(&a.out.join(ATLAS_NAME))?;
    println!("manifest {}", manifest.path().display());
    println!(
        "texts {} records {} rejected {}",
        cfg.dataset.n, manifest.header.records, manifest.header.rejected
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    print_hash(&cfg);
    let data = textsr::synth::DatasetManifest::open(&a.data)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out_ckpt.with_extension("loss.jsonl"));
    let opts = TrainOptions {
        steps: a.steps,
        out_ckpt: a.out_ckpt.clone(),
        log_path: log_path.clone(),
        resume: a.resume.clone(),
        workers: worker_count(),
    };
    let every = cfg.training.checkpoint_every.max(1);
    let summary = run_train(&cfg, &data, &opts, |step, loss| {
        if (step + 1) % every == 0 {
            log::info!("step {} loss {loss:.5}", step + 1);
        }
    })?;
    let losses: Vec<f64> = read_loss_log(&log_path)?.iter().map(|e| e.loss).collect();
    let sm = smoothed(&losses, cfg.training.smoothing_window);
    println!("steps {}..{}", summary.start_step, summary.final_step);
    if let Some(l) = summary.last_loss {
        println!("last_loss {l:.6}");
    }
    if let Some(s) = sm.last() {
        println!("smoothed_loss {s:.6}");
    }
    println!("retries {}", summary.retries);
    println!("checkpoint {}", a.out_ckpt.display());
    println!("loss_log {}", log_path.display());
    Ok(())
}

fn resolve_guidance(cfg: &mut RunConfig, a: &RestoreArgs) -> Result<()> {
    let g = &mut cfg.guidance;
    if let Some(o) = a.omega {
        g.omega = o;
    }
    if let Some(r) = a.iters {
        g.iterations = r;
    }
    if let Some(s) = a.ddim_steps {
        g.ddim_steps = s;
    }
    if let Some(s) = a.seed {
        g.seed = s;
    }
    g.null_image |= a.null_image;
    if let Some(f) = a.factor {
        cfg.pipeline.factor = f;
    }
    cfg.eval.ocr = a.ocr.clone();
    cfg.validate()
}

#[derive(Serialize)]
struct CropReport<'a> {
    mode: &'static str,
    config_hash: String,
    input: &'a Path,
    output: &'a Path,
    ocr: &'a str,
    guidance: GuidanceConfig,
    tiles: usize,
    restore_calls: usize,
    ocr_calls: usize,
    /// Per tile, the transcripts in call order.
    transcript_history: Vec<Vec<String>>,
}

#[derive(Serialize)]
struct ImageReport<'a> {
    mode: &'static str,
    config_hash: String,
    input: &'a Path,
    regions_manifest: &'a Path,
    output: &'a Path,
    ocr: &'a str,
    upscaler: &'a str,
    guidance: GuidanceConfig,
    #[serde(flatten)]
    report: RestorationReport,
}

enum Upscaler {
    Bicubic,
    Command(CommandUpscaler),
}

impl BackgroundUpscaler for Upscaler {
    fn upscale(&self, image: &ImagePlane, factor: usize) -> Result<ImagePlane> {
        match self {
            Upscaler::Bicubic => Bicubic.upscale(image, factor),
            Upscaler::Command(c) => c.upscale(image, factor),
        }
    }
}

fn parse_upscaler(s: &str) -> Result<Upscaler> {
    match s {
        "bicubic" => Ok(Upscaler::Bicubic),
        _ => match s.strip_prefix("cmd:") {
            Some(p) if !p.is_empty() => Ok(Upscaler::Command(CommandUpscaler::new(p)?)),
            _ => Err(Error::Config(format!("unknown upscaler {s:?} (bicubic or cmd:<path>)"))),
        },
    }
}

fn needs_gt(spec: &OcrSpec) -> bool {
    matches!(spec, OcrSpec::Oracle { .. })
}

pub fn restore(a: RestoreArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let ck = load_model(&a.ckpt, &mut cfg, a.config.is_some())?;
    resolve_guidance(&mut cfg, &a)?;
    print_hash(&cfg);
    let spec: OcrSpec = a.ocr.parse()?;
    let atlas = load_atlas(a.atlas.as_deref())?;
    let factory = spec.build(&atlas, cfg.guidance.seed)?;
    let model = &ck.model;
    let pcfg = cfg.pipeline_config(worker_count());
    let report_path = a.report.clone().unwrap_or_else(|| a.out.with_extension("json"));
    let input = ImagePlane::load_png(&a.input)?;
    match &a.regions {
        None => {
            if needs_gt(&spec) && a.text.is_none() {
                return Err(Error::Config("the oracle recognizer needs --text in crop mode".into()));
            }
            let d = &cfg.model.denoiser;
            let line = resize_to_height(&input, d.height).to_channels(d.image_channels)?;
            let ocr = factory.for_item(a.text.as_deref().unwrap_or(""), 0);
            let out = restore_line(model, &line, &pcfg, cfg.guidance.seed, &cfg.guidance, ocr.as_ref())?;
            out.image.save_png(&a.out)?;
            write_json(
                &report_path,
                &CropReport {
                    mode: "crop",
                    config_hash: cfg.hash(),
                    input: &a.input,
                    output: &a.out,
                    ocr: &a.ocr,
                    guidance: cfg.guidance,
                    tiles: out.tiles,
                    restore_calls: out.restore_calls,
                    ocr_calls: out.ocr_calls,
                    transcript_history: out.transcripts,
                },
            )?;
            println!("restore_calls {} ocr_calls {}", out.restore_calls, out.ocr_calls);
        }
        Some(manifest) => {
            let records = read_region_manifest(manifest)?;
            let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let mut ids: Vec<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            // A single-image manifest applies whatever the file is called.
            let mine: Vec<_> = if ids.len() <= 1 {
                records.iter().collect()
            } else {
                records.iter().filter(|r| r.image_id == stem).collect()
            };
            if mine.is_empty() && !records.is_empty() {
                log::warn!("no regions for image id {stem:?}; output is the background upscale");
            }
            let regions = mine
                .iter()
                .map(|r| r.to_region(pcfg.tile_height))
                .collect::<Result<Vec<TextRegion>>>()?;
            let upscaler = parse_upscaler(&a.upscaler)?;
            let ocr_for = |r: &TextRegion| -> Result<Box<dyn Recognizer + '_>> {
                if needs_gt(&spec) && r.text.is_none() {
                    return Err(Error::Config(format!("region {} has no text for the oracle", r.region_id)));
                }
                let index = regions.iter().position(|x| x.region_id == r.region_id).unwrap_or(0);
                Ok(factory.for_item(r.text.as_deref().unwrap_or(""), index as u64))
            };
            let (out, report) = restore_full_image(&input, &regions, &upscaler, model, &cfg.guidance, &pcfg, ocr_for)?;
            out.save_png(&a.out)?;
            println!(
                "regions processed {} clipped {} failed {}",
                report.regions_processed, report.regions_clipped, report.regions_failed
            );
            write_json(
                &report_path,
                &ImageReport {
                    mode: "image",
                    config_hash: cfg.hash(),
                    input: &a.input,
                    regions_manifest: manifest,
                    output: &a.out,
                    ocr: &a.ocr,
                    upscaler: &a.upscaler,
                    guidance: cfg.guidance,
                    report,
                },
            )?;
        }
    }
    println!("output {}", a.out.display());
    println!("report {}", report_path.display());
    Ok(())
}

#[derive(Serialize)]
struct ItemLine<'a> {
    omega: f64,
    #[serde(rename = "R")]
    r: usize,
    id: &'a str,
    gt_text: &'a str,
    pred_text: &'a str,
    word_correct: bool,
    cer: f64,
    mse_to_hr: f64,
    transcript_history: &'a [Vec<String>],
}

fn write_sweep(dir: &Path, res: &SweepResult) -> Result<()> {
    write_json(&dir.join("sweep.json"), &res.table)?;
    write_file(&dir.join("sweep.txt"), res.table.to_text().as_bytes())?;
    let mut lines = Vec::new();
    for cell in &res.cells {
        for ((rec, mse), tr) in cell.records.iter().zip(&cell.mse_to_hr).zip(&cell.transcripts) {
            lines.push(ItemLine {
                omega: cell.omega,
                r: cell.r,
                id: &rec.id,
                gt_text: &rec.gt_text,
                pred_text: &rec.pred_text,
                word_correct: rec.word_correct,
                cer: rec.cer,
                mse_to_hr: *mse,
                transcript_history: tr,
            });
        }
    }
    let path = dir.join("records.jsonl");
    let mut buf = Vec::new();
    for l in &lines {
        serde_json::to_writer(&mut buf, l).expect("record serializes");
        buf.push(b'\n');
    }
    write_file(&path, &buf)
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let ck = load_model(&a.ckpt, &mut cfg, a.config.is_some())?;
    if let Some(o) = &a.ocr {
        cfg.eval.ocr = o.clone();
    }
    if let Some(e) = &a.evaluator {
        cfg.eval.evaluator = e.clone();
    }
    if let Some(o) = &a.omega_list {
        cfg.eval.omegas = o.clone();
    }
    if let Some(r) = &a.r_list {
        cfg.eval.rs = r.clone();
    }
    if a.limit.is_some() {
        cfg.eval.limit = a.limit;
    }
    if let Some(s) = a.seed {
        cfg.guidance.seed = s;
    }
    if let Some(s) = a.ddim_steps {
        cfg.guidance.ddim_steps = s;
    }
    cfg.validate()?;
    print_hash(&cfg);
    let data = textsr::synth::DatasetManifest::open(&a.data)?;
    let atlas_path = a.atlas.clone().or_else(|| Some(data.root.join(ATLAS_NAME)).filter(|p| p.exists()));
    let atlas = load_atlas(atlas_path.as_deref())?;
    let psi = cfg.eval.ocr.parse::<OcrSpec>()?.build(&atlas, cfg.guidance.seed)?;
    let evaluator = cfg.eval.evaluator.parse::<OcrSpec>()?.build(&atlas, 0)?;
    let d = &cfg.model.denoiser;
    let items = load_eval_items(&data, d.height, d.image_channels, cfg.eval.limit)?;
    let workers = worker_count();
    let spec = SweepSpec {
        omegas: cfg.eval.omegas.clone(),
        rs: cfg.eval.rs.clone(),
        guidance: cfg.guidance,
        workers,
    };
    let pcfg = cfg.pipeline_config(workers);
    let hash = cfg.hash();
    let res = match &evaluator {
        OcrFactory::Toy(t) => run_sweep(&items, &ck.model, &pcfg, &spec, &psi, t, &hash)?,
        OcrFactory::Command(c) => run_sweep(&items, &ck.model, &pcfg, &spec, &psi, c, &hash)?,
        _ => return Err(Error::Config(format!("evaluator {:?} cannot score crops (toy or cmd:<path>)", cfg.eval.evaluator))),
    };
    print!("{}", res.table.to_text());
    if let Some(dir) = &a.out {
        write_sweep(dir, &res)?;
        println!("tables {}", dir.display());
    }
    Ok(())
}

