//! Run directories, multi-seed execution with resume, ablation sweeps, reports and
//! synthetic-image previews.
//!
//! A run directory holds `config.lock`, `phase_{i}/checkpoint.json`,
//! `phase_{i}/generator.json` (phases after the first), `metrics.csv`,
//! `events.log` and, once every phase is done, `report.json`.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::checkpoint::{load_json, save_json, Checkpoint, PhaseSummary};
use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate_groups, append_metrics_row, average_incremental, format_table, read_metrics, write_aggregate_csv,
    AggregateRow, MetricsRow, RunReport,
};
use crate::model::snapshot;
use crate::protocol::TaskSchedule;
use crate::synthesizer::{sample, train_synthesizer, GeneratorNet};
use crate::trainer::{phase_rng, run_phase, Ablation, PhaseState, Purpose};

pub fn timestamp() -> String {
    let d = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    format!("{}.{:03}", d.as_secs(), d.subsec_millis())
}

struct EventLog {
    file: std::fs::File,
}

impl EventLog {
    fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(EventLog { file })
    }

    fn event(&mut self, msg: &str) {
        log::info!("{}", msg);
        let _ = writeln!(self.file, "{} {}", timestamp(), msg);
    }
}

fn phase_dir(dir: &Path, phase: usize) -> PathBuf {
    dir.join(format!("phase_{}", phase))
}

pub fn checkpoint_path(dir: &Path, phase: usize) -> PathBuf {
    phase_dir(dir, phase).join("checkpoint.json")
}

pub fn generator_path(dir: &Path, phase: usize) -> PathBuf {
    phase_dir(dir, phase).join("generator.json")
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{}", seed))
}

fn write_lock(dir: &Path, lock: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.lock");
    if path.exists() {
        let existing = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if existing != lock {
            return Err(Error::Config {
                key: "out".into(),
                message: format!("{} holds a run with a different configuration", dir.display()),
            });
        }
        return Ok(());
    }
    std::fs::write(&path, lock).map_err(|e| Error::io(&path, e))
}

pub fn build_schedule(cfg: &ExperimentConfig, dataset: &Dataset, seed: u64) -> Result<TaskSchedule> {
    cfg.protocol
        .spec()
        .build(dataset.n_classes, seed)
        .map_err(|e| Error::Config {
            key: "protocol".into(),
            message: e.to_string(),
        })
}

/// Last phase whose checkpoint exists and belongs to this configuration.
fn last_checkpoint(dir: &Path, hash: &str, n_tasks: usize) -> Option<Checkpoint<f32>> {
    (1..=n_tasks).rev().find_map(|i| {
        let p = checkpoint_path(dir, i);
        if !p.exists() {
            return None;
        }
        Checkpoint::<f32>::load(&p)
            .ok()
            .filter(|c| c.config_hash == hash && c.phase == i)
    })
}

/// Run (or resume) every phase of one seed inside `dir`.
pub fn run_seed(cfg: &ExperimentConfig, dataset: &Dataset, seed: u64, dir: &Path) -> Result<RunReport> {
    let lock = cfg.lock_text()?;
    let hash = cfg.hash()?;
    write_lock(dir, &lock)?;
    let schedule = build_schedule(cfg, dataset, seed)?;
    let n = schedule.n_tasks();
    let mut events = EventLog::open(&dir.join("events.log"))?;
    let metrics_path = dir.join("metrics.csv");

    let mut state = PhaseState::<f32>::new(cfg.model.clone());
    let mut history: Vec<PhaseSummary> = Vec::new();
    if let Some(ck) = last_checkpoint(dir, &hash, n) {
        events.event(&format!("resume seed={} from phase={}", seed, ck.phase));
        state.phase = ck.phase;
        state.snapshot = Some(snapshot(&ck.model, ck.phase));
        state.model = Some(ck.model);
        state.counters = ck.counters;
        history = ck.history;
    }
    // keep only rows of phases that have a checkpoint
    let kept: Vec<MetricsRow> = if metrics_path.exists() {
        read_metrics(&metrics_path)?
            .into_iter()
            .filter(|r| r.phase <= state.phase)
            .collect()
    } else {
        Vec::new()
    };
    if metrics_path.exists() {
        std::fs::remove_file(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    }
    for r in &kept {
        append_metrics_row(&metrics_path, r)?;
    }

    while state.phase < n {
        let i = state.phase + 1;
        events.event(&format!(
            "start seed={} phase={} classes={:?}",
            seed,
            i,
            schedule.task_classes(i)?
        ));
        let result = run_phase(&mut state, &schedule, dataset, &cfg.trainer, &cfg.synthesizer, seed)?;
        if let Some(s) = result.synthesis {
            events.event(&format!(
                "synthesis phase={} diversity={:.6} content={:.6} stat={:.6} prior={:.6}",
                i, s.diversity, s.content, s.stat, s.prior
            ));
        }
        for (e, b) in result.epoch_losses.iter().enumerate() {
            events.event(&format!(
                "epoch phase={} epoch={} cls={:.6} hkd={:.6} rkd={:.6} total={:.6}",
                i,
                e + 1,
                b.classification,
                b.hkd,
                b.rkd,
                b.total
            ));
        }
        history.push(PhaseSummary {
            accuracy: result.accuracy,
            seconds: result.seconds,
        });
        let ck = Checkpoint {
            phase: i,
            config_hash: hash.clone(),
            schedule: schedule.clone(),
            model: state.model.clone().expect("model after phase"),
            counters: state.counters.clone(),
            history: history.clone(),
        };
        ck.save(&checkpoint_path(dir, i))?;
        if let Some(g) = &state.generator {
            save_json(&generator_path(dir, i), g)?;
        }
        let accs: Vec<f64> = history.iter().map(|h| h.accuracy).collect();
        append_metrics_row(
            &metrics_path,
            &MetricsRow {
                phase: i,
                n_learned_classes: result.n_learned_classes,
                accuracy: result.accuracy,
                average_accuracy: average_incremental(&accs)?,
                timestamp: timestamp(),
            },
        )?;
        events.event(&format!(
            "done seed={} phase={} accuracy={:.6} seconds={:.1}",
            seed, i, result.accuracy, result.seconds
        ));
    }

    let report = RunReport::new(
        seed,
        &schedule.protocol_name,
        n,
        cfg.trainer.ablation,
        history.iter().map(|h| h.accuracy).collect(),
        history.iter().map(|h| h.seconds).collect(),
        &hash,
    )?;
    report.save(&dir.join("report.json"))?;
    Ok(report)
}

/// Every configured seed under `cfg.out/seed_{s}`, then a summary table in `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    let dataset = cfg.dataset.load()?;
    let lock = cfg.lock_text()?;
    write_lock(&cfg.out, &lock)?;
    let mut reports = Vec::new();
    for &seed in &cfg.protocol.seeds {
        reports.push(run_seed(cfg, &dataset, seed, &seed_dir(&cfg.out, seed))?);
    }
    let rows = aggregate_groups(&reports)?;
    write_summary(&cfg.out, "summary", &rows)?;
    Ok(reports)
}

fn write_summary(out: &Path, stem: &str, rows: &[AggregateRow]) -> Result<()> {
    let table = format_table(rows);
    let p = out.join(format!("{}.txt", stem));
    std::fs::write(&p, &table).map_err(|e| Error::io(&p, e))?;
    write_aggregate_csv(&out.join(format!("{}.csv", stem)), rows)
}

/// Full method and the three single-component removals.
pub fn standard_variants() -> Vec<Ablation> {
    vec![
        Ablation::default(),
        Ablation {
            no_rkd: true,
            ..Ablation::default()
        },
        Ablation {
            no_hkd: true,
            ..Ablation::default()
        },
        Ablation {
            no_chr: true,
            ..Ablation::default()
        },
    ]
}

/// Runs each variant over the configured seeds in `cfg.out/<variant>`; rows follow
/// the order of `variants`.
pub fn ablate(cfg: &ExperimentConfig, variants: &[Ablation]) -> Result<Vec<AggregateRow>> {
    let mut rows = Vec::new();
    for v in variants {
        let mut c = cfg.clone();
        c.trainer.ablation = *v;
        c.out = cfg.out.join(v.label());
        let reports = run_experiment(&c)?;
        rows.extend(aggregate_groups(&reports)?);
    }
    write_summary(&cfg.out, "ablation", &rows)?;
    plot_curves(&cfg.out.join("curves.svg"), &rows)?;
    Ok(rows)
}

fn collect_reports(dir: &Path, found: &mut Vec<PathBuf>, incomplete: &mut Vec<PathBuf>) -> Result<()> {
    let report = dir.join("report.json");
    if report.exists() {
        found.push(report);
    } else if dir.join("metrics.csv").exists() {
        incomplete.push(dir.to_path_buf());
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut subdirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for d in subdirs {
        collect_reports(&d, found, incomplete)?;
    }
    Ok(())
}

/// Outcome of [`report`].
pub struct ReportOutput {
    pub rows: Vec<AggregateRow>,
    pub table: String,
    pub warnings: Vec<String>,
}

/// Aggregate every completed run found under `run_dirs`; write tables and curves to `out`.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<ReportOutput> {
    let mut found = Vec::new();
    let mut incomplete = Vec::new();
    for d in run_dirs {
        if !d.is_dir() {
            return Err(Error::Config {
                key: "dirs".into(),
                message: format!("{} is not a directory", d.display()),
            });
        }
        collect_reports(d, &mut found, &mut incomplete)?;
    }
    let mut warnings: Vec<String> = incomplete
        .iter()
        .map(|d| format!("{} is incomplete and was excluded", d.display()))
        .collect();
    let mut reports = Vec::new();
    for p in &found {
        let r = RunReport::load(p)?;
        if r.is_complete() {
            reports.push(r);
        } else {
            warnings.push(format!("{} is incomplete and was excluded", p.display()));
        }
    }
    if reports.is_empty() {
        return Err(Error::invalid("no completed runs found"));
    }
    let rows = aggregate_groups(&reports)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_summary(out, "report", &rows)?;
    plot_curves(&out.join("curves.svg"), &rows)?;
    write_curves_csv(&out.join("curves.csv"), &rows)?;
    Ok(ReportOutput {
        table: format_table(&rows),
        rows,
        warnings,
    })
}

fn write_curves_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record(["variant", "protocol", "phase", "accuracy"])
        .map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        for (i, a) in r.curve.iter().enumerate() {
            w.write_record([r.variant.clone(), r.protocol.clone(), (i + 1).to_string(), format!("{:.6}", a)])
                .map_err(|e| Error::format(path, e.to_string()))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Incremental accuracy (percent) against phase, one line per row.
pub fn plot_curves(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    use plotters::prelude::*;
    let err = |e: String| Error::format(path, e);
    let phases = rows.iter().map(|r| r.curve.len()).max().unwrap_or(1).max(2);
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(1f64..phases as f64, 0f64..100f64)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("phase")
        .y_desc("accuracy (%)")
        .draw()
        .map_err(|e| err(e.to_string()))?;
    for (k, r) in rows.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        chart
            .draw_series(LineSeries::new(
                r.curve.iter().enumerate().map(|(i, a)| ((i + 1) as f64, a * 100.0)),
                color.stroke_width(2),
            ))
            .map_err(|e| err(e.to_string()))?
            .label(r.variant.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

/// Side of the square preview grid.
pub const PREVIEW_GRID: usize = 8;

/// Write a grid of generated images (denormalized) as PNG plus their labels as CSV.
///
/// With `run_dir`, one grid per phase that stored a generator (or only `phase`),
/// written into that phase's directory unless `out` is given. A phase without a
/// stored generator gets one fitted to its checkpoint. Without `run_dir`, trains the
/// first phase of the first seed and fits a generator to it.
pub fn synth_preview(
    cfg: &ExperimentConfig,
    run_dir: Option<&Path>,
    phase: Option<usize>,
    out: Option<&Path>,
) -> Result<Vec<PathBuf>> {
    let dataset = cfg.dataset.load()?;
    let seed = cfg.protocol.seeds[0];
    let mut rng = phase_rng(seed, 0, Purpose::Synthesis);
    let mut written = Vec::new();
    match run_dir {
        Some(dir) => {
            let n = (1..)
                .take_while(|&i| checkpoint_path(dir, i).exists())
                .last()
                .ok_or_else(|| Error::invalid(format!("no checkpoints in {}", dir.display())))?;
            let phases: Vec<usize> = match phase {
                Some(p) if p == 0 || p > n => {
                    return Err(Error::invalid(format!("phase {} not available (1..={})", p, n)))
                }
                Some(p) => vec![p],
                None => {
                    let with_gen: Vec<usize> = (2..=n).filter(|&i| generator_path(dir, i).exists()).collect();
                    if with_gen.is_empty() {
                        vec![n]
                    } else {
                        with_gen
                    }
                }
            };
            for p in phases {
                let gpath = generator_path(dir, p);
                let (generator, old) = if p >= 2 && gpath.exists() {
                    let prev = Checkpoint::<f32>::load(&checkpoint_path(dir, p - 1))?;
                    let g: GeneratorNet<f32> = load_json(&gpath)?;
                    (g, snapshot(&prev.model, p - 1))
                } else {
                    let ck = Checkpoint::<f32>::load(&checkpoint_path(dir, p))?;
                    let snap = snapshot(&ck.model, p);
                    let (g, _) = train_synthesizer(&snap, &dataset.normalization, &cfg.synthesizer, &mut rng)?;
                    (g, snap)
                };
                let target = out.map(Path::to_path_buf).unwrap_or_else(|| phase_dir(dir, p));
                let stem = if out.is_some() { format!("synth_preview_phase_{}", p) } else { "synth_preview".into() };
                written.push(write_preview(&generator, &old, &target, &stem, &mut rng)?);
            }
        }
        None => {
            let schedule = build_schedule(cfg, &dataset, seed)?;
            let mut state = PhaseState::<f32>::new(cfg.model.clone());
            run_phase(&mut state, &schedule, &dataset, &cfg.trainer, &cfg.synthesizer, seed)?;
            let snap = state.snapshot.expect("snapshot after phase");
            let (g, _) = train_synthesizer(&snap, &dataset.normalization, &cfg.synthesizer, &mut rng)?;
            let target = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join("preview"));
            written.push(write_preview(&g, &snap, &target, "synth_preview", &mut rng)?);
        }
    }
    Ok(written)
}

fn write_preview(
    generator: &GeneratorNet<f32>,
    old: &crate::model::ModelSnapshot<f32>,
    out: &Path,
    stem: &str,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<PathBuf> {
    let batch = sample(generator, old, PREVIEW_GRID * PREVIEW_GRID, rng)?;
    let mut images = batch.images.clone();
    generator.normalization().invert(&mut images);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let png_path = out.join(format!("{}.png", stem));
    write_grid_png(&png_path, &images, PREVIEW_GRID)?;
    let mut text = String::from("index,label\n");
    for (i, y) in batch.labels.iter().enumerate() {
        text.push_str(&format!("{},{}\n", i, y));
    }
    let lp = out.join(format!("{}_labels.csv", stem));
    std::fs::write(&lp, text).map_err(|e| Error::io(&lp, e))?;
    Ok(png_path)
}

/// `[n, c, h, w]` pixels in `[0, 1]` laid out `cols` per row, upscaled to at least 32 px tiles.
pub fn write_grid_png(path: &Path, images: &crate::tensor::Tensor<f32>, cols: usize) -> Result<()> {
    let (n, c, h, w) = (images.dim(0), images.dim(1), images.dim(2), images.dim(3));
    let scale = (32 / h.max(1)).max(1);
    let (th, tw) = (h * scale, w * scale);
    let rows = n.div_ceil(cols);
    let gap = 2;
    let (gw, gh) = (cols * (tw + gap) + gap, rows * (th + gap) + gap);
    let mut buf = vec![255u8; gw * gh * 3];
    for k in 0..n {
        let (r, q) = (k / cols, k % cols);
        let img = &images.data()[k * c * h * w..(k + 1) * c * h * w];
        for y in 0..th {
            for x in 0..tw {
                let (sy, sx) = (y / scale, x / scale);
                let px = (gap + r * (th + gap) + y) * gw + gap + q * (tw + gap) + x;
                for ch in 0..3 {
                    let v = img[((ch % c) * h + sy) * w + sx].clamp(0.0, 1.0);
                    buf[px * 3 + ch] = (v * 255.0).round() as u8;
                }
            }
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), gw as u32, gh as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(&buf).map_err(|e| Error::format(path, e.to_string()))
}
