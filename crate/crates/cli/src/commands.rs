use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use foucast_core::data::checkpoint::{read_checkpoint, save_checkpoint};
use foucast_core::data::manifest::{DatasetManifest, EventEntry, Sample, Split};
use foucast_core::data::synth::{covariate_stats, generate_event, SyntheticEventConfig};
use foucast_core::data::tensorfile::{write_tensor, Dtype};
use foucast_core::eval::{evaluate, persistence, worker_limit};
use foucast_core::metrics::EvalAccumulator;
use foucast_core::model::{ModelConfig, NowcastModel};
use foucast_core::train::{prepare, Trainer};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.fck";
pub const LOSS_FILE: &str = "loss.csv";
pub const THRESHOLD_FILE: &str = "metrics_thresholds.csv";
pub const PIXEL_FILE: &str = "metrics_pixel.csv";
pub const LEAD_FILE: &str = "metrics_lead.csv";
pub const REPORT_FILE: &str = "report.md";

/// Removes the listed files on drop unless disarmed.
struct Cleanup(Vec<PathBuf>);

impl Cleanup {
    fn track(&mut self, p: PathBuf) -> PathBuf {
        self.0.push(p.clone());
        p
    }

    fn disarm(mut self) {
        self.0.clear();
    }
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        for p in self.0.iter().rev() {
            let _ = if p.is_dir() { fs::remove_dir(p) } else { fs::remove_file(p) };
        }
    }
}

fn create_dir(path: &Path, cleanup: &mut Cleanup) -> Result<()> {
    if !path.exists() {
        fs::create_dir_all(path).with_context(|| format!("cannot create {}", path.display()))?;
        cleanup.track(path.to_path_buf());
    }
    Ok(())
}

/// Event seeds are derived from the data seed and the event index.
pub fn event_seed(data_seed: u64, i: usize) -> u64 {
    data_seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let n = cfg.data.n_events;
    let n_train = cfg.n_train();
    let mut cleanup = Cleanup(Vec::new());
    create_dir(out, &mut cleanup)?;
    let events_dir = out.join("events");
    create_dir(&events_dir, &mut cleanup)?;
    let mut grids = Vec::with_capacity(n_train);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let ev = generate_event(&SyntheticEventConfig {
            seed: event_seed(cfg.data.synth.seed, i),
            ..cfg.data.synth.clone()
        })?;
        let radar = PathBuf::from(format!("events/e{i:04}.radar.fct"));
        let cov = PathBuf::from(format!("events/e{i:04}.cov.fct"));
        write_tensor(&cleanup.track(out.join(&radar)), ev.radar.frames(), Dtype::F64)?;
        write_tensor(&cleanup.track(out.join(&cov)), ev.covariates.fields(), Dtype::F64)?;
        let split = if i < n_train { Split::Train } else { Split::Test };
        if split == Split::Train {
            grids.push(ev.covariates);
        }
        entries.push(EventEntry { split, radar, cov });
    }
    let s = &cfg.data.synth;
    let manifest = DatasetManifest {
        t_in: s.t_in,
        k_out: s.k_out,
        hw: s.hw,
        cov_hw: s.cov_hw,
        cadence: s.cadence,
        cov_times: s.cov_times(),
        stats: covariate_stats(&grids),
        events: entries,
    };
    let path = cleanup.track(out.join(MANIFEST_FILE));
    manifest.save(&path)?;
    cleanup.disarm();
    log::info!("wrote {n} events ({n_train} train) to {}", out.display());
    Ok(path)
}

/// The manifest must describe data the model can consume.
fn check_manifest(m: &DatasetManifest, model: &ModelConfig) -> Result<()> {
    for (key, have, want) in [("t_in", m.t_in, model.t_in), ("k_out", m.k_out, model.k_out), ("hw", m.hw, model.hw)] {
        if have != want {
            bail!("manifest/model mismatch on `{key}`: manifest has {have}, model has {want}");
        }
    }
    Ok(())
}

fn load_manifest(cfg: &RunConfig, flag: Option<&Path>) -> Result<(DatasetManifest, PathBuf)> {
    let path = flag
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.manifest.clone())
        .ok_or_else(|| anyhow!("no manifest: pass --manifest or set data.manifest"))?;
    let m = DatasetManifest::load(&path)?;
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((m, dir))
}

pub fn train(cfg: &RunConfig, manifest: Option<&Path>, out: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    let (m, dir) = load_manifest(cfg, manifest)?;
    check_manifest(&m, &cfg.model)?;
    let resumed = resume.map(|p| read_checkpoint(p).with_context(|| format!("cannot read {}", p.display()))).transpose()?;
    let samples = m.load_split(&dir, Split::Train)?;
    if samples.is_empty() {
        bail!("manifest has no training events");
    }
    let mut trainer = match resumed {
        Some(ck) => {
            let (model, state, opt) = ck.into_model(Some(&cfg.model))?;
            Trainer::resume(model, state, opt, cfg.train)?
        }
        None => Trainer::new(NowcastModel::new(cfg.model.clone(), cfg.train.seed)?, cfg.train)?,
    };
    let data = prepare(trainer.model(), &samples)?;

    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let loss_path = out.join(LOSS_FILE);
    let fresh = resume.is_none() || !loss_path.exists();
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&loss_path)
        .with_context(|| format!("cannot open {}", loss_path.display()))?;
    if fresh {
        writeln!(log_file, "step,phase,loss")?;
    }
    let mut io_err = None;
    let result = trainer.run(&data, |r| {
        if io_err.is_none() {
            if let Err(e) = writeln!(log_file, "{},{},{:?}", r.step, r.phase.id(), r.loss) {
                io_err = Some(e);
            }
        }
        if r.step % 50 == 0 {
            log::info!("step {} phase {} loss {:.6}", r.step, r.phase.id(), r.loss);
        }
    });
    if let Some(e) = io_err {
        return Err(e).context("cannot write the loss log");
    }
    result?;
    let ck = out.join(CHECKPOINT_FILE);
    let (model, state, opt) = trainer.into_parts();
    save_checkpoint(&ck, &model, state, Some(&opt))?;
    log::info!("checkpoint written to {}", ck.display());
    Ok(ck)
}

fn fmt(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

struct Row {
    tag: String,
    acc: EvalAccumulator,
}

pub fn eval(cfg: &RunConfig, manifest: Option<&Path>, checkpoints: &[PathBuf], out: &Path, oracle: bool) -> Result<()> {
    let (m, dir) = load_manifest(cfg, manifest)?;
    let mut models = Vec::with_capacity(checkpoints.len());
    for p in checkpoints {
        let ck = read_checkpoint(p).with_context(|| format!("cannot read {}", p.display()))?;
        check_manifest(&m, &ck.config).with_context(|| format!("checkpoint {}", p.display()))?;
        models.push(ck.into_model(None)?.0);
    }
    let samples: Vec<Sample> = m.load_split(&dir, Split::Test)?;
    if samples.is_empty() {
        bail!("manifest has no test events");
    }
    let thresholds = &cfg.eval.thresholds;
    let k = m.k_out;
    let workers = worker_limit();

    let mut rows = Vec::new();
    let mut seen: Vec<String> = Vec::new();
    for model in &models {
        let base = model.config().tag();
        let count = seen.iter().filter(|t| **t == base).count();
        seen.push(base.clone());
        let tag = if count == 0 { base } else { format!("{base}#{}", count + 1) };
        let acc = evaluate(&samples, thresholds, k, workers, |s| model.forward(&s.input, &s.covariates))?;
        rows.push(Row { tag, acc });
    }
    let acc = evaluate(&samples, thresholds, k, workers, |s| persistence(&s.input, k, s.target.timestamps().to_vec()))?;
    rows.push(Row {
        tag: "persistence".into(),
        acc,
    });
    if oracle {
        let acc = evaluate(&samples, thresholds, k, workers, |s| Ok(s.target.clone()))?;
        rows.push(Row {
            tag: "ground_truth".into(),
            acc,
        });
    }

    let mut th = String::from("model,threshold,csi,hss\n");
    let mut px = String::from("model,mse,mae,psnr,ssim\n");
    let mut lead = String::from("model,lead,minutes,mse,mae,psnr,ssim,csi_avg,hss_avg\n");
    for r in &rows {
        let s = r.acc.summary();
        for &(t, c, h) in &s.per_threshold {
            writeln!(th, "{},{},{},{}", r.tag, t, fmt(c), fmt(h))?;
        }
        writeln!(th, "{},avg,{},{}", r.tag, fmt(s.avg_csi), fmt(s.avg_hss))?;
        writeln!(px, "{},{},{},{},{}", r.tag, fmt(s.mse), fmt(s.mae), fmt(s.psnr), fmt(s.ssim))?;
        for (i, l) in r.acc.lead_summaries().iter().enumerate() {
            let minutes = (i + 1) as f64 * m.cadence;
            writeln!(lead, "{},{},{},{},{},{},{},{},{}", r.tag, i + 1, minutes, fmt(l.mse), fmt(l.mae), fmt(l.psnr), fmt(l.ssim), fmt(l.avg_csi), fmt(l.avg_hss))?;
        }
    }
    let mut cleanup = Cleanup(Vec::new());
    create_dir(out, &mut cleanup)?;
    for (name, body) in [(THRESHOLD_FILE, th), (PIXEL_FILE, px), (LEAD_FILE, lead)] {
        let p = cleanup.track(out.join(name));
        fs::write(&p, body).with_context(|| format!("cannot write {}", p.display()))?;
    }
    cleanup.disarm();
    log::info!("evaluated {} test events for {} rows", samples.len(), rows.len());
    Ok(())
}

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(text.lines().skip(1).filter(|l| !l.is_empty()).map(|l| l.split(',').map(str::to_string).collect()).collect())
}

/// Markdown tables built from the evaluation CSVs in `dir`.
pub fn report(dir: &Path) -> Result<String> {
    let th = read_csv(&dir.join(THRESHOLD_FILE))?;
    let px = read_csv(&dir.join(PIXEL_FILE))?;
    let mut models: Vec<String> = Vec::new();
    let mut thresholds: Vec<String> = Vec::new();
    for r in &th {
        if r.len() != 4 {
            bail!("{}: malformed row {r:?}", THRESHOLD_FILE);
        }
        if !models.contains(&r[0]) {
            models.push(r[0].clone());
        }
        if !thresholds.contains(&r[1]) {
            thresholds.push(r[1].clone());
        }
    }
    let cell = |model: &str, t: &str, col: usize| -> String {
        th.iter().find(|r| r[0] == model && r[1] == t).map(|r| r[col].clone()).unwrap_or_else(|| "-".into())
    };
    let mut md = String::new();
    for (title, col) in [("CSI", 2), ("HSS", 3)] {
        writeln!(md, "## {title}\n")?;
        writeln!(md, "| model | {} |", thresholds.join(" | "))?;
        writeln!(md, "|---|{}", "---|".repeat(thresholds.len()))?;
        for mdl in &models {
            let cells: Vec<String> = thresholds.iter().map(|t| cell(mdl, t, col)).collect();
            writeln!(md, "| {mdl} | {} |", cells.join(" | "))?;
        }
        writeln!(md)?;
    }
    writeln!(md, "## Pixel metrics\n")?;
    writeln!(md, "| model | MSE | MAE | PSNR | SSIM |")?;
    writeln!(md, "|---|---|---|---|---|")?;
    for r in &px {
        if r.len() != 5 {
            bail!("{}: malformed row {r:?}", PIXEL_FILE);
        }
        writeln!(md, "| {} |", r.join(" | "))?;
    }
    fs::write(dir.join(REPORT_FILE), &md).with_context(|| format!("cannot write {}", dir.join(REPORT_FILE).display()))?;
    Ok(md)
}
