use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use foucast_core::data::checkpoint::read_checkpoint;
use foucast_core::model::NowcastModel;
use sha2::{Digest, Sha256};

const TINY: &str = "\
[model]
t_in = 2
k_out = 2
hw = 8
hidden_hw = 4
c_emb = 4
depth_l = 1
n_blocks = 2
memory_slots = 3
enc_channels = 2,2,2

[train]
lr = 0.01
batch = 2
seed = 5

[data]
n_events = 6
train_fraction = 0.5
cov_hw = 4
radius_min = 1.0
radius_max = 2.0
seed = 11

[eval]
thresholds = 16,74
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_foucast"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

/// `[train]` overrides appended after the base config.
fn train_config(dir: &Path, name: &str, train: &str) -> PathBuf {
    let text = TINY.replace("[train]\n", &format!("[train]\n{train}\n"));
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn hash_dir(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let h = Sha256::digest(fs::read(&p).unwrap());
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), h.iter().map(|b| format!("{b:02x}")).collect::<String>()));
            }
        }
    }
    out.sort();
    out
}

fn synth(tmp: &Path, cfg: &Path) -> PathBuf {
    let out = tmp.join("data");
    ok(&["synth", "--config", s(cfg), "--out", s(&out)]);
    out.join("manifest.txt")
}

#[test]
fn synth_single_event_hashes_are_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "");
    let text = fs::read_to_string(&cfg).unwrap().replace("n_events = 6", "n_events = 1");
    fs::write(&cfg, text).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth", "--config", s(&cfg), "--out", s(&a), "--seed", "3"]);
    ok(&["synth", "--config", s(&cfg), "--out", s(&b), "--seed", "3"]);
    let ha = hash_dir(&a);
    assert_eq!(ha.len(), 3);
    assert_eq!(ha, hash_dir(&b));
    let c = tmp.path().join("c");
    ok(&["synth", "--config", s(&cfg), "--out", s(&c), "--seed", "4"]);
    assert_ne!(ha, hash_dir(&c));
}

#[test]
fn synth_zero_events_writes_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "");
    let text = fs::read_to_string(&cfg).unwrap().replace("n_events = 6", "n_events = 0");
    fs::write(&cfg, text).unwrap();
    let out = tmp.path().join("d");
    ok(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    let m = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(!m.contains("event "));
    assert!(m.starts_with("foucast-manifest 1"));
}

#[test]
fn invalid_config_fails_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "");
    let text = fs::read_to_string(&cfg).unwrap().replace("radius_max = 2.0", "radius_max = 0.5");
    fs::write(&cfg, text).unwrap();
    let out = tmp.path().join("never");
    let o = run(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("data.radius_max"));
    assert!(!out.exists());

    let bad = write_config(tmp.path(), "bad.toml", "");
    fs::write(&bad, fs::read_to_string(&bad).unwrap().replace("lr = 0.01", "lr = -1")).unwrap();
    let o = run(&["train", "--config", s(&bad), "--manifest", "nowhere", "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.lr"));
    assert!(!out.exists());
}

#[test]
fn phase1_zero_leaves_memory_at_init() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = train_config(tmp.path(), "c.toml", "phase1_steps = 0\nphase2_steps = 3");
    let manifest = synth(tmp.path(), &cfg);
    let out = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&out)]);
    let ck = read_checkpoint(&out.join("checkpoint.fck")).unwrap();
    let init = NowcastModel::new(ck.config.clone(), 5).unwrap();
    let digest = |t: &foucast_core::Tensor| Sha256::digest(t.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>());
    assert_eq!(digest(ck.params.by_name("mem.slots").unwrap()), digest(init.params().by_name("mem.slots").unwrap()));
    assert_ne!(ck.params.by_name("enc.0.w"), init.params().by_name("enc.0.w"));
    let log = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.lines().skip(1).all(|l| l.split(',').nth(1) == Some("2")));
}

#[test]
fn training_is_deterministic_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = train_config(tmp.path(), "c.toml", "phase1_steps = 2\nphase2_steps = 2");
    let manifest = synth(tmp.path(), &cfg);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&a)]);
    ok(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&b)]);
    assert_eq!(fs::read(a.join("loss.csv")).unwrap(), fs::read(b.join("loss.csv")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.fck")).unwrap(), fs::read(b.join("checkpoint.fck")).unwrap());

    let half = train_config(tmp.path(), "half.toml", "phase1_steps = 2\nphase2_steps = 1");
    let r = tmp.path().join("r");
    ok(&["train", "--config", s(&half), "--manifest", s(&manifest), "--out", s(&r)]);
    let first = r.join("first.fck");
    fs::rename(r.join("checkpoint.fck"), &first).unwrap();
    ok(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&r), "--checkpoint", s(&first)]);
    assert_eq!(fs::read(a.join("checkpoint.fck")).unwrap(), fs::read(r.join("checkpoint.fck")).unwrap());
    assert_eq!(fs::read(a.join("loss.csv")).unwrap(), fs::read(r.join("loss.csv")).unwrap());
}

#[test]
fn eval_rows_for_ablation_variants_and_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let base = train_config(tmp.path(), "c.toml", "phase1_steps = 1\nphase2_steps = 1");
    let manifest = synth(tmp.path(), &base);
    let mut cks = Vec::new();
    for (i, mods) in ["pfm,fm,ifa", "fm,ifa", "pfm,ifa", "none"].iter().enumerate() {
        let cfg = tmp.path().join(format!("v{i}.toml"));
        fs::write(&cfg, fs::read_to_string(&base).unwrap().replace("[model]\n", &format!("[model]\nmodules_enabled = {mods}\n"))).unwrap();
        let out = tmp.path().join(format!("v{i}"));
        ok(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&out)]);
        cks.push(out.join("checkpoint.fck"));
    }
    let ev = tmp.path().join("eval");
    let mut args = vec!["eval", "--config", s(&base), "--manifest", s(&manifest), "--out", s(&ev), "--oracle"];
    for c in &cks {
        args.extend(["--checkpoint", s(c)]);
    }
    let o = bin().args(&args).env("FOUCAST_THREADS", "2").output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let px = fs::read_to_string(ev.join("metrics_pixel.csv")).unwrap();
    let tags: Vec<&str> = px.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(tags, ["full", "no_pfm", "no_fm", "no_pfm+no_fm+no_ifa", "persistence", "ground_truth"]);
    assert_eq!(px.lines().next().unwrap(), "model,mse,mae,psnr,ssim");
    assert!(px.contains("ground_truth,0.000000,0.000000,inf,1.000000"));
    let th = fs::read_to_string(ev.join("metrics_thresholds.csv")).unwrap();
    assert_eq!(th.lines().next().unwrap(), "model,threshold,csi,hss");
    let gt: Vec<&str> = th.lines().filter(|l| l.starts_with("ground_truth,")).collect();
    assert_eq!(gt, ["ground_truth,16,1.000000,1.000000", "ground_truth,74,1.000000,1.000000", "ground_truth,avg,1.000000,1.000000"]);
    let lead = fs::read_to_string(ev.join("metrics_lead.csv")).unwrap();
    assert_eq!(lead.lines().filter(|l| l.starts_with("full,")).count(), 2);

    let o = ok(&["report", "--out", s(&ev)]);
    let md = String::from_utf8(o.stdout).unwrap();
    assert!(md.contains("| model | 16 | 74 | avg |"));
    assert!(md.contains("| no_pfm | "));
    assert!(ev.join("report.md").exists());
}

#[test]
fn eval_accepts_both_threshold_lists_and_rejects_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let base = write_config(tmp.path(), "c.toml", "");
    let manifest = synth(tmp.path(), &base);
    for list in ["16,74,133,160,181,219", "12,24,32"] {
        let cfg = tmp.path().join("t.toml");
        fs::write(&cfg, fs::read_to_string(&base).unwrap().replace("thresholds = 16,74", &format!("thresholds = {list}"))).unwrap();
        let ev = tmp.path().join("ev");
        ok(&["eval", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&ev), "--oracle"]);
        let th = fs::read_to_string(ev.join("metrics_thresholds.csv")).unwrap();
        assert_eq!(th.lines().filter(|l| l.starts_with("persistence,")).count(), list.split(',').count() + 1);
    }

    let other = tmp.path().join("o.toml");
    fs::write(&other, fs::read_to_string(&base).unwrap().replace("k_out = 2", "k_out = 3").replace("n_events = 6", "n_events = 2")).unwrap();
    let om = tmp.path().join("odata");
    ok(&["synth", "--config", s(&other), "--out", s(&om)]);
    let run_dir = tmp.path().join("run");
    let quick = train_config(tmp.path(), "q.toml", "phase1_steps = 1\nphase2_steps = 0");
    ok(&["train", "--config", s(&quick), "--manifest", s(&manifest), "--out", s(&run_dir)]);
    let ev = tmp.path().join("mismatch");
    let o = run(&["eval", "--config", s(&base), "--manifest", s(&om.join("manifest.txt")), "--checkpoint", s(&run_dir.join("checkpoint.fck")), "--out", s(&ev)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("k_out"));
    assert!(!ev.exists());
}
