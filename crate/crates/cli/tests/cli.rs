use std::path::Path;
use std::process::{Command, Output};

use mopeft::autodiff::GradHook;
use mopeft::config::ExperimentConfig;
use mopeft::data::{fmt_sig6, read_metrics_csv, save_dataset, Domain};
use mopeft::gating::GateMethod;
use mopeft::model::SegModel;
use mopeft_cli::{GradcheckOptions, GradcheckOutcome, SweepAxis};

const SMALL: [&str; 5] = [
    "model.layers=2",
    "train.steps=10",
    "train.eval_every=5",
    "data.train_n=8",
    "data.val_n=4",
];

fn mopeft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mopeft")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn sets(extra: &[&str]) -> Vec<String> {
    SMALL.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn small_cfg(extra: &[&str], out: &Path) -> ExperimentConfig {
    mopeft_cli::load_config(None, &sets(extra), Some(out)).unwrap()
}

fn set_args<'a>(extra: &[&'a str]) -> Vec<String> {
    SMALL
        .iter()
        .chain(extra)
        .flat_map(|s| ["--set".to_string(), s.to_string()])
        .collect()
}

#[test]
fn train_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["train".to_string(), "--out".into(), out.to_string_lossy().into_owned()];
    // full default schedule on a 2-layer model
    for s in ["model.layers=2", "train.steps=200", "peft.mode=mopeft"] {
        args.extend(["--set".into(), s.into()]);
    }
    let o = mopeft(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("final val mIoU"));
    for name in [
        mopeft_cli::CONFIG,
        mopeft_cli::CHECKPOINT,
        mopeft_cli::METRICS,
        mopeft_cli::GATES,
        mopeft_cli::GATE_EVENTS,
    ] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    assert!(!out.join(".mopeft.lock").exists());
    let rows = read_metrics_csv(&out.join(mopeft_cli::METRICS)).unwrap();
    // one evaluation per 50 steps
    assert_eq!(rows.last().unwrap().epoch, 4);
}

#[test]
fn second_run_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_string_lossy().into_owned();
    let base: Vec<String> = ["train", "--out", &out].iter().map(|s| s.to_string()).chain(set_args(&[])).collect();
    let base: Vec<&str> = base.iter().map(String::as_str).collect();
    assert!(mopeft(&base).status.success());
    let again = mopeft(&base);
    assert!(!again.status.success());
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    let mut forced = base.clone();
    forced.push("--force");
    assert!(mopeft(&forced).status.success());
}

#[test]
fn active_lock_is_refused_even_with_force() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(".mopeft.lock"), b"").unwrap();
    let cfg = small_cfg(&[], dir.path());
    let err = mopeft_cli::train(&cfg, true).unwrap_err();
    assert!(err.to_string().contains("locked"), "{err}");
}

#[test]
fn baseline_trains_nothing_but_is_evaluated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(&["peft.mode=baseline"], dir.path());
    let run = mopeft_cli::train(&cfg, false).unwrap();
    assert_eq!(run.params.trainable, 0);
    assert!(run.final_train_miou().is_none());
    assert!(run.rows.iter().all(|r| r.split == mopeft::train::Split::Val));
    assert!(!dir.path().join(mopeft_cli::GATES).exists());
}

#[test]
fn eval_reproduces_the_final_val_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(&["peft.mode=mopeft"], dir.path());
    let run = mopeft_cli::train(&cfg, false).unwrap();
    let r = mopeft_cli::eval(dir.path(), &[]).unwrap();
    assert_eq!(r.miou, run.final_val_miou());
    assert!(r.gate_means.is_some());

    let o = mopeft(&["eval", "--out", &dir.path().to_string_lossy()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mean gates"));

    let err = mopeft_cli::eval(dir.path(), &["peft.rank=2".into()]).unwrap_err();
    assert!(err.to_string().contains("must not change"), "{err}");
    // retargeting the data is allowed
    mopeft_cli::eval(dir.path(), &["data.domain=rings".into()]).unwrap();
}

#[test]
fn directory_datasets_train_like_synthetic_ones() {
    let dir = tempfile::tempdir().unwrap();
    let synth = small_cfg(&[], &dir.path().join("a"));
    save_dataset(&mopeft_cli::load_data(&synth).unwrap(), &dir.path().join("data")).unwrap();
    let data_path = format!("data.path={}", dir.path().join("data").display());
    let from_dir = small_cfg(&["data.source=dir", &data_path], &dir.path().join("b"));
    let a = mopeft_cli::train(&synth, false).unwrap();
    let b = mopeft_cli::train(&from_dir, false).unwrap();
    assert_eq!(a.rows, b.rows);
}

#[test]
fn mismatched_image_size_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(&["model.image=32"], &dir.path().join("a"));
    let mut ds = mopeft_cli::load_data(&cfg).unwrap();
    ds.train.truncate(2);
    let spec = small_cfg(&["model.image=16"], &dir.path().join("x"));
    let small = mopeft_cli::load_data(&spec).unwrap();
    ds.val = small.val;
    save_dataset(&ds, &dir.path().join("data")).unwrap();
    let data_path = format!("data.path={}", dir.path().join("data").display());
    let bad = small_cfg(&["data.source=dir", &data_path], &dir.path().join("b"));
    assert!(mopeft_cli::train(&bad, false).is_err());
}

fn tiny_gradcheck_cfg(mode: &str) -> ExperimentConfig {
    let sets: Vec<String> = [
        format!("peft.mode={mode}"),
        "model.layers=2".into(),
        "model.dim=16".into(),
        "model.heads=2".into(),
        "peft.prefix_len=4".into(),
        "peft.d_mid=8".into(),
        "peft.rank=2".into(),
        "gate.hidden=4".into(),
        "train.batch=2".into(),
    ]
    .into();
    mopeft_cli::load_config(None, &sets, None).unwrap()
}

#[test]
fn gradcheck_passes_for_two_layer_mopeft() {
    let cfg = tiny_gradcheck_cfg("mopeft");
    let out = mopeft_cli::gradcheck(&cfg, GradcheckOptions::default()).unwrap();
    let GradcheckOutcome::Checked(r) = &out else { panic!("vacuous") };
    assert!(r.passed(), "{out}");
    let model = SegModel::from_config(&cfg).unwrap();
    assert_eq!(r.params.len(), model.trainable_names().len());
}

#[test]
fn gradcheck_catches_a_corrupted_backward() {
    fn corrupt_gelu(op: &'static str, grad: &mut [f64]) {
        if op == "gelu" {
            grad.iter_mut().for_each(|g| *g *= 1.1);
        }
    }
    let hook: GradHook = corrupt_gelu;
    let opts = GradcheckOptions { grad_hook: Some(hook), ..GradcheckOptions::default() };
    let out = mopeft_cli::gradcheck(&tiny_gradcheck_cfg("adapter"), opts).unwrap();
    assert!(!out.passed());
    let text = out.to_string();
    assert!(text.contains("FAIL"), "{text}");
    // an adapter bottleneck weight sits upstream of the corrupted GELU
    assert!(text.contains("adapter"), "{text}");
}

#[test]
fn gradcheck_of_baseline_is_vacuous() {
    let o = mopeft(&["gradcheck", "--set", "peft.mode=baseline", "--set", "model.layers=2"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("vacuous PASS"), "{}", stdout(&o));
}

#[test]
fn gradcheck_refuses_large_models() {
    let cfg = mopeft_cli::load_config(None, &["model.dim=128".into(), "model.layers=4".into()], None).unwrap();
    assert!(SegModel::from_config(&cfg).unwrap().store.numel() >= mopeft_cli::MAX_GRADCHECK_PARAMS);
    let err = mopeft_cli::gradcheck(&cfg, GradcheckOptions::default()).unwrap_err();
    assert!(err.to_string().contains("limited"), "{err}");
}

#[test]
fn single_value_sweep_writes_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(&["peft.mode=lora"], dir.path());
    let points = mopeft_cli::sweep(&cfg, SweepAxis::Rank, &[4], 1, false).unwrap();
    assert_eq!(points.len(), 1);
    let rows = mopeft_cli::read_summary(&dir.path().join(mopeft_cli::SUMMARY)).unwrap();
    let want = fmt_sig6(points[0].run.final_val_miou()).parse::<f64>().unwrap();
    assert_eq!(rows, vec![(4, want, points[0].run.params.trainable)]);
    let text = std::fs::read_to_string(dir.path().join(mopeft_cli::SUMMARY)).unwrap();
    assert!(text.starts_with(mopeft_cli::SUMMARY_HEADER));
    assert!(dir.path().join("rank_4").join(mopeft_cli::CHECKPOINT).is_file());
}

#[test]
fn sweep_axis_must_be_used_by_the_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(&["peft.mode=lora"], dir.path());
    assert!(mopeft_cli::sweep(&cfg, SweepAxis::PrefixLen, &[5], 1, false).is_err());
    let o = mopeft(&["sweep", "--axis", "peft.bogus", "--values", "1", "--out", &dir.path().to_string_lossy()]);
    assert!(!o.status.success());
}

#[test]
fn report_needs_gate_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = mopeft(&["report", "--out", &dir.path().to_string_lossy()]);
    assert!(!o.status.success());
    let e = stderr(&o);
    assert!(e.contains("gates.csv") && e.contains("not found"), "{e}");
}

#[test]
fn open_gates_are_selected_at_every_event() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(&["peft.mode=mopeft", "train.steps=1", "train.eval_every=1"], dir.path());
    let mut model = SegModel::from_config(&cfg).unwrap();
    for nets in model.gates.clone() {
        for net in nets {
            let w = net.fc2.weight;
            let b = net.fc2.bias;
            model.store.get_mut(w).tensor.data_mut().fill(0.0);
            model.store.get_mut(b).tensor.data_mut().fill(30.0);
        }
    }
    mopeft_cli::train_model(&cfg, model, false).unwrap();
    let r = mopeft_cli::report(dir.path()).unwrap();
    let events = cfg.data.val_n * cfg.model.layers;
    assert_eq!(r.total_samples, cfg.data.val_n);
    assert_eq!(r.overall, [events; 3]);
    assert!(r.per_layer.values().all(|c| *c == [cfg.data.val_n; 3]));
    let text = r.to_string();
    assert!(text.contains("100.0%"), "{text}");
}

#[test]
fn report_matches_the_raw_gate_events() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(&["peft.mode=mopeft", "train.steps=30", "gate.threshold=0.5"], dir.path());
    let mut model = SegModel::from_config(&cfg).unwrap();
    model.perturb_trainable(0.1, 4);
    mopeft_cli::train_model(&cfg, model, false).unwrap();
    let r = mopeft_cli::report(dir.path()).unwrap();

    let events = std::fs::read_to_string(dir.path().join(mopeft_cli::GATE_EVENTS)).unwrap();
    let mut per_layer = std::collections::BTreeMap::<usize, [usize; 3]>::new();
    let mut records = 0;
    for line in events.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let layer: usize = f[1].parse().unwrap();
        let m = GateMethod::ALL.iter().find(|m| m.name() == f[2]).unwrap();
        let value: f64 = f[3].parse().unwrap();
        let slot = per_layer.entry(layer).or_default();
        slot[m.index()] += usize::from(value > 0.5);
        records += 1;
    }
    assert_eq!(records, 3 * cfg.data.val_n * cfg.model.layers);
    assert_eq!(per_layer, r.per_layer);
    let overall: Vec<usize> = (0..3).map(|i| per_layer.values().map(|c| c[i]).sum()).collect();
    assert_eq!(overall, r.overall.to_vec());
    assert_eq!(r.threshold, Some(0.5));
}

#[test]
fn empty_config_file_means_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.cfg");
    std::fs::write(&path, "").unwrap();
    let cfg = mopeft_cli::load_config(Some(&path), &[], None).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    assert_eq!(cfg.peft.rank, 8);
    assert_eq!(cfg.data.domain, Domain::Blobs);
}

#[test]
fn overrides_beat_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r4.cfg");
    std::fs::write(&path, "[peft]\nrank = 4\n").unwrap();
    let cfg = mopeft_cli::load_config(Some(&path), &["peft.rank=2".into()], None).unwrap();
    assert_eq!(cfg.peft.rank, 2);
    let file_only = mopeft_cli::load_config(Some(&path), &[], None).unwrap();
    assert_eq!(file_only.peft.rank, 4);
    let back = ExperimentConfig::parse(&cfg.canonical(), &[]).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn out_of_range_values_are_rejected_by_the_binary() {
    let o = mopeft(&["train", "--set", "peft.rank=0"]);
    assert!(!o.status.success());
    let e = stderr(&o);
    assert!(e.contains("peft.rank"), "{e}");
}
