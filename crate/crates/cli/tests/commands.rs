use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use segnas::search::{ArchLogits, SearchHistory};
use segnas::search_space::{AlphaParams, BetaParams, Genotype, SearchConfig};

fn segnas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segnas"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(root: &Path, train: usize, val: usize, size: usize) {
    let o = segnas(&[
        "synth-data",
        "--out",
        p(root),
        "--train",
        &train.to_string(),
        "--val",
        &val.to_string(),
        "--size",
        &size.to_string(),
        "--classes",
        "3",
        "--seed",
        "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn write_config(dir: &Path, root: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        "[dataset]\nroot = \"{}\"\nnum_classes = 3\ncrop = 16\n\n[space]\nL = 3\nB = 1\nF = 2\n\n\
         [search]\nepochs = 3\narch_start_epoch = 1\nbatch_size = 2\ncrop = 16\nseed = 2\n\n{extra}",
        root.display()
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn help_exits_zero_and_bad_flags_exit_one() {
    let o = segnas(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for cmd in ["search", "decode", "train", "eval", "cost", "synth-data", "gradcheck"] {
        assert!(stdout(&o).contains(cmd), "{cmd} missing from help");
        assert_eq!(segnas(&[cmd, "--help"]).status.code(), Some(0));
    }
    assert_eq!(segnas(&["search", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(segnas(&[]).status.code(), Some(1));
}

#[test]
fn missing_dataset_directory_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let cfg = write_config(tmp.path(), &missing, "");
    let o = segnas(&["search", "--config", p(&cfg), "--out", p(&tmp.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(p(&missing)), "{}", stderr(&o));
}

#[test]
fn malformed_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[search]\nepocs = 3\n").unwrap();
    let o = segnas(&["search", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epocs"), "{}", stderr(&o));
}

#[test]
fn search_resume_decode_cost_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 8, 2, 16);
    let cfg = write_config(tmp.path(), &data, "");

    let full = tmp.path().join("full");
    let o = segnas(&["search", "--config", p(&cfg), "--out", p(&full)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for e in 0..3 {
        assert!(full.join(format!("epoch_{e}/arch_logits.json")).is_file());
    }
    let logits = ArchLogits::read(&full.join("arch_logits.json")).unwrap();
    assert_eq!(logits.config, SearchConfig::new(3, 1, 2, 3));

    // drop the last two epochs of a second run, then resume it
    let part = tmp.path().join("part");
    let o = segnas(&["search", "--config", p(&cfg), "--out", p(&part)]);
    assert!(o.status.success());
    fs::remove_dir_all(part.join("epoch_2")).unwrap();
    fs::remove_dir_all(part.join("epoch_1")).unwrap();
    let o = segnas(&["search", "--config", p(&cfg), "--out", p(&part), "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = SearchHistory::read_csv(&full.join("history.csv")).unwrap();
    let b = SearchHistory::read_csv(&part.join("history.csv")).unwrap();
    assert_eq!(a.len(), b.len());
    assert_eq!(a.max_metric_diff(&b), Some(0.0));
    let resumed = ArchLogits::read(&part.join("arch_logits.json")).unwrap();
    assert_eq!(resumed, logits);

    let geno_dir = tmp.path().join("geno");
    let o = segnas(&["decode", "--logits", p(&full.join("arch_logits.json")), "--out", p(&geno_dir), "--verify"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("exhaustive search agrees"));
    let g = Genotype::from_json(&fs::read_to_string(geno_dir.join("genotype.json")).unwrap()).unwrap();
    g.validate().unwrap();
    assert!(fs::read_to_string(geno_dir.join("cell.dot")).unwrap().starts_with("digraph"));

    let json = tmp.path().join("cost.json");
    let o = segnas(&[
        "cost",
        "--genotype",
        p(&geno_dir.join("genotype.json")),
        "--dim",
        "8",
        "--input",
        "32",
        "--json",
        p(&json),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("Params (M)"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    for key in ["params", "flops", "madd", "memory_bytes", "mem_rw_bytes"] {
        let total = report[key].as_u64().unwrap();
        let sum: u64 = report["per_layer"]
            .as_array()
            .unwrap()
            .iter()
            .map(|l| l[key].as_u64().unwrap())
            .sum();
        assert_eq!(total, sum, "{key}");
    }
}

#[test]
fn decode_recovers_planted_logits() {
    let tmp = tempfile::tempdir().unwrap();
    let config = SearchConfig::new(3, 2, 2, 3);
    let edges = config.num_edges();
    // block 0 takes slots 0 and 1, block 1 takes slots 1 and 2
    let mut alpha = vec![0.0; edges * 8];
    let strong = [(0, 0, 3), (0, 1, 5), (1, 1, 4), (1, 2, 6)];
    for &(block, slot, op) in &strong {
        alpha[config.edge_index(block, slot) * 8 + op] = 20.0;
    }
    let mut beta = vec![0.0; config.layers * config.levels() * 3];
    // path 4 -> 8 -> 8; the strictly downsampling diagonal also has
    // probability 1, so the planted path only wins the terminal tie when
    // its own probability rounds to exactly 1
    for (layer, level, src) in [(1, 0, 1), (2, 1, 0), (3, 1, 1)] {
        beta[config.beta_index(layer, level, src)] = 1000.0;
    }
    let logits = ArchLogits {
        config: config.clone(),
        epoch: 0,
        alpha: AlphaParams { blocks: 2, logits: alpha },
        beta: BetaParams {
            layers: 3,
            levels: config.levels(),
            logits: beta,
        },
    };
    let path = tmp.path().join("arch_logits.json");
    logits.write(&path).unwrap();
    let o = segnas(&["decode", "--logits", p(&path), "--out", p(tmp.path()), "--verify"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let g = Genotype::from_json(&fs::read_to_string(tmp.path().join("genotype.json")).unwrap()).unwrap();
    assert_eq!(g.path.path, vec![4, 8, 8]);
    let got: Vec<_> = g.cell.blocks.iter().map(|b| (b.input1, b.input2, b.op1.index(), b.op2.index())).collect();
    assert_eq!(got, vec![(0, 1, 3, 5), (1, 2, 4, 6)]);
}

#[test]
fn malformed_logits_file_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("arch_logits.json");
    fs::write(&path, "{\"config\": 3}").unwrap();
    let o = segnas(&["decode", "--logits", p(&path), "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("arch_logits.json"));
}

#[test]
fn eval_of_ground_truth_predictions_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 2, 4, 16);
    let cfg = write_config(tmp.path(), &data, "");
    let masks = data.join("val/masks_png");
    let json = tmp.path().join("miou.json");
    let o = segnas(&["eval", "--config", p(&cfg), "--predictions", p(&masks), "--json", p(&json)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mIoU 1.0000"), "{}", stdout(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(r["miou"].as_f64(), Some(1.0));
}

#[test]
fn train_then_eval_checkpoint_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 4, 2, 16);
    let cfg = write_config(
        tmp.path(),
        &data,
        "[train]\niters = 3\nwarmup_iters = 1\nbatch_size = 2\ncrop = 16\neval_interval = 3\n\n[network]\ndim = 4\n",
    );
    let geno = tmp.path().join("genotype.json");
    fs::write(
        &geno,
        r#"{"cell": [[0, 1, "sep_conv_3x3", "skip_connect"]], "path": [4, 8, 8], "config": {"L": 3, "B": 1, "F": 2, "num_classes": 3}}"#,
    )
    .unwrap();
    let mut printed = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let o = segnas(&["train", "--config", p(&cfg), "--genotype", p(&geno), "--out", p(&out), "--seed", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
        for f in ["weights", "metrics.csv", "network.json"] {
            assert!(out.join(f).is_file(), "{f}");
        }
        let e = segnas(&["eval", "--config", p(&cfg), "--checkpoint", p(&out)]);
        assert!(e.status.success(), "{}", stderr(&e));
        assert!(stdout(&e).contains("mIoU"));
        printed.push((fs::read(out.join("metrics.csv")).unwrap(), stdout(&e)));
    }
    assert_eq!(printed[0], printed[1]);
}

#[test]
fn gradcheck_passes() {
    let o = segnas(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("pass")).count(), 16);
    assert!(!out.contains("FAIL"));
}
