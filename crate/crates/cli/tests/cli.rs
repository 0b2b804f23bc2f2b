use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::Command;

use xclass_cli::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use xclass_cli::config::{ExperimentConfig, ScheduleKind, SoftmaxMode};
use xclass_cli::dataset::{generate_synthetic, read_dataset, SyntheticSpec};
use xclass_cli::deploy::{classify_retrieval, evaluate};
use xclass_cli::train::{load_data, train, write_outputs};
use xclass_core::math::{Activation, DenseMatrix};
use xclass_core::sim::Model;

fn xclass() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_xclass"));
    c.env_remove("XCLASS_OUT_DIR");
    c
}

fn small() -> ExperimentConfig {
    ExperimentConfig {
        classes: 20,
        train_per_class: 16,
        test_per_class: 4,
        dim: 8,
        hidden: vec![16],
        embed_dim: 8,
        epochs: 2,
        batch: 16,
        lr: 0.1,
        ..ExperimentConfig::default()
    }
}

#[test]
fn gen_is_byte_identical_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        let out = xclass()
            .args(["gen", "--classes", "30", "--dim", "6", "--train_per_class", "5", "--out-dir"])
            .arg(dir.path().join(run))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["train.xds", "test.xds", "train.xds.meta"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn zero_spread_is_solved_by_nearest_neighbor() {
    let spec = SyntheticSpec {
        classes: 50,
        train_per_class: 3,
        test_per_class: 2,
        dim: 16,
        spread: 0.0,
    };
    let (train, test) = generate_synthetic(&spec, 5).unwrap();
    for (q, &y) in test.features.row_iter().zip(&test.labels) {
        let nn = (0..train.len())
            .map(|i| {
                let d: f64 = q.iter().zip(train.features.row(i)).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
                (d, i)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap()
            .1;
        assert_eq!(train.labels[nn], y);
    }
}

#[test]
fn knn_mode_with_every_class_active_matches_full_softmax() {
    let cfg = small();
    let (tr, te) = load_data(&cfg).unwrap();
    let full = train(&cfg, &tr, &te).unwrap();
    let knn_cfg = ExperimentConfig {
        mode: SoftmaxMode::Knn,
        knn_k: 5,
        knn_kprime: 10,
        active_fraction: 1.0,
        ..cfg
    };
    let knn = train(&knn_cfg, &tr, &te).unwrap();
    let a: Vec<f32> = full.metrics.steps.iter().map(|s| s.loss).collect();
    let b: Vec<f32> = knn.metrics.steps.iter().map(|s| s.loss).collect();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip_reproduces_accuracy() {
    let cfg = small();
    let (tr, te) = load_data(&cfg).unwrap();
    let out = train(&cfg, &tr, &te).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = write_outputs(dir.path(), &cfg, &out).unwrap();
    let ck = load_checkpoint(&files.checkpoint).unwrap();
    assert_eq!(ck.config_hash, cfg.model_hash(tr.dim()));
    let (acc, _) = evaluate(&ck.model, &te).unwrap();
    assert_eq!(Some(acc), out.metrics.final_accuracy());
    let (direct, _) = evaluate(&out.model, &te).unwrap();
    assert_eq!(acc, direct);
}

#[test]
fn random_model_is_near_chance() {
    let spec = SyntheticSpec {
        classes: 100,
        train_per_class: 1,
        test_per_class: 40,
        dim: 16,
        spread: 0.3,
    };
    let (_, test) = generate_synthetic(&spec, 1).unwrap();
    let model = Model::new(&[16, 32, 16], Activation::Tanh, 100, 9).unwrap();
    let (acc, _) = evaluate(&model, &test).unwrap();
    assert!(acc < 0.05, "accuracy {acc}");
}

#[test]
fn retrieval_matches_a_brute_force_nearest_neighbor() {
    let model = Model::new(&[10, 12, 6], Activation::Tanh, 40, 4).unwrap();
    let spec = SyntheticSpec {
        classes: 10,
        train_per_class: 30,
        test_per_class: 0,
        dim: 10,
        spread: 2.0,
    };
    let (q, _) = generate_synthetic(&spec, 8).unwrap();
    let preds = classify_retrieval(&model, &q.features).unwrap();
    let emb = model.embed(&q.features).unwrap();
    let w = xclass_oracles::normalize_rows(&xclass_oracles::Mat::from_f32(40, 6, model.classifier.as_slice()));
    let mut checked = 0;
    for (i, e) in emb.row_iter().enumerate() {
        let mut scores: Vec<(f64, usize)> = (0..40)
            .map(|j| (e.iter().zip(w.row(j)).map(|(a, b)| *a as f64 * b).sum(), j))
            .collect();
        scores.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        // classes closer than single-precision round-off may legitimately swap
        if scores[0].0 - scores[1].0 > 1e-5 {
            assert_eq!(preds[i], scores[0].1, "query {i}");
            checked += 1;
        }
    }
    assert!(checked > 250);
}

#[test]
fn retrieval_rejects_wrong_width() {
    let model = Model::new(&[4, 3], Activation::Tanh, 5, 1).unwrap();
    assert!(classify_retrieval(&model, &DenseMatrix::zeros(1, 7)).is_err());
}

fn closed_form(cfg: &ExperimentConfig, t: f64, epoch: usize) -> (f64, usize) {
    let lr = if t < cfg.warmup_epochs { cfg.lr * t / cfg.warmup_epochs } else { cfg.lr };
    let b = if (epoch as f64) < cfg.fccs_t_ini {
        cfg.batch
    } else {
        let frac = ((epoch as f64).min(cfg.fccs_t_final) - cfg.fccs_t_ini) / (cfg.fccs_t_final - cfg.fccs_t_ini);
        let (lo, hi) = (cfg.fccs_b_min as f64, cfg.fccs_b_max as f64);
        (lo + 0.5 * (hi - lo) * (1.0 - (PI * frac).cos()) + 1e-9).floor() as usize
    };
    (lr, b)
}

#[test]
fn training_metrics_follow_the_schedule() {
    let cfg = ExperimentConfig {
        schedule: ScheduleKind::Fccs,
        epochs: 4,
        warmup_epochs: 1.0,
        fccs_t_ini: 1.0,
        fccs_t_final: 4.0,
        fccs_b_min: 16,
        fccs_b_max: 64,
        ..small()
    };
    let (tr, te) = load_data(&cfg).unwrap();
    let out = train(&cfg, &tr, &te).unwrap();
    let mut step_in_epoch = 0;
    for (i, s) in out.metrics.steps.iter().enumerate() {
        assert_eq!(s.step, i);
        if i > 0 && s.epoch != out.metrics.steps[i - 1].epoch {
            step_in_epoch = 0;
        }
        let (_, b) = closed_form(&cfg, s.epoch as f64, s.epoch);
        let n = (tr.len() / b).max(1);
        let t = s.epoch as f64 + step_in_epoch as f64 / n as f64;
        assert_eq!((s.lr, s.batch_size), closed_form(&cfg, t, s.epoch), "step {i}");
        step_in_epoch += 1;
    }
    assert!(out.metrics.steps.windows(2).all(|w| w[0].batch_size <= w[1].batch_size));
    assert!(out.metrics.steps.last().unwrap().batch_size > 16);
}

#[test]
fn train_writes_every_output_and_honours_the_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.txt");
    fs::write(&cfg_path, small().to_text()).unwrap();
    let out_dir = dir.path().join("from_env");
    let out = xclass()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .args(["--epochs", "1", "--workers=2", "--micro_batches", "2"])
        .env("XCLASS_OUT_DIR", &out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.ck", "metrics.csv", "epochs.csv", "comm_stats.csv", "events.csv", "config.txt"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,epoch,loss,lr,batch_size,achieved_sparsity,sync_rounds\n"));
    let events = fs::read_to_string(out_dir.join("events.csv")).unwrap();
    assert!(events.starts_with("worker,stage,micro_batch,start_tick,end_tick\n"));
    assert!(events.lines().count() > 2 * 2 * 7);
}

fn write_data(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let out = xclass()
        .args(["gen", "--classes", "20", "--dim", "8", "--train_per_class", "16", "--test_per_class", "4"])
        .arg("--out_dir")
        .arg(dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    (dir.join("train.xds"), dir.join("test.xds"))
}

#[test]
fn eval_classify_and_build_graph_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let (train_path, test_path) = write_data(dir.path());
    let run = dir.path().join("run");
    let out = xclass()
        .args(["train", "--hidden", "16", "--embed_dim", "8", "--classes", "20", "--epochs", "2", "--batch", "16"])
        .arg("--train_data")
        .arg(&train_path)
        .arg("--test_data")
        .arg(&test_path)
        .arg("--out_dir")
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ck = run.join("model.ck");

    let preds_eval = dir.path().join("eval.txt");
    let out = xclass()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&ck)
        .arg("--data")
        .arg(&test_path)
        .arg("--predictions")
        .arg(&preds_eval)
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let last_epoch = fs::read_to_string(run.join("epochs.csv")).unwrap();
    let logged: f64 = last_epoch.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!(stdout.contains(&format!("accuracy={logged:.6}")), "{stdout}");

    let out = xclass()
        .arg("classify")
        .arg("--checkpoint")
        .arg(&ck)
        .arg("--queries")
        .arg(&test_path)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), fs::read_to_string(&preds_eval).unwrap());

    let g1 = dir.path().join("g1.xknn");
    let g4 = dir.path().join("g4.xknn");
    for (w, path) in [("1", &g1), ("4", &g4)] {
        let out = xclass()
            .arg("build-graph")
            .arg("--checkpoint")
            .arg(&ck)
            .args(["--k", "5", "--workers", w, "--output"])
            .arg(path)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(fs::read(&g1).unwrap(), fs::read(&g4).unwrap());
    assert_eq!(&fs::read(&g1).unwrap()[..4], b"XKNN");
}

#[test]
fn failures_exit_nonzero_with_one_error_line() {
    let cases: [&[&str]; 4] = [
        &["train", "--epochs", "zero"],
        &["train", "--no_such_key", "1"],
        &["train", "--active_fraction", "1.5"],
        &["eval", "--checkpoint", "/nonexistent/model.ck", "--data", "/nonexistent/d.xds"],
    ];
    for args in cases {
        let out = xclass().args(args).output().unwrap();
        assert!(!out.status.success(), "{args:?}");
        let stderr = String::from_utf8(out.stderr).unwrap();
        assert_eq!(stderr.lines().count(), 1, "{stderr}");
        assert!(stderr.starts_with("error: "), "{stderr}");
    }
}

#[test]
fn mismatched_checkpoint_and_data_is_a_shape_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ck");
    let ck = Checkpoint {
        config_hash: 0,
        model: Model::new(&[5, 4], Activation::Tanh, 20, 0).unwrap(),
    };
    save_checkpoint(&p, &ck).unwrap();
    let (_, data) = write_data(dir.path());
    let out = xclass().arg("eval").arg("--checkpoint").arg(&p).arg("--data").arg(&data).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("shape mismatch"));
    assert_eq!(read_dataset(&data).unwrap().dim(), 8);
}
