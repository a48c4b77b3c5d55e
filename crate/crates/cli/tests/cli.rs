use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use endosr_core::data::synthetic_image;
use endosr_core::imagecore::{load_png, save_png};
use sha2::{Digest, Sha256};

fn endosr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_endosr"))
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = endosr(args);
    assert!(
        out.status.success(),
        "endosr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    endosr(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `classes` × `per_class` synthetic images of `size`², plus `loose` images at the root.
fn make_tree(root: &Path, classes: &[&str], per_class: usize, size: usize, loose: usize) {
    let mut seed = 1;
    for c in classes {
        for i in 0..per_class {
            save_png(&synthetic_image(size, size, seed), &root.join(c).join(format!("img{i}.png"))).unwrap();
            seed += 1;
        }
    }
    for i in 0..loose {
        save_png(&synthetic_image(size, size, seed), &root.join(format!("loose{i}.png"))).unwrap();
        seed += 1;
    }
}

fn tree_hashes(root: &Path) -> BTreeMap<PathBuf, String> {
    let mut map = BTreeMap::new();
    for e in walk(root) {
        if e.file_name().unwrap() == "run_config.toml" {
            continue;
        }
        let digest = Sha256::digest(fs::read(&e).unwrap());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        map.insert(e.strip_prefix(root).unwrap().to_path_buf(), hex);
    }
    map
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            v.extend(walk(&p));
        } else {
            v.push(p);
        }
    }
    v
}

fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect()
        })
        .collect()
}

fn log_lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn degrade_mirrors_tree_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("hr");
    make_tree(&data, &["a", "b"], 2, 96, 1);
    let (o1, o2) = (dir.path().join("lr1"), dir.path().join("lr2"));
    for o in [&o1, &o2] {
        ok(&["degrade", "--in", s(&data), "--scale", "8", "--seed", "5", "--out", s(o)]);
    }
    let h1 = tree_hashes(&o1);
    assert_eq!(h1, tree_hashes(&o2));
    let pngs: Vec<&PathBuf> = h1.keys().filter(|p| p.extension().unwrap() == "png").collect();
    assert_eq!(pngs.len(), 5);
    let lr = load_png(&o1.join("a/img0.png")).unwrap();
    assert_eq!((lr.width(), lr.height()), (12, 12));
    assert!(o1.join("loose0.png").exists());
    assert_eq!(fs::read_to_string(o1.join("manifest.jsonl")).unwrap().lines().count(), 5);
    assert!(fs::read_to_string(o1.join("run_config.toml")).unwrap().contains("degradation.seed = 5"));

    let o3 = dir.path().join("lr3");
    ok(&["degrade", "--in", s(&data), "--scale", "8", "--seed", "6", "--out", s(&o3)]);
    assert_ne!(h1, tree_hashes(&o3));
}

#[test]
fn degrade_12x_gives_85_pixel_images() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("hr");
    save_png(&synthetic_image(1020, 1020, 3), &data.join("x/big.png")).unwrap();
    let out = dir.path().join("lr");
    ok(&["degrade", "--in", s(&data), "--scale", "12", "--out", s(&out)]);
    let lr = load_png(&out.join("x/big.png")).unwrap();
    assert_eq!((lr.width(), lr.height()), (85, 85));
}

#[test]
fn train_writes_checkpoints_and_resume_matches_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("hr");
    make_tree(&data, &["a", "b"], 2, 256, 0);
    let common = |out: &Path, iters: &str| -> Vec<String> {
        [
            "train", "--preset", "desk-8x", "--data", s(&data), "--iters", iters, "--set",
            "train.checkpoint_every=2", "--out", s(out),
        ]
        .iter()
        .map(|x| x.to_string())
        .collect()
    };
    let straight = dir.path().join("straight");
    let args = common(&straight, "4");
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(straight.join("checkpoints/step_00000002.ckpt").exists());
    assert!(straight.join("checkpoints/step_00000004.ckpt").exists());
    for f in ["generator.ckpt", "state.ckpt", "run_config.toml", "summary.json", "timing.json"] {
        assert!(straight.join(f).exists(), "{f}");
    }
    assert_eq!(log_lines(&straight.join("train_log.jsonl")).len(), 4);

    let part = dir.path().join("part");
    let args = common(&part, "2");
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let resumed = dir.path().join("resumed");
    let mut args = common(&resumed, "2");
    args.extend(["--resume".to_string(), s(&part.join("state.ckpt")).to_string()]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(
        fs::read(straight.join("generator.ckpt")).unwrap(),
        fs::read(resumed.join("generator.ckpt")).unwrap()
    );
    let last = log_lines(&resumed.join("train_log.jsonl")).pop().unwrap();
    assert_eq!(last["iter"], 3);

    let out = ok(&["inspect-checkpoint", "--json", s(&straight.join("state.ckpt"))]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["meta"]["meta/kind"], "train_state");
    assert!(v["records"].as_array().unwrap().iter().any(|r| r["name"].as_str().unwrap().contains("sab")));
}

#[test]
fn ablation_and_attention_flags_reach_the_trainer() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("hr");
    make_tree(&data, &["a"], 2, 256, 0);
    let out = dir.path().join("nc");
    ok(&[
        "train", "--preset", "desk-8x", "--data", s(&data), "--iters", "2", "--ablation", "no-content",
        "--no-attention", "--out", s(&out),
    ]);
    let log = log_lines(&out.join("train_log.jsonl"));
    assert_eq!(log.len(), 2);
    for l in &log {
        assert_eq!(l["g_content"], 0.0);
        assert!(l["g_texture"].as_f64().unwrap() > 0.0);
    }
    let listing = ok(&["inspect-checkpoint", s(&out.join("state.ckpt"))]);
    let text = String::from_utf8(listing.stdout).unwrap();
    assert!(!text.contains("sab"));
    let json = ok(&["inspect-checkpoint", "--json", s(&out.join("state.ckpt"))]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v["meta"]["meta/config"]["loss"]["ablation"], "without_content");
}

#[test]
fn eval_identity_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("hr");
    make_tree(&data, &["a", "b"], 2, 64, 0);
    let out = dir.path().join("eval");
    ok(&[
        "eval", "--data", s(&data), "--scale", "8", "--sr-dir", s(&data), "--method", "identity", "--maps", "--out",
        s(&out),
    ]);
    let rows = read_csv(&out.join("per_image.csv"));
    assert_eq!(rows.len(), 4 * 2 * 4);
    for r in rows.iter().filter(|r| r["method"] == "identity") {
        let v: f64 = r["value"].parse().unwrap();
        match r["metric"].as_str() {
            "psnr" => assert_eq!(r["value"], "inf"),
            "ssim" => assert!((v - 1.0).abs() < 1e-12),
            _ => assert!(v.abs() < 1e-12, "{r:?}"),
        }
    }
    let agg = read_csv(&out.join("aggregate.csv"));
    for a in agg.iter().filter(|a| a["method"] == "bicubic") {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r["method"] == "bicubic" && r["metric"] == a["metric"])
            .map(|r| r["value"].parse().unwrap())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let got: f64 = a["mean"].parse().unwrap();
        assert!((got - mean).abs() <= 1e-12 * mean.abs().max(1.0), "{a:?}");
        assert_eq!(a["scale"], "8");
    }
    assert!(out.join("maps/identity/a__img0_ssim.png").exists());
    assert!(out.join("maps/bicubic/b__img1_gms.png").exists());

    let again = dir.path().join("eval2");
    ok(&["eval", "--data", s(&data), "--scale", "8", "--out", s(&again)]);
    let a = fs::read_to_string(out.join("per_image.csv")).unwrap();
    let b = fs::read_to_string(again.join("per_image.csv")).unwrap();
    let bicubic = |t: &str| t.lines().filter(|l| l.contains(",bicubic,")).map(String::from).collect::<Vec<_>>();
    assert_eq!(bicubic(&a), bicubic(&b));
}

fn write_scores(path: &Path, rows: &[(&str, &str, &str, f64)]) {
    let mut text = String::from("image_id,method,metric,value\n");
    for (id, m, metric, v) in rows {
        text += &format!("{id},{m},{metric},{v}\n");
    }
    fs::write(path, text).unwrap();
}

#[test]
fn stats_signed_rank_and_alignment() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("scores.csv");
    let mut rows = Vec::new();
    let ids = ["i1", "i2", "i3", "i4", "i5"];
    for (k, id) in ids.iter().enumerate() {
        rows.push((*id, "ours", "psnr", 30.0 + k as f64 * 1.5));
        rows.push((*id, "base", "psnr", 29.0 + k as f64));
    }
    write_scores(&csv, &rows);
    let out = dir.path().join("stats");
    ok(&["stats", "--input", s(&csv), "--pair", "ours,base", "--out", s(&out)]);
    let sig: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("significance.json")).unwrap()).unwrap();
    let r = &sig[0];
    assert_eq!(r["metric"], "psnr");
    assert_eq!(r["pair"], "ours vs base");
    assert_eq!(r["n"], 5);
    assert_eq!(r["W"], 15.0);
    assert!((r["p_exact_greater"].as_f64().unwrap() - 1.0 / 32.0).abs() < 1e-15);
    assert!(out.join("zscores.json").exists());

    assert_eq!(code(&["stats", "--input", s(&csv), "--pair", "ours,ours", "--out", s(&out)]), 1);

    let bad = dir.path().join("bad.csv");
    let mut rows2 = rows.clone();
    rows2.retain(|r| !(r.0 == "i3" && r.1 == "base"));
    write_scores(&bad, &rows2);
    let o = endosr(&["stats", "--input", s(&bad), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("i3"));
}

#[test]
fn stats_mos_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mos = dir.path().join("mos.csv");
    fs::write(&mos, "method,question,score\nours,q1,4\nours,q1,5\nours,q1,3\nbase,q1,2\nbase,q1,2\n").unwrap();
    let out = dir.path().join("o");
    ok(&["stats", "--mos", s(&mos), "--out", s(&out)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("mos.json")).unwrap()).unwrap();
    let ours = v.as_array().unwrap().iter().find(|r| r["method"] == "ours").unwrap();
    assert_eq!(ours["mean"], 4.0);
    assert_eq!(ours["std"], 1.0);
    assert_eq!(ours["max"], 5.0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&["train", "--bogus"]), 1);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["degrade", "--out", s(&out)]), 1);
    assert_eq!(code(&["degrade", "--in", s(dir.path()), "--set", "nope.key=1", "--out", s(&out)]), 1);
    assert_eq!(code(&["train", "--preset", "desk-3x", "--out", s(&out)]), 1);
    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&["inspect-checkpoint", s(&junk)]), 3);

    let data = dir.path().join("hr");
    make_tree(&data, &["a"], 1, 64, 0);
    let gen_dir = dir.path().join("g");
    let g = synthetic_generator(&gen_dir);
    assert_eq!(
        code(&["eval", "--data", s(&data), "--scale", "8", "--checkpoint", s(&g), "--out", s(&out)]),
        1
    );
    ok(&["eval", "--data", s(&data), "--scale", "4", "--checkpoint", s(&g), "--out", s(&out)]);
    assert!(out.join("sr/model/a/img0.png").exists());
}

/// An untrained 4x generator checkpoint.
fn synthetic_generator(dir: &Path) -> PathBuf {
    use endosr_core::networks::{Generator, GeneratorConfig};
    let cfg = GeneratorConfig {
        scale: 4,
        base_filters: 4,
        depth: 3,
        dropout_layers: 2,
        ..GeneratorConfig::default()
    };
    let g = Generator::new(cfg, 1).unwrap();
    let path = dir.join("g.ckpt");
    endosr_core::trainer::export_generator(&g, &path).unwrap();
    path
}
