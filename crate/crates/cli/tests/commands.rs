mod common;

use std::fs;

use common::*;
use lfmark_core::corpus;
use serde_json::Value;

#[test]
fn embed_then_detect_and_decode() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_textures(&root.join("in"), 2, 11);
    let cfg = write_config(&root.join("cfg.toml"), QUICK_CONFIG);
    let key = root.join("key.json");
    gen_key(&key, 16, &["--scheme", "canonical-basis"]);

    let wm = root.join("wm");
    let out = lfmark(&["embed", "--config", p(&cfg), "--images", p(&root.join("in")), "--key", p(&key), "--out", p(&wm)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(wm.join("manifest.json")).unwrap()).unwrap();
    let entries = manifest["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    for e in entries {
        assert_eq!(e["bit_accuracy"], 1.0);
        assert!(wm.join(e["image"].as_str().unwrap()).is_file());
    }
    assert_eq!(fs::read_to_string(wm.join("embed.jsonl")).unwrap().lines().count(), 2);
    assert_eq!(fs::read_to_string(wm.join("runs.jsonl")).unwrap().lines().count(), 1);

    // same seed, same bytes
    let wm2 = root.join("wm2");
    let again = lfmark(&["embed", "--config", p(&cfg), "--images", p(&root.join("in")), "--key", p(&key), "--out", p(&wm2)]);
    assert_eq!(code(&again), 0);
    for name in ["tex00.png", "tex01.png", "manifest.json"] {
        assert_eq!(fs::read(wm.join(name)).unwrap(), fs::read(wm2.join(name)).unwrap(), "{name}");
    }

    let manifest_path = wm.join("manifest.json");
    let det = lfmark(&["detect", p(&wm.join("tex00.png")), "--key", p(&key), "--manifest", p(&manifest_path)]);
    assert_eq!(code(&det), 0);
    let rows = stdout_lines(&det);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["decision"], "watermarked");
    assert_eq!(rows[0]["matched_bits"], 16);

    let dec = lfmark(&["decode", p(&wm), "--key", p(&key)]);
    assert_eq!(code(&dec), 0);
    let decoded = stdout_lines(&dec);
    let listed: Vec<&Value> = decoded.iter().map(|r| &r["message"]).collect();
    let expected: Vec<&Value> = entries.iter().map(|e| &e["message"]).collect();
    assert_eq!(listed, expected);

    // a clean image carries no watermark at 1e-3
    let clean = root.join("clean.png");
    corpus::noise_images(1, 64, 5).unwrap()[0].save(&clean).unwrap();
    let message = entries[0]["message"].as_str().unwrap();
    let neg = lfmark(&["detect", p(&clean), "--key", p(&key), "--message", message, "--target-fpr", "1e-3"]);
    assert_eq!(code(&neg), 1);
    assert_eq!(stdout_lines(&neg)[0]["decision"], "not-watermarked");
}

#[test]
fn missing_key_is_a_config_error_with_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_textures(&root.join("in"), 1, 2);
    let out_dir = root.join("out");
    let out = lfmark(&["embed", "--images", p(&root.join("in")), "--key", p(&root.join("absent.json")), "--out", p(&out_dir)]);
    assert_eq!(code(&out), 2);
    let rec = stderr_record(&out);
    assert_eq!(rec["error"]["kind"], "config");
    assert_eq!(rec["error"]["code"], 2);
    assert!(!out_dir.exists());
}

#[test]
fn detect_reports_unreadable_images_and_accepts_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let key = root.join("key.json");
    gen_key(&key, 16, &[]);
    let imgs = root.join("imgs");
    write_textures(&imgs, 2, 4);
    fs::write(imgs.join("broken.png"), b"not an image").unwrap();
    let msg = "0101010101010101";
    let out = lfmark(&["detect", p(&imgs), "--key", p(&key), "--message", msg]);
    assert_eq!(code(&out), 0);
    let rows = stdout_lines(&out);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["image"], "broken.png");
    assert!(rows[0].get("error").is_some());
    assert!(rows[1].get("decision").is_some() && rows[2].get("decision").is_some());

    let single = lfmark(&["detect", p(&imgs.join("broken.png")), "--key", p(&key), "--message", msg]);
    assert_eq!(code(&single), 4);

    let empty = root.join("empty");
    fs::create_dir(&empty).unwrap();
    let none = lfmark(&["detect", p(&empty), "--key", p(&key), "--message", msg]);
    assert_eq!(code(&none), 0);
    assert!(none.stdout.is_empty());
}

#[test]
fn exit_codes_distinguish_config_and_backend_errors() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_textures(&root.join("in"), 1, 3);
    let key = root.join("key.json");
    gen_key(&key, 8, &[]);
    let embed = |cfg: &std::path::Path| {
        lfmark(&["embed", "--config", p(cfg), "--images", p(&root.join("in")), "--key", p(&key), "--out", p(&root.join("o"))])
    };

    let bad_version = root.join("v.toml");
    fs::write(&bad_version, "version = 7\n").unwrap();
    assert_eq!(code(&embed(&bad_version)), 2);

    let unknown_field = write_config(&root.join("u.toml"), "[embed]\nstepz = 3\n");
    assert_eq!(code(&embed(&unknown_field)), 2);

    let backend = write_config(&root.join("b.toml"), "[backends]\ncodec = \"stable-diffusion-vae\"\n");
    let out = embed(&backend);
    assert_eq!(code(&out), 3);
    assert_eq!(stderr_record(&out)["error"]["kind"], "backend");

    let wide = root.join("wide.json");
    gen_key(&wide, 8, &["--feature-dim", "128"]);
    let mismatch = lfmark(&["decode", p(&root.join("in")), "--key", p(&wide)]);
    assert_eq!(code(&mismatch), 2);

    assert_eq!(code(&lfmark(&["no-such-command"])), 2);
    assert_eq!(code(&lfmark(&["gen-key", "--bits", "100", "--out", p(&root.join("k"))])), 2);
}

#[test]
fn evaluate_is_consistent_with_detect_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_textures(&root.join("in"), 3, 8);
    let cfg = write_config(&root.join("cfg.toml"), QUICK_CONFIG);
    let key = root.join("key.json");
    gen_key(&key, 16, &[]);
    let wm = root.join("wm");
    assert_eq!(
        code(&lfmark(&["embed", "--config", p(&cfg), "--images", p(&root.join("in")), "--key", p(&key), "--out", p(&wm)])),
        0
    );
    let none = root.join("none.json");
    fs::write(&none, r#"{"attacks": [{"name": "none"}]}"#).unwrap();
    let empty = root.join("empty.json");
    fs::write(&empty, r#"{"attacks": []}"#).unwrap();
    let evaluate = |battery: &std::path::Path, out: &str| {
        let o = lfmark(&[
            "evaluate", "--watermarked", p(&wm), "--battery", p(battery), "--key", p(&key), "--config", p(&cfg), "--out",
            p(&root.join(out)),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        root.join(out).join("table.csv")
    };
    let t1 = evaluate(&none, "e1");
    let t2 = evaluate(&none, "e2");
    let t3 = evaluate(&empty, "e3");
    assert_eq!(fs::read(&t1).unwrap(), fs::read(&t2).unwrap());
    assert_eq!(fs::read(&t1).unwrap(), fs::read(&t3).unwrap());
    assert_eq!(column(&t1, "attack"), ["none"]);
    assert_eq!(column(&t1, "schema_version"), ["1"]);

    let det = lfmark(&["detect", p(&wm), "--key", p(&key), "--manifest", p(&wm.join("manifest.json"))]);
    let accs: Vec<f64> = stdout_lines(&det).iter().map(|r| r["bit_accuracy"].as_f64().unwrap()).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let table_mean: f64 = column(&t1, "bit_accuracy_mean")[0].parse().unwrap();
    assert_eq!(table_mean, mean);

    let rows = fs::read_to_string(root.join("e1").join("rows.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 3);
    for f in ["roc.csv", "roc.svg", "roc_none.svg", "runs.jsonl"] {
        assert!(root.join("e1").join(f).is_file(), "{f}");
    }
    assert_eq!(column(&root.join("e1").join("roc.csv"), "attack").len(), 7);

    // a key that did not embed these images is rejected before any attack runs
    let other = root.join("other.json");
    gen_key(&other, 16, &["--seed", "9"]);
    let out_dir = root.join("bad");
    let bad = lfmark(&[
        "evaluate", "--watermarked", p(&wm), "--battery", p(&none), "--key", p(&other), "--config", p(&cfg), "--out",
        p(&out_dir),
    ]);
    assert_eq!(code(&bad), 2);
    assert!(!out_dir.join("table.csv").exists());
}

#[test]
fn desk_battery_keeps_bit_accuracy_on_identity_watermarks() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_textures(&root.join("in"), 4, 7);
    let cfg = write_config(&root.join("cfg.toml"), "[backends]\ncodec = \"identity\"\n");
    let key = root.join("key.json");
    gen_key(&key, 48, &["--margin", "50"]);
    let wm = root.join("wm");
    assert_eq!(
        code(&lfmark(&["embed", "--config", p(&cfg), "--images", p(&root.join("in")), "--key", p(&key), "--out", p(&wm)])),
        0
    );
    let battery = root.join("desk.json");
    fs::write(
        &battery,
        r#"{"attacks": [{"name": "brightness"}, {"name": "contrast"}, {"name": "gaussian_noise", "seed": 1},
            {"name": "gaussian_blur"}, {"name": "jpeg"}]}"#,
    )
    .unwrap();
    let ev = root.join("ev");
    let out = lfmark(&[
        "evaluate", "--watermarked", p(&wm), "--battery", p(&battery), "--key", p(&key), "--config", p(&cfg), "--out", p(&ev),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = ev.join("table.csv");
    for (attack, acc) in column(&table, "attack").iter().zip(column(&table, "bit_accuracy_mean")) {
        let acc: f64 = acc.parse().unwrap();
        eprintln!("{attack}: {acc}");
        assert!(acc >= 0.8, "{attack}: {acc}");
    }
}

#[test]
fn attack_writes_one_image_per_label() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_textures(&root.join("in"), 2, 6);
    let battery = root.join("b.json");
    fs::write(&battery, r#"{"attacks": [{"name": "jpeg", "params": {"quality": 30}}, {"name": "rotate", "label": "rot180", "params": {"degrees": 180}}]}"#).unwrap();
    let out = lfmark(&["attack", p(&root.join("in")), "--battery", p(&battery), "--out", p(&root.join("att"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_lines(&out).len(), 4);
    for label in ["jpeg", "rot180"] {
        for img in ["tex00.png", "tex01.png"] {
            assert!(root.join("att").join(label).join(img).is_file());
        }
    }
    let dup = root.join("dup.json");
    fs::write(&dup, r#"{"attacks": [{"name": "jpeg"}, {"name": "jpeg"}]}"#).unwrap();
    assert_eq!(code(&lfmark(&["attack", p(&root.join("in")), "--battery", p(&dup), "--out", p(&root.join("x"))])), 2);
}

#[test]
fn sweeps_emit_long_format_rows() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_textures(&root.join("in"), 2, 12);
    let cfg = write_config(&root.join("cfg.toml"), QUICK_CONFIG);
    let battery = root.join("b.json");
    fs::write(&battery, r#"{"attacks": [{"name": "none"}, {"name": "gaussian_noise", "params": {"sigma": 0.02}}]}"#).unwrap();
    let sweep = |axis: &str, values: &str, out: &str| {
        let o = lfmark(&[
            "sweep", "--config", p(&cfg), "--images", p(&root.join("in")), "--axis", axis, "--values", values, "--battery",
            p(&battery), "--bits", "16", "--out", p(&root.join(out)),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        root.join(out).join("sweep.csv")
    };

    let bits = sweep("bits", "32,48", "bits");
    assert_eq!(read_csv(&bits).len(), 4);
    assert_eq!(column(&bits, "value"), ["32", "32", "48", "48"]);
    assert_eq!(column(&bits, "attack"), ["none", "gaussian_noise", "none", "gaussian_noise"]);
    assert!(column(&bits, "status").iter().all(|s| s == "ok"));
    assert!(root.join("bits").join("sweep_bits.svg").is_file());

    let steps = sweep("steps", "50,200", "steps");
    let acc: Vec<f64> = column(&steps, "mean_bit_accuracy").iter().map(|v| v.parse().unwrap()).collect();
    let attacks = column(&steps, "attack");
    let none: Vec<f64> = acc.iter().zip(&attacks).filter(|(_, a)| *a == "none").map(|(v, _)| *v).collect();
    assert_eq!(none.len(), 2);
    assert!(none[1] >= none[0], "{none:?}");

    let failing = sweep("bits", "16,100", "fail");
    let status = column(&failing, "status");
    assert_eq!(status.len(), 3);
    assert!(status[2].starts_with("error"), "{status:?}");

    let bad = lfmark(&["sweep", "--images", p(&root.join("in")), "--axis", "steps", "--out", p(&root.join("nogrid"))]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn noise_grid_sweep_emits_an_eleven_by_eleven_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_textures(&root.join("in"), 1, 13);
    let cfg = write_config(&root.join("cfg.toml"), "[embed]\nsteps = 2\n[backends]\ncodec = \"identity\"\n");
    let battery = root.join("b.json");
    fs::write(&battery, r#"{"attacks": [{"name": "none"}]}"#).unwrap();
    let out = root.join("ng");
    let o = lfmark(&[
        "sweep", "--config", p(&cfg), "--images", p(&root.join("in")), "--axis", "noise-grid", "--battery", p(&battery),
        "--bits", "8", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let matrix = out.join("noise_grid.csv");
    let header = csv_headers(&matrix);
    assert_eq!(header.len(), 12);
    assert_eq!(header[1..].iter().map(|h| h.parse::<f64>().unwrap()).collect::<Vec<_>>()[10], 0.2);
    let rows = read_csv(&matrix);
    assert_eq!(rows.len(), 11);
    assert!(rows.iter().all(|r| r.len() == 12 && r.iter().skip(1).all(|c| c.parse::<f64>().is_ok())));
    assert_eq!(read_csv(&out.join("sweep.csv")).len(), 121);
}
