use std::path::Path;
use std::process::{Command, Output};

fn hrtrack(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hrtrack")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn config_prints_effective_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = hrtrack(&["--seed", "42", "--variant", "ead", "--lambda2", "3.5", "config"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("seed = 42"));
    assert!(text.contains("variants = [\"ead\"]"));
    assert!(text.contains("lambda2 = 3.5"));
    assert!(!text.contains("\"ead-lpips\""), "old variant should leave the sources:\n{text}");
}

#[test]
fn unknown_variant_and_preset_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = hrtrack(&["--variant", "srgan", "config"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("unknown variant `srgan`"));
    let out = hrtrack(&["--preset", "huge", "config"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("unknown preset"));
}

#[test]
fn config_files_round_trip_and_bad_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let printed = stdout(&hrtrack(&["--seed", "8", "config"], dir.path()));
    std::fs::write(dir.path().join("exp.toml"), &printed).unwrap();
    let again = hrtrack(&["--config", "exp.toml", "config"], dir.path());
    assert!(again.status.success(), "{}", stderr(&again));
    assert_eq!(stdout(&again), printed);

    std::fs::write(dir.path().join("bad.toml"), "[sr]\nlearning_rate = 1.0\n").unwrap();
    let bad = hrtrack(&["--config", "bad.toml", "config"], dir.path());
    assert!(!bad.status.success());
    assert!(stderr(&bad).contains("learning_rate"), "{}", stderr(&bad));
}

#[test]
fn synth_ingest_and_pair_work_on_a_fresh_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = hrtrack(&["--seed", "1", "synth", "--out", "data", "--count", "2"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("wrote 2 AOIs"));

    let ingest = hrtrack(&["ingest", "--root", "data"], dir.path());
    assert!(ingest.status.success(), "{}", stderr(&ingest));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&ingest)).unwrap();
    assert!(summary.is_object());

    let aoi = std::fs::read_dir(dir.path().join("data"))
        .unwrap()
        .filter_map(|e| e.ok())
        .find(|e| e.path().is_dir())
        .unwrap()
        .file_name()
        .into_string()
        .unwrap();
    let pairs = hrtrack(&["pair", "--root", "data", "--aoi", &aoi], dir.path());
    assert!(pairs.status.success(), "{}", stderr(&pairs));
    // Default scenes have 8 frames: 8·7 training pairs plus the header.
    assert_eq!(stdout(&pairs).lines().count(), 57);
    let inference = hrtrack(&["pair", "--root", "data", "--aoi", &aoi, "--inference"], dir.path());
    let rows: Vec<String> = stdout(&inference).lines().skip(1).map(str::to_string).collect();
    assert_eq!(rows.len(), 8);
    let refs: Vec<&str> = rows.iter().map(|r| r.split('\t').nth(3).unwrap()).collect();
    assert!(refs.iter().all(|r| *r == refs[0]), "inference must share one reference: {refs:?}");
}

#[test]
fn standalone_evaluate_scores_labels_against_themselves() {
    let dir = tempfile::tempdir().unwrap();
    assert!(hrtrack(&["synth", "--out", "data", "--count", "2"], dir.path()).status.success());
    std::fs::create_dir(dir.path().join("pred")).unwrap();
    for entry in std::fs::read_dir(dir.path().join("data")).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            let id = path.file_name().unwrap().to_string_lossy().into_owned();
            std::fs::copy(path.join("labels.geojson"), dir.path().join("pred").join(format!("{id}.geojson"))).unwrap();
        }
    }
    let out = hrtrack(&["evaluate", "--pred", "pred", "--labels", "data", "--out", "m.json"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(report["ts"], 1.0);
    assert_eq!(report["fwiou"], 1.0);

    let missing = hrtrack(&["evaluate", "--pred", "nowhere", "--labels", "data"], dir.path());
    assert!(!missing.status.success());
}

#[test]
fn standalone_generate_writes_frames_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("quick.toml"),
        "[dataset]\ntrain_aois = 1\ntest_aois = 1\n[sr.train]\nmax_steps = 1\nbatch_size = 1\n",
    )
    .unwrap();
    let train = hrtrack(&["--config", "quick.toml", "--run-dir", "run", "train-sr"], dir.path());
    assert!(train.status.success(), "{}", stderr(&train));
    let ckpt = dir.path().join("run/sr/ead-lpips/model.ckpt");
    assert!(ckpt.is_file());

    let aoi = std::fs::read_dir(dir.path().join("run/data"))
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .find(|p| p.is_dir())
        .unwrap();
    let out = hrtrack(
        &["generate", "--checkpoint", ckpt.to_str().unwrap(), "--aoi", aoi.to_str().unwrap(), "--patch", "32", "--out", "gen"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gen/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.len(), 8);
    for entry in &manifest {
        assert!(dir.path().join("gen").join(entry["file"].as_str().unwrap()).is_file());
    }

    let described = hrtrack(&["describe", "--checkpoint", ckpt.to_str().unwrap()], dir.path());
    assert!(described.status.success(), "{}", stderr(&described));
}

#[test]
fn shipped_configs_load_and_validate() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&configs).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let out = hrtrack(&["--config", path.to_str().unwrap(), "config"], &configs);
            assert!(out.status.success(), "{}: {}", path.display(), stderr(&out));
            seen += 1;
        }
    }
    assert!(seen >= 3);
}
