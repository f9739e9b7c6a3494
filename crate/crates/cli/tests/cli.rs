mod common;

use std::fs;

use cdscope::cds::read_cds_csv;
use cdscope::scc::{make_crop_plan, CropPlan};
use cdscope::store::{load_embedding_set, save_embedding_set};
use common::{cdscope, ok, pipeline, s, write_inputs};
use serde_json::Value;
use sha2::{Digest, Sha256};

fn sha(path: &std::path::Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

fn manifest(path: &std::path::Path) -> Value {
    let mut name = path.file_name().unwrap().to_os_string();
    name.push(".manifest.json");
    serde_json::from_str(&fs::read_to_string(path.with_file_name(name)).unwrap()).unwrap()
}

#[test]
fn train_sae_writes_checkpoint_loss_table_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = write_inputs(dir.path());
    let ckpt = dir.path().join("sae.spsa");
    ok(&[
        "train-sae",
        "--embeddings",
        s(&inputs.crop1),
        "--out",
        s(&ckpt),
        "--expansion",
        "2",
        "--k",
        "3",
        "--steps",
        "40",
        "--batch",
        "16",
        "--layer",
        "blocks.11",
    ]);
    let loss = fs::read_to_string(dir.path().join("sae.loss.csv")).unwrap();
    assert!(loss.starts_with("step,l_recon,l_aux,l_total,n_dead,n_active\n"));
    assert_eq!(loss.lines().count(), 41);

    for artifact in [ckpt.clone(), dir.path().join("sae.loss.csv")] {
        let m = manifest(&artifact);
        assert_eq!(m["command"], "train-sae");
        assert_eq!(m["layer"], "blocks.11");
        assert_eq!(m["config"]["sae"]["k"], 3);
        assert_eq!(m["output"]["sha256"], sha(&artifact));
        assert_eq!(m["inputs"][0]["sha256"], sha(&inputs.crop1));
    }
}

#[test]
fn manifest_hashes_match_recomputed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = write_inputs(dir.path());
    pipeline(dir.path(), &inputs, "3");
    let mut checked = 0;
    for entry in fs::read_dir(dir.path()).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        let Some(artifact) = name.strip_suffix(".manifest.json") else {
            continue;
        };
        let m: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(m["output"]["sha256"], sha(&dir.path().join(artifact)), "{artifact}");
        for input in m["inputs"].as_array().unwrap() {
            let p = std::path::Path::new(input["path"].as_str().unwrap());
            assert_eq!(input["sha256"].as_str().unwrap(), sha(p), "{artifact} input {p:?}");
        }
        checked += 1;
    }
    assert!(checked >= 8, "{checked} manifests");
}

#[test]
fn mismatched_crops_fail_with_image_id_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = write_inputs(dir.path());
    let ckpt = dir.path().join("sae.spsa");
    ok(&[
        "train-sae",
        "--embeddings",
        s(&inputs.crop1),
        "--out",
        s(&ckpt),
        "--expansion",
        "2",
        "--k",
        "3",
        "--steps",
        "5",
    ]);

    // same tokens, images listed in a different order
    let crop2 = load_embedding_set(&inputs.crop2).unwrap();
    let mut ids = crop2.image_ids().to_vec();
    ids.swap(0, 1);
    let shuffled =
        cdscope::store::EmbeddingSet::new(ids, crop2.tokens().clone(), crop2.geometry(), crop2.dtype()).unwrap();
    let bad = dir.path().join("crop2_bad.spbe");
    save_embedding_set(&shuffled, &bad).unwrap();

    let out_path = dir.path().join("cds.csv");
    let out = cdscope(&[
        "cds",
        "--checkpoint",
        s(&ckpt),
        "--crop1",
        s(&inputs.crop1),
        "--crop2",
        s(&bad),
        "--out",
        s(&out_path),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("image id mismatch"));
    assert!(!out_path.exists());
}

#[test]
fn report_histogram_counts_scored_features() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = write_inputs(dir.path());
    pipeline(dir.path(), &inputs, "1");
    let hist = dir.path().join("report.csv");
    let act = dir.path().join("activation.csv");
    ok(&[
        "report",
        "--cds",
        s(&dir.path().join("cds.csv")),
        "--partition",
        s(&dir.path().join("partition.txt")),
        "--out",
        s(&hist),
        "--bins",
        "10",
        "--checkpoint",
        s(&dir.path().join("sae.spsa")),
        "--embeddings",
        s(&inputs.crop1),
        "--activation-out",
        s(&act),
        "--tau",
        "1.5",
    ]);
    let entries = read_cds_csv(fs::File::open(dir.path().join("cds.csv")).unwrap()).unwrap();
    let scored = entries.iter().filter(|e| e.cds.is_some()).count();
    let mut reader = csv::Reader::from_path(&hist).unwrap();
    let total: usize = reader.records().map(|r| r.unwrap()[3].parse::<usize>().unwrap()).sum();
    assert_eq!(total, scored);
    assert!(scored > 0);
    let table = fs::read_to_string(&act).unwrap();
    assert!(table.starts_with("feature_set,token_type,mean,std_across_images,n_tokens,n_images\n"));
}

#[test]
fn report_rejects_a_partition_from_another_table() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = write_inputs(dir.path());
    pipeline(dir.path(), &inputs, "1");
    let text = fs::read_to_string(dir.path().join("partition.txt")).unwrap();
    let moved = dir.path().join("moved.txt");
    fs::write(&moved, text.replace("gamma=0.14", "gamma=0.9")).unwrap();
    let out = cdscope(&[
        "report",
        "--cds",
        s(&dir.path().join("cds.csv")),
        "--partition",
        s(&moved),
        "--out",
        s(&dir.path().join("r.csv")),
    ]);
    // a threshold of 0.9 puts every feature low, so the stored lists no longer match
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("r.csv").exists());
}

#[test]
fn emd_prints_the_distance() {
    let dir = tempfile::tempdir().unwrap();
    let grid = |r: usize, c: usize| {
        (0..5)
            .map(|i| {
                (0..5)
                    .map(|j| if (i, j) == (r, c) { "1" } else { "0" })
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    fs::write(&a, grid(0, 0)).unwrap();
    fs::write(&b, grid(3, 4)).unwrap();
    assert_eq!(ok(&["emd", s(&a), s(&b)]).trim(), "5");

    fs::write(&b, "1,2\n3,4\n").unwrap();
    let out = cdscope(&["emd", s(&a), s(&b)]);
    assert_eq!(out.status.code(), Some(1));
    fs::write(&b, "0,0\n0\n").unwrap();
    assert_eq!(cdscope(&["emd", s(&b), s(&b)]).status.code(), Some(1));
}

#[test]
fn scc_plan_record_matches_the_core_plan() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plan.txt");
    ok(&["scc-plan", "--out", s(&path)]);
    let plan = CropPlan::from_record(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(plan, make_crop_plan(14, 16, 1).unwrap());
    assert_eq!(plan.expanded_side_px, 240);
    assert_eq!(plan.crop2_origin, (16, 16));
}

#[test]
fn config_errors_name_the_field_and_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[sae]\nk = 0\n").unwrap();
    let out = cdscope(&["--config", s(&cfg), "scc-plan", "--out", s(&dir.path().join("p.txt"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sae.k"));

    fs::write(&cfg, "[cds]\ngamma = 0.2\nbogus = 1\n").unwrap();
    let out = cdscope(&["--config", s(&cfg), "scc-plan", "--out", s(&dir.path().join("p.txt"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let out = cdscope(&[
        "train-sae",
        "--embeddings",
        s(&dir.path().join("missing.spbe")),
        "--out",
        "x",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("p.txt").exists());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 4\n[scc]\ngrid_p = 24\npatch_n = 14\nshift = 2\n").unwrap();
    let path = dir.path().join("plan.txt");
    ok(&["--config", s(&cfg), "scc-plan", "--shift", "1", "--out", s(&path)]);
    let plan = CropPlan::from_record(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(plan, make_crop_plan(24, 14, 1).unwrap());
    let m = manifest(&path);
    assert_eq!(m["seed"], 4);
    assert_eq!(m["config"]["scc"]["shift"], 1);
}

#[test]
fn diverging_training_exits_two_and_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = write_inputs(dir.path());
    let ckpt = dir.path().join("sae.spsa");
    let out = cdscope(&[
        "train-sae",
        "--embeddings",
        s(&inputs.crop1),
        "--out",
        s(&ckpt),
        "--expansion",
        "2",
        "--k",
        "3",
        "--steps",
        "50",
        "--lr",
        "1e300",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
    let left: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(left.len(), 3, "{left:?}");
}

#[test]
fn ablate_none_with_normalization_gives_unit_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = write_inputs(dir.path());
    let out = dir.path().join("base.spbe");
    let norms = dir.path().join("norms.csv");
    ok(&[
        "ablate",
        "--embeddings",
        s(&inputs.crop1),
        "--remove",
        "none",
        "--out",
        s(&out),
        "--norm-map-id",
        "img0003",
        "--norm-map-out",
        s(&norms),
    ]);
    let set = load_embedding_set(&out).unwrap();
    for n in set.token_norms().iter() {
        assert!(*n == 0.0 || (n - 1.0).abs() < 1e-12);
    }
    let grid = fs::read_to_string(&norms).unwrap();
    assert_eq!(grid.lines().count(), 1 + 36);
    assert_eq!(manifest(&out)["notes"]["removal"], "none");
}
