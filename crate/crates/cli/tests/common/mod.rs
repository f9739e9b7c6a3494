#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cdscope::probe::{write_labels_csv, LabelRow, Split};
use cdscope::rng::Seeds;
use cdscope::store::save_embedding_set;
use cdscope::synthetic::scc_fixture;

pub fn cdscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdscope"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str]) -> String {
    let out = cdscope(args);
    assert!(
        out.status.success(),
        "cdscope {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub struct Inputs {
    pub crop1: PathBuf,
    pub crop2: PathBuf,
    pub labels: PathBuf,
}

/// Crop pair of 32 images on a 6×6 grid with shift 1, plus a two-class label file.
pub fn write_inputs(dir: &Path) -> Inputs {
    let f = scc_fixture(32, 6, 1, 6, 6, &mut Seeds::new(21).stream("fixture")).unwrap();
    let crop1 = dir.join("crop1.spbe");
    let crop2 = dir.join("crop2.spbe");
    save_embedding_set(&f.crop1, &crop1).unwrap();
    save_embedding_set(&f.crop2, &crop2).unwrap();
    let rows: Vec<LabelRow> = f
        .crop1
        .image_ids()
        .iter()
        .enumerate()
        .map(|(m, id)| LabelRow {
            image_id: id.clone(),
            label: m % 2,
            split: if m % 5 < 4 { Split::Train } else { Split::Val },
        })
        .collect();
    let labels = dir.join("labels.csv");
    let mut buf = Vec::new();
    write_labels_csv(&rows, &mut buf).unwrap();
    fs::write(&labels, buf).unwrap();
    Inputs { crop1, crop2, labels }
}

/// train-sae → cds → partition → ablate → probe. Returns every CSV written.
pub fn pipeline(dir: &Path, inputs: &Inputs, seed: &str) -> Vec<PathBuf> {
    let p = |name: &str| dir.join(name);
    ok(&[
        "train-sae",
        "--seed",
        seed,
        "--embeddings",
        s(&inputs.crop1),
        "--out",
        s(&p("sae.spsa")),
        "--expansion",
        "2",
        "--k",
        "3",
        "--steps",
        "150",
        "--batch",
        "32",
        "--tokens-per-image",
        "8",
        "--lr",
        "0.01",
    ]);
    ok(&[
        "cds",
        "--checkpoint",
        s(&p("sae.spsa")),
        "--crop1",
        s(&inputs.crop1),
        "--crop2",
        s(&inputs.crop2),
        "--out",
        s(&p("cds.csv")),
        "--reps-out",
        s(&p("reps.csv")),
        "--k-cds",
        "4",
    ]);
    ok(&[
        "partition",
        "--cds",
        s(&p("cds.csv")),
        "--gamma",
        "0.14",
        "--out",
        s(&p("partition.txt")),
        "--hist-out",
        s(&p("hist.csv")),
    ]);
    ok(&[
        "ablate",
        "--embeddings",
        s(&inputs.crop1),
        "--remove",
        "high",
        "--checkpoint",
        s(&p("sae.spsa")),
        "--partition",
        s(&p("partition.txt")),
        "--out",
        s(&p("ablated.spbe")),
    ]);
    ok(&[
        "probe",
        "--seed",
        seed,
        "--embeddings",
        s(&p("ablated.spbe")),
        "--labels",
        s(&inputs.labels),
        "--out",
        s(&p("probe.csv")),
        "--epochs",
        "5",
        "--trials",
        "3",
        "--batch",
        "8",
    ]);
    ["sae.loss.csv", "cds.csv", "reps.csv", "hist.csv", "probe.csv"]
        .iter()
        .map(|n| p(n))
        .collect()
}
