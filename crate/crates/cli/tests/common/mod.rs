#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

pub fn geossl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geossl"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Run and require exit code 0.
pub fn ok(args: &[&str]) -> Output {
    let out = geossl(args);
    assert!(
        out.status.success(),
        "geossl {args:?} failed with {:?}:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Every file under `root` (relative path → SHA-256), recursively.
pub fn tree_hashes(root: &Path) -> BTreeMap<PathBuf, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, String>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let digest = Sha256::digest(fs::read(&path).unwrap());
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    hex::encode(digest),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Artifacts of one micro pipeline run.
pub struct Pipeline {
    pub data: PathBuf,
    pub geo: PathBuf,
    pub run: PathBuf,
    pub probe: PathBuf,
    pub eval: PathBuf,
    pub report: PathBuf,
}

/// gen-data → cluster → pretrain → probe → eval → report under `root`.
pub fn pipeline(root: &Path, areas: usize) -> Pipeline {
    let p = Pipeline {
        data: root.join("data"),
        geo: root.join("geo"),
        run: root.join("run"),
        probe: root.join("probe"),
        eval: root.join("eval"),
        report: root.join("report"),
    };
    let areas = areas.to_string();
    ok(&[
        "gen-data",
        "--areas",
        &areas,
        "--classes",
        "4",
        "--views",
        "3",
        "--geo-centers",
        "4",
        "--seed",
        "1",
        "--out",
        s(&p.data),
    ]);
    let train = p.data.join("train.jsonl");
    let geo_model = p.geo.join("geo_model.json");
    let ckpt = p.run.join("checkpoint.zip");
    ok(&[
        "cluster",
        "--manifest",
        s(&train),
        "--k",
        "4",
        "--seed",
        "1",
        "--out",
        s(&p.geo),
    ]);
    ok(&[
        "pretrain",
        "--manifest",
        s(&train),
        "--geo-model",
        s(&geo_model),
        "--variant",
        "moco+geo+tp",
        "--epochs",
        "3",
        "--batch-size",
        "32",
        "--queue-size",
        "256",
        "--seed",
        "1",
        "--out",
        s(&p.run),
    ]);
    ok(&[
        "probe",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&train),
        "--out",
        s(&p.probe),
    ]);
    ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--probe",
        s(&p.probe.join("probe.json")),
        "--manifest",
        s(&p.data.join("test.jsonl")),
        "--granularity",
        "temporal",
        "--out",
        s(&p.eval),
    ]);
    ok(&[
        "report",
        "--manifest",
        s(&p.data.join("manifest.jsonl")),
        "--geo-model",
        s(&geo_model),
        "--loss-csv",
        s(&p.run.join("loss.csv")),
        "--out",
        s(&p.report),
    ]);
    p
}

pub fn is_table(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("json" | "jsonl" | "csv")
    )
}
