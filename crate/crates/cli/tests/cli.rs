use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use sha2::{Digest, Sha256};

const DATA: &str = r#"
seed = 3
resolution = 16
train_per_domain = 6
eval_count = 4
domains = [
    { id = "rgb", render = "rgb" },
    { id = "seg", render = "segmentation" },
    { id = "edge", render = "edge" },
]
"#;

const PRIOR: &str = r#"
[prior]
backend = "style"
resolution = 8
latent_dim = 4
channels = [4, 3]
mapping_layers = 1

[pretrain]
steps = 2
batch = 2
disc_width = 2
mean_latent_samples = 32
"#;

const TRAIN: &str = r#"
steps = 2
batch = 2
snapshot_every = 1

[adapter]
resolution = 16
encoder_width = 2
regressor_width = 0.05
discriminator_width = 2
"#;

fn anchor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anchor"))
        .args(args)
        .env_remove("ANCHOR_REGISTRY")
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = anchor(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    anchor(args).status.code().expect("exit code")
}

/// Path argument as a `&str`; leaking keeps call sites short.
fn s(p: &Path) -> &'static str {
    Box::leak(p.to_str().unwrap().to_string().into_boxed_str())
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

/// Dataset, a pretrained tiny prior and `rgb` and `seg` adapters.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        for (name, text) in [("data.toml", DATA), ("prior.toml", PRIOR), ("train.toml", TRAIN)] {
            std::fs::write(root.join(name), text).unwrap();
        }
        let p = |r: &str| root.join(r).to_str().unwrap().to_string();
        ok(&["gen-data", "--config", &p("data.toml"), "--out", &p("d")]);
        ok(&[
            "pretrain",
            "--data",
            &p("d"),
            "--out",
            &p("reg"),
            "--config",
            &p("prior.toml"),
        ]);
        for (id, kind) in [("rgb", "continuous:3"), ("seg", "categorical:4")] {
            ok(&[
                "train-domain",
                "--registry",
                &p("reg"),
                "--domain",
                id,
                "--kind",
                kind,
                "--data",
                &p(&format!("d/{id}")),
                "--config",
                &p("train.toml"),
            ]);
        }
        Fixture { _dir: dir, root }
    })
}

fn hashes(dir: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let h = hex::encode(Sha256::digest(std::fs::read(&p).unwrap()));
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), h);
            }
        }
    }
    out
}

#[test]
fn gen_data_is_deterministic_and_needs_a_config() {
    let f = fixture();
    assert!(f.path("d/manifest.json").is_file());
    assert!(f.path("d/resolved_config.toml").is_file());
    assert_eq!(code(&["gen-data", "--out", s(&f.path("x"))]), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("again");
    ok(&["gen-data", "--config", s(&f.path("data.toml")), "--out", s(&out)]);
    let first = hashes(&out);
    ok(&["gen-data", "--config", s(&f.path("data.toml")), "--out", s(&out)]);
    assert_eq!(first, hashes(&out));
    assert_eq!(
        code(&["gen-data", "--config", s(&dir.path().join("missing.toml"))]),
        2
    );
}

#[test]
fn pretrain_validates_and_refuses_overwrite() {
    let f = fixture();
    let listed: serde_json::Value =
        serde_json::from_str(&ok(&["list-domains", "--registry", s(&f.path("reg")), "--json"])).unwrap();
    assert_eq!(listed.as_array().unwrap().len(), 2);
    assert!(f.path("reg/runs/prior/resolved_config.toml").is_file());
    let dir = tempfile::tempdir().unwrap();
    let fresh = dir.path().join("reg");
    assert_eq!(
        code(&[
            "pretrain",
            "--data",
            s(&f.path("d")),
            "--out",
            s(&fresh),
            "--config",
            s(&f.path("prior.toml")),
            "--steps",
            "0"
        ]),
        2
    );
    assert!(!fresh.exists());
    assert_eq!(
        code(&[
            "pretrain",
            "--data",
            s(&f.path("d")),
            "--out",
            s(&f.path("reg")),
            "--config",
            s(&f.path("prior.toml"))
        ]),
        4
    );
}

#[test]
fn train_domain_records_runs_and_refuses_duplicates() {
    let f = fixture();
    let run = f.path("reg/runs/seg");
    assert!(run.join("trace.csv").is_file());
    assert!(run.join("resolved_config.toml").is_file());
    assert!(run.join("snapshots/step_0.png").is_file());
    let before = hashes(&f.path("reg/adapters"));
    let args = [
        "train-domain",
        "--registry",
        s(&f.path("reg")),
        "--domain",
        "seg",
        "--kind",
        "categorical:4",
        "--data",
        s(&f.path("d/seg")),
        "--config",
        s(&f.path("train.toml")),
    ];
    assert_eq!(code(&args), 5);
    assert_eq!(before, hashes(&f.path("reg/adapters")));
    assert_eq!(code(&["list-domains", "--registry", s(&f.path("nowhere"))]), 3);
}

#[test]
fn translate_writes_destination_encoding() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("y.png");
    let input = first_png(&f.path("d/rgb/eval"));
    let reg = f.path("reg");
    ok(&[
        "translate",
        "--registry",
        s(&reg),
        "--from",
        "rgb",
        "--to",
        "seg",
        "--in",
        s(&input),
        "--out",
        s(&out),
        "--grid",
    ]);
    let img = image_luma(&out);
    assert!(img.iter().all(|&v| v < 4));
    assert!(dir.path().join("y_grid.png").is_file());
    let bad = [
        "translate",
        "--registry",
        s(&reg),
        "--from",
        "rgb",
        "--to",
        "nope",
        "--in",
        s(&input),
        "--out",
        s(&out),
    ];
    assert_eq!(code(&bad), 5);
    // The default registry comes from the environment.
    let out = Command::new(env!("CARGO_BIN_EXE_anchor"))
        .args(["list-domains"])
        .env("ANCHOR_REGISTRY", &reg)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("seg"));
}

fn first_png(dir: &Path) -> PathBuf {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files.remove(0)
}

fn image_luma(path: &Path) -> Vec<u8> {
    let img = image::open(path).unwrap();
    assert_eq!(
        img.color(),
        image::ColorType::L8,
        "categorical outputs are stored as 8-bit gray"
    );
    img.into_luma8().into_raw()
}

#[test]
fn sample_mix_and_inspect() {
    let f = fixture();
    let reg = f.path("reg");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("samples");
    ok(&[
        "sample",
        "--registry",
        s(&reg),
        "--seed",
        "1",
        "--domains",
        "rgb,seg",
        "--out",
        s(&out),
    ]);
    for name in [
        "rgb_1.png",
        "seg_1.png",
        "prior_rgb_1.png",
        "resolved_config.toml",
    ] {
        assert!(out.join(name).is_file(), "{name}");
    }
    let input = first_png(&f.path("d/seg/eval"));
    let mixed = dir.path().join("m.png");
    ok(&[
        "mix",
        "--registry",
        s(&reg),
        "--from",
        "seg",
        "--in",
        s(&input),
        "--seed",
        "2",
        "--out",
        s(&mixed),
    ]);
    assert!(mixed.is_file());
    let bad = [
        "mix",
        "--registry",
        s(&reg),
        "--from",
        "seg",
        "--in",
        s(&input),
        "--slots",
        "3:3",
        "--out",
        s(&mixed),
    ];
    assert_eq!(code(&bad), 6);
    let grid = dir.path().join("f.png");
    ok(&[
        "inspect-features",
        "--registry",
        s(&reg),
        "--seed",
        "0",
        "--channels",
        "0,1,2",
        "--out",
        s(&grid),
    ]);
    assert!(grid.is_file());
    let bad = [
        "inspect-features",
        "--registry",
        s(&reg),
        "--channels",
        "99",
        "--out",
        s(&grid),
    ];
    assert_eq!(code(&bad), 6);
}

#[test]
fn mix_on_a_plain_prior_is_unsupported() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("plain.toml");
    std::fs::write(&cfg, PRIOR.replace("\"style\"", "\"plain\"")).unwrap();
    let reg = dir.path().join("reg");
    ok(&[
        "pretrain",
        "--data",
        s(&f.path("d")),
        "--out",
        s(&reg),
        "--config",
        s(&cfg),
    ]);
    ok(&[
        "train-domain",
        "--registry",
        s(&reg),
        "--domain",
        "seg",
        "--kind",
        "categorical:4",
        "--data",
        s(&f.path("d/seg")),
        "--config",
        s(&f.path("train.toml")),
        "--no-adversarial",
    ]);
    let input = first_png(&f.path("d/seg/eval"));
    let args = [
        "mix",
        "--registry",
        s(&reg),
        "--from",
        "seg",
        "--in",
        s(&input),
        "--slots",
        "0:1",
        "--out",
        s(&dir.path().join("m.png")),
    ];
    assert_eq!(code(&args), 6);
}

#[test]
fn evaluate_reports_iou_and_proxies() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.txt");
    let json = ok(&[
        "evaluate",
        "--registry",
        s(&f.path("reg")),
        "--pairs",
        s(&f.path("d/manifest.json")),
        "--from",
        "rgb",
        "--to",
        "seg",
        "--out",
        s(&report),
        "--json",
        "--extractor",
        s(&dir.path().join("x.ckpt")),
    ]);
    let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
    let metrics: Vec<&str> = parsed["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["metric"].as_str().unwrap())
        .collect();
    for m in ["miou", "miou_shuffled", "fid_proxy", "kid_proxy", "retrieval"] {
        assert!(metrics.contains(&m), "{m} missing from {metrics:?}");
    }
    let table = std::fs::read_to_string(&report).unwrap();
    assert!(table.contains("proxy") && table.contains("miou"));
}
