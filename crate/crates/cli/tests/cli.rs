use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cmcseg::data::{load_checkpoint, read_labels};
use cmcseg::metrics::MetricsReport;
use cmcseg::network::init_params;
use cmcseg::training::LogRecord;
use cmcseg::ModelConfig;

fn cmcseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmcseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "\
# tiny model for 16x16 slices
encoder_channels = 2,3,4,4
input_height = 16
input_width = 16
seed = 3
batch_size = 2
lr_phase1 = 1e-3
lr_phase2 = 1e-4
";

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        let o = cmcseg(&[
            "gen",
            "--out",
            s(&f.data()),
            "--count",
            "2",
            "--seed",
            "5",
            "--dims",
            "16,16,16",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self) -> PathBuf {
        self.path("data")
    }

    fn config(&self, extra: &str) -> PathBuf {
        let p = self.path("run.cfg");
        fs::write(&p, format!("{SMALL}{extra}")).unwrap();
        p
    }

    fn train(&self, extra: &str, out: &str) -> Output {
        let cfg = self.config(extra);
        cmcseg(&[
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&self.data()),
            "--out",
            s(&self.path(out)),
        ])
    }
}

fn no_partial_files(dir: &Path) {
    for e in fs::read_dir(dir).unwrap() {
        let name = e.unwrap().file_name();
        assert!(
            !name.to_string_lossy().ends_with(".partial"),
            "{name:?} left behind"
        );
    }
}

#[test]
fn gen_writes_deterministic_valid_cases() {
    let f = Fixture::new();
    let mut names: Vec<String> = fs::read_dir(f.data())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "case_0_img.mmv",
            "case_0_lbl.mmv",
            "case_1_img.mmv",
            "case_1_lbl.mmv"
        ]
    );
    for name in ["case_0_lbl.mmv", "case_1_lbl.mmv"] {
        read_labels(&f.data().join(name))
            .unwrap()
            .validate(5)
            .unwrap();
    }
    let again = f.path("again");
    assert_eq!(
        code(&cmcseg(&[
            "gen",
            "--out",
            s(&again),
            "--count",
            "2",
            "--seed",
            "5",
            "--dims",
            "16,16,16"
        ])),
        0
    );
    for name in &names {
        assert_eq!(
            fs::read(f.data().join(name)).unwrap(),
            fs::read(again.join(name)).unwrap()
        );
    }
}

#[test]
fn gen_into_a_file_path_fails() {
    let f = Fixture::new();
    let blocker = f.data().join("case_0_img.mmv").join("sub");
    let o = cmcseg(&[
        "gen",
        "--out",
        s(&blocker),
        "--count",
        "1",
        "--dims",
        "16,16,16",
    ]);
    assert_ne!(code(&o), 0);
    assert!(!o.stderr.is_empty());
}

#[test]
fn zero_step_training_saves_the_initialization() {
    let f = Fixture::new();
    let o = f.train("phase1_steps = 0\nphase2_steps = 0\n", "zero");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = f.path("zero");
    let saved = load_checkpoint(&out.join("model.mmck")).unwrap();
    let expected = init_params::<f32>(&saved.config).unwrap();
    assert_eq!(saved, expected);
    assert_eq!(saved.config.seed, 3);
    assert_eq!(fs::read_to_string(out.join("train.log")).unwrap(), "");
    no_partial_files(&out);
}

#[test]
fn training_log_matches_configured_steps() {
    let f = Fixture::new();
    let o = f.train("phase1_steps = 3\nphase2_steps = 2\n", "run");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = f.path("run");
    let log = fs::read_to_string(out.join("train.log")).unwrap();
    let records: Vec<LogRecord> = log.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(
        records
            .iter()
            .map(|r| (r.phase, r.step))
            .collect::<Vec<_>>(),
        [(1, 1), (1, 2), (1, 3), (2, 4), (2, 5)]
    );
    assert!(records.iter().all(|r| r.loss.is_finite()));

    // the echoed configuration reproduces the run bit for bit
    let echoed = out.join("config.txt");
    let text = fs::read_to_string(&echoed).unwrap();
    assert!(text.contains("phase1_steps = 3"));
    let o = cmcseg(&[
        "train",
        "--config",
        s(&echoed),
        "--out",
        s(&f.path("rerun")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(out.join("model.mmck")).unwrap(),
        fs::read(f.path("rerun/model.mmck")).unwrap()
    );
    no_partial_files(&out);
}

#[test]
fn flags_override_the_config_file() {
    let f = Fixture::new();
    let cfg = f.config("phase1_steps = 0\nphase2_steps = 1\n");
    let out = f.path("o");
    let o = cmcseg(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&f.data()),
        "--out",
        s(&out),
        "--seed",
        "8",
        "--set",
        "phase2_steps=2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        load_checkpoint(&out.join("model.mmck"))
            .unwrap()
            .config
            .seed,
        8
    );
    assert_eq!(
        fs::read_to_string(out.join("train.log"))
            .unwrap()
            .lines()
            .count(),
        2
    );
}

#[test]
fn training_errors_map_to_exit_codes() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("momentum = 0.9\n", "a")), 1);
    assert_eq!(code(&f.train("lr_phase2 = 1\n", "b")), 1);
    let cfg = f.config("");
    let o = cmcseg(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&f.path("missing")),
        "--out",
        s(&f.path("c")),
    ]);
    assert_eq!(code(&o), 2);
    // default 64x64 model against 16x16 data
    let o = cmcseg(&["train", "--data", s(&f.data()), "--out", s(&f.path("d"))]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&cmcseg(&["train", "--bogus"])), 1);
    assert_eq!(code(&cmcseg(&["--help"])), 0);
}

#[test]
fn non_finite_data_is_a_numeric_failure() {
    let f = Fixture::new();
    let img = f.data().join("case_0_img.mmv");
    let mut bytes = fs::read(&img).unwrap();
    let n = bytes.len();
    bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    fs::write(&img, bytes).unwrap();
    let o = f.train("phase1_steps = 2\nphase2_steps = 0\n", "nan");
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("step"));
}

#[test]
fn oracle_eval_scores_one_in_canonical_order() {
    let f = Fixture::new();
    let cfg = f.config("");
    let report = f.path("oracle.txt");
    let o = cmcseg(&[
        "eval",
        "--config",
        s(&cfg),
        "--data",
        s(&f.data()),
        "--report",
        s(&report),
        "--oracle",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&report).unwrap();
    let parsed = MetricsReport::from_text(&text).unwrap();
    assert_eq!(parsed.mean_iu, 1.0);
    assert!(parsed
        .regions
        .iter()
        .all(|(_, r)| (r.dice, r.ppv, r.sensitivity) == (1.0, 1.0, 1.0)));
    let keys: Vec<&str> = text
        .lines()
        .map(|l| l.split(" = ").next().unwrap())
        .collect();
    let mut expected = vec!["mean_iu".to_string()];
    expected.extend((0..5).map(|c| format!("iu[{c}]")));
    for r in ["complete", "core", "enhancing"] {
        for m in ["dice", "ppv", "sensitivity"] {
            expected.push(format!("region[{r}].{m}"));
        }
    }
    assert_eq!(keys, expected);
    assert!(f.path("oracle.txt.config.txt").is_file());
}

#[test]
fn eval_and_predict_with_a_trained_model() {
    let f = Fixture::new();
    assert_eq!(
        code(&f.train("phase1_steps = 2\nphase2_steps = 1\n", "m")),
        0
    );
    let model = f.path("m/model.mmck");

    let report = f.path("r.txt");
    let o = cmcseg(&[
        "eval",
        "--model",
        s(&model),
        "--data",
        s(&f.data()),
        "--report",
        s(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = MetricsReport::from_text(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!((0.0..=1.0).contains(&r.mean_iu));

    let o = cmcseg(&[
        "eval",
        "--model",
        s(&model),
        "--data",
        s(&f.data()),
        "--report",
        s(&report),
        "--set",
        "class_count=4",
    ]);
    assert_eq!(code(&o), 2, "mismatched model settings must be rejected");

    let volume = f.data().join("case_1_img.mmv");
    let (p1, p2) = (f.path("p1.mmv"), f.path("p2.mmv"));
    for p in [&p1, &p2] {
        let o = cmcseg(&[
            "predict",
            "--model",
            s(&model),
            "--volume",
            s(&volume),
            "--out",
            s(p),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    let labels = read_labels(&p1).unwrap();
    labels.validate(5).unwrap();
    assert_eq!(labels.dims(), (16, 16, 16));
    no_partial_files(f.dir.path());
}

#[test]
fn predict_rejects_extents_not_divisible_by_16() {
    let f = Fixture::new();
    assert_eq!(
        code(&f.train("phase1_steps = 0\nphase2_steps = 0\n", "m")),
        0
    );
    let odd = f.path("odd");
    assert_eq!(
        code(&cmcseg(&[
            "gen",
            "--out",
            s(&odd),
            "--count",
            "1",
            "--dims",
            "16,24,16"
        ])),
        0
    );
    let o = cmcseg(&[
        "predict",
        "--model",
        s(&f.path("m/model.mmck")),
        "--volume",
        s(&odd.join("case_0_img.mmv")),
        "--out",
        s(&f.path("x.mmv")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("pad or crop"));
    assert!(!f.path("x.mmv").exists());
}

#[test]
fn gradcheck_passes_and_fails_by_tolerance() {
    let a = cmcseg(&["gradcheck", "--seed", "3"]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stdout));
    let b = cmcseg(&["gradcheck", "--seed", "3"]);
    assert_eq!(a.stdout, b.stdout);
    let table = String::from_utf8_lossy(&a.stdout);
    for layer in [
        "conv2d",
        "conv_transpose2d",
        "batchnorm_train",
        "softmax_ce",
        "cmc_forward",
        "mrf_fuse",
        "end_to_end",
    ] {
        assert!(table.contains(layer), "{layer} missing");
    }
    let strict = cmcseg(&["gradcheck", "--seed", "3", "--tol", "1e-12"]);
    assert_eq!(code(&strict), 4);
    assert!(String::from_utf8_lossy(&strict.stdout).contains("FAIL"));
}

#[test]
fn default_model_config_is_echoed() {
    let f = Fixture::new();
    let report = f.path("o.txt");
    let o = cmcseg(&[
        "eval",
        "--data",
        s(&f.data()),
        "--report",
        s(&report),
        "--oracle",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let echoed = fs::read_to_string(f.path("o.txt.config.txt")).unwrap();
    assert!(echoed.contains(&ModelConfig::default().to_text()));
}
