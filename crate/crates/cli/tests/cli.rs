use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use latformer::mask::{mask_from_shift, shift_vector};
use latformer::{LatticeAction, LatticeShape};

fn latformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latformer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Matrix of a plain graymap, scaled back to 0..1.
fn read_pgm(path: &Path) -> Vec<Vec<f64>> {
    let text = fs::read_to_string(path).unwrap();
    let mut tokens = text.split_whitespace();
    assert_eq!(tokens.next(), Some("P2"));
    let cols: usize = tokens.next().unwrap().parse().unwrap();
    let rows: usize = tokens.next().unwrap().parse().unwrap();
    assert_eq!(tokens.next(), Some("255"));
    let values: Vec<f64> = tokens.map(|t| t.parse::<f64>().unwrap() / 255.0).collect();
    assert_eq!(values.len(), rows * cols);
    values.chunks(cols).map(<[f64]>::to_vec).collect()
}

fn read_json_mask(path: &Path) -> Vec<Vec<f64>> {
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    serde_json::from_value(value["mask"].clone()).unwrap()
}

fn circulant(n: usize, shift: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(j == (i + n - shift) % n))).collect())
        .collect()
}

fn kron(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, m) = (a.len(), b.len());
    (0..n * m)
        .map(|i| (0..n * m).map(|j| a[i / m][j / m] * b[i % m][j % m]).collect())
        .collect()
}

#[test]
fn identity_mask_is_the_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("id.pgm");
    let out = latformer(&["mask", "--action", "identity", "--shape", "4x5", "--out", arg(&path)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = read_pgm(&path);
    assert_eq!(m.len(), 20);
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            assert_eq!(v, f64::from(u8::from(i == j)));
        }
    }
}

#[test]
fn translation_mask_is_a_kronecker_product_of_circulants() {
    let dir = tempfile::tempdir().unwrap();
    let pgm = dir.path().join("t.pgm");
    let json = dir.path().join("t.json");
    for path in [&pgm, &json] {
        let out = latformer(&["mask", "--action", "translate:1,1", "--shape", "8x8", "--out", arg(path)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let expected = kron(&circulant(8, 1), &circulant(8, 1));
    assert_eq!(read_pgm(&pgm), expected);
    assert_eq!(read_json_mask(&json), expected);
}

#[test]
fn rotation_mask_matches_the_shift_vector_route() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let out = latformer(&["mask", "--action", "rotate:1", "--shape", "8x8", "--out", arg(&path)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let shape = LatticeShape::grid(8, 8).unwrap();
    let shift = shift_vector(&LatticeAction::rotate(1), &shape).unwrap();
    let expected = mask_from_shift(&shift, 64).unwrap().matrix().to_rows();
    assert_eq!(read_json_mask(&path), expected);
}

#[test]
fn invalid_mask_requests_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pgm");
    for args in [
        ["mask", "--action", "rotate:1", "--shape", "3x4", "--out", arg(&path)],
        ["mask", "--action", "spin:2", "--shape", "4x4", "--out", arg(&path)],
        ["mask", "--action", "rotate:1", "--shape", "4x0", "--out", arg(&path)],
        ["mask", "--action", "rotate:1", "--shape", "4x4", "--out", "mask.txt"],
    ] {
        let out = latformer(&args);
        assert_eq!(code(&out), 1, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(!path.exists());
    assert_eq!(code(&latformer(&["frobnicate"])), 1);
    assert_eq!(code(&latformer(&["--help"])), 0);
}

#[test]
fn bad_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "suite_seed = 1\nno_such_key = 3\n").unwrap();
    let out = latformer(&["gen", "--config", arg(&config), "--out", arg(dir.path())]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(&config, "test_size = 0\n").unwrap();
    let out = latformer(&["gen", "--config", arg(&config), "--out", arg(dir.path())]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    let missing = dir.path().join("missing.toml");
    assert_eq!(code(&latformer(&["gen", "--config", arg(&missing)])), 1);
}

#[test]
fn gen_writes_the_suite_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    fs::write(&config, "ladder = [2, 4]\ntest_size = 3\nnoise_train_size = 4\n").unwrap();
    let runs = [dir.path().join("a"), dir.path().join("b")];
    for run in &runs {
        let out = latformer(&["gen", "--config", arg(&config), "--seed", "5", "--out", arg(run)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let names = |run: &Path| {
        let mut n: Vec<String> = fs::read_dir(run.join("tasks"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        n.sort();
        n
    };
    let files = names(&runs[0]);
    assert_eq!(files.len(), 43);
    assert_eq!(files, names(&runs[1]));
    for name in &files {
        let a = fs::read(runs[0].join("tasks").join(name)).unwrap();
        let b = fs::read(runs[1].join("tasks").join(name)).unwrap();
        assert!(a == b, "{name} differs between runs");
    }
    let manifest = |run: &Path| {
        let text = fs::read_to_string(run.join("manifest.json")).unwrap();
        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["config"]["output_dir"], arg(run));
        value["config"]["output_dir"] = serde_json::Value::Null;
        value
    };
    let value = manifest(&runs[0]);
    assert_eq!(value, manifest(&runs[1]));
    assert_eq!(value["suite_seed"], 5);
    assert_eq!(value["tasks"].as_array().unwrap().len(), 43);
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let out = latformer(&["gen", "--out", arg(&blocker.join("run"))]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let out = latformer(&["train-eval", "--out", arg(&dir.path().join("empty"))]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_eval_and_report_on_a_tiny_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(
        &config,
        "categories = [\"reflect\"]\nvariants = [\"latformer\", \"attention_baseline\"]\nladder = [2]\ntest_size = 2\n\n[train]\nepochs = 1\n",
    )
    .unwrap();
    let out_dir = dir.path().join("run");
    let common = ["--config", arg(&config), "--out", arg(&out_dir)];
    let gen = latformer(&[&["gen"][..], &common].concat());
    assert_eq!(code(&gen), 0, "{}", String::from_utf8_lossy(&gen.stderr));
    let run = latformer(&[&["train-eval"][..], &common].concat());
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.starts_with("category,variant,train_size,noise,tasks,solved,failed,mean_accuracy,std_accuracy\n"));
    assert_eq!(stdout.lines().count(), 3, "{stdout}");

    let results = fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 3 * 2, "{results}");
    let report = latformer(&["report", "--out", arg(&out_dir)]);
    assert_eq!(code(&report), 0, "{}", String::from_utf8_lossy(&report.stderr));
    assert_eq!(String::from_utf8(report.stdout).unwrap(), stdout);
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(summary.contains("reflect,latformer,2,0"), "{summary}");
    assert!(summary.contains("reflect,attention_baseline,2,0"), "{summary}");
}
