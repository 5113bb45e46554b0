use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_morvit");

fn morvit(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("MORVIT_THREADS")
        .output()
        .expect("spawn morvit")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path, epochs: usize) {
    let text = format!("preset = tiny-desk\nepochs = {epochs}\nbatch_size = 8\nlr = 0.01\n");
    std::fs::write(dir.join("tiny.cfg"), text).unwrap();
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", "tiny.cfg", "--data", "synth:32:0", "--out", out];
    args.extend_from_slice(extra);
    morvit(dir, &args)
}

#[test]
fn no_arguments_prints_usage_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = morvit(dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage: morvit <COMMAND>"));
}

#[test]
fn help_output_matches_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let o = morvit(dir.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), std::fs::read_to_string(golden.join("help.txt")).unwrap());
    for cmd in ["train", "eval", "profile", "depthmap", "ablate"] {
        let o = morvit(dir.path(), &[cmd, "--help"]);
        let want = std::fs::read_to_string(golden.join(format!("help_{cmd}.txt"))).unwrap();
        assert_eq!(stdout(&o), want, "{cmd} --help");
    }
}

#[test]
fn eval_reproduces_the_logged_final_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path(), 3);
    let o = train(dir.path(), "m.ckpt", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let log = std::fs::read_to_string(dir.path().join("m.ckpt.metrics.tsv")).unwrap();
    let last = log.lines().last().unwrap();
    let logged_acc = last.split('\t').nth(2).unwrap();

    let o = morvit(dir.path(), &["eval", "--ckpt", "m.ckpt", "--data", "synth:32:0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let acc = out.lines().find_map(|l| l.strip_prefix("accuracy\t")).unwrap();
    assert_eq!(acc, logged_acc);
}

#[test]
fn training_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path(), 2);
    assert!(train(dir.path(), "a.ckpt", &[]).status.success());
    assert!(train(dir.path(), "b.ckpt", &[]).status.success());
    let a = std::fs::read(dir.path().join("a.ckpt")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.ckpt")).unwrap());

    tiny_config(dir.path(), 1);
    assert!(train(dir.path(), "half.ckpt", &[]).status.success());
    let o = train(dir.path(), "half.ckpt", &["--epochs", "2", "--resume", "half.ckpt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(dir.path().join("half.ckpt")).unwrap(), a);

    let o = train(dir.path(), "c.ckpt", &["--epochs", "2", "--seed", "9"]);
    assert!(o.status.success());
    assert_ne!(std::fs::read(dir.path().join("c.ckpt")).unwrap(), a);
}

#[test]
fn beta_sweep_flops_never_increase() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path(), 1);
    assert!(train(dir.path(), "m.ckpt", &[]).status.success());
    let o = morvit(dir.path(), &["profile", "--ckpt", "m.ckpt", "--beta-sweep", "--data", "synth:8:1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let table: Vec<u64> = out
        .lines()
        .skip_while(|l| !l.starts_with("beta\t"))
        .skip(1)
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(table.len(), 5);
    assert!(table.windows(2).all(|w| w[0] >= w[1]), "{table:?}");
    assert!(out.contains("degenerate\tfalse"));
}

#[test]
fn depthmap_from_png_and_synthetic_input() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path(), 1);
    assert!(train(dir.path(), "m.ckpt", &[]).status.success());

    let img = image::RgbImage::from_fn(8, 8, |x, y| image::Rgb([(x * 30) as u8, (y * 30) as u8, 128]));
    img.save(dir.path().join("in.png")).unwrap();
    let o = morvit(dir.path(), &["depthmap", "--ckpt", "m.ckpt", "--input", "in.png", "--out", "d.csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    for line in csv.lines() {
        let depths: Vec<usize> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(depths.len(), 2);
        assert!(depths.iter().all(|d| (1..=2).contains(d)));
    }

    let o = morvit(
        dir.path(),
        &["depthmap", "--ckpt", "m.ckpt", "--input", "synth:1:3", "--out", "d.json", "--format", "json"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let json = std::fs::read_to_string(dir.path().join("d.json")).unwrap();
    assert!(json.contains("\"histogram\"") && json.contains("\"routing_mode\": \"expert_choice\""));

    let big = image::RgbImage::new(16, 16);
    big.save(dir.path().join("big.png")).unwrap();
    let o = morvit(dir.path(), &["depthmap", "--ckpt", "m.ckpt", "--input", "big.png", "--out", "x.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("big.png"));
}

#[test]
fn ablate_writes_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path(), 1);
    let o = morvit(dir.path(), &["ablate", "--config", "tiny.cfg", "--data", "synth:16:0", "--out", "t.tsv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("t.tsv")).unwrap();
    let names: Vec<&str> = table.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(names, ["full", "static-depth", "unshared", "plain"]);
}

#[test]
fn error_exit_codes_name_the_culprit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_config(d, 1);

    let o = morvit(d, &["eval", "--ckpt", "nope.ckpt", "--data", "synth:4:0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.ckpt"));

    std::fs::write(d.join("short.bin"), [0u8; 100]).unwrap();
    assert!(train(d, "m.ckpt", &[]).status.success());
    let o = morvit(d, &["eval", "--ckpt", "m.ckpt", "--data", "short.bin"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("short.bin"));

    std::fs::write(d.join("bad.cfg"), "preset = tiny-desk\nwidth = 3\n").unwrap();
    let o = morvit(d, &["train", "--config", "bad.cfg", "--data", "synth:4:0", "--out", "x.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.cfg") && stderr(&o).contains("width"));

    let o = morvit(d, &["eval", "--ckpt", "m.ckpt", "--data", "synth:x:0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--data"));

    let o = Command::new(BIN)
        .args(["eval", "--ckpt", "m.ckpt", "--data", "synth:4:0"])
        .current_dir(d)
        .env("MORVIT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("MORVIT_THREADS"));

    std::fs::write(d.join("nan.cfg"), "preset = tiny-desk\nlr = 1e200\nepochs = 2\n").unwrap();
    let o = morvit(d, &["train", "--config", "nan.cfg", "--data", "synth:16:0", "--out", "n.ckpt"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path(), 1);
    assert!(train(dir.path(), "one.ckpt", &[]).status.success());
    let o = Command::new(BIN)
        .args(["train", "--config", "tiny.cfg", "--data", "synth:32:0", "--out", "four.ckpt"])
        .current_dir(dir.path())
        .env("MORVIT_THREADS", "4")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(
        std::fs::read(dir.path().join("one.ckpt")).unwrap(),
        std::fs::read(dir.path().join("four.ckpt")).unwrap()
    );
}
