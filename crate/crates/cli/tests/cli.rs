use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[decoder]
latent_channels = 4
widths = [16, 16, 16, 16, 8]

[data]
train = 6
eval = 2
latent_extents = [1, 2, 2]

[prune]
ratios = { up2 = "1/4", up3 = "1/4" }
calibration = 4

[phase1]
steps = 4
lr = 1e-3

[phase2]
steps = 4
lr = 1e-3

[phase3]
steps = 4
lr = 1e-3

[bench]
shapes = [[1, 2, 2], [1, 4, 4]]
repeats = 3
warmup = 0
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, out: &str, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_flashdec"))
            .arg("--config")
            .arg(self.path("tiny.toml"))
            .arg("--out-dir")
            .arg(self.path(out))
            .args(args)
            .env_remove("FLASHDEC_THREADS")
            .output()
            .unwrap()
    }

    fn ok(&self, out: &str, args: &[&str]) -> String {
        let o = self.run(out, args);
        assert!(
            o.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    }
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_line(o: &Output) -> String {
    let err = String::from_utf8_lossy(&o.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    lines[0].to_string()
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let env = Env::new();
    std::fs::write(env.path("bad.toml"), "seed = 1\nlearning_rate = 3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_flashdec"))
        .args(["--config", arg(&env.path("bad.toml")), "gen-data"])
        .arg("--out-dir")
        .arg(env.path("out"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("error[config]:"));
}

#[test]
fn missing_inputs_are_io_errors() {
    let env = Env::new();
    let o = env.run(
        "out",
        &[
            "eval",
            "--student",
            "nope.fvae",
            "--weights",
            "nope.fvae",
            "--data",
            "nope.fvae",
        ],
    );
    assert_eq!(o.status.code(), Some(5));
    assert!(error_line(&o).starts_with("error[io]:"));
}

#[test]
fn bad_arguments_map_to_their_error_class() {
    let env = Env::new();
    env.ok("d", &["gen-data"]);
    let teacher = env.path("d/teacher.fvae");
    let data = env.path("d/dataset.fvae");
    let o = env.run("s", &["substitute", "--weights", arg(&teacher), "--plan", "up9=conv2d"]);
    assert_eq!(o.status.code(), Some(2));
    let o = env.run(
        "t",
        &[
            "train",
            "--phase",
            "2",
            "--weights",
            arg(&teacher),
            "--teacher",
            arg(&teacher),
            "--data",
            arg(&data),
        ],
    );
    assert_eq!(o.status.code(), Some(2));

    // A dataset made by another teacher.
    let o = Command::new(env!("CARGO_BIN_EXE_flashdec"))
        .args(["--config", arg(&env.path("tiny.toml")), "--seed", "9", "gen-data"])
        .arg("--out-dir")
        .arg(env.path("d9"))
        .output()
        .unwrap();
    assert!(o.status.success());
    let o = env.run(
        "e",
        &[
            "eval",
            "--student",
            arg(&teacher),
            "--weights",
            arg(&teacher),
            "--data",
            arg(&env.path("d9/dataset.fvae")),
        ],
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(error_line(&o).starts_with("error[contract]:"));
}

#[test]
fn full_chain_writes_reports_and_repeats_byte_for_byte() {
    let env = Env::new();
    env.ok("d", &["gen-data"]);
    let teacher = env.path("d/teacher.fvae");
    let data = env.path("d/dataset.fvae");
    let train = |out: &str| {
        env.ok(
            out,
            &[
                "train",
                "--phase",
                "all",
                "--teacher",
                arg(&teacher),
                "--data",
                arg(&data),
            ],
        );
    };
    train("a");
    train("b");
    for name in [
        "student.fvae",
        "adapters.fvae",
        "plan.json",
        "history_p1.csv",
        "history_p2.csv",
        "history_p3.csv",
        "eval.csv",
        "eval_substituted.csv",
        "cost_teacher.csv",
        "cost_student.csv",
    ] {
        let a = std::fs::read(env.path("a").join(name)).unwrap();
        let b = std::fs::read(env.path("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    let eval = std::fs::read_to_string(env.path("a/eval.csv")).unwrap();
    assert!(eval.starts_with("clip,psnr_db,ssim\n"));
    // Two clips, the mean and the SSIM retention.
    assert_eq!(eval.lines().count(), 5);

    let student = env.path("a/student.fvae");
    let out = env.ok(
        "e",
        &[
            "eval",
            "--student",
            arg(&student),
            "--weights",
            arg(&teacher),
            "--data",
            arg(&data),
        ],
    );
    assert!(out.contains("PSNR"), "{out}");

    // Phases run one at a time agree with the chained run.
    env.ok("p", &["substitute", "--weights", arg(&teacher)]);
    let sub = env.path("p/student.fvae");
    env.ok(
        "p",
        &[
            "train",
            "--phase",
            "1",
            "--weights",
            arg(&sub),
            "--teacher",
            arg(&teacher),
            "--data",
            arg(&data),
        ],
    );
    assert_eq!(
        std::fs::read(env.path("p/student_p1.fvae")).unwrap(),
        std::fs::read(env.path("a/student_p1.fvae")).unwrap()
    );
}

#[test]
fn analyze_select_and_bench_emit_csv() {
    let env = Env::new();
    env.ok("d", &["gen-data"]);
    let teacher = env.path("d/teacher.fvae");
    let data = env.path("d/dataset.fvae");
    env.ok("a", &["analyze", "--weights", arg(&teacher), "--data", arg(&data)]);
    for stage in ["mid", "up0", "up1", "up2", "up3"] {
        let csv = std::fs::read_to_string(env.path(&format!("a/redundancy_{stage}.csv"))).unwrap();
        assert!(csv.starts_with("index,singular_value,cumulative_ratio,cosine_similarity\n"));
    }
    env.ok(
        "s",
        &[
            "select",
            "--weights",
            arg(&teacher),
            "--data",
            arg(&data),
            "--ratios",
            "up2=1/2",
        ],
    );
    let plan = std::fs::read_to_string(env.path("s/plan.json")).unwrap();
    assert!(plan.contains("up2") && !plan.contains("up3"));
    env.ok(
        "b",
        &[
            "bench",
            "--weights",
            arg(&teacher),
            "--shapes",
            "1x2x2,1x4x4",
            "--repeats",
            "3",
        ],
    );
    let sweep = std::fs::read_to_string(env.path("b/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn prune_ratio_ablation_has_one_row_per_ratio_with_falling_flops() {
    let env = Env::new();
    let out = env.ok("r", &["ablate", "prune_ratio", "--seeds", "1"]);
    let rows: Vec<Vec<String>> = out
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    let ratios: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(ratios, ["1", "1/2", "1/4", "1/8"]);
    let macs: Vec<u64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(macs.windows(2).all(|w| w[1] < w[0]), "{macs:?}");
    assert_eq!(
        std::fs::read_to_string(env.path("r/ablate_prune_ratio.csv")).unwrap(),
        out
    );
}
