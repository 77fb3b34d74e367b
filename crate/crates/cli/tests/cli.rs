use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gradsuggest"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "budget = [2]\nrepeats = 2\nepochs_initial = 1\nepochs_after = 1\nvae_epochs = 1\n\
train_patients = 4\ntest_patients = 2\nslices = 2\nheight = 16\nwidth = 16\n";

#[test]
fn version_names_the_formats() {
    let o = bin().arg("--version").output().unwrap();
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains(env!("CARGO_PKG_VERSION")) && text.contains("GGAS v1") && text.contains("GGMD v1"));
}

#[test]
fn gen_data_writes_one_file_per_slice() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen-data", "--out", "d/", "--patients", "3", "--slices", "4", "--site", "A", "--seed", "7"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let names: Vec<String> = std::fs::read_dir(dir.path().join("d"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".ggs")).count(), 12);
    assert!(names.contains(&"manifest.json".to_string()));
    // resolved options, defaults included, go to stderr
    assert!(stderr(&o).contains("height = 32"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["frobnicate"],
        vec!["gen-data", "--out", "d", "--colour", "red"],
        vec!["gen-data"],
        vec!["gen-data", "--out", "d", "--site", "C"],
        vec!["run", "--repeats", "x"],
        vec!["run", "--budget", "3"],
    ] {
        let o = run(&args, dir.path());
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
    }
    assert_eq!(code(&run(&[], dir.path())), 2);
}

#[test]
fn suggesting_beyond_the_pool_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&run(&["gen-data", "--out", "d", "--patients", "1", "--slices", "3", "--height", "16", "--width", "16"], p)), 0);
    let o = run(&["suggest", "--method", "gradient", "--m", "5", "--data", "d", "--strategy", "image"], p);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("pool exhausted"), "{}", stderr(&o));
    assert_eq!(code(&run(&["suggest", "--method", "random", "--m", "1", "--data", "missing"], p)), 1);
}

#[test]
fn train_and_suggest_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let ok = |args: &[&str]| {
        let o = run(args, p);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        o
    };
    ok(&["gen-data", "--out", "d", "--patients", "5", "--slices", "2", "--height", "16", "--width", "16", "--seed", "2"]);
    let before: Vec<Vec<u8>> = ["d/manifest.json", "d/A000_0.ggs"].iter().map(|f| std::fs::read(p.join(f)).unwrap()).collect();
    let vae = ok(&["train-vae", "--data", "d", "--out", "vae.ggmd", "--epochs", "2"]);
    assert_eq!(String::from_utf8(vae.stdout).unwrap().lines().count(), 3);
    std::fs::write(p.join("ann.txt"), "# seed set\nA000\nA001\n").unwrap();
    ok(&["train-seg", "--data", "d", "--ids", "ann.txt", "--out", "seg.ggmd", "--epochs", "1"]);
    for method in ["random", "oracle", "gradient"] {
        let args = [
            "suggest", "--method", method, "--m", "2", "--data", "d", "--annotated", "ann.txt", "--seg", "seg.ggmd",
            "--vae", "vae.ggmd",
        ];
        let a = ok(&args).stdout;
        assert_eq!(a, ok(&args).stdout);
        let text = String::from_utf8(a).unwrap();
        let ids: Vec<&str> = text.lines().skip(1).collect();
        assert!(text.starts_with(&format!("# method={method}")));
        assert_eq!(ids.len(), 2);
        assert!(ids.iter().all(|id| ["A002", "A003", "A004"].contains(id)), "{ids:?}");
    }
    // the VAE checkpoint is not a segmenter
    let o = run(&["suggest", "--method", "oracle", "--m", "1", "--data", "d", "--seg", "vae.ggmd"], p);
    assert_eq!(code(&o), 2);
    let after: Vec<Vec<u8>> = ["d/manifest.json", "d/A000_0.ggs"].iter().map(|f| std::fs::read(p.join(f)).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("c.txt"), SMALL).unwrap();
    let o = run(&["run", "--config", "c.txt", "--out", "r", "--seed", "4", "-q"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // flags win over the file and the full config is echoed
    assert!(stderr(&o).contains("seed = 4") && stderr(&o).contains("theta_max = 45"));
    let csv = std::fs::read_to_string(p.join("r/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    assert!(p.join("r/chart_scratch_patient.svg").is_file());

    let o = run(&["report", "--csv", "r/report.csv", "--out", "again"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert_eq!(table.lines().count(), 1 + 3);
    assert_eq!(std::fs::read_to_string(p.join("again/report.csv")).unwrap(), csv);
}
