use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_collapse-lab"));
    c.env_remove("COLLAPSE_LAB_SEED").env_remove("COLLAPSE_LAB_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn list_shows_every_family() {
    let o = run(&["--list"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for family in ["collapse", "separator", "threshold", "tv", "squash", "limit-case", "counting"] {
        assert!(text.lines().any(|l| l.starts_with(family)), "missing {family}");
    }
}

#[test]
fn collapse_csv_is_deterministic() {
    let args = ["collapse", "run", "--preset", "digits", "--pe", "rope", "--lengths", "4..16", "--seeds", "2", "--d", "8"];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    assert_eq!(text.lines().next(), Some("experiment,preset,pe,precision,n,seed,l1,linf"));
    assert_eq!(text.lines().count(), 1 + 3 * 2);
}

#[test]
fn thread_count_does_not_change_output() {
    let args = ["collapse", "run", "--preset", "gaussian", "--lengths", "4..64", "--seeds", "3", "--d", "8"];
    let one = bin().args(args).env("COLLAPSE_LAB_THREADS", "1").output().unwrap();
    let many = bin().args(args).env("COLLAPSE_LAB_THREADS", "4").output().unwrap();
    assert!(one.status.success());
    assert_eq!(one.stdout, many.stdout);
}

#[test]
fn seed_env_and_flag_precedence() {
    let base = ["collapse", "run", "--lengths", "4", "--seeds", "1", "--d", "8"];
    let env = bin().args(base).env("COLLAPSE_LAB_SEED", "7").output().unwrap();
    assert!(stdout(&env).lines().nth(1).unwrap().contains(",4,7,"));
    let flag = bin().args(base).args(["--seed", "3"]).env("COLLAPSE_LAB_SEED", "7").output().unwrap();
    assert!(stdout(&flag).lines().nth(1).unwrap().contains(",4,3,"));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lab.conf");
    std::fs::write(&cfg, "# sweep\npreset = digits\nlengths = 4,8\nseeds = 1\nd = 8\n").unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "collapse", "run", "--lengths", "16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("collapse,digits,nope,f64,16,0,"));
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["collapse", "run", "--lengths", "0..4"]).status.code(), Some(1));
    assert_eq!(run(&["collapse", "run", "--preset", "commaz"]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let o = run(&["collapse", "run", "--preset", "bogus"]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("ones") && err.contains("gaussian"));
}

#[test]
fn outputs_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("curves/c.csv");
    let svg = dir.path().join("c.svg");
    let o = run(&[
        "collapse", "run", "--pe", "nope,rope", "--preset", "ones", "--lengths", "4..32", "--seeds", "2", "--d", "8",
        "--out", csv.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let o = run(&["plot", "--input", csv.to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("<polyline").count(), 2);
}

#[test]
fn squash_and_counting_commands() {
    let o = run(&["squash", "profile", "--n", "5", "--d", "8"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().next(), Some("token_index,measured_norm,bound_value"));
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        assert!(v[0] <= v[1] * (1.0 + 1e-9));
    }
    assert!(run(&["squash", "bound-check", "--instances", "5", "--d", "8"]).status.success());
    let o = run(&["limit-case", "--n", "8"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("converged at"));
    let o = run(&["counting", "ratio-check", "--d", "8"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 1 + 9);
}

#[test]
fn tv_commands() {
    let o = run(&["tv", "--lengths", "1000,10000", "--seeds", "2"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 5);
    assert_eq!(run(&["alt-tv", "--lengths", "3"]).status.code(), Some(1));
}
