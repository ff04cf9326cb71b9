//! Black-box checks of the binary's contract: exit codes, error wording,
//! config-file merging, and the eigendecomposition cache chatter.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

struct Scratch {
    root: PathBuf,
}

impl Scratch {
    fn new(tag: &str) -> Scratch {
        let root = std::env::temp_dir().join(format!("longwave-behavior-{tag}-{}", std::process::id()));
        if root.exists() {
            fs::remove_dir_all(&root).unwrap();
        }
        fs::create_dir_all(&root).unwrap();
        Scratch { root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.root);
    }
}

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_longwave"))
        .args(args)
        .current_dir(cwd)
        .env_remove("LONGWAVE_OUT")
        .output()
        .expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_path_edges(path: &Path, n: usize) {
    let mut text = String::new();
    for i in 0..n - 1 {
        text.push_str(&format!("{} {}\n", i, i + 1));
    }
    fs::write(path, text).unwrap();
}

#[test]
fn missing_graph_flag_is_usage_error() {
    let s = Scratch::new("missing-graph");
    let out = run(&["laplacian", "--out", "o"], &s.root);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("missing required --graph"));
}

#[test]
fn malformed_edge_list_reports_line_number() {
    let s = Scratch::new("bad-edge-list");
    let g = s.path("bad.edges");
    fs::write(&g, "0 1\n1 2\n2 banana\n").unwrap();
    let out = run(&["laplacian", "--graph", "bad.edges", "--out", "o"], &s.root);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(
        stderr_of(&out).contains("line 3"),
        "expected the offending line number, got: {}",
        stderr_of(&out)
    );
}

#[test]
fn k_beyond_node_count_is_usage_error() {
    let s = Scratch::new("k-too-big");
    write_path_edges(&s.path("p.edges"), 6);
    let out = run(
        &["evd", "--graph", "p.edges", "--k", "99", "--out", "o"],
        &s.root,
    );
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("outside [1, 6]"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let s = Scratch::new("bad-config-key");
    write_path_edges(&s.path("p.edges"), 8);
    fs::write(s.path("cfg.json"), r#"{"rho": 4, "rh0": 2}"#).unwrap();
    let out = run(
        &[
            "filter-response",
            "--graph",
            "p.edges",
            "--config",
            "cfg.json",
            "--out",
            "o",
        ],
        &s.root,
    );
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("bad config"));
}

#[test]
fn bad_kernel_specs_are_usage_errors() {
    let s = Scratch::new("bad-kernel");
    write_path_edges(&s.path("p.edges"), 8);
    let base = ["fit-cheb", "--graph", "p.edges", "--out", "o", "--kernel"];

    let mut args = base.to_vec();
    args.push("tophat");
    let out = run(&args, &s.root);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("unknown kernel"));

    let mut args = base.to_vec();
    args.push("mexican:-2");
    let out = run(&args, &s.root);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("must be positive"));

    let mut args = base.to_vec();
    args.push("mexican:eight");
    let out = run(&args, &s.root);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("bad kernel parameter"));
}

#[test]
fn unwritable_out_root_is_runtime_error() {
    let s = Scratch::new("out-is-a-file");
    write_path_edges(&s.path("p.edges"), 8);
    fs::write(s.path("blocker"), "not a directory").unwrap();
    let out = run(
        &["laplacian", "--graph", "p.edges", "--out", "blocker"],
        &s.root,
    );
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("cannot create"));
}

#[test]
fn evd_cache_write_hit_and_unreadable_paths() {
    let s = Scratch::new("evd-cache");
    write_path_edges(&s.path("p.edges"), 12);
    let args = [
        "evd",
        "--graph",
        "p.edges",
        "--k",
        "4",
        "--evd-cache",
        "cache.json",
        "--out",
        "o",
    ];

    let first = run(&args, &s.root);
    assert_eq!(first.status.code(), Some(0), "stderr: {}", stderr_of(&first));
    assert!(stderr_of(&first).contains("evd cache written"));

    let second = run(&args, &s.root);
    assert_eq!(second.status.code(), Some(0));
    assert!(stderr_of(&second).contains("evd cache hit"));

    fs::write(s.path("cache.json"), "{ not json").unwrap();
    let third = run(&args, &s.root);
    assert_eq!(third.status.code(), Some(0), "stderr: {}", stderr_of(&third));
    assert!(stderr_of(&third).contains("evd cache unreadable"));

    // The rewrite must leave a cache the next run can hit again.
    let fourth = run(&args, &s.root);
    assert_eq!(fourth.status.code(), Some(0));
    assert!(stderr_of(&fourth).contains("evd cache hit"));
}

#[test]
fn flags_override_config_file_values() {
    let s = Scratch::new("flag-precedence");
    write_path_edges(&s.path("p.edges"), 10);
    fs::write(s.path("cfg.json"), r#"{"rho": 3, "grid": 64}"#).unwrap();

    // Config alone, config + overriding flag, and flags alone.
    let from_config = run(
        &[
            "filter-response",
            "--graph",
            "p.edges",
            "--config",
            "cfg.json",
            "--out",
            "a",
        ],
        &s.root,
    );
    let overridden = run(
        &[
            "filter-response",
            "--graph",
            "p.edges",
            "--config",
            "cfg.json",
            "--rho",
            "5",
            "--out",
            "b",
        ],
        &s.root,
    );
    let flags_only = run(
        &[
            "filter-response",
            "--graph",
            "p.edges",
            "--rho",
            "5",
            "--grid",
            "64",
            "--out",
            "c",
        ],
        &s.root,
    );
    for out in [&from_config, &overridden, &flags_only] {
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(out));
    }

    let run_dir = |root: &str| {
        let mut dirs: Vec<PathBuf> = fs::read_dir(s.path(root))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        assert_eq!(dirs.len(), 1, "one run directory under {root}");
        dirs.pop().unwrap()
    };
    let (a, b, c) = (run_dir("a"), run_dir("b"), run_dir("c"));

    // The resolved config, and therefore the hash-named directory and the
    // stamped CSV, must be identical whether rho=5 came from a flag over a
    // config file or from flags alone; the config-only run must differ.
    assert_eq!(b.file_name(), c.file_name());
    assert_ne!(a.file_name(), b.file_name());
    let read = |d: &Path| fs::read(d.join("response.csv")).unwrap();
    assert_eq!(read(&b), read(&c));
    assert_ne!(read(&a), read(&b));
}
