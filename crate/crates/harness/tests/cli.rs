use std::path::Path;
use std::process::{Command, Output};

use itap_harness::checkpoint::Checkpoint;
use itap_harness::dataset::Dataset;

const TINY: &str = "width = 16\nheads = 2\nlayers = 1\nffn = 32\nlatent_dim = 4\ncodebook_size = 8\n\
prior_width = 16\nprior_heads = 2\nprior_layers = 1\nprior_ffn = 32\nhead_width = 16\nhead_layers = 1\n\
rqvae_steps = 4\nprior_steps = 4\nbatch_size = 4\nmax_steps = 12\ncoarse_samples = 4\niterations = 10\n";

fn itap(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_itap"))
        .args(args)
        .current_dir(dir)
        .env_remove("ITAP_SEED")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_writes_requested_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let o = itap(
        &["gen-data", "--regimes", "0,2.5,5", "--episodes", "50", "--out", "d.itap"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    // Default tiers are expert and medium: 50 episodes per regime and tier.
    let ds = Dataset::read(&dir.path().join("d.itap")).unwrap();
    assert_eq!(ds.episodes.len(), 3 * 2 * 50);

    std::fs::write(dir.path().join("one.cfg"), "tiers = expert\n").unwrap();
    let o = itap(
        &["gen-data", "--config", "one.cfg", "--regimes", "0,2.5,5", "--episodes", "50", "--out", "e.itap"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(Dataset::read(&dir.path().join("e.itap")).unwrap().episodes.len(), 150);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = itap(&["eval"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--checkpoint"), "{}", stderr(&o));

    let o = itap(&["gen-data", "--bogus", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));

    let o = itap(&["gen-data"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--out"));

    std::fs::write(dir.path().join("bad.cfg"), "colour = red\n").unwrap();
    let o = itap(&["gen-data", "--config", "bad.cfg", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn format_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.bin"), b"not a dataset at all").unwrap();
    let o = itap(&["inspect", "junk.bin"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = itap(&["train-rqvae", "--data", "junk.bin", "--out", "r.ck"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = itap(&["inspect", "missing.bin"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_flag_beats_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str], env_seed: Option<&str>, out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_itap"));
        cmd.args(args).args(["--episodes", "2", "--out", out]).current_dir(dir.path());
        match env_seed {
            Some(s) => cmd.env("ITAP_SEED", s),
            None => cmd.env_remove("ITAP_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        std::fs::read(dir.path().join(out)).unwrap()
    };
    let both = run(&["gen-data", "--seed", "7"], Some("9"), "a.itap");
    let flag = run(&["gen-data", "--seed", "7"], None, "b.itap");
    let env = run(&["gen-data"], Some("9"), "c.itap");
    assert_eq!(both, flag);
    assert_ne!(both, env);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("tiny.cfg"), TINY).unwrap();
    let ok = |args: &[&str]| {
        let o = itap(args, p);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };
    ok(&["gen-data", "--config", "tiny.cfg", "--episodes", "2", "--out", "d.itap"]);
    ok(&["train-rqvae", "--config", "tiny.cfg", "--data", "d.itap", "--out", "r.ck", "--curve", "curve.csv"]);
    let curve = std::fs::read_to_string(p.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 5);

    let o = itap(&["eval", "--checkpoint", "r.ck"], p);
    assert_eq!(o.status.code(), Some(2), "tokenizer-only checkpoint has no prior");

    ok(&["train-prior", "--data", "d.itap", "--checkpoint", "r.ck", "--out", "p.ck"]);
    let ckpt = Checkpoint::read(&p.join("p.ck")).unwrap();
    assert!(ckpt.prior.is_some());
    assert_eq!(ckpt.config.codebook_size, 8);

    let eval = ["eval", "--checkpoint", "p.ck", "--seeds", "2", "--episodes", "3", "--horizon", "1"];
    ok(&[&eval[..], &["--out", "r1.txt"]].concat());
    ok(&[&eval[..], &["--out", "r2.txt"]].concat());
    let r1 = std::fs::read(p.join("r1.txt")).unwrap();
    assert_eq!(r1, std::fs::read(p.join("r2.txt")).unwrap());
    let text = String::from_utf8(r1).unwrap();
    assert!(text.contains("episodes: 6 (2 seeds x 3)"));
    assert!(text.contains("horizon = 1"), "report carries the resolved config");
    let csv = std::fs::read_to_string(p.join("r1.txt.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);

    let o = itap(&["eval", "--checkpoint", "p.ck", "--depth", "3"], p);
    assert_eq!(o.status.code(), Some(1));

    let table = ok(&[
        "bench-latency", "--checkpoint", "p.ck", "--contexts", "1,3", "--horizons", "1", "--calls", "2", "--out", "b.txt",
    ]);
    assert_eq!(table.lines().count(), 3);
    assert_eq!(std::fs::read_to_string(p.join("b.txt.csv")).unwrap().lines().count(), 3);

    let summary = ok(&["inspect", "p.ck"]);
    assert!(summary.contains("block prior"));
    assert!(ok(&["inspect", "d.itap"]).contains("12 episodes"));
}
