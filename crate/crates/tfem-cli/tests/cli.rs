//! CLI contract tests: golden-file output of a fixed-seed mini sweep, exit
//! codes with machine-readable stderr, instance round-trips, and the
//! qualitative separation trend of the delta sweep.

use std::process::Command;
use tfem::gmm::GmmInstance;

fn tfem_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tfem"))
}

#[test]
fn golden_mini_sweep() {
    let dir = tempfile::tempdir().expect("tempdir");
    let status = tfem_bin()
        .args([
            "sweep", "--seed", "17", "--variable", "delta", "--grid", "2,6", "--k", "2", "--d",
            "4", "--per-cluster", "8", "--seeds", "2", "--m-heads", "64", "--arms", "lloyd,tf",
        ])
        .arg("--out")
        .arg(dir.path())
        .status()
        .expect("spawn");
    assert!(status.success());
    let got = std::fs::read_to_string(dir.path().join("results/sweep_delta.csv")).expect("csv");
    let want = include_str!("golden/sweep_delta.csv");
    assert_eq!(got, want, "mini-sweep CSV deviates from the golden file");
}

#[test]
fn exit_codes_and_machine_readable_errors() {
    // invalid configuration -> exit 2
    let out = tfem_bin()
        .args(["sweep", "--seed", "1", "--variable", "bogus", "--grid", "1"])
        .output()
        .expect("spawn");
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.lines().any(|l| l.starts_with("{\"error\":\"invalid_config\"")),
        "stderr not machine-readable: {err}"
    );

    // infeasible construction (k >= d) -> exit 3
    let dir = tempfile::tempdir().expect("tempdir");
    let out = tfem_bin()
        .args(["run", "--seed", "1", "--k", "4", "--d", "4", "--per-cluster", "10", "--m-heads", "64"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .expect("spawn");
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.lines().any(|l| l.starts_with("{\"error\":\"infeasible_construction\"")));

    // unwritable output directory -> exit 4
    let file = tempfile::NamedTempFile::new().expect("tempfile");
    let out = tfem_bin()
        .args(["gen", "--seed", "1"])
        .arg("--out")
        .arg(file.path()) // a plain file cannot become the output tree
        .output()
        .expect("spawn");
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.lines().any(|l| l.starts_with("{\"error\":\"io\"")));

    // missing --seed is a usage error (clap) -> exit 2
    let out = tfem_bin().args(["gen"]).output().expect("spawn");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_instances_round_trip() {
    let dir = tempfile::tempdir().expect("tempdir");
    let status = tfem_bin()
        .args(["gen", "--seed", "7", "--k", "3", "--d", "4", "--per-cluster", "6", "--count", "2"])
        .arg("--out")
        .arg(dir.path())
        .status()
        .expect("spawn");
    assert!(status.success());
    for seed in [7u64, 8] {
        let path = dir.path().join(format!("instances/instance_seed{seed}.csv"));
        let f = std::fs::File::open(&path).expect("instance file");
        let inst = GmmInstance::read_csv(&mut std::io::BufReader::new(f)).expect("parse");
        assert_eq!((inst.k, inst.d, inst.n(), inst.seed), (3, 4, 18, seed));
        // data survives the round trip bit-exactly
        let reference =
            tfem::gmm::generate_instance(3, 4, 6, 4.0, 1.0, 1.0 / 3.0, seed).expect("regen");
        assert_eq!(inst.x.data(), reference.x.data());
        assert_eq!(inst.z, reference.z);
    }
}

#[test]
fn delta_sweep_ari_non_decreasing() {
    let dir = tempfile::tempdir().expect("tempdir");
    let status = tfem_bin()
        .args([
            "sweep", "--seed", "23", "--variable", "delta", "--grid", "1,2,4,8", "--k", "2",
            "--d", "4", "--per-cluster", "20", "--sigma", "1", "--seeds", "5", "--m-heads",
            "128", "--arms", "lloyd,tf",
        ])
        .arg("--out")
        .arg(dir.path())
        .status()
        .expect("spawn");
    assert!(status.success());
    let agg =
        std::fs::read_to_string(dir.path().join("results/sweep_delta_agg.csv")).expect("agg csv");
    for arm in ["lloyd", "tf"] {
        let mut prev = f64::NEG_INFINITY;
        let mut rows = 0;
        for line in agg.lines().skip(1) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells[1] != arm {
                continue;
            }
            let ari: f64 = cells[4].parse().expect("ari_mean");
            assert!(
                ari >= prev - 1e-12,
                "{arm}: mean ARI decreased across the delta grid: {prev} -> {ari}\n{agg}"
            );
            prev = ari;
            rows += 1;
        }
        assert_eq!(rows, 4);
    }
}
