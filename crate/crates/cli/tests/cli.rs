use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fastsir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fastsir"))
        .args(args)
        .output()
        .unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

/// Path 1-2-3-4 written with sparse ids, plus a triangle hanging off 4.
fn write_network(dir: &Path) -> String {
    let path = dir.join("net.txt");
    fs::write(
        &path,
        "101 102\n102 103\n103 104\n104 105\n105 106\n106 104\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_a_single_cell_csv() {
    let dir = tempfile::tempdir().unwrap();
    let net = write_network(dir.path());
    let out = dir.path().join("run.csv");
    let result = fastsir(&[
        "run",
        "--network",
        &net,
        "--p",
        "1",
        "--q",
        "0.5",
        "--reps",
        "50",
        "--seed-node",
        "101",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(result.status.success(), "{}", text(&result.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.contains("# seed_nodes: 101"));
    assert!(csv.contains("# master_seed: 0"));
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "p,q,algorithm,reps,mean_infected,std_infected,mean_duration,wall_seconds,ratio_naive_over_fast");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("1,0.5,naive,50,6,0,"));
    assert!(rows[2].starts_with("1,0.5,fast,50,6,0,"));
}

#[test]
fn run_rejects_grids_and_unknown_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let net = write_network(dir.path());
    let grid = fastsir(&[
        "run",
        "--network",
        &net,
        "--p-grid",
        "0.1:0.3:0.1",
        "--q",
        "0.5",
    ]);
    assert_eq!(grid.status.code(), Some(2));
    let seed = fastsir(&[
        "run",
        "--network",
        &net,
        "--p",
        "0.5",
        "--q",
        "0.5",
        "--seed-node",
        "7",
    ]);
    assert_eq!(seed.status.code(), Some(2));
    assert!(text(&seed.stderr).contains("seed node 7"));
    let missing = fastsir(&[
        "run",
        "--network",
        "/nonexistent",
        "--p",
        "0.5",
        "--q",
        "0.5",
    ]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn sweep_is_deterministic_and_writes_histograms() {
    let dir = tempfile::tempdir().unwrap();
    let net = write_network(dir.path());
    let sweep = |name: &str| {
        let out = dir.path().join(name);
        let hist = dir.path().join(format!("{name}.hist"));
        let result = fastsir(&[
            "sweep",
            "--network",
            &net,
            "--p-grid",
            "0.2:0.8:0.3",
            "--q-grid",
            "0.5:1.0:0.5",
            "--reps",
            "300",
            "--rng-seed",
            "17",
            "--algorithm",
            "fast",
            "--out",
            out.to_str().unwrap(),
            "--histogram",
            hist.to_str().unwrap(),
        ]);
        assert!(result.status.success(), "{}", text(&result.stderr));
        let strip: Vec<String> = fs::read_to_string(out)
            .unwrap()
            .lines()
            .map(|l| l.split(',').take(7).collect::<Vec<_>>().join(","))
            .collect();
        (strip, fs::read_to_string(hist).unwrap())
    };
    let (a, ha) = sweep("a.csv");
    let (b, hb) = sweep("b.csv");
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert_eq!(
        a.iter()
            .filter(|l| l.starts_with("0.") && l.contains(",fast,"))
            .count(),
        6
    );
    assert!(ha.starts_with("p,q,algorithm,size,count\n"));
}

#[test]
fn sweep_with_cache_directory_and_hybrid() {
    let dir = tempfile::tempdir().unwrap();
    let net = write_network(dir.path());
    let cache = dir.path().join("cache");
    for _ in 0..2 {
        let result = fastsir(&[
            "sweep",
            "--network",
            &net,
            "--p-grid",
            "0.5",
            "--q-grid",
            "0.5",
            "--reps",
            "40",
            "--algorithm",
            "hybrid",
            "--dist-cache",
            cache.to_str().unwrap(),
        ]);
        assert!(result.status.success(), "{}", text(&result.stderr));
        assert!(text(&result.stdout).contains(",hybrid:"));
    }
    assert_eq!(fs::read_dir(&cache).unwrap().count(), 1);
}

#[test]
fn precalc_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("table.fsir");
    let ok = fastsir(&[
        "precalc",
        "--p",
        "0.5",
        "--q",
        "0.5",
        "--k-max",
        "200",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(ok.status.success(), "{}", text(&ok.stderr));
    assert!(text(&ok.stdout).contains("degrees 0..=200"));
    let bytes = fs::read(&out).unwrap();
    assert_eq!(&bytes[..4], b"FSIR");

    let net = write_network(dir.path());
    let run = fastsir(&[
        "run",
        "--network",
        &net,
        "--p",
        "0.5",
        "--q",
        "0.5",
        "--reps",
        "20",
        "--algorithm",
        "fast",
        "--dist-cache",
        out.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", text(&run.stderr));
    let mismatch = fastsir(&[
        "run",
        "--network",
        &net,
        "--p",
        "0.4",
        "--q",
        "0.5",
        "--reps",
        "20",
        "--algorithm",
        "fast",
        "--dist-cache",
        out.to_str().unwrap(),
    ]);
    assert_eq!(mismatch.status.code(), Some(2));

    let zero = fastsir(&[
        "precalc",
        "--p",
        "0.5",
        "--q",
        "0.5",
        "--k-max",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(zero.status.code(), Some(2));
    let from_net = fastsir(&[
        "precalc",
        "--p",
        "0.5",
        "--q",
        "0.5",
        "--network",
        &net,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(text(&from_net.stdout).contains("degrees 0..=3"));
}

#[test]
fn verify_exit_codes() {
    let ok = fastsir(&["verify", "sampling"]);
    assert!(ok.status.success(), "{}", text(&ok.stdout));
    assert!(text(&ok.stdout).contains("0 failed"));
    let bad = fastsir(&[
        "verify",
        "equivalence",
        "--reps",
        "20000",
        "--corrupt-cdf-for-testing",
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(text(&bad.stdout).contains("FAIL"));
    let unknown = fastsir(&["verify", "everything"]);
    assert_eq!(unknown.status.code(), Some(2));
}
