use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use quick_xml::events::Event;
use quick_xml::Reader;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_laptsne"));
    c.env_remove("LAPTSNE_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Three well separated 5-D groups of 20 points with a trailing class column.
fn blobs_csv(dir: &Path) -> PathBuf {
    let mut text = String::from("f1,f2,f3,f4,f5,class\n");
    for c in 0..3 {
        for i in 0..20 {
            let cells: Vec<String> = (0..5)
                .map(|j| {
                    let noise = ((i * 31 + j * 17 + c * 7) as f64 * 0.618).sin();
                    format!("{}", 15.0 * c as f64 * ((j + 1) as f64).sqrt() + noise)
                })
                .collect();
            text.push_str(&format!("{},{c}\n", cells.join(",")));
        }
    }
    let p = dir.join("blobs.csv");
    std::fs::write(&p, text).unwrap();
    p
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// Parse the whole document; returns the number of `circle` elements.
fn check_svg(path: &Path) -> usize {
    let text = std::fs::read_to_string(path).unwrap();
    let mut reader = Reader::from_str(&text);
    let mut circles = 0;
    let mut depth = 0i64;
    loop {
        match reader
            .read_event()
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        {
            Event::Eof => break,
            Event::Start(_) => depth += 1,
            Event::End(_) => depth -= 1,
            Event::Empty(e) if e.name().as_ref() == b"circle" => circles += 1,
            _ => {}
        }
    }
    assert_eq!(depth, 0, "{} has unbalanced tags", path.display());
    circles
}

#[test]
fn embed_is_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let input = blobs_csv(tmp.path());
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for out in [&a, &b] {
        let o = run(&[
            "embed",
            "--input",
            arg(&input),
            "--labels-col",
            "class",
            "--seed",
            "7",
            "--iters",
            "120",
            "--out-dir",
            arg(out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ea = std::fs::read(a.join("embedding.csv")).unwrap();
    assert_eq!(ea, std::fs::read(b.join("embedding.csv")).unwrap());

    // Rerunning from the recorded configuration gives the same content hash.
    let m = manifest(&a);
    let o = run(&[
        "embed",
        "--input",
        arg(&input),
        "--labels-col",
        "class",
        "--config",
        arg(&a.join("manifest.json")),
        "--out-dir",
        arg(&c),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        manifest(&c)["results"]["embedding_sha256"],
        m["results"]["embedding_sha256"]
    );
    assert_eq!(ea, std::fs::read(c.join("embedding.csv")).unwrap());

    assert_eq!(m["command"], "embed");
    assert_eq!(m["config"]["run"]["seed"], 7);
    assert_eq!(m["dataset"]["rows"], 60);
    assert_eq!(m["dataset"]["cols"], 5);
    assert_eq!(m["results"]["k_hat"], 3);
    let header = String::from_utf8_lossy(&ea).lines().next().unwrap().to_string();
    assert_eq!(header, "y1,y2,label");
    assert_eq!(check_svg(&a.join("embedding.svg")), 60);
    check_svg(&a.join("eigenvalues_x.svg"));
}

#[test]
fn embed_modes_and_trace() {
    let tmp = TempDir::new().unwrap();
    let input = blobs_csv(tmp.path());
    let mb = tmp.path().join("mb");
    let o = run(&[
        "embed",
        "--input",
        arg(&input),
        "--labels-col",
        "last",
        "--mode",
        "minibatch",
        "--batch-size",
        "12",
        "--kappa",
        "3",
        "--iters",
        "40",
        "--trace",
        "--out-dir",
        arg(&mb),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(mb.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 41);
    assert_eq!(manifest(&mb)["results"]["batch_size"], 12);

    let lm = tmp.path().join("lm");
    let o = run(&[
        "embed",
        "--input",
        arg(&input),
        "--labels-col",
        "class",
        "--mode",
        "landmark",
        "--landmarks",
        "30",
        "--perplexity",
        "10",
        "--iters",
        "60",
        "--out-dir",
        arg(&lm),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(lm.join("regressor.bin").exists());
    let rows = std::fs::read_to_string(lm.join("embedding.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 61);
    assert_eq!(
        std::fs::read_to_string(lm.join("landmarks.txt"))
            .unwrap()
            .lines()
            .count(),
        30
    );

    let g = tmp.path().join("g");
    let o = run(&[
        "embed",
        "--input",
        arg(&input),
        "--kernel",
        "gaussian",
        "--sigma",
        "2",
        "--khat",
        "3",
        "--dim",
        "3",
        "--momentum",
        "0.5",
        "--lr",
        "50",
        "--iters",
        "20",
        "--out-dir",
        arg(&g),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!g.join("embedding.svg").exists());
    assert!(manifest(&g)["metrics"].is_null());
}

#[test]
fn estimate_k_prints_group_count() {
    let tmp = TempDir::new().unwrap();
    let input = blobs_csv(tmp.path());
    let out = tmp.path().join("k");
    let o = run(&[
        "estimate-k",
        "--input",
        arg(&input),
        "--labels-col",
        "class",
        "--out-dir",
        arg(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "3");
    assert_eq!(manifest(&out)["results"]["k_hat"], 3);
    assert_eq!(
        std::fs::read_to_string(out.join("eigenvalues_x.csv"))
            .unwrap()
            .lines()
            .count(),
        50
    );
}

#[test]
fn evaluate_writes_all_metrics() {
    let tmp = TempDir::new().unwrap();
    let input = blobs_csv(tmp.path());
    let e = tmp.path().join("e");
    assert_eq!(
        code(&run(&[
            "embed",
            "--input",
            arg(&input),
            "--labels-col",
            "class",
            "--iters",
            "150",
            "--out-dir",
            arg(&e)
        ])),
        0
    );
    let v = tmp.path().join("v");
    let o = run(&[
        "evaluate",
        "--embedding",
        arg(&e.join("embedding.csv")),
        "--knn",
        "1,10",
        "--out-dir",
        arg(&v),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&v);
    let metrics = &m["metrics"];
    for key in ["knn", "nmi", "silhouette", "davies_bouldin"] {
        assert!(!metrics[key].is_null(), "missing {key}");
    }
    assert_eq!(metrics["knn"]["10"], 1.0);
    assert_eq!(metrics["nmi"], 1.0);
    assert_eq!(metrics["kmeans_k"], 3);
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(&printed, metrics);
}

#[test]
fn plot_subcommand() {
    let tmp = TempDir::new().unwrap();
    let vals = tmp.path().join("vals.txt");
    std::fs::write(&vals, "0\n0\n1e-9\n0.4\n0.5\n0.55\n").unwrap();
    let out = tmp.path().join("p");
    let o = run(&["plot", "--eigenvalues", arg(&vals), "--out-dir", arg(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    check_svg(&out.join("eigenvalues.svg"));
    assert_eq!(manifest(&out)["config"]["khat"], 3);

    let emb = tmp.path().join("emb.csv");
    std::fs::write(&emb, "y1,y2,label\n0,0,0\n1,1,1\n2,0,1\n").unwrap();
    let o = run(&[
        "plot",
        "--embedding",
        arg(&emb),
        "--labels-col",
        "label",
        "--out-dir",
        arg(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(check_svg(&out.join("embedding.svg")), 3);

    assert_eq!(code(&run(&["plot", "--out-dir", arg(&out)])), 2);
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let input = blobs_csv(tmp.path());
    let out = tmp.path().join("x");

    let o = run(&["embed", "--input", arg(&input), "--no-such-flag"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["--help"])), 0);

    assert_eq!(
        code(&run(&[
            "embed",
            "--input",
            arg(&input),
            "--lambda",
            "-1",
            "--out-dir",
            arg(&out)
        ])),
        2
    );
    assert_eq!(
        code(&run(&[
            "embed",
            "--input",
            arg(&input),
            "--perplexity",
            "500",
            "--out-dir",
            arg(&out)
        ])),
        2
    );
    assert_eq!(
        code(&run(&[
            "embed",
            "--input",
            arg(&input),
            "--momentum",
            "1.5",
            "--out-dir",
            arg(&out)
        ])),
        2
    );
    assert_eq!(
        code(&run(&[
            "embed",
            "--input",
            arg(&tmp.path().join("missing.csv")),
            "--out-dir",
            arg(&out)
        ])),
        3
    );

    let ragged = tmp.path().join("ragged.csv");
    std::fs::write(&ragged, "1,2,3\n4,5,6\n7,8\n").unwrap();
    let o = run(&["embed", "--input", arg(&ragged), "--out-dir", arg(&out)]);
    assert_eq!(code(&o), 2);
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("line 3"),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );

    let o = bin()
        .args(["estimate-k", "--input", arg(&input), "--out-dir", arg(&out)])
        .env("LAPTSNE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    let o = bin()
        .args([
            "estimate-k",
            "--input",
            arg(&input),
            "--labels-col",
            "class",
            "--out-dir",
            arg(&out),
        ])
        .env("LAPTSNE_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
}

#[test]
fn estimate_k_on_digits() {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/digits.csv");
    let tmp = TempDir::new().unwrap();
    let o = run(&[
        "estimate-k",
        "--input",
        arg(&data),
        "--labels-col",
        "last",
        "--out-dir",
        arg(tmp.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "11");
}
