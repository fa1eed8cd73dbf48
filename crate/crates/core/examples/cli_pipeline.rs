//! The command line pipeline driven in-process: gen-data, train, eval,
//! retrieve, explain and gradcheck in a temporary directory.
//!
//! cargo run --release --example cli_pipeline -- [workdir]

use std::path::PathBuf;

use condmatch::cli;

fn main() {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("condmatch-demo"), PathBuf::from);
    let p = |rel: &str| dir.join(rel).to_string_lossy().into_owned();
    let steps: Vec<Vec<String>> = vec![
        vec![
            "gen-data".into(),
            "--out".into(),
            p("data"),
            "--pairs".into(),
            "32".into(),
            "--test-pairs".into(),
            "8".into(),
        ],
        vec![
            "train".into(),
            "--data".into(),
            p("data/train.json"),
            "--out".into(),
            p("run"),
            "--epochs".into(),
            "5".into(),
            "--d-e".into(),
            "16".into(),
            "--batch-pairs".into(),
            "8".into(),
        ],
        vec![
            "eval".into(),
            "--data".into(),
            p("data/test.json"),
            "--checkpoint".into(),
            p("run/checkpoint.ckpt"),
            "--out".into(),
            p("eval.json"),
        ],
        vec![
            "retrieve".into(),
            "--data".into(),
            p("data/test.json"),
            "--checkpoint".into(),
            p("run/checkpoint.ckpt"),
            "--query".into(),
            "pair-0024".into(),
            "--top".into(),
            "3".into(),
        ],
        vec![
            "explain".into(),
            "--data".into(),
            p("data/test.json"),
            "--checkpoint".into(),
            p("run/checkpoint.ckpt"),
            "--video".into(),
            "pair-0024".into(),
            "--out".into(),
            p("explain.json"),
            "--heatmap".into(),
            p("heat"),
        ],
        vec!["gradcheck".into()],
    ];
    for args in steps {
        println!("$ condmatch {}", args.join(" "));
        let code = cli::run(std::iter::once("condmatch".to_string()).chain(args));
        if code != 0 {
            eprintln!("step failed with exit code {code}");
            std::process::exit(code);
        }
    }
    println!("outputs in {}", dir.display());
}
