//! The command-line workflow run in-process: demo data, a query, and an
//! evaluation report. Equivalent to invoking the `glyphdict` binary.

fn run(args: &[&str]) {
    println!("$ {}", args.join(" "));
    let code = glyphdict::cli::run(args.iter().copied(), &mut std::io::stdout(), &mut std::io::stderr());
    assert_eq!(code, 0, "{args:?} exited with {code}");
}

fn main() {
    let root = "target/example-cli";
    let dict = format!("{root}/dictionary");
    run(&["glyphdict", "make-demo", "--out", root, "--k", "2", "--queries-per-label", "2"]);
    let manifest = std::fs::read_to_string(format!("{root}/queries/manifest.tsv")).unwrap();
    let image = manifest.lines().nth(1).unwrap().split('\t').next().unwrap();
    run(&["glyphdict", "query", "--dict", &dict, "--image", &format!("{root}/queries/{image}"), "--n", "5"]);
    run(&[
        "glyphdict", "eval", "--dict", &dict, "--queries", &format!("{root}/queries"), "--resamples", "200",
        "--out", &format!("{root}/eval/report.json"), "--svg",
    ]);
}
