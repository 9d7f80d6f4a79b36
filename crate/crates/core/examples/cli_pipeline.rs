// The `fdspg` command line driven in-process: generate data, train, evaluate,
// sweep and merge reports.
//
// ```sh
// cargo run --example cli_pipeline
// ```
// The same steps from a shell:
// ```sh
// export FDSPG_OUT=runs
// fdspg gen-data
// fdspg train --dataset runs/dataset --set epochs=2 --set gan-epochs=2
// fdspg eval --checkpoint runs/train
// fdspg sweep --axis alpha --values 0.2,1.0 --set epochs=2 --set gan-epochs=2
// fdspg report runs/sweep-alpha.csv --name merged.csv
// ```

use std::path::PathBuf;

use feddspg::cli;

pub fn run_example() -> feddspg::Result<PathBuf> {
    let out = std::env::temp_dir().join(format!("fdspg-cli-{}", std::process::id()));
    let o = out.to_str().unwrap();
    let data = out.join("dataset");
    let ckpt = out.join("train");
    let sweep = out.join("sweep-alpha.csv");
    let small = ["--set", "epochs=2", "--set", "gan-epochs=2"];
    let steps: Vec<Vec<&str>> = vec![
        vec!["gen-data", "--force"],
        [
            &["train", "--force", "--dataset", data.to_str().unwrap()][..],
            &small,
        ]
        .concat(),
        vec!["eval", "--checkpoint", ckpt.to_str().unwrap()],
        [
            &[
                "sweep",
                "--axis",
                "alpha",
                "--values",
                "0.2,1.0",
                "--dataset",
                data.to_str().unwrap(),
            ][..],
            &small,
        ]
        .concat(),
        vec!["report", sweep.to_str().unwrap()],
    ];
    for args in steps {
        println!("$ fdspg {}", args.join(" "));
        cli::run([&["fdspg", "--out", o][..], &args].concat())?;
    }
    println!(
        "{}",
        std::fs::read_to_string(out.join("merged.csv")).unwrap()
    );
    Ok(out)
}

fn main() -> feddspg::Result<()> {
    run_example().map(|_| ())
}
