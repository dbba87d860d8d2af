//! Runs a small sweep from an in-memory experiment file and re-aggregates
//! it from the files on disk.

use augbias::experiment::{format_table, parse_config, report, run_plan, RunOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::temp_dir().join("augbias-sweep-example");
    let text = format!(
        r#"
output_dir = "{}"
seeds = [0, 1, 2]

[task]
bias = "label_mixing"
delta = 0.4
n_eval = 1000

[defaults]
iters = 800

[[cell]]
scheme = "augmented"

[[cell]]
scheme = "augdrop"
drop_fraction = 0.75

[[cell]]
name = "wemix-l0.3"
scheme = "wemix"
lambda = 0.3
"#,
        out.display()
    );
    let plan = parse_config(&text)?;
    let outcome = run_plan(&plan, RunOptions { jobs: 2, seed_offset: 0 })?;
    print!("{}", format_table(&outcome.aggregate));
    println!("exit code would be {}", outcome.exit_code());
    let again = report(&out)?;
    println!("re-aggregated {} cells from {}", again.len(), out.display());
    Ok(())
}
