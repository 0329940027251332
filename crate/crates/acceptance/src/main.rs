use clap::Parser;
use qbi_acceptance::criteria::{run, NAMES};

#[derive(Parser)]
#[command(
    name = "acceptance",
    about = "Runs the acceptance criteria and prints one PASS/FAIL line each"
)]
struct Cli {
    /// Run only these criteria (1-11), comma separated.
    #[arg(long, value_delimiter = ',')]
    only: Vec<usize>,
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    let ids: Vec<usize> = if cli.only.is_empty() {
        (1..=NAMES.len()).collect()
    } else {
        cli.only
    };
    if let Some(bad) = ids.iter().find(|&&i| i == 0 || i > NAMES.len()) {
        eprintln!("no criterion {bad}; valid ids are 1-{}", NAMES.len());
        return std::process::ExitCode::from(2);
    }
    let mut failed = 0;
    for id in ids {
        let v = run(id);
        failed += usize::from(!v.pass);
        println!("{v}");
    }
    if failed == 0 {
        std::process::ExitCode::SUCCESS
    } else {
        std::process::ExitCode::FAILURE
    }
}
