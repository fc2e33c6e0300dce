use clap::Parser;
use serde_json::json;
use std::process::ExitCode;
use wannier_lab::cli::{self, Cli};
use wannier_lab::error::Error;

fn fail(kind: &str, message: &str, items: &[String], code: u8) -> ExitCode {
    eprintln!("{}", json!({"error": kind, "message": message, "items": items}));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let (sub, run) = args.command.split();
    if let Some(n) = run.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail("jobs", &e.to_string(), &[], 2);
        }
    }
    let text = match std::fs::read_to_string(&run.config) {
        Ok(t) => t,
        Err(e) => return fail("config", &format!("{}: {e}", run.config.display()), &[], 2),
    };
    let cfg = match cli::parse_config(&text) {
        Ok(c) => c,
        Err(e) => return fail("config", "invalid run configuration", &e.items, 2),
    };
    let out = run.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    match cli::run_subcommand(sub, &cfg, &out) {
        Ok(m) => {
            for c in &m.checks {
                let tag = c.criterion.map(|n| format!("[{n}] ")).unwrap_or_default();
                println!("{} {tag}{} = {:e} (threshold {:e})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.threshold);
            }
            println!("{}", m.directory.display());
            if m.all_pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e @ Error::Config(_)) => fail("config", &e.to_string(), &[], 2),
        Err(e) => fail("computation", &e.to_string(), &[], 3),
    }
}
