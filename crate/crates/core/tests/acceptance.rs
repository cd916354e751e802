use conelab::verify::{run_all, VerifyConfig};
use std::process::ExitCode;

fn main() -> ExitCode {
    let reports = run_all(&VerifyConfig::default());
    for r in &reports {
        println!("{}", r.summary());
        if !r.pass() {
            for m in r.metrics.iter().filter(|m| !m.pass) {
                println!("    {} = {:.6e} (tolerance {}, grid {})", m.name, m.value, m.tolerance, m.grid);
            }
        }
    }
    let failed = reports.iter().filter(|r| !r.pass()).count();
    println!("{} of {} criteria passed", reports.len() - failed, reports.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
