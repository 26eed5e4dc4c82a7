//! Acceptance suite. Prints one pass/fail line per criterion and exits
//! nonzero if any fails. A numeric argument limits the run to those
//! criteria, e.g. `cargo test --test acceptance -- 4 7`.

use std::process::ExitCode;

use bernstein::acceptance::{run_criterion, CRITERIA};

fn main() -> ExitCode {
    let picked: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let ids: Vec<u8> = CRITERIA
        .iter()
        .map(|(id, _)| *id)
        .filter(|id| picked.is_empty() || picked.contains(id))
        .collect();
    let mut failed = 0;
    for id in &ids {
        let r = run_criterion(*id);
        println!("{r}");
        failed += usize::from(!r.pass);
    }
    println!("acceptance: {} passed, {failed} failed", ids.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
