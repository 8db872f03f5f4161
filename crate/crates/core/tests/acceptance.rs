//! Acceptance suite: one PASS/FAIL line per criterion.
//! Run a subset with `cargo test --test acceptance -- 5 6 7`.

use akpz_core::acceptance::run_suite;

fn main() {
    let ids: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let results = run_suite(if ids.is_empty() { None } else { Some(&ids) });
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
