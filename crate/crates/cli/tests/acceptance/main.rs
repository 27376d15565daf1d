//! End-to-end acceptance run. Prints one line per criterion and exits
//! non-zero if any fails. Criterion numbers given as arguments restrict
//! the run, e.g. `cargo test -p tan-cli --test acceptance -- 1 2 3`.

mod checks;
mod training;

use std::process::ExitCode;
use std::time::Instant;

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Criterion = (u8, &'static str, fn(&mut training::Shared) -> Verdict);

const CRITERIA: &[Criterion] = &[
    (1, "gradient integrity", checks::gradients),
    (2, "loss oracles", checks::loss_oracles),
    (3, "DTW decode exactness", checks::dtw_exactness),
    (4, "denoising recovery", training::denoising_recovery),
    (5, "alignability classification", training::alignability),
    (6, "timestamp-update rate", training::update_rate),
    (7, "alpha ordering", training::alpha_ordering),
    (8, "noiseless no-op", training::noiseless_noop),
    (9, "metric invariances", checks::metric_invariances),
    (10, "curation round trips", checks::curation_round_trips),
    (11, "training determinism", training::cli_determinism),
];

fn main() -> ExitCode {
    let selected: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut shared = training::Shared::default();
    let mut failed = 0;
    let mut ran = 0;
    for &(id, name, check) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let v = check(&mut shared);
        let secs = t0.elapsed().as_secs_f64();
        ran += 1;
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {} {name}: {} ({secs:.1} s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
