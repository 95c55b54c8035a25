//! One line per acceptance criterion; exits non-zero if any fails.

use sparsedet3d_oracles::criteria::all_criteria;

fn main() {
    println!("acceptance criteria");
    let outcomes = all_criteria(true);
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
