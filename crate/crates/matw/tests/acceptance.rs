//! Runs the numbered acceptance criteria and prints one line per criterion.
//! Criterion 14 reruns the battery with a different worker count and
//! compares the CSVs byte for byte.

fn main() {
    let seed = std::env::var("MATW_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(7);
    let acc = match matw::suite::acceptance(seed, 1, &mut |o| println!("{}", o.line())) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("acceptance run failed: {e}");
            std::process::exit(1);
        }
    };
    let failed: Vec<u32> = acc.outcomes.iter().filter(|o| !o.pass()).map(|o| o.id).collect();
    println!("acceptance: {}/{} passed (seed {seed})", acc.outcomes.len() - failed.len(), acc.outcomes.len());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
