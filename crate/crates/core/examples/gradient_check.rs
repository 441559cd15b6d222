//! Compares analytic gradients with central finite differences for every
//! differentiable op and for the smallest end-to-end network.
//!
//! ```bash
//! cargo run --example gradient_check -- [seed]
//! ```

use gpt_stain::gradcheck::{run, table};
use gpt_stain::network::NetworkConfig;

fn main() -> gpt_stain::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let rows = run(&NetworkConfig::gradcheck(), seed)?;
    print!("{}", table(&rows));
    let failed = rows.iter().filter(|r| !r.passed()).count();
    println!("{} rows, {failed} failed", rows.len());
    Ok(())
}
