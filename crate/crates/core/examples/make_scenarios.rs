//! Regenerates the synthetic scenario files under `scenarios/`.
//!
//! cargo run -p mergewatch --example make_scenarios [-- <dir>]

use std::path::PathBuf;

use mergewatch::scenario::{write_rates, GridSpec};
use mergewatch::sim::AvKind;
use mergewatch::synthetic::{regional_rates, RampDemand};

fn main() -> mergewatch::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios"));
    let grid = GridSpec {
        kinds: vec![AvKind::Unconnected, AvKind::Connected, AvKind::Cooperative],
        penetrations: vec![0.25, 0.5, 0.75],
    };
    RampDemand::day().write_scenario(&dir, "ramp_day", AvKind::Unconnected, 0.5, 1, Some(grid.clone()))?;
    RampDemand::busy_hour().write_scenario(&dir, "ramp_busy", AvKind::Cooperative, 0.75, 1, Some(grid))?;
    for (i, rates) in regional_rates(3, 11).iter().enumerate() {
        write_rates(&dir.join(format!("region{}_rates.csv", i + 1)), rates)?;
    }
    println!("scenarios written to {}", dir.display());
    Ok(())
}
