//! Build a return dataset from a generated price panel and cut it into
//! rolling train/validation/test windows.

use crokit::data::{make_returns, rolling_windows, sample_assets, synthetic_panel, Split, StockConfig};

fn main() -> crokit::Result<()> {
    let panel = synthetic_panel(20, 3, 900, 11);
    let idx = sample_assets(panel.assets.len(), 5, 11)?;
    let returns = make_returns(&panel.select_assets(&idx)?, &StockConfig::default())?;
    println!(
        "{} days, {} covariates, {} assets",
        returns.len(),
        returns.covariate_dim(),
        returns.uncertainty_dim()
    );
    for w in rolling_windows(&returns, 400, 100, 150, 150)? {
        let first = |s: Split| w.data.subset(s).dates.first().cloned().unwrap_or_default();
        let last = |s: Split| w.data.subset(s).dates.last().cloned().unwrap_or_default();
        println!(
            "window at {:>4}: train {}..{}  val {}..{}  test {}..{}",
            w.start,
            first(Split::Train),
            last(Split::Train),
            first(Split::Validation),
            last(Split::Validation),
            first(Split::Test),
            last(Split::Test)
        );
    }
    Ok(())
}
