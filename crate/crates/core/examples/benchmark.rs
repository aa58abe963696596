//! A reduced synthetic benchmark: all five methods on three seeds, printed
//! as a comparison table. `crokit compare` runs the full version.

use crokit::experiment::{run_synthetic_benchmark, summarize, RunConfig};

fn main() -> crokit::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.compare.seeds = 3;
    cfg.eval.conditional_points = 50;
    let cfg = cfg.resolve()?;
    let cmp = summarize(run_synthetic_benchmark(&cfg, false)?, cfg.compare.confidence)?;
    for (_, rows) in &cmp.tables {
        println!("{:<8} {:>16} {:>16}", "method", "cvar", "coverage");
        for r in rows {
            let ci = |h: Option<f64>| h.map_or("n/a".to_string(), |h| format!("{h:.3}"));
            println!(
                "{:<8} {:>8.4} ± {:<5} {:>8.3} ± {:<5}",
                r.method,
                r.cvar_mean,
                ci(r.cvar_half_width),
                r.coverage_mean,
                ci(r.coverage_half_width)
            );
        }
    }
    Ok(())
}
