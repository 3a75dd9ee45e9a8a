//! Runs the toy experiment and prints its report as JSON.
//!
//! The committed reference under `tests/data/` is this program's output.

use std::time::Instant;

use atlascrf::pipeline::{run_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let start = Instant::now();
    let (report, models) = run_experiment(&ExperimentConfig::default())?;
    eprintln!("finished in {:.1?}", start.elapsed());
    for (name, o) in [("unary", &models.unary), ("joint", &models.joint), ("separate", &models.separate)] {
        for r in &o.history {
            eprintln!("{name} epoch {:>3} loss {:.4} val {:.4}", r.epoch, r.train_loss, r.val_dsc);
        }
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
