use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::Result;
use crate::model::{build_model, count_flops, measure_throughput, Variant};

/// One row of the cost table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    pub params: usize,
    pub gflops: f64,
    pub images_per_sec: f64,
    pub batch: usize,
    pub repeats: usize,
}

/// Parameters, analytic forward Gflops per image, and measured inference
/// throughput of each variant built from `cfg.model`.
pub fn run_bench(cfg: &RunConfig, variants: &[Variant], measure: bool) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let model_cfg = cfg.model.clone().with_variant(variant);
        model_cfg.validate()?;
        let mut model = build_model::<f32>(&model_cfg)?;
        let (images_per_sec, batch, repeats) = if measure {
            let t = measure_throughput(
                &mut model,
                cfg.bench.repeats,
                cfg.bench.memory_budget_bytes,
                cfg.bench.max_batch,
            )?;
            (t.images_per_sec, t.batch, t.repeats)
        } else {
            (0.0, 0, 0)
        };
        rows.push(BenchRow {
            variant: variant.name().to_owned(),
            params: model.num_parameters(),
            gflops: count_flops(&model, 1) / 1e9,
            images_per_sec,
            batch,
            repeats,
        });
    }
    Ok(rows)
}

/// Fixed-width text rendering of the table.
pub fn format_table(rows: &[BenchRow]) -> String {
    let mut s = format!("{:<10} {:>12} {:>10} {:>10}\n", "variant", "params", "Gflops", "images/s");
    for r in rows {
        s.push_str(&format!(
            "{:<10} {:>12} {:>10.3} {:>10.2}\n",
            r.variant, r.params, r.gflops, r.images_per_sec
        ));
    }
    s
}
