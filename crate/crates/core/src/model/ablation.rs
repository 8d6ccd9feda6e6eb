use serde::{Deserialize, Serialize};

use super::{analyze, ModelConfig, Variant};
use crate::complexity::Convention;
use crate::error::Result;

/// One rung of the cumulative ablation ladder, with the change from the
/// rung above it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub params: u64,
    pub flops: u64,
    pub delta_params: i64,
    pub delta_flops: i64,
}

pub fn ablation_ladder(convention: Convention) -> Result<Vec<AblationRow>> {
    let mut rows: Vec<AblationRow> = Vec::with_capacity(Variant::LADDER.len());
    for v in Variant::LADDER {
        let r = analyze(&ModelConfig::ablation(v), convention, false)?;
        let (p, f) = (r.totals.params, r.totals.flops);
        let (dp, df) = rows.last().map_or((0, 0), |prev| {
            (p as i64 - prev.params as i64, f as i64 - prev.flops as i64)
        });
        rows.push(AblationRow {
            variant: v.label().to_string(),
            params: p,
            flops: f,
            delta_params: dp,
            delta_flops: df,
        });
    }
    Ok(rows)
}
