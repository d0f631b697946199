use std::path::Path;

use crate::numeric::Matrix;
use crate::Result;

/// Export an attention-weight matrix as a CSV (raw values, no header) and
/// an 8-bit grayscale pixmap with value 1.0 mapped to 255.
///
/// `base` gets `.csv` and `.pgm` extensions appended.
pub fn heatmap_export(weights: &Matrix, base: &Path) -> Result<()> {
    let mut csv = String::new();
    for r in 0..weights.rows() {
        let row: Vec<String> = weights.row(r).iter().map(|v| format!("{v}")).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    std::fs::write(base.with_extension("csv"), csv)?;

    let mut pgm = format!("P5\n{} {}\n255\n", weights.cols(), weights.rows()).into_bytes();
    for &v in weights.data() {
        let level = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        pgm.push(level);
    }
    std::fs::write(base.with_extension("pgm"), pgm)?;
    Ok(())
}
