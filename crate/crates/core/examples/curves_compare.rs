//! Builds certified-accuracy curves from results rows and lines them up in a
//! comparison table.

use smoothcert::harness::{compare, radii_grid, CertifiedAccuracyCurve};
use smoothcert::smoothing::ResultRow;
use std::time::Duration;

fn rows(radii: &[Option<f64>]) -> Vec<ResultRow> {
    radii
        .iter()
        .enumerate()
        .map(|(idx, r)| ResultRow {
            idx,
            label: 0,
            predict: r.map(|_| 0),
            radius: r.unwrap_or(0.0),
            correct: r.is_some(),
            time: Duration::ZERO,
        })
        .collect()
}

fn main() -> smoothcert::Result<()> {
    let grid = radii_grid(1.0, 0.25);
    let a = CertifiedAccuracyCurve::from_rows(
        "lora r=2",
        &rows(&[Some(0.9), Some(0.6), Some(0.3), None]),
        &grid,
        2_698,
        2_048,
    );
    let b = CertifiedAccuracyCurve::from_rows(
        "adapter r=8",
        &rows(&[Some(0.7), Some(0.7), Some(0.1), Some(0.05)]),
        &grid,
        8_842,
        8_192,
    );
    a.validate()?;
    b.validate()?;
    print!("{}", a.to_csv(&[("smoothing.sigma".into(), "0.25".into())]));
    let table = compare(&[a, b])?;
    print!("{}", table.to_csv(&[]));
    Ok(())
}
