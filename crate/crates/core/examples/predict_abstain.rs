//! The smoothed classifier's prediction protocol: a vote that abstains
//! unless a binomial test separates the top two classes.

use smoothcert::smoothing::{predict, predict_from_counts, BaseClassifier, SmoothingParams};

/// Two classes split by the sign of the first coordinate.
struct HalfPlane;

impl BaseClassifier for HalfPlane {
    fn num_classes(&self) -> usize {
        2
    }
    fn input_len(&self) -> usize {
        2
    }
    fn classify(&self, inputs: &[f32], count: usize) -> smoothcert::Result<Vec<usize>> {
        Ok(inputs[..2 * count].chunks_exact(2).map(|x| (x[0] > 0.0) as usize).collect())
    }
}

fn main() -> smoothcert::Result<()> {
    for counts in [[60u64, 40], [540, 460], [900, 100], [500, 500]] {
        println!("counts {counts:?} → {:?}", predict_from_counts(&counts, 0.001));
    }
    let params = SmoothingParams { sigma: 1.0, n: 2000, ..Default::default() };
    for x0 in [-2.0f32, -0.05, 0.0, 0.05, 2.0] {
        let p = predict(&HalfPlane, &[x0, 0.0], &params, 0, 0)?;
        println!("x = ({x0:+.2}, 0) → {}", p.map_or("abstain".into(), |c| format!("class {c}")));
    }
    Ok(())
}
