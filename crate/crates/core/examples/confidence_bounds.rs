//! Clopper–Pearson bounds, the Gaussian quantile and the certified radius.

use smoothcert::smoothing::{lower_conf_bound, norm_ppf, radius, upper_conf_bound};

fn main() -> smoothcert::Result<()> {
    let alpha = 0.001;
    println!("{:>6} {:>6} {:>10} {:>10} {:>10}", "k", "n", "lower", "upper", "R(σ=0.25)");
    for (k, n) in [(1000u64, 1000u64), (990, 1000), (900, 1000), (600, 1000), (99_000, 100_000)] {
        let lo = lower_conf_bound(k, n, alpha)?;
        let hi = upper_conf_bound(k, n, alpha)?;
        let r = if lo > 0.5 { radius(0.25, lo, 1.0 - lo) } else { 0.0 };
        println!("{k:>6} {n:>6} {lo:>10.6} {hi:>10.6} {r:>10.4}");
    }
    println!("Φ⁻¹(0.975) = {:.9}", norm_ppf(0.975));
    println!("R(0.5, 0.8, 0.2) = {:.5}", radius(0.5, 0.8, 0.2));
    println!("R(1, 0.9, 0.1) = {:.5}", radius(1.0, 0.9, 0.1));
    Ok(())
}
