//! Analytic memory and compute models.

use crate::error::{Error, Result};
use crate::tensor::Shape4;

/// Exact rational `numer / denom`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fraction {
    pub numer: u64,
    pub denom: u64,
}

impl Fraction {
    pub fn as_f64(&self) -> f64 {
        self.numer as f64 / self.denom as f64
    }

    /// Value times 100, to `sig` significant figures, with a trailing `%`.
    pub fn percent(&self, sig: u32) -> String {
        format!(
            "{}%",
            format_significant(u128::from(self.numer) * 100, u128::from(self.denom), sig)
        )
    }
}

/// Decimal rendering of `numer / denom` to `sig` significant figures,
/// rounding half away from zero, computed exactly in integers.
pub fn format_significant(numer: u128, denom: u128, sig: u32) -> String {
    assert!(denom > 0 && sig > 0);
    if numer == 0 {
        return format!("{:.*}", sig.saturating_sub(1) as usize, 0.0);
    }
    // Decimal exponent e with 10^e <= numer/denom < 10^(e+1).
    let mut e: i32 = 0;
    let (mut n, mut d) = (numer, denom);
    while n >= d * 10 {
        d *= 10;
        e += 1;
    }
    while n < d {
        n *= 10;
        e -= 1;
    }
    // Scale so that sig digits sit left of the point, then round.
    let shift = sig as i32 - 1 - e;
    let (mut sn, mut sd) = (numer, denom);
    if shift >= 0 {
        sn *= 10u128.pow(shift as u32);
    } else {
        sd *= 10u128.pow((-shift) as u32);
    }
    let mut digits = (2 * sn + sd) / (2 * sd);
    let mut shift = shift;
    if digits >= 10u128.pow(sig) {
        digits /= 10;
        shift -= 1;
    }
    let s = digits.to_string();
    if shift <= 0 {
        format!("{s}{}", "0".repeat((-shift) as usize))
    } else {
        let shift = shift as usize;
        let padded = format!("{:0>width$}", s, width = shift + 1);
        let (int, frac) = padded.split_at(padded.len() - shift);
        format!("{int}.{frac}")
    }
}

/// Memory saving `p = b/32 + ceil(C_i/B)/C_i`, as an exact fraction.
pub fn memory_saving(c_in: usize, block: usize, bits: u32) -> Result<Fraction> {
    if c_in == 0 || block == 0 || bits == 0 {
        return Err(Error::config(format!(
            "memory saving needs positive C_i, B, b (got {c_in}, {block}, {bits})"
        )));
    }
    let c = c_in as u64;
    let nb = c_in.div_ceil(block) as u64;
    Ok(Fraction {
        numer: u64::from(bits) * c + 32 * nb,
        denom: 32 * c,
    })
}

/// Fraction of an FP MAC's time an integer MAC may take for the block scheme
/// to break even.
///
/// `(1 - 1/B) / (1 + eta)` when `B` divides `C_i`, otherwise
/// `(C_i - ceil(C_i/B)) / (C_i (1 + eta))`.
pub fn speed_ratio_threshold(c_in: usize, block: usize, eta: f64) -> Result<f64> {
    if c_in == 0 || block == 0 {
        return Err(Error::config("C_i and B must be >= 1"));
    }
    if !eta.is_finite() || eta < 0.0 {
        return Err(Error::config(format!("eta must be finite and >= 0, got {eta}")));
    }
    if c_in.is_multiple_of(block) {
        Ok((1.0 - 1.0 / block as f64) / (1.0 + eta))
    } else {
        let c = c_in as f64;
        Ok((c - c_in.div_ceil(block) as f64) / (c * (1.0 + eta)))
    }
}

/// Threshold when only `B` is known, assuming `B` divides `C_i`.
pub fn speed_ratio_divisible(block: usize, eta: f64) -> Result<f64> {
    speed_ratio_threshold(block, block, eta)
}

/// Upper bound on speedup, `min(C_i, B)`.
pub fn max_speedup(c_in: usize, block: usize) -> Result<usize> {
    if c_in == 0 || block == 0 {
        return Err(Error::config("C_i and B must be >= 1"));
    }
    Ok(c_in.min(block))
}

/// MAC counts for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacModel {
    /// Integer MACs per filter per output position, `C_i * K_h * K_w`.
    pub int_per_position: u64,
    /// FP MACs per filter per output position, `ceil(C_i/B) * K_h * K_w`.
    pub fp_per_position: u64,
    pub int_total: u64,
    pub fp_total: u64,
}

pub fn mac_counts(weights: Shape4, block: usize, out_hw: (usize, usize)) -> Result<MacModel> {
    if block == 0 {
        return Err(Error::config("B must be >= 1"));
    }
    let [c_out, c_in, kh, kw] = weights.dims().map(|d| d as u64);
    let taps = kh * kw;
    let int_per_position = c_in * taps;
    let fp_per_position = c_in.div_ceil(block as u64) * taps;
    let positions = c_out * out_hw.0 as u64 * out_hw.1 as u64;
    Ok(MacModel {
        int_per_position,
        fp_per_position,
        int_total: int_per_position * positions,
        fp_total: fp_per_position * positions,
    })
}

/// Everything the cost model says about one layer configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub c_in: usize,
    pub block: usize,
    pub bits: u32,
    pub eta: f64,
    pub memory_saving: Fraction,
    pub speed_ratio_threshold: f64,
    pub max_speedup: usize,
    pub macs: Option<MacModel>,
}

impl CostReport {
    pub fn new(c_in: usize, block: usize, bits: u32, eta: f64) -> Result<Self> {
        Ok(CostReport {
            c_in,
            block,
            bits,
            eta,
            memory_saving: memory_saving(c_in, block, bits)?,
            speed_ratio_threshold: speed_ratio_threshold(c_in, block, eta)?,
            max_speedup: max_speedup(c_in, block)?,
            macs: None,
        })
    }

    /// Attach MAC counts for a `C_o x C_i x K_h x K_w` layer with the given output size.
    pub fn with_macs(mut self, c_out: usize, kernel: (usize, usize), out_hw: (usize, usize)) -> Result<Self> {
        let shape = Shape4::new(c_out, self.c_in, kernel.0, kernel.1)?;
        self.macs = Some(mac_counts(shape, self.block, out_hw)?);
        Ok(self)
    }
}

/// `x` rounded half away from zero to three decimals.
pub fn format_ratio(x: f64) -> String {
    format!("{:.3}", (x * 1000.0).round() / 1000.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saving_table_rows() {
        let pct = |c, b, bits| memory_saving(c, b, bits).unwrap().percent(3);
        assert_eq!(pct(128, 64, 4), "14.1%");
        assert_eq!(pct(128, 128, 4), "13.3%");
        assert_eq!(pct(128, 32, 3), "12.5%");
        assert_eq!(pct(256, 128, 3), "10.2%");
    }

    #[test]
    fn saving_is_exact() {
        let p = memory_saving(128, 64, 4).unwrap();
        assert_eq!(p.as_f64(), 0.140625);
        assert!(matches!(memory_saving(0, 1, 1), Err(Error::Config(_))));
        assert!(matches!(memory_saving(1, 0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn ratio_table() {
        let got: Vec<String> = [4, 8, 16, 32, 64, 128]
            .iter()
            .map(|&b| format_ratio(speed_ratio_divisible(b, 0.0).unwrap()))
            .collect();
        assert_eq!(got, ["0.750", "0.875", "0.938", "0.969", "0.984", "0.992"]);
        assert_eq!(speed_ratio_threshold(64, 1, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn non_divisible_ratio() {
        // C_i = 150, B = 64: (150 - 3) / 150.
        assert_eq!(speed_ratio_threshold(150, 64, 0.0).unwrap(), 147.0 / 150.0);
        assert_eq!(speed_ratio_threshold(150, 64, 1.0).unwrap(), 147.0 / 300.0);
        assert!(speed_ratio_threshold(8, 4, -0.1).is_err());
    }

    #[test]
    fn filter_150_block_64_macs() {
        let m = mac_counts(Shape4::new(1, 150, 3, 3).unwrap(), 64, (1, 1)).unwrap();
        assert_eq!(m.int_per_position, 1350);
        assert_eq!(m.fp_per_position, 27);
        let one = mac_counts(Shape4::new(4, 10, 1, 1).unwrap(), 16, (2, 3)).unwrap();
        assert_eq!(one.fp_per_position, 1);
        assert_eq!(one.fp_total, 24);
        assert_eq!(one.int_total, 240);
    }

    #[test]
    fn speedup() {
        assert_eq!(max_speedup(256, 128).unwrap(), 128);
        assert_eq!(max_speedup(256, 1).unwrap(), 1);
        assert_eq!(max_speedup(4, 64).unwrap(), 4);
    }

    #[test]
    fn significant_figures() {
        assert_eq!(format_significant(99_95, 1000, 3), "10.0");
        assert_eq!(format_significant(1, 3, 3), "0.333");
        assert_eq!(format_significant(12345, 1, 3), "12300");
        assert_eq!(format_significant(5, 1000, 2), "0.0050");
        assert_eq!(format_significant(0, 7, 3), "0.00");
    }
}
