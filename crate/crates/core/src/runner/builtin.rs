//! Payloads that ship with the runner, addressed as `builtin:<name>`.

use std::time::Duration;

use serde_json::json;

use super::{PayloadError, RunContext};
use crate::model::StatusKind;

pub type Payload = fn(&RunContext) -> Result<serde_json::Value, PayloadError>;

pub fn lookup(name: &str) -> Option<Payload> {
    match name {
        "matrix" => Some(matrix),
        "sleep" => Some(sleep),
        _ => None,
    }
}

/// Posts every status named in the `checkpoints` param, then fails if
/// `fail` is set.
fn common(ctx: &RunContext) -> Result<(), PayloadError> {
    if let Some(list) = ctx.params().get("checkpoints").and_then(|v| v.as_list()) {
        for item in list {
            let name = item
                .as_str()
                .ok_or_else(|| PayloadError::new("checkpoints must be strings"))?;
            let status = StatusKind::parse(name).map_err(|e| PayloadError::new(e.to_string()))?;
            ctx.post_status(status);
        }
    }
    if ctx.params().get("fail").and_then(|v| v.as_bool()) == Some(true) {
        return Err(PayloadError::new("payload failed on request"));
    }
    Ok(())
}

fn int_param(ctx: &RunContext, key: &str, default: u64) -> Result<u64, PayloadError> {
    match ctx.params().get(key) {
        None => Ok(default),
        Some(v) => v
            .as_u64()
            .ok_or_else(|| PayloadError::new(format!("{key} must be a non-negative integer"))),
    }
}

/// 64-bit LCG used to fill the demo matrices.
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Lcg(seed)
    }

    /// Next entry, an integer in 0..10.
    pub fn next_entry(&mut self) -> i64 {
        self.0 = self
            .0
            .wrapping_mul(6_364_136_223_846_793_005)
            .wrapping_add(1_442_695_040_888_963_407);
        ((self.0 >> 33) % 10) as i64
    }
}

/// Sum of all entries of `A·B` where `A` then `B` are filled row-major
/// from one [`Lcg`] stream.
pub fn matrix_checksum(n: usize, seed: u64) -> i64 {
    let mut rng = Lcg::new(seed);
    let a: Vec<i64> = (0..n * n).map(|_| rng.next_entry()).collect();
    let b: Vec<i64> = (0..n * n).map(|_| rng.next_entry()).collect();
    let mut total = 0i64;
    for i in 0..n {
        for j in 0..n {
            let mut c = 0i64;
            for k in 0..n {
                c += a[i * n + k] * b[k * n + j];
            }
            total += c;
        }
    }
    total
}

fn matrix(ctx: &RunContext) -> Result<serde_json::Value, PayloadError> {
    common(ctx)?;
    let n = int_param(ctx, "n", 100)?;
    if n > 2000 {
        return Err(PayloadError::new("n must be at most 2000"));
    }
    let seed = int_param(ctx, "seed", 0)?;
    let checksum = matrix_checksum(n as usize, seed);
    Ok(json!({"checksum": checksum, "n": n, "seed": seed}))
}

fn sleep(ctx: &RunContext) -> Result<serde_json::Value, PayloadError> {
    common(ctx)?;
    let seconds = match ctx.params().get("seconds") {
        None => 1.0,
        Some(v) => v
            .as_f64()
            .filter(|s| s.is_finite() && *s >= 0.0)
            .ok_or_else(|| PayloadError::new("seconds must be a non-negative number"))?,
    };
    std::thread::sleep(Duration::from_secs_f64(seconds));
    Ok(json!({"slept_s": seconds}))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lcg_first_entries_are_stable() {
        let mut rng = Lcg::new(7);
        let got: Vec<i64> = (0..6).map(|_| rng.next_entry()).collect();
        let mut state = 7u64;
        let want: Vec<i64> = (0..6)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((state >> 33) % 10) as i64
            })
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn checksum_matches_column_row_sum_identity() {
        // sum(A·B) = Σ_k colsum_A[k] · rowsum_B[k]
        for (n, seed) in [(1, 0), (3, 7), (10, 42), (17, 99)] {
            let mut rng = Lcg::new(seed);
            let a: Vec<i64> = (0..n * n).map(|_| rng.next_entry()).collect();
            let b: Vec<i64> = (0..n * n).map(|_| rng.next_entry()).collect();
            let oracle: i64 = (0..n)
                .map(|k| {
                    let col: i64 = (0..n).map(|i| a[i * n + k]).sum();
                    let row: i64 = (0..n).map(|j| b[k * n + j]).sum();
                    col * row
                })
                .sum();
            assert_eq!(matrix_checksum(n, seed), oracle, "n={n} seed={seed}");
        }
    }
}
