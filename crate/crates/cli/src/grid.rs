//! Numeric list arguments: `lo:hi:step` ranges or comma-separated values.

/// Values `lo + i * step` for every `i` with value `< hi + step / 2`, or an explicit list.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let values = match parts.as_slice() {
        [lo, hi, step] => {
            let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
            if !(step > 0.0) {
                return Err(format!("step must be positive in {s:?}"));
            }
            if hi < lo {
                return Err(format!("upper end below lower end in {s:?}"));
            }
            let stop = hi + step / 2.0;
            (0..)
                .map(|i| tidy(lo + i as f64 * step))
                .take_while(|&v| v < stop)
                .collect()
        }
        [_] => s.split(',').map(num).collect::<Result<Vec<_>, _>>()?,
        _ => return Err(format!("expected lo:hi:step or a comma list, got {s:?}")),
    };
    if values.is_empty() {
        return Err(format!("{s:?} describes no values"));
    }
    Ok(values)
}

/// Positive integers from the same syntax.
pub fn parse_count_grid(s: &str) -> Result<Vec<usize>, String> {
    parse_grid(s)?
        .into_iter()
        .map(|v| {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(format!("{v} is not a positive integer"))
            }
        })
        .collect()
}

fn num(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{s:?} is not finite"))
    }
}

// Strip accumulated representation noise such as 0.30000000000000004.
fn tidy(v: f64) -> f64 {
    let r = (v * 1e12).round() / 1e12;
    if (r - v).abs() < 1e-9 * v.abs().max(1.0) {
        r
    } else {
        v
    }
}
