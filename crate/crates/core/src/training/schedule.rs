use std::f64::consts::PI;

/// Cosine annealing with warm restarts: cycles of `t0`, `t0 * t_mult`, ...
/// epochs, each decaying from `lr_max` towards `lr_min`.
pub fn lr_cosine_warm_restarts(epoch: usize, t0: usize, t_mult: usize, lr_max: f64, lr_min: f64) -> f64 {
    let t0 = t0.max(1);
    let (t_cur, t_i) = if t_mult <= 1 {
        (epoch % t0, t0)
    } else {
        let mut start = 0usize;
        let mut len = t0;
        while epoch >= start + len {
            start += len;
            len *= t_mult;
        }
        (epoch - start, len)
    };
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t_cur as f64 / t_i as f64).cos())
}

/// One-cycle policy: cosine ramp from `lr_max / div` up to `lr_max` over the
/// first `pct_start` of the steps, then cosine decay to `lr_max / final_div`
/// at the last step.
pub fn lr_one_cycle(step: usize, total_steps: usize, lr_max: f64, pct_start: f64, div: f64, final_div: f64) -> f64 {
    let lr_start = lr_max / div;
    let lr_end = lr_max / final_div;
    let last = total_steps.saturating_sub(1) as f64;
    let peak = pct_start * total_steps as f64;
    let s = (step as f64).min(last);
    let cos_interp = |from: f64, to: f64, frac: f64| to + (from - to) * 0.5 * (1.0 + (PI * frac.clamp(0.0, 1.0)).cos());
    if s <= peak {
        if peak <= 0.0 {
            lr_max
        } else {
            cos_interp(lr_start, lr_max, s / peak)
        }
    } else if last <= peak {
        lr_end
    } else {
        cos_interp(lr_max, lr_end, (s - peak) / (last - peak))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warm_restart_examples() {
        let lr = |e| lr_cosine_warm_restarts(e, 10, 2, 5e-4, 0.0);
        assert!((lr(0) - 5e-4).abs() < 1e-18);
        assert!((lr(5) - 2.5e-4).abs() < 1e-15);
        assert!((lr(10) - 5e-4).abs() < 1e-18);
        assert!((lr(20) - 2.5e-4).abs() < 1e-15);
        assert!((lr(30) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn one_cycle_examples() {
        let lr = |s| lr_one_cycle(s, 100, 5e-4, 0.3, 25.0, 1e4);
        assert!((lr(0) - 2e-5).abs() < 1e-18);
        assert!((lr(30) - 5e-4).abs() < 1e-18);
        assert!((lr(99) - 5e-8).abs() < 1e-18);
        let all: Vec<f64> = (0..100).map(lr).collect();
        assert!(all[..=30].windows(2).all(|w| w[0] <= w[1]));
        assert!(all[30..].windows(2).all(|w| w[0] >= w[1]));
    }
}
