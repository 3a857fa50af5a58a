use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// One second-order section, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b0 + self.b1 * z_inv + self.b2 * z2) / (1.0 + self.a1 * z_inv + self.a2 * z2)
    }

    /// Largest pole radius.
    pub fn pole_radius(&self) -> f64 {
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        let p1 = (-self.a1 + disc) / 2.0;
        let p2 = (-self.a1 - disc) / 2.0;
        p1.norm().max(p2.norm())
    }

    /// Transposed direct form II state that a unit step settles into.
    fn step_state(&self) -> [f64; 2] {
        let y = (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2);
        [self.b1 + self.b2 - (self.a1 + self.a2) * y, self.b2 - self.a2 * y]
    }

    fn run(&self, x: &mut [f64], mut s: [f64; 2]) {
        for v in x.iter_mut() {
            let input = *v;
            let y = self.b0 * input + s[0];
            s[0] = self.b1 * input - self.a1 * y + s[1];
            s[1] = self.b2 * input - self.a2 * y;
            *v = y;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
    pub order: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub fs_hz: f64,
}

/// Digital Butterworth bandpass: analog lowpass prototype, lowpass-to-bandpass
/// transform around prewarped edges, bilinear map, then poles paired into
/// sections that each carry one zero at DC and one at Nyquist.
pub fn design_butterworth_bandpass(order: usize, low_hz: f64, high_hz: f64, fs_hz: f64) -> Result<BiquadCascade> {
    if order == 0 {
        return Err(Error::invalid("filter order must be at least 1"));
    }
    if !(fs_hz > 0.0 && low_hz > 0.0 && low_hz < high_hz && high_hz < fs_hz / 2.0) {
        return Err(Error::invalid(format!(
            "bandpass needs 0 < low < high < fs/2, got low={low_hz} high={high_hz} fs={fs_hz}"
        )));
    }
    let k = 2.0 * fs_hz;
    let wl = k * (PI * low_hz / fs_hz).tan();
    let wh = k * (PI * high_hz / fs_hz).tan();
    let bw = wh - wl;
    let w0_sq = wl * wh;

    let mut complex_poles = Vec::new();
    let mut real_poles = Vec::new();
    for i in 0..order {
        let theta = PI * (2 * i + order + 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let root = (p * p * bw * bw - 4.0 * w0_sq).sqrt();
        for s in [(p * bw + root) / 2.0, (p * bw - root) / 2.0] {
            let z = (k + s) / (k - s);
            if z.im.abs() <= 1e-12 * z.norm() {
                real_poles.push(z.re);
            } else if z.im > 0.0 {
                complex_poles.push(z);
            }
        }
    }
    real_poles.sort_by(|a, b| a.total_cmp(b));
    if real_poles.len() % 2 != 0 || complex_poles.len() + real_poles.len() / 2 != order {
        return Err(Error::invalid("pole pairing failed during filter design"));
    }

    let mut sections: Vec<Biquad> = complex_poles
        .iter()
        .map(|q| Biquad { b0: 1.0, b1: 0.0, b2: -1.0, a1: -2.0 * q.re, a2: q.norm_sqr() })
        .collect();
    for pair in real_poles.chunks(2) {
        sections.push(Biquad { b0: 1.0, b1: 0.0, b2: -1.0, a1: -(pair[0] + pair[1]), a2: pair[0] * pair[1] });
    }

    let mut cascade = BiquadCascade { sections, order, low_hz, high_hz, fs_hz };
    // unit gain at the digital image of the analog center frequency
    let center_hz = fs_hz / PI * (w0_sq.sqrt() / k).atan();
    let per_section = cascade.response(center_hz).norm().powf(-1.0 / order as f64);
    for s in &mut cascade.sections {
        s.b0 *= per_section;
        s.b2 *= per_section;
    }
    if let Some(r) = cascade.sections.iter().map(Biquad::pole_radius).find(|&r| r >= 1.0) {
        return Err(Error::invalid(format!("designed section is unstable (pole radius {r})")));
    }
    Ok(cascade)
}

impl BiquadCascade {
    /// Complex frequency response at `f_hz`.
    pub fn response(&self, f_hz: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * f_hz / self.fs_hz);
        self.sections.iter().map(|s| s.response(z_inv)).product()
    }

    pub fn magnitude_db(&self, f_hz: f64) -> f64 {
        20.0 * self.response(f_hz).norm().log10()
    }

    /// Edge padding used by [`filter_zero_phase`].
    pub fn pad_len(&self) -> usize {
        3 * 2 * self.order
    }

    /// Causal single pass with zero initial state.
    pub fn filter(&self, x: &mut [f64]) {
        for s in &self.sections {
            s.run(x, [0.0; 2]);
        }
    }

    /// Causal pass whose sections start in the steady state for a constant
    /// input equal to `x[0]`.
    fn filter_settled(&self, x: &mut [f64]) {
        let mut level = x[0];
        for s in &self.sections {
            let st = s.step_state();
            s.run(x, [st[0] * level, st[1] * level]);
            level *= (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
        }
    }
}

/// Forward-backward filtering with odd reflection padding at both ends.
pub fn filter_zero_phase(cascade: &BiquadCascade, signal: &[f64]) -> Result<Vec<f64>> {
    let pad = cascade.pad_len();
    let n = signal.len();
    if n <= pad {
        return Err(Error::invalid(format!("signal of {n} samples is too short for zero-phase padding of {pad}")));
    }
    let mut ext = Vec::with_capacity(n + 2 * pad);
    let (first, last) = (signal[0], signal[n - 1]);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
    ext.extend_from_slice(signal);
    ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));

    cascade.filter_settled(&mut ext);
    ext.reverse();
    cascade.filter_settled(&mut ext);
    ext.reverse();
    ext.truncate(n + pad);
    ext.drain(..pad);
    Ok(ext)
}

/// Keeps every `factor`-th sample starting at index 0.
pub fn decimate<T: Copy>(signal: &[T], factor: usize) -> Result<Vec<T>> {
    if factor < 1 {
        return Err(Error::invalid("decimation factor must be at least 1"));
    }
    Ok(signal.iter().step_by(factor).take(signal.len() / factor).copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_filter() -> BiquadCascade {
        design_butterworth_bandpass(5, 0.5, 100.0, 30_000.0).unwrap()
    }

    #[test]
    fn passband_edges_and_stopband() {
        let c = paper_filter();
        assert_eq!(c.sections.len(), 5);
        let at10 = c.magnitude_db(10.0);
        assert!((-0.1..=1e-9).contains(&at10), "{at10}");
        for f in [0.5, 100.0] {
            assert!((c.magnitude_db(f) + 3.0).abs() <= 0.5, "{f}: {}", c.magnitude_db(f));
        }
        assert!(c.magnitude_db(300.0) <= -40.0);
    }

    #[test]
    fn rejects_inverted_band() {
        assert!(design_butterworth_bandpass(5, 100.0, 0.5, 30_000.0).is_err());
        assert!(design_butterworth_bandpass(5, 0.5, 16_000.0, 30_000.0).is_err());
    }

    #[test]
    fn dc_input_decays_to_zero() {
        let c = paper_filter();
        let mut x = vec![1.0; 300_000];
        c.filter(&mut x);
        assert!(x[x.len() - 1].abs() < 1e-3, "{}", x[x.len() - 1]);
        assert!(c.response(0.0).norm() < 1e-12);
    }

    #[test]
    fn designs_of_every_order_are_stable() {
        for order in 1..=8 {
            let c = design_butterworth_bandpass(order, 0.5, 100.0, 30_000.0).unwrap();
            assert_eq!(c.sections.len(), order);
            assert!((c.magnitude_db(100.0) + 3.0103).abs() < 0.01);
        }
    }

    #[test]
    fn zero_phase_keeps_probe_sine_in_place() {
        let c = paper_filter();
        let fs = 30_000.0;
        let x: Vec<f64> = (0..60_000).map(|i| (2.0 * PI * 10.0 * i as f64 / fs).sin()).collect();
        let y = filter_zero_phase(&c, &x).unwrap();
        // amplitude of the 10 Hz component over the whole 20 cycles; the slow
        // ringing of the 0.5 Hz edge lies outside it
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in y.iter().enumerate() {
            let ph = 2.0 * PI * 10.0 * i as f64 / fs;
            re += v * ph.sin();
            im += v * ph.cos();
        }
        let amp = 2.0 * (re * re + im * im).sqrt() / y.len() as f64;
        assert!((amp - 1.0).abs() <= 0.02, "{amp}");
        assert!(im.abs() / re.abs() < 1e-3);
        let mid = 15_000..45_000;
        // cross-correlation peaks at lag 0
        let xc = |lag: isize| -> f64 { mid.clone().map(|i| y[i] * x[(i as isize + lag) as usize]).sum() };
        let best = (-300..=300).max_by(|a, b| xc(*a).total_cmp(&xc(*b))).unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn zero_phase_of_zero_is_zero_and_short_is_rejected() {
        let c = paper_filter();
        assert!(filter_zero_phase(&c, &vec![0.0; 1000]).unwrap().iter().all(|&v| v == 0.0));
        assert!(filter_zero_phase(&c, &[1.0; 30]).is_err());
    }

    #[test]
    fn stopband_sine_is_removed() {
        let c = paper_filter();
        let fs = 30_000.0;
        let x: Vec<f64> = (0..60_000).map(|i| (2.0 * PI * 500.0 * i as f64 / fs).sin()).collect();
        let y = filter_zero_phase(&c, &x).unwrap();
        let rms = |v: &[f64]| (v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt();
        assert!(rms(&y) <= 0.01 * rms(&x));
    }

    #[test]
    fn decimate_floor_rule() {
        let x: Vec<usize> = (0..2001).collect();
        let y = decimate(&x, 2).unwrap();
        assert_eq!(y.len(), 1000);
        assert_eq!(y[999], 1998);
        assert_eq!(decimate(&x, 1).unwrap(), x);
        assert_eq!(decimate(&vec![0.0f32; 60_000], 30).unwrap().len(), 2000);
        assert!(decimate(&x, 0).is_err());
    }
}
