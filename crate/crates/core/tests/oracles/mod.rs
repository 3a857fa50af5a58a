//! Reference implementations the library is checked against. Each one is
//! written from the defining formula, sharing no code with the crate.
#![allow(dead_code)]

use std::f64::consts::PI;

/// Squared-magnitude of an order-`n` Butterworth bandpass after the bilinear
/// map, in dB: 1 / (1 + W^(2n)) with W the lowpass-equivalent frequency.
pub fn butterworth_bandpass_db(f: f64, order: usize, low: f64, high: f64, fs: f64) -> f64 {
    let warp = |hz: f64| 2.0 * fs * (PI * hz / fs).tan();
    let (wl, wh, w) = (warp(low), warp(high), warp(f));
    let lowpass = (w * w - wl * wh) / (w * (wh - wl));
    -10.0 * (1.0 + lowpass.powi(2 * order as i32)).log10()
}

/// Welch PSD by explicit DFT of every segment.
pub fn welch_bruteforce(x: &[f64], fs: f64, nperseg: usize, noverlap: usize) -> (Vec<f64>, usize) {
    let step = nperseg - noverlap;
    let window: Vec<f64> = (0..nperseg).map(|i| (PI * i as f64 / nperseg as f64).sin().powi(2)).collect();
    let wss: f64 = window.iter().map(|w| w * w).sum();
    let bins = nperseg / 2 + 1;
    let mut psd = vec![0.0; bins];
    let mut count = 0;
    let mut start = 0;
    while start + nperseg <= x.len() {
        let seg = &x[start..start + nperseg];
        let mean = seg.iter().sum::<f64>() / nperseg as f64;
        for (k, p) in psd.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, (&v, &w)) in seg.iter().zip(&window).enumerate() {
                let ph = -2.0 * PI * (k * n % nperseg) as f64 / nperseg as f64;
                re += (v - mean) * w * ph.cos();
                im += (v - mean) * w * ph.sin();
            }
            let edge = k == 0 || (nperseg.is_multiple_of(2) && k == nperseg / 2);
            *p += (re * re + im * im) / (fs * wss) * if edge { 1.0 } else { 2.0 };
        }
        count += 1;
        start += step;
    }
    for p in &mut psd {
        *p /= count as f64;
    }
    (psd, count)
}

/// Probability that a random positive outscores a random negative, ties 1/2.
pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Textbook Adam (no weight decay) on a scalar: returns (w, m, v).
pub fn adam_step(w: f64, g: f64, m: f64, v: f64, t: i32, lr: f64) -> (f64, f64, f64) {
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let m = b1 * m + (1.0 - b1) * g;
    let v = b2 * v + (1.0 - b2) * g * g;
    let m_hat = m / (1.0 - b1.powi(t));
    let v_hat = v / (1.0 - b2.powi(t));
    (w - lr * m_hat / (v_hat.sqrt() + eps), m, v)
}

/// Closed-form cosine warm-restart learning rate by walking the cycles.
pub fn warm_restart_lr(epoch: usize, t0: usize, mult: usize, lr_max: f64) -> f64 {
    let (mut start, mut len) = (0, t0);
    while epoch >= start + len {
        start += len;
        len *= mult;
    }
    lr_max * 0.5 * (1.0 + (PI * (epoch - start) as f64 / len as f64).cos())
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}
