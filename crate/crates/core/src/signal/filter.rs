//! Butterworth band-pass design (bilinear transform, second-order sections)
//! and zero-phase forward-backward filtering.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
struct Complex {
    re: f64,
    im: f64,
}

impl Complex {
    fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }
    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.im + o.im)
    }
    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.im - o.im)
    }
    fn mul(self, o: Self) -> Self {
        Self::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }
    fn scale(self, s: f64) -> Self {
        Self::new(self.re * s, self.im * s)
    }
    fn div(self, o: Self) -> Self {
        let d = o.re * o.re + o.im * o.im;
        Self::new(
            (self.re * o.re + self.im * o.im) / d,
            (self.im * o.re - self.re * o.im) / d,
        )
    }
    fn abs(self) -> f64 {
        self.re.hypot(self.im)
    }
    fn sqrt(self) -> Self {
        let r = self.abs();
        let re = ((r + self.re) / 2.0).sqrt();
        let im = ((r - self.re) / 2.0).sqrt().copysign(self.im);
        Self::new(re, im)
    }
    fn expi(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }
}

/// One biquad in transposed direct form II: `b = [b0, b1, b2]`, `a = [1, a1, a2]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }

    /// State that makes a unit step input stationary from the first sample.
    fn step_state(&self) -> [f64; 2] {
        let y = self.dc_gain();
        let z2 = self.b[2] - self.a[2] * y;
        let z1 = self.b[1] - self.a[1] * y + z2;
        [z1, z2]
    }

    fn response(&self, z_inv: Complex) -> Complex {
        let z2 = z_inv.mul(z_inv);
        let num = Complex::new(self.b[0], 0.0)
            .add(z_inv.scale(self.b[1]))
            .add(z2.scale(self.b[2]));
        let den = Complex::new(self.a[0], 0.0)
            .add(z_inv.scale(self.a[1]))
            .add(z2.scale(self.a[2]));
        num.div(den)
    }
}

/// Cascade of second-order sections.
#[derive(Clone, Debug, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
}

impl SosFilter {
    /// Band-pass Butterworth with an `order`-pole low-pass prototype (the
    /// resulting digital filter has `2 * order` poles).
    pub fn butterworth_bandpass(order: usize, lo_hz: f64, hi_hz: f64, fs: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("bandpass", "order must be positive"));
        }
        if !(lo_hz > 0.0 && lo_hz < hi_hz && hi_hz < fs / 2.0) {
            return Err(Error::invalid(
                "bandpass",
                format!("need 0 < lo < hi < fs/2, got lo={lo_hz} hi={hi_hz} fs={fs}"),
            ));
        }
        let fs2 = 2.0 * fs;
        let w_lo = fs2 * (std::f64::consts::PI * lo_hz / fs).tan();
        let w_hi = fs2 * (std::f64::consts::PI * hi_hz / fs).tan();
        let bw = w_hi - w_lo;
        let w0 = (w_lo * w_hi).sqrt();

        // Upper-half-plane prototype poles; their conjugates are implied.
        let mut sections = Vec::with_capacity(order);
        for k in 0..order.div_ceil(2) {
            let theta = std::f64::consts::PI * (2 * k + 1 + order) as f64 / (2 * order) as f64;
            let p = Complex::expi(theta);
            let half = p.scale(bw / 2.0);
            let disc = half.mul(half).sub(Complex::new(w0 * w0, 0.0)).sqrt();
            let to_z = |q: Complex| {
                Complex::new(fs2, 0.0)
                    .add(q)
                    .div(Complex::new(fs2, 0.0).sub(q))
            };
            let (z1, z2) = (to_z(half.add(disc)), to_z(half.sub(disc)));
            let section = |u: Complex, v: Complex| {
                let sum = u.add(v);
                let prod = u.mul(v);
                Biquad {
                    b: [1.0, 0.0, -1.0],
                    a: [1.0, -sum.re, prod.re],
                }
            };
            let conj = |q: Complex| Complex::new(q.re, -q.im);
            if order % 2 == 1 && k == order / 2 {
                // real prototype pole: its two band-pass images pair with each other
                sections.push(section(z1, z2));
            } else {
                sections.push(section(z1, conj(z1)));
                sections.push(section(z2, conj(z2)));
            }
        }
        let mut filter = SosFilter { sections };
        // Unit gain at the geometric band center.
        let center = 2.0 * (w0 / fs2).atan();
        let g = filter.response_at(center).abs();
        filter.sections[0].b.iter_mut().for_each(|b| *b /= g);
        Ok(filter)
    }

    /// Complex response at digital angular frequency `omega` (radians/sample).
    fn response_at(&self, omega: f64) -> Complex {
        let z_inv = Complex::expi(-omega);
        self.sections
            .iter()
            .fold(Complex::new(1.0, 0.0), |acc, s| acc.mul(s.response(z_inv)))
    }

    /// Magnitude response at `freq_hz`.
    pub fn gain(&self, freq_hz: f64, fs: f64) -> f64 {
        self.response_at(2.0 * std::f64::consts::PI * freq_hz / fs)
            .abs()
    }

    /// Number of poles.
    pub fn order(&self) -> usize {
        2 * self.sections.len()
    }

    fn run(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let mut scale = x0;
        for s in &self.sections {
            let [mut z1, mut z2] = s.step_state().map(|v| v * scale);
            scale *= s.dc_gain();
            for v in x.iter_mut() {
                let input = *v;
                let y = s.b[0] * input + z1;
                z1 = s.b[1] * input - s.a[1] * y + z2;
                z2 = s.b[2] * input - s.a[2] * y;
                *v = y;
            }
        }
    }

    /// Zero-phase filtering: odd-reflection padding of `pad` samples at each
    /// end, forward pass, reverse pass, trim. Sections start in the steady
    /// state of the edge sample.
    pub fn filtfilt(&self, x: &[f32], pad: usize) -> Vec<f32> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = pad.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        let (first, last) = (x[0] as f64, x[n - 1] as f64);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i] as f64));
        ext.extend(x.iter().map(|&v| v as f64));
        ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i] as f64));
        self.run(&mut ext);
        ext.reverse();
        self.run(&mut ext);
        ext.reverse();
        ext[pad..pad + n].iter().map(|&v| v as f32).collect()
    }
}
