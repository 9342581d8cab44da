//! Minimal layers for the toy denoiser, channels-last (`(h, w, c)`) layout.
//!
//! Convolutions are 3x3 with zero padding; weights are laid out as
//! `(ky, kx, c_in, c_out)`.

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub height: usize,
    pub width: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        9 * self.c_in * self.c_out
    }

    fn taps(&self, i: usize, j: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (h, w) = (self.height as isize, self.width as isize);
        (0..9usize).filter_map(move |k| {
            let ni = i as isize + (k / 3) as isize - 1;
            let nj = j as isize + (k % 3) as isize - 1;
            (ni >= 0 && ni < h && nj >= 0 && nj < w).then(|| (k, (ni * w + nj) as usize))
        })
    }
}

pub fn conv3x3(shape: ConvShape, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let ConvShape { height, width, c_in, c_out } = shape;
    let mut out = vec![0.0; height * width * c_out];
    for i in 0..height {
        for j in 0..width {
            let o = &mut out[(i * width + j) * c_out..(i * width + j + 1) * c_out];
            o.copy_from_slice(bias);
            for (k, q) in shape.taps(i, j) {
                let x = &input[q * c_in..(q + 1) * c_in];
                for (ci, &xv) in x.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &weight[(k * c_in + ci) * c_out..(k * c_in + ci + 1) * c_out];
                    for (ov, wv) in o.iter_mut().zip(wrow) {
                        *ov += xv * wv;
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when asked.
pub fn conv3x3_backward(
    shape: ConvShape,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let ConvShape { height, width, c_in, c_out } = shape;
    let mut grad_in = want_input.then(|| vec![0.0; height * width * c_in]);
    for i in 0..height {
        for j in 0..width {
            let g = &grad_out[(i * width + j) * c_out..(i * width + j + 1) * c_out];
            for (b, gv) in grad_bias.iter_mut().zip(g) {
                *b += gv;
            }
            for (k, q) in shape.taps(i, j) {
                for ci in 0..c_in {
                    let xv = input[q * c_in + ci];
                    let base = (k * c_in + ci) * c_out;
                    if xv != 0.0 {
                        for (gw, gv) in grad_weight[base..base + c_out].iter_mut().zip(g) {
                            *gw += xv * gv;
                        }
                    }
                    if let Some(gi) = grad_in.as_mut() {
                        gi[q * c_in + ci] += crate::attention::dot(&weight[base..base + c_out], g);
                    }
                }
            }
        }
    }
    grad_in
}

/// Input gradient only, for pulling gradients back to the latent.
pub fn conv3x3_input_grad(shape: ConvShape, weight: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let ConvShape { height, width, c_in, c_out } = shape;
    let mut grad_in = vec![0.0; height * width * c_in];
    for i in 0..height {
        for j in 0..width {
            let g = &grad_out[(i * width + j) * c_out..(i * width + j + 1) * c_out];
            for (k, q) in shape.taps(i, j) {
                for ci in 0..c_in {
                    let base = (k * c_in + ci) * c_out;
                    grad_in[q * c_in + ci] += crate::attention::dot(&weight[base..base + c_out], g);
                }
            }
        }
    }
    grad_in
}

/// `(rows, n_in) x (n_in, n_out)`, row-major, no bias.
pub fn matmul(input: &[f64], rows: usize, n_in: usize, weight: &[f64], n_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n_out];
    for r in 0..rows {
        let o = &mut out[r * n_out..(r + 1) * n_out];
        for (a, &x) in input[r * n_in..(r + 1) * n_in].iter().enumerate() {
            for (ov, wv) in o.iter_mut().zip(&weight[a * n_out..(a + 1) * n_out]) {
                *ov += x * wv;
            }
        }
    }
    out
}

/// Gradient of `matmul` with respect to its input.
pub fn matmul_input_grad(grad_out: &[f64], rows: usize, n_in: usize, weight: &[f64], n_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n_in];
    for r in 0..rows {
        let g = &grad_out[r * n_out..(r + 1) * n_out];
        for a in 0..n_in {
            out[r * n_in + a] = crate::attention::dot(&weight[a * n_out..(a + 1) * n_out], g);
        }
    }
    out
}

/// Accumulates the gradient of `matmul` with respect to its weight.
pub fn matmul_weight_grad(input: &[f64], rows: usize, n_in: usize, grad_out: &[f64], n_out: usize, grad_weight: &mut [f64]) {
    for r in 0..rows {
        let g = &grad_out[r * n_out..(r + 1) * n_out];
        for (a, &x) in input[r * n_in..(r + 1) * n_in].iter().enumerate() {
            for (gw, gv) in grad_weight[a * n_out..(a + 1) * n_out].iter_mut().zip(g) {
                *gw += x * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    // Direct definition with explicit bounds checks.
    fn conv_oracle(s: ConvShape, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; s.height * s.width * s.c_out];
        for i in 0..s.height as isize {
            for j in 0..s.width as isize {
                for co in 0..s.c_out {
                    let mut acc = b[co];
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            let (ni, nj) = (i + ky - 1, j + kx - 1);
                            if ni < 0 || nj < 0 || ni >= s.height as isize || nj >= s.width as isize {
                                continue;
                            }
                            for ci in 0..s.c_in {
                                let xv = x[((ni as usize) * s.width + nj as usize) * s.c_in + ci];
                                acc += xv * w[(((ky * 3 + kx) as usize) * s.c_in + ci) * s.c_out + co];
                            }
                        }
                    }
                    out[((i as usize) * s.width + j as usize) * s.c_out + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = ConvShape { height: 4, width: 5, c_in: 2, c_out: 3 };
        let x = random(40, &mut rng);
        let w = random(s.weight_len(), &mut rng);
        let b = random(3, &mut rng);
        let a = conv3x3(s, &x, &w, &b);
        let o = conv_oracle(s, &x, &w, &b);
        for (p, q) in a.iter().zip(&o) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = ConvShape { height: 3, width: 4, c_in: 2, c_out: 2 };
        let x = random(24, &mut rng);
        let w = random(s.weight_len(), &mut rng);
        let b = random(2, &mut rng);
        let g = random(24, &mut rng);
        let f = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
            conv3x3(s, x, w, b).iter().zip(&g).map(|(a, c)| a * c).sum()
        };
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; 2];
        let gx = conv3x3_backward(s, &x, &w, &g, &mut gw, &mut gb, true).unwrap();
        assert_eq!(gx, conv3x3_input_grad(s, &w, &g));
        let h = 1e-6;
        for n in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[n] += h;
            m[n] -= h;
            assert!(((f(&p, &w, &b) - f(&m, &w, &b)) / (2.0 * h) - gx[n]).abs() < 1e-7);
        }
        for n in 0..w.len() {
            let (mut p, mut m) = (w.clone(), w.clone());
            p[n] += h;
            m[n] -= h;
            assert!(((f(&x, &p, &b) - f(&x, &m, &b)) / (2.0 * h) - gw[n]).abs() < 1e-7);
        }
        for n in 0..2 {
            let (mut p, mut m) = (b.clone(), b.clone());
            p[n] += h;
            m[n] -= h;
            assert!(((f(&x, &w, &p) - f(&x, &w, &m)) / (2.0 * h) - gb[n]).abs() < 1e-7);
        }
    }

    #[test]
    fn silu_grad_matches_finite_differences() {
        for x in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let fd = (silu(x + 1e-6) - silu(x - 1e-6)) / 2e-6;
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(6, &mut rng);
        let w = random(6, &mut rng);
        let g = random(4, &mut rng);
        let f = |x: &[f64], w: &[f64]| -> f64 { matmul(x, 2, 3, w, 2).iter().zip(&g).map(|(a, c)| a * c).sum() };
        let gx = matmul_input_grad(&g, 2, 3, &w, 2);
        let mut gw = vec![0.0; 6];
        matmul_weight_grad(&x, 2, 3, &g, 2, &mut gw);
        let h = 1e-6;
        for n in 0..6 {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[n] += h;
            m[n] -= h;
            assert!(((f(&p, &w) - f(&m, &w)) / (2.0 * h) - gx[n]).abs() < 1e-8);
            let (mut p, mut m) = (w.clone(), w.clone());
            p[n] += h;
            m[n] -= h;
            assert!(((f(&x, &p) - f(&x, &m)) / (2.0 * h) - gw[n]).abs() < 1e-8);
        }
    }
}
