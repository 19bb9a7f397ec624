use super::{Result, Scalar, Tensor, TensorError};

fn expect_rank<S: Scalar>(t: &Tensor<S>, rank: usize, op: &'static str, what: &str) -> Result<()> {
    if t.ndim() != rank {
        return Err(TensorError::Invalid {
            op,
            msg: format!("{what} must have rank {rank}, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

/// Output spatial extents of a convolution, or `None` if they would not be
/// positive.
pub fn conv2d_output_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Option<(usize, usize)> {
    if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
        return None;
    }
    Some(((h + 2 * padding - kh) / stride + 1, (w + 2 * padding - kw) / stride + 1))
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

fn conv_geom<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    expect_rank(input, 4, "conv2d", "input")?;
    expect_rank(weight, 4, "conv2d", "weight")?;
    let (n, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (o, ci, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if c != ci {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let (oh, ow) = conv2d_output_hw(h, w, kh, kw, stride, padding).ok_or_else(|| {
        TensorError::Invalid {
            op: "conv2d",
            msg: format!(
                "input {:?} with kernel {:?}, stride {stride}, padding {padding} has no valid output",
                input.shape(),
                weight.shape()
            ),
        }
    })?;
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        oh,
        ow,
        stride,
        padding,
    })
}

impl ConvGeom {
    /// Input coordinate for an output position and kernel tap, if inside the
    /// unpadded input.
    #[inline]
    fn src(&self, out: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + tap) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// 2-D cross-correlation of an NCHW input with OIkk weights.
///
/// The loop nest (batch, out-channel, row, col, in-channel, ky, kx) is fixed,
/// so a given input always produces the same bits.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let g = conv_geom(input, weight, stride, padding)?;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![S::zero(); g.n * g.o * g.oh * g.ow];
    for n in 0..g.n {
        for o in 0..g.o {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = S::zero();
                    for c in 0..g.c {
                        let xbase = (n * g.c + c) * g.h;
                        let wbase = (o * g.c + c) * g.kh;
                        for ky in 0..g.kh {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = g.src(ox, kx, g.w) else { continue };
                                acc = acc + x[(xbase + iy) * g.w + ix] * wt[(wbase + ky) * g.kw + kx];
                            }
                        }
                    }
                    out[((n * g.o + o) * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.n, g.o, g.oh, g.ow], out))
}

/// Gradients of `conv2d` with respect to its input and weights.
pub(crate) fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let g = conv_geom(input, weight, stride, padding)?;
    let x = input.data();
    let wt = weight.data();
    let gy = grad_out.data();
    let mut gx = vec![S::zero(); x.len()];
    let mut gw = vec![S::zero(); wt.len()];
    for n in 0..g.n {
        for o in 0..g.o {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let go = gy[((n * g.o + o) * g.oh + oy) * g.ow + ox];
                    for c in 0..g.c {
                        let xbase = (n * g.c + c) * g.h;
                        let wbase = (o * g.c + c) * g.kh;
                        for ky in 0..g.kh {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = g.src(ox, kx, g.w) else { continue };
                                let xi = (xbase + iy) * g.w + ix;
                                let wi = (wbase + ky) * g.kw + kx;
                                gx[xi] = gx[xi] + go * wt[wi];
                                gw[wi] = gw[wi] + go * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(input.shape().to_vec(), gx),
        Tensor::from_parts(weight.shape().to_vec(), gw),
    ))
}

fn channel_view<S: Scalar>(input: &Tensor<S>, op: &'static str) -> Result<(usize, usize, usize)> {
    if input.ndim() < 2 {
        return Err(TensorError::Invalid {
            op,
            msg: format!("input must be at least rank 2, got {:?}", input.shape()),
        });
    }
    let n = input.shape()[0];
    let c = input.shape()[1];
    let inner = input.shape()[2..].iter().product();
    Ok((n, c, inner))
}

/// Per-channel affine normalization `gamma * (x - mu) / sigma + beta`.
///
/// `sigma` is the stored standard deviation with the stabilizing epsilon
/// already folded in at training time, so no epsilon appears here.
pub fn batch_norm<S: Scalar>(
    input: &Tensor<S>,
    mu: &[S],
    sigma: &[S],
    gamma: &[S],
    beta: &[S],
) -> Result<Tensor<S>> {
    let (n, c, inner) = channel_view(input, "batch_norm")?;
    for (name, p) in [("mu", mu), ("sigma", sigma), ("gamma", gamma), ("beta", beta)] {
        if p.len() != c {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                msg: format!(
                    "{name} has {} channels but input {:?} has {c}",
                    p.len(),
                    input.shape()
                ),
            });
        }
    }
    if let Some(i) = sigma.iter().position(|&s| !(s > S::zero())) {
        return Err(TensorError::Invalid {
            op: "batch_norm",
            msg: format!("sigma[{i}] = {} must be positive", sigma[i]),
        });
    }
    let x = input.data();
    let mut out = vec![S::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                out[i] = gamma[ch] * ((x[i] - mu[ch]) / sigma[ch]) + beta[ch];
            }
        }
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

/// `input @ weight^T + bias` for `[N, F]` input and `[O, F]` weight.
pub fn linear<S: Scalar>(input: &Tensor<S>, weight: &Tensor<S>, bias: &[S]) -> Result<Tensor<S>> {
    expect_rank(input, 2, "linear", "input")?;
    expect_rank(weight, 2, "linear", "weight")?;
    let (n, f) = (input.shape()[0], input.shape()[1]);
    let (o, fw) = (weight.shape()[0], weight.shape()[1]);
    if f != fw || bias.len() != o {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let x = input.data();
    let w = weight.data();
    let mut out = vec![S::zero(); n * o];
    for b in 0..n {
        for j in 0..o {
            let mut acc = S::zero();
            for k in 0..f {
                acc = acc + x[b * f + k] * w[j * f + k];
            }
            out[b * o + j] = acc + bias[j];
        }
    }
    Ok(Tensor::from_parts(vec![n, o], out))
}

/// Mean over non-overlapping `size x size` windows.
pub fn avgpool2d<S: Scalar>(input: &Tensor<S>, size: usize) -> Result<Tensor<S>> {
    expect_rank(input, 4, "avgpool2d", "input")?;
    let (n, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    if size == 0 || h % size != 0 || w % size != 0 {
        return Err(TensorError::Invalid {
            op: "avgpool2d",
            msg: format!("window {size} does not divide spatial extent {h}x{w}"),
        });
    }
    let (oh, ow) = (h / size, w / size);
    let norm = S::from_usize(size * size);
    let x = input.data();
    let mut out = vec![S::zero(); n * c * oh * ow];
    for nc in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = S::zero();
                for dy in 0..size {
                    for dx in 0..size {
                        acc = acc + x[(nc * h + oy * size + dy) * w + ox * size + dx];
                    }
                }
                out[(nc * oh + oy) * ow + ox] = acc / norm;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub(crate) fn avgpool2d_backward<S: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<S>,
    size: usize,
) -> Tensor<S> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (oh, ow) = (h / size, w / size);
    let norm = S::from_usize(size * size);
    let gy = grad_out.data();
    let mut gx = vec![S::zero(); n * c * h * w];
    for nc in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                gx[(nc * h + y) * w + x] = gy[(nc * oh + y / size) * ow + x / size] / norm;
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), gx)
}

/// Step function with `H(0) = 0`: only strictly positive entries map to one.
pub fn heaviside<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| if v > S::zero() { S::one() } else { S::zero() })
}

/// Collapses every axis after the batch axis.
pub fn flatten<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let n = input.batch();
    let rest = input.numel().checked_div(n).unwrap_or(0);
    Tensor::from_parts(vec![n, rest], input.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_all_ones_sums_to_nine() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0f32);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0f32);
        let y = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 1, 5, 4], &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0f32);
        assert_eq!(conv2d(&x, &w, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_matches_naive_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 2, 4, 4], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let y = conv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        // zero-padded copy, then a direct quadruple loop in f64
        let mut padded = vec![0.0f64; 2 * 6 * 6];
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    padded[(c * 6 + i + 1) * 6 + j + 1] = x.data()[(c * 4 + i) * 4 + j] as f64;
                }
            }
        }
        for o in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    let mut acc = 0.0f64;
                    for c in 0..2 {
                        for a in 0..3 {
                            for b in 0..3 {
                                acc += padded[(c * 6 + i + a) * 6 + j + b]
                                    * w.data()[((o * 2 + c) * 3 + a) * 3 + b] as f64;
                            }
                        }
                    }
                    let got = y.data()[(o * 4 + i) * 4 + j] as f64;
                    assert!((got - acc).abs() <= 1e-6, "o={o} i={i} j={j}: {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn conv_stride_shape_and_errors() {
        let x = Tensor::<f32>::zeros(&[1, 2, 8, 8]);
        let w = Tensor::<f32>::zeros(&[4, 2, 3, 3]);
        assert_eq!(conv2d(&x, &w, 2, 1).unwrap().shape(), &[1, 4, 4, 4]);
        let bad = Tensor::<f32>::zeros(&[4, 3, 3, 3]);
        let err = conv2d(&x, &bad, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 8, 8]") && msg.contains("[4, 3, 3, 3]"), "{msg}");
        let big = Tensor::<f32>::zeros(&[1, 2, 9, 9]);
        assert!(conv2d(&x, &big, 1, 0).is_err());
    }

    #[test]
    fn batch_norm_identity_and_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 2, 2], &mut rng);
        let ones = [1.0f32; 3];
        let zeros = [0.0f32; 3];
        assert_eq!(batch_norm(&x, &zeros, &ones, &ones, &zeros).unwrap(), x);

        let mu = [0.3f32, -1.2, 2.5];
        let beta = [0.7f32, 0.1, -0.4];
        let mut centered = Tensor::<f32>::zeros(&[1, 3, 2, 2]);
        for (c, &m) in mu.iter().enumerate() {
            centered.data_mut()[c * 4..c * 4 + 4].fill(m);
        }
        let y = batch_norm(&centered, &mu, &[0.5, 2.0, 1.5], &[3.0, -1.0, 0.2], &beta).unwrap();
        for (c, &b) in beta.iter().enumerate() {
            assert!(y.data()[c * 4..c * 4 + 4].iter().all(|&v| v == b));
        }
    }

    #[test]
    fn batch_norm_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[3, 5, 2, 3], &mut rng);
        let mu: Vec<f32> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sigma: Vec<f32> = (0..5).map(|_| rng.random_range(0.2..2.0)).collect();
        let gamma: Vec<f32> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let beta: Vec<f32> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = batch_norm(&x, &mu, &sigma, &gamma, &beta).unwrap();
        for (i, (&got, &xi)) in y.data().iter().zip(x.data()).enumerate() {
            let c = (i / 6) % 5;
            let want = gamma[c] as f64 * (xi as f64 - mu[c] as f64) / sigma[c] as f64 + beta[c] as f64;
            assert!((got as f64 - want).abs() <= 1e-6);
        }
    }

    #[test]
    fn batch_norm_rejects_channel_mismatch_and_zero_sigma() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        assert!(batch_norm(&x, &[0.0], &[1.0], &[1.0], &[0.0]).is_err());
        assert!(batch_norm(&x, &[0.0; 2], &[1.0, 0.0], &[1.0; 2], &[0.0; 2]).is_err());
    }

    #[test]
    fn heaviside_boundary_is_zero() {
        let x = Tensor::new(vec![4], vec![-1.0f32, 0.0, 1e-30, 2.0]).unwrap();
        assert_eq!(heaviside(&x).data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn avgpool_constant_field_and_divisibility() {
        let x = Tensor::full(&[2, 3, 4, 6], 0.75f32);
        let y = avgpool2d(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 0.75));
        assert!(avgpool2d(&Tensor::<f32>::zeros(&[1, 1, 5, 4]), 2).is_err());
    }

    #[test]
    fn linear_identity_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[3, 4], &mut rng);
        let mut eye = Tensor::<f32>::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        assert_eq!(linear(&x, &eye, &[0.0; 4]).unwrap(), x);
        assert!(linear(&x, &eye, &[0.0; 3]).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 3, 6, 6], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let a = conv2d(&x, &w, 1, 1).unwrap();
        let b = conv2d(&x, &w, 1, 1).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
