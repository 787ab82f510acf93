//! Layer definitions with explicit forward and backward passes.
//!
//! Convolutions use cross-correlation with zero padding along the zenith
//! (row) axis and circular padding along the azimuth (column) axis, so the
//! network respects the 360 degree wrap of its range-image input.

use super::tensor::Tensor;
use super::NetError;
use rand::Rng;
use rand_distr::StandardNormal;

/// Initial PReLU slope.
const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
    },
    MaxPool2d {
        pool_h: usize,
        pool_w: usize,
    },
    FullyConnected {
        in_features: usize,
        out_features: usize,
    },
    PRelu {
        channels: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<(), NetError> {
        let ok = match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride } => {
                in_channels >= 1 && out_channels >= 1 && kernel_h >= 1 && kernel_w >= 1 && stride >= 1
            }
            LayerSpec::MaxPool2d { pool_h, pool_w } => pool_h >= 1 && pool_w >= 1,
            LayerSpec::FullyConnected { in_features, out_features } => {
                in_features >= 1 && out_features >= 1
            }
            LayerSpec::PRelu { channels } => channels >= 1,
            LayerSpec::Flatten => true,
        };
        if ok {
            Ok(())
        } else {
            Err(NetError::InvalidLayer(format!("{self:?}")))
        }
    }

    /// Shape of the output given an input shape, or an error naming both.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NetError> {
        let mismatch = |expected: String| NetError::ShapeMismatch {
            context: format!("{self:?}"),
            expected,
            actual: format!("{input:?}"),
        };
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride } => {
                let &[c, h, w] = input else {
                    return Err(mismatch("(channels, height, width)".into()));
                };
                if c != in_channels {
                    return Err(mismatch(format!("{in_channels} input channels")));
                }
                let pad_h = (kernel_h - 1) / 2;
                if h + 2 * pad_h < kernel_h {
                    return Err(mismatch(format!("height >= {}", kernel_h - 2 * pad_h)));
                }
                if w < kernel_w {
                    return Err(mismatch(format!("width >= {kernel_w}")));
                }
                let h_out = (h + 2 * pad_h - kernel_h) / stride + 1;
                let w_out = w.div_ceil(stride);
                Ok(vec![out_channels, h_out, w_out])
            }
            LayerSpec::MaxPool2d { pool_h, pool_w } => {
                let &[c, h, w] = input else {
                    return Err(mismatch("(channels, height, width)".into()));
                };
                if h < pool_h || w < pool_w {
                    return Err(mismatch(format!("at least {pool_h}x{pool_w} spatial extent")));
                }
                Ok(vec![c, h / pool_h, w / pool_w])
            }
            LayerSpec::FullyConnected { in_features, out_features } => {
                let numel: usize = input.iter().product();
                if numel != in_features {
                    return Err(mismatch(format!("{in_features} features")));
                }
                Ok(vec![out_features])
            }
            LayerSpec::PRelu { channels } => {
                let leading = input.first().copied().unwrap_or(0);
                if leading != channels {
                    return Err(mismatch(format!("{channels} channels in the leading extent")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Parameter tensor shapes in declaration order: conv `[kernel, bias]`,
    /// fully connected `[weight, bias]`, prelu `[slopes]`, pool/flatten none.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, .. } => vec![
                vec![out_channels, in_channels, kernel_h, kernel_w],
                vec![out_channels],
            ],
            LayerSpec::FullyConnected { in_features, out_features } => {
                vec![vec![out_features, in_features], vec![out_features]]
            }
            LayerSpec::PRelu { channels } => vec![vec![channels]],
            LayerSpec::MaxPool2d { .. } | LayerSpec::Flatten => vec![],
        }
    }

    /// Freshly initialized parameter tensors in declaration order:
    /// conv `[kernel, bias]`, fully connected `[weight, bias]`,
    /// prelu `[slopes]`, pool/flatten none.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<Tensor> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, .. } => {
                let fan_in = (in_channels * kernel_h * kernel_w) as f64;
                let std = (2.0 / fan_in).sqrt();
                let kernel = Tensor::new(
                    vec![out_channels, in_channels, kernel_h, kernel_w],
                    (0..out_channels * in_channels * kernel_h * kernel_w)
                        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
                .unwrap();
                vec![kernel, Tensor::zeros(vec![out_channels])]
            }
            LayerSpec::FullyConnected { in_features, out_features } => {
                let std = (2.0 / in_features as f64).sqrt();
                let weight = Tensor::new(
                    vec![out_features, in_features],
                    (0..out_features * in_features)
                        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
                .unwrap();
                vec![weight, Tensor::zeros(vec![out_features])]
            }
            LayerSpec::PRelu { channels } => {
                vec![Tensor::new(vec![channels], vec![PRELU_INIT; channels]).unwrap()]
            }
            LayerSpec::MaxPool2d { .. } | LayerSpec::Flatten => vec![],
        }
    }
}

/// Per-layer state recorded by a traced forward pass and consumed by the
/// backward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub(crate) input: Tensor,
    pub(crate) aux: TraceAux,
}

#[derive(Debug, Clone)]
pub(crate) enum TraceAux {
    None,
    /// Flat input index of the maximum for every pooled output cell.
    PoolArgmax(Vec<usize>),
}

fn wrap_col(base: isize, width: usize) -> usize {
    let w = width as isize;
    let mut c = base;
    if c < 0 {
        c += w;
    } else if c >= w {
        c -= w;
    }
    debug_assert!((0..w).contains(&c));
    c as usize
}

/// `y[j] += k * x[wrap(j + off)]` for every `j`, with the in-range middle
/// done as a straight slice pass.
#[inline]
fn add_shifted_row(y: &mut [f64], x: &[f64], k: f64, off: isize, w: usize) {
    let lo = (-off).max(0) as usize;
    let hi = ((w as isize - off).min(w as isize)).max(0) as usize;
    for j in 0..lo {
        y[j] += k * x[(j as isize + off + w as isize) as usize];
    }
    for (yj, xj) in y[lo..hi].iter_mut().zip(&x[(lo as isize + off) as usize..]) {
        *yj += k * xj;
    }
    for j in hi..w {
        y[j] += k * x[(j as isize + off - w as isize) as usize];
    }
}

/// `gx[wrap(j + off)] += k * gy[j]` and returns `sum_j gy[j] * x[wrap(j + off)]`,
/// the kernel-tap gradient contribution of one row pair.
#[inline]
fn scatter_shifted_row(gx: &mut [f64], x: &[f64], gy: &[f64], k: f64, off: isize, w: usize) -> f64 {
    let lo = (-off).max(0) as usize;
    let hi = ((w as isize - off).min(w as isize)).max(0) as usize;
    let mut dot = 0.0;
    for j in 0..lo {
        let src = (j as isize + off + w as isize) as usize;
        gx[src] += k * gy[j];
        dot += gy[j] * x[src];
    }
    let base = (lo as isize + off) as usize;
    for (j, gyj) in gy[lo..hi].iter().enumerate() {
        gx[base + j] += k * gyj;
        dot += gyj * x[base + j];
    }
    for j in hi..w {
        let src = (j as isize + off - w as isize) as usize;
        gx[src] += k * gy[j];
        dot += gy[j] * x[src];
    }
    dot
}

/// Runs a layer forward. `params` must match `spec`'s `init_params`
/// structure.
pub fn forward(
    spec: &LayerSpec,
    params: &[Tensor],
    input: &Tensor,
) -> Result<(Tensor, LayerTrace), NetError> {
    let out_shape = spec.output_shape(input.shape())?;
    let mut output = Tensor::zeros(out_shape);
    let mut aux = TraceAux::None;
    match *spec {
        LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride } => {
            let [_, h, w] = *input.shape() else { unreachable!() };
            let [_, h_out, w_out] = *output.shape() else { unreachable!() };
            let pad_h = (kernel_h - 1) / 2;
            let pad_w = (kernel_w - 1) as isize / 2;
            let kernel = params[0].data();
            let bias = params[1].data();
            let x = input.data();
            let y = output.data_mut();
            if stride == 1 {
                // Row-accumulation form: for each kernel tap, add the
                // shifted input row onto the output row. The circular
                // column wrap touches only `pad` elements at each edge, so
                // the middle stays a contiguous slice operation.
                for o in 0..out_channels {
                    let y_plane = &mut y[o * h_out * w_out..(o + 1) * h_out * w_out];
                    for value in y_plane.iter_mut() {
                        *value = bias[o];
                    }
                    for c in 0..in_channels {
                        let x_plane = &x[c * h * w..(c + 1) * h * w];
                        let k_base = ((o * in_channels + c) * kernel_h) * kernel_w;
                        for oi in 0..h_out {
                            let y_row = &mut y_plane[oi * w_out..(oi + 1) * w_out];
                            for u in 0..kernel_h {
                                let r = (oi + u) as isize - pad_h as isize;
                                if r < 0 || r >= h as isize {
                                    continue;
                                }
                                let x_row = &x_plane[r as usize * w..(r as usize + 1) * w];
                                for v in 0..kernel_w {
                                    let kv = kernel[k_base + u * kernel_w + v];
                                    let off = v as isize - pad_w;
                                    add_shifted_row(y_row, x_row, kv, off, w);
                                }
                            }
                        }
                    }
                }
            } else {
                for o in 0..out_channels {
                    for oi in 0..h_out {
                        for oj in 0..w_out {
                            let mut acc = bias[o];
                            for c in 0..in_channels {
                                let x_plane = &x[c * h * w..(c + 1) * h * w];
                                let k_base = ((o * in_channels + c) * kernel_h) * kernel_w;
                                for u in 0..kernel_h {
                                    let r = (oi * stride + u) as isize - pad_h as isize;
                                    if r < 0 || r >= h as isize {
                                        continue;
                                    }
                                    let x_row = &x_plane[r as usize * w..(r as usize + 1) * w];
                                    let k_row = &kernel[k_base + u * kernel_w..][..kernel_w];
                                    for (v, &kv) in k_row.iter().enumerate() {
                                        let col =
                                            wrap_col((oj * stride + v) as isize - pad_w, w);
                                        acc += kv * x_row[col];
                                    }
                                }
                            }
                            y[(o * h_out + oi) * w_out + oj] = acc;
                        }
                    }
                }
            }
        }
        LayerSpec::MaxPool2d { pool_h, pool_w } => {
            let [c_n, h, w] = *input.shape() else { unreachable!() };
            let [_, h_out, w_out] = *output.shape() else { unreachable!() };
            let x = input.data();
            let y = output.data_mut();
            let mut argmax = vec![0usize; c_n * h_out * w_out];
            for c in 0..c_n {
                for oi in 0..h_out {
                    for oj in 0..w_out {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for u in 0..pool_h {
                            for v in 0..pool_w {
                                let idx = (c * h + oi * pool_h + u) * w + oj * pool_w + v;
                                // Strict comparison keeps the first maximum
                                // in scan order, so ties route gradients
                                // deterministically.
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let out_idx = (c * h_out + oi) * w_out + oj;
                        y[out_idx] = best;
                        argmax[out_idx] = best_idx;
                    }
                }
            }
            aux = TraceAux::PoolArgmax(argmax);
        }
        LayerSpec::FullyConnected { in_features, out_features } => {
            let weight = params[0].data();
            let bias = params[1].data();
            let x = input.data();
            let y = output.data_mut();
            for o in 0..out_features {
                let row = &weight[o * in_features..(o + 1) * in_features];
                y[o] = bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        LayerSpec::PRelu { channels } => {
            let slopes = params[0].data();
            let per_channel = input.numel() / channels;
            let x = input.data();
            let y = output.data_mut();
            for c in 0..channels {
                let a = slopes[c];
                for i in 0..per_channel {
                    let idx = c * per_channel + i;
                    y[idx] = if x[idx] > 0.0 { x[idx] } else { a * x[idx] };
                }
            }
        }
        LayerSpec::Flatten => {
            output.data_mut().copy_from_slice(input.data());
        }
    }
    Ok((output, LayerTrace { input: input.clone(), aux }))
}

/// Propagates `grad_out` through a layer, returning the parameter gradients
/// (same structure as the parameters) and the input gradient.
pub fn backward(
    spec: &LayerSpec,
    params: &[Tensor],
    trace: &LayerTrace,
    grad_out: &Tensor,
) -> Result<(Vec<Tensor>, Tensor), NetError> {
    let out_shape = spec.output_shape(trace.input.shape())?;
    if grad_out.shape() != out_shape.as_slice() {
        return Err(NetError::ShapeMismatch {
            context: format!("backward of {spec:?}"),
            expected: format!("{out_shape:?}"),
            actual: format!("{:?}", grad_out.shape()),
        });
    }
    let input = &trace.input;
    let mut grad_input = Tensor::zeros(input.shape().to_vec());
    let mut param_grads: Vec<Tensor> =
        params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
    match *spec {
        LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride } => {
            let [_, h, w] = *input.shape() else { unreachable!() };
            let [_, h_out, w_out] = out_shape[..] else { unreachable!() };
            let pad_h = (kernel_h - 1) / 2;
            let pad_w = (kernel_w - 1) as isize / 2;
            let kernel = params[0].data();
            let x = input.data();
            let gy = grad_out.data();
            let (gk_t, gb_t) = {
                let (a, b) = param_grads.split_at_mut(1);
                (&mut a[0], &mut b[0])
            };
            let gk = gk_t.data_mut();
            let gb = gb_t.data_mut();
            let gx = grad_input.data_mut();
            if stride == 1 {
                for o in 0..out_channels {
                    let gy_plane = &gy[o * h_out * w_out..(o + 1) * h_out * w_out];
                    gb[o] += gy_plane.iter().sum::<f64>();
                    for c in 0..in_channels {
                        let plane = c * h * w;
                        let k_base = ((o * in_channels + c) * kernel_h) * kernel_w;
                        for oi in 0..h_out {
                            let gy_row = &gy_plane[oi * w_out..(oi + 1) * w_out];
                            if gy_row.iter().all(|&g| g == 0.0) {
                                continue;
                            }
                            for u in 0..kernel_h {
                                let r = (oi + u) as isize - pad_h as isize;
                                if r < 0 || r >= h as isize {
                                    continue;
                                }
                                let row = plane + r as usize * w;
                                for v in 0..kernel_w {
                                    let off = v as isize - pad_w;
                                    let k = kernel[k_base + u * kernel_w + v];
                                    let dot = scatter_shifted_row(
                                        &mut gx[row..row + w],
                                        &x[row..row + w],
                                        gy_row,
                                        k,
                                        off,
                                        w,
                                    );
                                    gk[k_base + u * kernel_w + v] += dot;
                                }
                            }
                        }
                    }
                }
            } else {
                for o in 0..out_channels {
                    for oi in 0..h_out {
                        for oj in 0..w_out {
                            let g = gy[(o * h_out + oi) * w_out + oj];
                            if g == 0.0 {
                                continue;
                            }
                            gb[o] += g;
                            for c in 0..in_channels {
                                let plane = c * h * w;
                                let k_base = ((o * in_channels + c) * kernel_h) * kernel_w;
                                for u in 0..kernel_h {
                                    let r = (oi * stride + u) as isize - pad_h as isize;
                                    if r < 0 || r >= h as isize {
                                        continue;
                                    }
                                    let row = plane + r as usize * w;
                                    for v in 0..kernel_w {
                                        let col =
                                            wrap_col((oj * stride + v) as isize - pad_w, w);
                                        gk[k_base + u * kernel_w + v] += g * x[row + col];
                                        gx[row + col] += g * kernel[k_base + u * kernel_w + v];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        LayerSpec::MaxPool2d { .. } => {
            let TraceAux::PoolArgmax(argmax) = &trace.aux else {
                return Err(NetError::BackwardWithoutForward);
            };
            let gx = grad_input.data_mut();
            for (out_idx, &in_idx) in argmax.iter().enumerate() {
                gx[in_idx] += grad_out.data()[out_idx];
            }
        }
        LayerSpec::FullyConnected { in_features, out_features } => {
            let weight = params[0].data();
            let x = input.data();
            let gy = grad_out.data();
            let (gw_t, gb_t) = {
                let (a, b) = param_grads.split_at_mut(1);
                (&mut a[0], &mut b[0])
            };
            let gw = gw_t.data_mut();
            let gb = gb_t.data_mut();
            let gx = grad_input.data_mut();
            for o in 0..out_features {
                let g = gy[o];
                gb[o] += g;
                let w_row = &weight[o * in_features..(o + 1) * in_features];
                let gw_row = &mut gw[o * in_features..(o + 1) * in_features];
                for i in 0..in_features {
                    gw_row[i] += g * x[i];
                    gx[i] += g * w_row[i];
                }
            }
        }
        LayerSpec::PRelu { channels } => {
            let slopes = params[0].data();
            let per_channel = input.numel() / channels;
            let x = input.data();
            let gy = grad_out.data();
            let ga = param_grads[0].data_mut();
            let gx = grad_input.data_mut();
            for c in 0..channels {
                let a = slopes[c];
                for i in 0..per_channel {
                    let idx = c * per_channel + i;
                    if x[idx] > 0.0 {
                        gx[idx] = gy[idx];
                    } else {
                        gx[idx] = a * gy[idx];
                        ga[c] += x[idx] * gy[idx];
                    }
                }
            }
        }
        LayerSpec::Flatten => {
            grad_input.data_mut().copy_from_slice(grad_out.data());
        }
    }
    Ok((param_grads, grad_input))
}
