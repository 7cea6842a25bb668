use crate::error::{Error, Result};

use super::tensor::{gemm, Tensor};

fn dims<const N: usize>(t: &Tensor, what: &str) -> Result<[usize; N]> {
    t.shape().try_into().map_err(|_| {
        Error::invalid(format!("{what}: expected a rank-{N} tensor, got shape {:?}", t.shape()))
    })
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn add_bias_rows(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn sum_rows(grad: &[f64], width: usize) -> Vec<f64> {
    let mut acc = vec![0.0; width];
    for row in grad.chunks(width) {
        for (a, g) in acc.iter_mut().zip(row) {
            *a += g;
        }
    }
    acc
}

// ---------------------------------------------------------------- dense

#[derive(Debug, Clone)]
pub struct DenseCache {
    input: Tensor,
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// `x [B, in] * w [in, out] + b [out]`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(Tensor, DenseCache)> {
    let [batch, n_in] = dims(x, "dense input")?;
    let [w_in, n_out] = dims(w, "dense weight")?;
    if w_in != n_in {
        return Err(Error::ShapeMismatch {
            expected: vec![n_in, n_out],
            got: w.shape().to_vec(),
        });
    }
    b.expect_shape(&[n_out])?;
    let mut out = Tensor::zeros(&[batch, n_out]);
    gemm(batch, n_in, n_out, 1.0, x.data(), (n_in, 1), w.data(), (n_out, 1), 0.0, out.data_mut(), (n_out, 1));
    add_bias_rows(out.data_mut(), b.data());
    Ok((out, DenseCache { input: x.clone() }))
}

pub fn dense_backward(grad_out: &Tensor, cache: &DenseCache, w: &Tensor) -> Result<DenseGrads> {
    let [batch, n_in] = dims(&cache.input, "dense input")?;
    let n_out = w.shape()[1];
    grad_out.expect_shape(&[batch, n_out])?;
    let g = grad_out.data();
    let x = cache.input.data();
    let mut dw = Tensor::zeros(&[n_in, n_out]);
    gemm(n_in, batch, n_out, 1.0, x, (1, n_in), g, (n_out, 1), 0.0, dw.data_mut(), (n_out, 1));
    let mut dx = Tensor::zeros(&[batch, n_in]);
    gemm(batch, n_out, n_in, 1.0, g, (n_out, 1), w.data(), (1, n_out), 0.0, dx.data_mut(), (n_in, 1));
    let db = Tensor::new(vec![n_out], sum_rows(g, n_out))?;
    Ok(DenseGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

// ---------------------------------------------------------------- relu / flatten

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Gradient of `relu` given the layer input.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    grad_out.expect_shape(input.shape())?;
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// `[B, ...] -> [B, prod(...)]`.
pub fn flatten(x: Tensor) -> Result<Tensor> {
    let batch = *x.shape().first().ok_or_else(|| Error::invalid("flatten of a scalar"))?;
    let rest = x.len() / batch.max(1);
    x.reshape(&[batch, rest])
}

// ---------------------------------------------------------------- lstm

/// Activations kept for backpropagation through time.
#[derive(Debug, Clone)]
pub struct LstmCache {
    input: Tensor,
    /// `[B, T, 4H]`, post-activation gates in order input, forget, candidate, output.
    gates: Vec<f64>,
    /// `[B, T, H]`
    cell: Vec<f64>,
    /// `[B, T, H]`
    hidden: Vec<f64>,
    return_sequences: bool,
}

impl LstmCache {
    /// Hidden states of every step, `[B, T, H]`.
    pub fn hidden(&self) -> &[f64] {
        &self.hidden
    }
}

#[derive(Debug, Clone)]
pub struct LstmGrads {
    pub input: Tensor,
    pub w_input: Tensor,
    pub w_hidden: Tensor,
    pub bias: Tensor,
}

/// Standard LSTM over `x [B, T, in]` with input weights `w [in, 4H]`,
/// recurrent weights `u [H, 4H]` and bias `b [4H]`, starting from zero state.
/// Returns `[B, T, H]` when `return_sequences`, else the last step `[B, H]`.
pub fn lstm_forward(
    x: &Tensor,
    w: &Tensor,
    u: &Tensor,
    b: &Tensor,
    return_sequences: bool,
) -> Result<(Tensor, LstmCache)> {
    let [batch, steps, n_in] = dims(x, "lstm input")?;
    let [w_in, four_h] = dims(w, "lstm input weight")?;
    if w_in != n_in || four_h % 4 != 0 || four_h == 0 {
        return Err(Error::ShapeMismatch {
            expected: vec![n_in, four_h],
            got: w.shape().to_vec(),
        });
    }
    let h = four_h / 4;
    u.expect_shape(&[h, four_h])?;
    b.expect_shape(&[four_h])?;
    if steps == 0 {
        return Err(Error::invalid("lstm: empty sequence"));
    }

    let rows = batch * steps;
    let mut z = vec![0.0; rows * four_h];
    gemm(rows, n_in, four_h, 1.0, x.data(), (n_in, 1), w.data(), (four_h, 1), 0.0, &mut z, (four_h, 1));
    add_bias_rows(&mut z, b.data());

    let mut cell = vec![0.0; rows * h];
    let mut hidden = vec![0.0; rows * h];
    for t in 0..steps {
        if t > 0 {
            gemm(
                batch,
                h,
                four_h,
                1.0,
                &hidden[(t - 1) * h..],
                (steps * h, 1),
                u.data(),
                (four_h, 1),
                1.0,
                &mut z[t * four_h..],
                (steps * four_h, 1),
            );
        }
        for bi in 0..batch {
            let row = bi * steps + t;
            let g = &mut z[row * four_h..(row + 1) * four_h];
            for j in 0..h {
                g[j] = sigmoid(g[j]);
                g[h + j] = sigmoid(g[h + j]);
                g[2 * h + j] = g[2 * h + j].tanh();
                g[3 * h + j] = sigmoid(g[3 * h + j]);
            }
            for j in 0..h {
                let c_prev = if t > 0 { cell[(row - 1) * h + j] } else { 0.0 };
                let c = g[h + j] * c_prev + g[j] * g[2 * h + j];
                cell[row * h + j] = c;
                hidden[row * h + j] = g[3 * h + j] * c.tanh();
            }
        }
    }

    let out = if return_sequences {
        Tensor::new(vec![batch, steps, h], hidden.clone())?
    } else {
        let mut last = Vec::with_capacity(batch * h);
        for bi in 0..batch {
            let row = bi * steps + steps - 1;
            last.extend_from_slice(&hidden[row * h..(row + 1) * h]);
        }
        Tensor::new(vec![batch, h], last)?
    };
    Ok((
        out,
        LstmCache {
            input: x.clone(),
            gates: z,
            cell,
            hidden,
            return_sequences,
        },
    ))
}

/// Backpropagation through time for [`lstm_forward`].
pub fn lstm_backward(grad_out: &Tensor, cache: &LstmCache, w: &Tensor, u: &Tensor) -> Result<LstmGrads> {
    let [batch, steps, n_in] = dims(&cache.input, "lstm input")?;
    let four_h = w.shape()[1];
    let h = four_h / 4;
    if cache.return_sequences {
        grad_out.expect_shape(&[batch, steps, h])?;
    } else {
        grad_out.expect_shape(&[batch, h])?;
    }
    let rows = batch * steps;
    let go = grad_out.data();
    let (gates, cell, hidden) = (&cache.gates, &cache.cell, &cache.hidden);

    let mut dz = vec![0.0; rows * four_h];
    let mut dh_next = vec![0.0; batch * h];
    let mut dc_next = vec![0.0; batch * h];
    let mut dh = vec![0.0; h];
    for t in (0..steps).rev() {
        for bi in 0..batch {
            let row = bi * steps + t;
            for j in 0..h {
                let external = if cache.return_sequences {
                    go[row * h + j]
                } else if t == steps - 1 {
                    go[bi * h + j]
                } else {
                    0.0
                };
                dh[j] = external + dh_next[bi * h + j];
            }
            let g = &gates[row * four_h..(row + 1) * four_h];
            let d = &mut dz[row * four_h..(row + 1) * four_h];
            for j in 0..h {
                let (i_g, f_g, c_g, o_g) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let tc = cell[row * h + j].tanh();
                let c_prev = if t > 0 { cell[(row - 1) * h + j] } else { 0.0 };
                let dc = dc_next[bi * h + j] + dh[j] * o_g * (1.0 - tc * tc);
                d[j] = dc * c_g * i_g * (1.0 - i_g);
                d[h + j] = dc * c_prev * f_g * (1.0 - f_g);
                d[2 * h + j] = dc * i_g * (1.0 - c_g * c_g);
                d[3 * h + j] = dh[j] * tc * o_g * (1.0 - o_g);
                dc_next[bi * h + j] = dc * f_g;
            }
        }
        if t > 0 {
            gemm(
                batch,
                four_h,
                h,
                1.0,
                &dz[t * four_h..],
                (steps * four_h, 1),
                u.data(),
                (1, four_h),
                0.0,
                &mut dh_next,
                (h, 1),
            );
        }
    }

    // Hidden state entering each step, zero at t = 0.
    let mut h_prev = vec![0.0; rows * h];
    for bi in 0..batch {
        for t in 1..steps {
            let dst = (bi * steps + t) * h;
            let src = (bi * steps + t - 1) * h;
            h_prev[dst..dst + h].copy_from_slice(&hidden[src..src + h]);
        }
    }
    let mut du = Tensor::zeros(&[h, four_h]);
    gemm(h, rows, four_h, 1.0, &h_prev, (1, h), &dz, (four_h, 1), 0.0, du.data_mut(), (four_h, 1));
    let mut dw = Tensor::zeros(&[n_in, four_h]);
    gemm(n_in, rows, four_h, 1.0, cache.input.data(), (1, n_in), &dz, (four_h, 1), 0.0, dw.data_mut(), (four_h, 1));
    let mut dx = Tensor::zeros(&[batch, steps, n_in]);
    gemm(rows, four_h, n_in, 1.0, &dz, (four_h, 1), w.data(), (1, four_h), 0.0, dx.data_mut(), (n_in, 1));
    let db = Tensor::new(vec![four_h], sum_rows(&dz, four_h))?;
    Ok(LstmGrads {
        input: dx,
        w_input: dw,
        w_hidden: du,
        bias: db,
    })
}

// ---------------------------------------------------------------- conv1d

#[derive(Debug, Clone)]
pub struct Conv1dCache {
    input: Tensor,
}

#[derive(Debug, Clone)]
pub struct Conv1dGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Valid-mode convolution over time: `x [B, T, C]`, `w [K, C, F]`, `b [F]`
/// gives `[B, T-K+1, F]`.
pub fn conv1d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(Tensor, Conv1dCache)> {
    let [batch, steps, ch] = dims(x, "conv1d input")?;
    let [kernel, w_ch, filters] = dims(w, "conv1d weight")?;
    if w_ch != ch || kernel == 0 {
        return Err(Error::ShapeMismatch {
            expected: vec![kernel, ch, filters],
            got: w.shape().to_vec(),
        });
    }
    b.expect_shape(&[filters])?;
    if steps < kernel {
        return Err(Error::invalid(format!("conv1d: sequence of {steps} shorter than kernel {kernel}")));
    }
    let out_steps = steps - kernel + 1;
    let patch = kernel * ch;
    let mut out = Tensor::zeros(&[batch, out_steps, filters]);
    let xd = x.data();
    for bi in 0..batch {
        gemm(
            out_steps,
            patch,
            filters,
            1.0,
            &xd[bi * steps * ch..],
            (ch, 1),
            w.data(),
            (filters, 1),
            0.0,
            &mut out.data_mut()[bi * out_steps * filters..],
            (filters, 1),
        );
    }
    add_bias_rows(out.data_mut(), b.data());
    Ok((out, Conv1dCache { input: x.clone() }))
}

pub fn conv1d_backward(grad_out: &Tensor, cache: &Conv1dCache, w: &Tensor) -> Result<Conv1dGrads> {
    let [batch, steps, ch] = dims(&cache.input, "conv1d input")?;
    let [kernel, _, filters] = dims(w, "conv1d weight")?;
    let out_steps = steps - kernel + 1;
    grad_out.expect_shape(&[batch, out_steps, filters])?;
    let patch = kernel * ch;
    let g = grad_out.data();
    let xd = cache.input.data();
    let mut dw = Tensor::zeros(&[kernel, ch, filters]);
    let mut dx = Tensor::zeros(&[batch, steps, ch]);
    let mut dpatch = vec![0.0; out_steps * patch];
    for bi in 0..batch {
        let gb = &g[bi * out_steps * filters..(bi + 1) * out_steps * filters];
        gemm(patch, out_steps, filters, 1.0, &xd[bi * steps * ch..], (1, ch), gb, (filters, 1), 1.0, dw.data_mut(), (filters, 1));
        gemm(out_steps, filters, patch, 1.0, gb, (filters, 1), w.data(), (1, filters), 0.0, &mut dpatch, (patch, 1));
        let dxb = &mut dx.data_mut()[bi * steps * ch..(bi + 1) * steps * ch];
        for t in 0..out_steps {
            for (d, p) in dxb[t * ch..t * ch + patch].iter_mut().zip(&dpatch[t * patch..(t + 1) * patch]) {
                *d += p;
            }
        }
    }
    let db = Tensor::new(vec![filters], sum_rows(g, filters))?;
    Ok(Conv1dGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

// ---------------------------------------------------------------- max-pool

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// Non-overlapping max-pool over time: `[B, T, C] -> [B, T / pool, C]`; a
/// trailing partial window is dropped.
pub fn maxpool1d_forward(x: &Tensor, pool: usize) -> Result<(Tensor, MaxPoolCache)> {
    let [batch, steps, ch] = dims(x, "maxpool input")?;
    if pool == 0 || steps < pool {
        return Err(Error::invalid(format!("maxpool: pool {pool} invalid for {steps} steps")));
    }
    let out_steps = steps / pool;
    let xd = x.data();
    let mut out = Vec::with_capacity(batch * out_steps * ch);
    let mut argmax = Vec::with_capacity(batch * out_steps * ch);
    for bi in 0..batch {
        for t in 0..out_steps {
            for c in 0..ch {
                let mut best = (bi * steps + t * pool) * ch + c;
                for k in 1..pool {
                    let idx = (bi * steps + t * pool + k) * ch + c;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(vec![batch, out_steps, ch], out)?,
        MaxPoolCache {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool1d_backward(grad_out: &Tensor, cache: &MaxPoolCache) -> Result<Tensor> {
    if grad_out.len() != cache.argmax.len() {
        return Err(Error::LengthMismatch {
            left: grad_out.len(),
            right: cache.argmax.len(),
        });
    }
    let mut dx = Tensor::zeros(&cache.input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in cache.argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(dx)
}
