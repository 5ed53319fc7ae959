use crate::error::{invalid, Result};

fn check(z: &[f64], dim: usize, tau: f64) -> Result<usize> {
    if !(tau > 0.0) {
        return Err(invalid!("temperature must be positive, got {tau}"));
    }
    if dim == 0 || z.len() % (2 * dim) != 0 {
        return Err(invalid!("{} values are not pairs of {dim}-dimensional embeddings", z.len()));
    }
    let n2 = z.len() / dim;
    if n2 < 4 {
        return Err(invalid!("NT-Xent needs at least two pairs to have negatives, got {}", n2 / 2));
    }
    Ok(n2)
}

/// NT-Xent over `2N` embeddings where rows `2i` and `2i + 1` are the two
/// views of item `i`. Rows are L2-normalized internally.
pub fn ntxent_loss(z: &[f64], dim: usize, tau: f64) -> Result<f64> {
    Ok(ntxent_impl(z, dim, tau, false)?.0)
}

/// Loss and its gradient with respect to the raw (unnormalized) rows.
pub fn ntxent_loss_grad(z: &[f64], dim: usize, tau: f64) -> Result<(f64, Vec<f64>)> {
    ntxent_impl(z, dim, tau, true)
}

fn ntxent_impl(z: &[f64], dim: usize, tau: f64, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let n2 = check(z, dim, tau)?;
    let norms: Vec<f64> = z
        .chunks(dim)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12))
        .collect();
    let u: Vec<f64> = z.chunks(dim).zip(&norms).flat_map(|(r, n)| r.iter().map(move |v| v / n)).collect();
    let row = |i: usize| &u[i * dim..(i + 1) * dim];
    let mut logits = vec![0.0; n2 * n2];
    for i in 0..n2 {
        for k in i..n2 {
            let s = row(i).iter().zip(row(k)).map(|(a, b)| a * b).sum::<f64>() / tau;
            logits[i * n2 + k] = s;
            logits[k * n2 + i] = s;
        }
    }
    // coef[i][k] = softmax_k(logits[i]) - [k is i's positive], diagonal excluded
    let mut coef = vec![0.0; n2 * n2];
    let mut loss = 0.0;
    for i in 0..n2 {
        let pos = i ^ 1;
        let li = &logits[i * n2..(i + 1) * n2];
        let m = li.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
        let z_sum: f64 = li.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, &v)| (v - m).exp()).sum();
        loss += m + z_sum.ln() - li[pos];
        if want_grad {
            for k in (0..n2).filter(|&k| k != i) {
                coef[i * n2 + k] = (li[k] - m).exp() / z_sum - f64::from(u8::from(k == pos));
            }
        }
    }
    loss /= n2 as f64;
    if !want_grad {
        return Ok((loss, Vec::new()));
    }
    let scale = 1.0 / (n2 as f64 * tau);
    let mut grad = vec![0.0; z.len()];
    for i in 0..n2 {
        let mut du = vec![0.0; dim];
        for k in 0..n2 {
            let c = (coef[i * n2 + k] + coef[k * n2 + i]) * scale;
            if c != 0.0 {
                for (d, v) in du.iter_mut().zip(row(k)) {
                    *d += c * v;
                }
            }
        }
        let ui = row(i);
        let proj: f64 = ui.iter().zip(&du).map(|(a, b)| a * b).sum();
        for j in 0..dim {
            grad[i * dim + j] = (du[j] - ui[j] * proj) / norms[i];
        }
    }
    Ok((loss, grad))
}
