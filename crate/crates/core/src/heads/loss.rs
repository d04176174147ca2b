use crate::error::{Error, Result};
use crate::heads::ScoreTensor;
use crate::synth::LabelRaster;

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// dL/ds, same layout as the scores.
    pub grad: ScoreTensor,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn target_indices(scores: &ScoreTensor, target: &LabelRaster) -> Result<Vec<usize>> {
    if !target.same_shape(scores.height, scores.width) {
        return Err(Error::shape(format!(
            "target is {}x{}, scores are {}x{}",
            target.height, target.width, scores.height, scores.width
        )));
    }
    target
        .ids
        .iter()
        .enumerate()
        .map(|(pixel, &id)| {
            scores
                .class_index(id)
                .ok_or(Error::InvalidLabel { pixel, id })
        })
        .collect()
}

/// Independent per-class sigmoid + binary cross-entropy against the one-hot
/// target, averaged over pixels and classes.
pub fn bce_loss_grad(scores: &ScoreTensor, target: &LabelRaster) -> Result<LossGrad> {
    let idx = target_indices(scores, target)?;
    let k = scores.num_classes();
    let norm = 1.0 / (scores.num_pixels() * k) as f64;
    let mut grad = vec![0.0; scores.data.len()];
    let mut loss = 0.0;
    for (i, &t) in idx.iter().enumerate() {
        let s = scores.pixel(i);
        let g = &mut grad[i * k..(i + 1) * k];
        for c in 0..k {
            let on = c == t;
            // One exponential serves both σ(s) and softplus(±s).
            let e = (-s[c].abs()).exp();
            let sig = if s[c] >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
            let signed = if on { -s[c] } else { s[c] };
            loss += signed.max(0.0) + e.ln_1p();
            g[c] = (sig - on as u8 as f64) * norm;
        }
    }
    Ok(LossGrad {
        loss: loss * norm,
        grad: ScoreTensor {
            height: scores.height,
            width: scores.width,
            classes: scores.classes.clone(),
            data: grad,
        },
    })
}

/// Softmax + cross-entropy over all classes, averaged over pixels.
pub fn ce_loss_grad(scores: &ScoreTensor, target: &LabelRaster) -> Result<LossGrad> {
    let idx = target_indices(scores, target)?;
    let k = scores.num_classes();
    let norm = 1.0 / scores.num_pixels() as f64;
    let mut grad = vec![0.0; scores.data.len()];
    let mut loss = 0.0;
    for (i, &t) in idx.iter().enumerate() {
        let s = scores.pixel(i);
        let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
        let lse = m + z.ln();
        loss += lse - s[t];
        let g = &mut grad[i * k..(i + 1) * k];
        for c in 0..k {
            let p = (s[c] - lse).exp();
            g[c] = (p - (c == t) as u8 as f64) * norm;
        }
    }
    Ok(LossGrad {
        loss: loss * norm,
        grad: ScoreTensor {
            height: scores.height,
            width: scores.width,
            classes: scores.classes.clone(),
            data: grad,
        },
    })
}
