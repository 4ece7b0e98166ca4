use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::lora::LoraAdapter;
use crate::model::{TrainBatch, Transformer};
use crate::scalar::Scalar;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    out
}

/// Per-row negative log-likelihood of `targets`.
pub fn token_nll<T: Scalar>(logits: &Matrix<T>, targets: &[u32]) -> Result<Vec<T>> {
    if logits.rows() != targets.len() {
        return Err(Error::Shape {
            op: "token_nll",
            left: logits.shape(),
            right: (targets.len(), 1),
        });
    }
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = logits.row(i);
            let t = t as usize;
            if t >= row.len() {
                return Err(Error::Domain(format!("target {t} outside vocabulary of {}", row.len())));
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            Ok(lse - row[t])
        })
        .collect()
}

/// Mean token cross-entropy.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, targets: &[u32]) -> Result<T> {
    let nll = token_nll(logits, targets)?;
    if nll.is_empty() {
        return Err(Error::Domain("no targets".into()));
    }
    Ok(nll.iter().copied().sum::<T>() / T::lit(nll.len() as f64))
}

/// `exp(mean NLL)` over every predicted token of `samples`, evaluated in
/// batches of `batch_size` sequences.
pub fn perplexity<T: Scalar, S: AsRef<[u32]>>(
    model: &Transformer<'_, T>,
    adapter: Option<&LoraAdapter<T>>,
    samples: &[S],
    batch_size: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain("perplexity of an empty dataset".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = TrainBatch::from_samples(chunk, model.config.context_len)?;
        let out = model.forward(adapter, &batch)?;
        let nll = token_nll(&out.logits, &batch.flat_targets())?;
        total += nll.iter().map(|x| x.as_f64()).sum::<f64>();
        count += nll.len();
    }
    Ok((total / count as f64).exp())
}

/// Autoregressive sampling. `temperature == 0` picks the arg-max (lowest id
/// on ties); otherwise samples from `softmax(logits / temperature)`.
pub fn generate<T: Scalar>(
    model: &Transformer<'_, T>,
    adapter: Option<&LoraAdapter<T>>,
    prompt: &[u32],
    length: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Vec<u32>> {
    if !(temperature >= 0.0) {
        return Err(Error::Domain(format!(
            "temperature must be non-negative, got {temperature}"
        )));
    }
    let vocab = model.config.vocab_size;
    if let Some(&bad) = prompt.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Domain(format!(
            "prompt token {bad} outside vocabulary of {vocab}"
        )));
    }
    let mut seq = prompt.to_vec();
    if length == 0 {
        return Ok(seq);
    }
    if prompt.is_empty() {
        return Err(Error::Domain("generation needs a non-empty prompt".into()));
    }
    let ctx = model.config.context_len;
    for _ in 0..length {
        let window = seq[seq.len().saturating_sub(ctx)..].to_vec();
        let batch = TrainBatch {
            targets: vec![window.clone()],
            inputs: vec![window],
        };
        let out = model.forward(adapter, &batch)?;
        let last: Vec<f64> = out
            .logits
            .row(out.logits.rows() - 1)
            .iter()
            .map(|x| x.as_f64())
            .collect();
        let next = if temperature == 0.0 {
            last.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                )
                .0
        } else {
            let max = last.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = last.iter().map(|&v| ((v - max) / temperature).exp()).collect();
            rng.weighted_index(&weights).unwrap_or(0)
        };
        seq.push(next as u32);
    }
    Ok(seq)
}
