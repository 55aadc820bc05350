use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelkit::tokenizer::TokenId;
use crate::modelkit::toy::{Grads, Slot, ToyModel};
use crate::pipeline::example::TrainingExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    #[default]
    TokenMean,
}

/// Summed negative log-likelihood over rows whose mask is set, the number of
/// such rows, and the gradient of the sum with respect to `logits`. Rows with
/// a false mask are never read and their gradient rows are exactly zero.
pub fn masked_nll(logits: ArrayView2<f64>, targets: &[TokenId], mask: &[bool]) -> Result<(f64, usize, Array2<f64>)> {
    if logits.nrows() != targets.len() || targets.len() != mask.len() {
        return Err(Error::Input(format!(
            "logits rows {}, targets {}, mask {} must agree",
            logits.nrows(),
            targets.len(),
            mask.len()
        )));
    }
    let v = logits.ncols();
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut sum = 0.0;
    let mut count = 0;
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let t = t as usize;
        if t >= v {
            return Err(Error::Input(format!("target {t} outside vocabulary of {v}")));
        }
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|&l| (l - max).exp()).sum();
        let lse = max + z.ln();
        sum += lse - row[t];
        let mut g = dlogits.row_mut(i);
        for (gj, &l) in g.iter_mut().zip(row.iter()) {
            *gj = (l - lse).exp();
        }
        g[t] -= 1.0;
        count += 1;
    }
    Ok((sum, count, dlogits))
}

/// Logits, targets and mask for every row of an example's input sequence.
///
/// Row `i` holds the model's prediction for the input element after it; the
/// final row predicts `<eos>`. Image cells have no token target and are
/// unmasked, as are the instruction and `<bos>` positions.
#[derive(Debug, Clone)]
pub struct AlignedLogits {
    pub logits: Array2<f64>,
    pub targets: Vec<TokenId>,
    pub mask: Vec<bool>,
}

pub fn aligned_logits(model: &ToyModel, ex: &TrainingExample) -> Result<AlignedLogits> {
    let plan = model.score_plan(ex)?;
    let logits = model.full_logits(&plan.slots);
    let n = plan.slots.len();
    let mut targets = vec![0; n];
    let mut mask = vec![false; n];
    for i in 0..n - 1 {
        if let Slot::Token { id, .. } = plan.slots[i + 1] {
            targets[i] = id;
        }
    }
    for (&r, &t) in plan.rows.iter().zip(&plan.targets) {
        targets[r] = t;
        mask[r] = true;
    }
    Ok(AlignedLogits { logits, targets, mask })
}

/// Summed NLL of one example, its scored-token count and the gradients of the
/// sum. Base-parameter gradients are produced only when `want_base`.
pub fn example_loss_and_grads(model: &ToyModel, ex: &TrainingExample, want_base: bool) -> Result<(f64, usize, Grads)> {
    let plan = model.score_plan(ex)?;
    let cache = model.forward(&plan.slots);
    let (logits, head_xa) = model.head(&cache, &plan.rows);
    let mask = vec![true; plan.rows.len()];
    let (sum, count, dlogits) = masked_nll(logits.view(), &plan.targets, &mask)?;
    let mut grads = model.zero_grads(want_base);
    model.backward(&cache, &plan.rows, head_xa.as_ref(), dlogits.view(), &mut grads);
    Ok((sum, count, grads))
}

fn example_nll(model: &ToyModel, ex: &TrainingExample) -> Result<(f64, usize)> {
    let plan = model.score_plan(ex)?;
    let cache = model.forward(&plan.slots);
    let (logits, _) = model.head(&cache, &plan.rows);
    let mask = vec![true; plan.rows.len()];
    let (sum, count, _) = masked_nll(logits.view(), &plan.targets, &mask)?;
    Ok((sum, count))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Each example's own loss under the same reduction.
    pub per_example: Vec<f64>,
    pub masked_tokens: usize,
}

/// Batch loss: the summed NLL, divided by the batch's total scored-token
/// count under `TokenMean`.
pub fn compute_loss(model: &ToyModel, batch: &[TrainingExample], reduction: Reduction) -> Result<LossOutput> {
    let mut total = 0.0;
    let mut tokens = 0;
    let mut per_example = Vec::with_capacity(batch.len());
    for ex in batch {
        let (s, c) = example_nll(model, ex)?;
        total += s;
        tokens += c;
        per_example.push(match reduction {
            Reduction::Sum => s,
            Reduction::TokenMean if c > 0 => s / c as f64,
            Reduction::TokenMean => 0.0,
        });
    }
    if tokens == 0 {
        return Err(Error::Input("batch has no masked tokens".into()));
    }
    let loss = match reduction {
        Reduction::Sum => total,
        Reduction::TokenMean => total / tokens as f64,
    };
    Ok(LossOutput { loss, per_example, masked_tokens: tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelkit::tokenizer::Tokenizer;
    use crate::modelkit::toy::ToyConfig;
    use crate::pipeline::{build_ssr_example, PromptTemplate};
    use ndarray::Array2;

    #[test]
    fn uniform_logits_give_ln_v() {
        let v = 37;
        let logits = Array2::zeros((3, v));
        let (s, c, _) = masked_nll(logits.view(), &[1, 2, 3], &[false, true, false]).unwrap();
        assert_eq!(c, 1);
        assert!((s - (v as f64).ln()).abs() <= 1e-12 * (v as f64).ln());
    }

    #[test]
    fn unmasked_rows_have_zero_gradient() {
        let logits = Array2::from_shape_fn((4, 5), |(i, j)| (i * 5 + j) as f64 * 0.37);
        let (_, _, d) = masked_nll(logits.view(), &[0, 1, 2, 3], &[false, true, false, true]).unwrap();
        assert!(d.row(0).iter().all(|&g| g == 0.0));
        assert!(d.row(2).iter().all(|&g| g == 0.0));
        assert!(d.row(1).sum().abs() < 1e-12);
    }

    #[test]
    fn reductions_are_proportional_and_order_free() {
        let cfg = ToyConfig { width: 8, heads: 2, layers: 1, ..ToyConfig::default() };
        let m = ToyModel::new(cfg, Tokenizer::toy()).unwrap();
        let t = Tokenizer::toy();
        let batch: Vec<_> = [("ab", "甲乙"), ("c", "丙"), ("", "丁戊己")]
            .iter()
            .map(|(x, y)| build_ssr_example(x, y, &PromptTemplate::qwen(), &t).unwrap())
            .collect();
        let mean = compute_loss(&m, &batch, Reduction::TokenMean).unwrap();
        let sum = compute_loss(&m, &batch, Reduction::Sum).unwrap();
        assert!((sum.loss - mean.loss * mean.masked_tokens as f64).abs() < 1e-9);
        let mut rev = batch.clone();
        rev.reverse();
        let r = compute_loss(&m, &rev, Reduction::TokenMean).unwrap();
        assert!((r.loss - mean.loss).abs() < 1e-12);

        let al = aligned_logits(&m, &batch[0]).unwrap();
        let (s, c, _) = masked_nll(al.logits.view(), &al.targets, &al.mask).unwrap();
        let one = compute_loss(&m, &batch[..1], Reduction::Sum).unwrap();
        assert_eq!(c, batch[0].masked_count() + 1);
        assert!((s - one.loss).abs() < 1e-9);
    }

    #[test]
    fn all_false_mask_is_an_error() {
        let cfg = ToyConfig { width: 8, heads: 2, layers: 1, ..ToyConfig::default() };
        let m = ToyModel::new(cfg, Tokenizer::toy()).unwrap();
        let mut ex = build_ssr_example("a", "甲", &PromptTemplate::qwen(), &Tokenizer::toy()).unwrap();
        ex.loss_mask.iter_mut().for_each(|b| *b = false);
        assert!(matches!(compute_loss(&m, &[ex], Reduction::TokenMean), Err(Error::Input(_))));
    }
}
