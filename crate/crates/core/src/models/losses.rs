//! Contrastive, matching and language-modeling objectives.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{cross_entropy, log_softmax_last};

/// Bidirectional InfoNCE over the similarity matrix `img · txtᵀ / τ`.
///
/// `temp` has shape (1,) so gradients reach a learnable temperature.
pub fn itc_loss(img_proj: &Tensor, txt_proj: &Tensor, temp: &Tensor) -> Result<Tensor> {
    let n = img_proj.dim(0)?;
    if n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    if txt_proj.dim(0)? != n {
        return Err(Error::Shape(format!(
            "itc: {n} images vs {} texts",
            txt_proj.dim(0)?
        )));
    }
    let sim = img_proj.matmul(&txt_proj.t()?)?.broadcast_div(temp)?;
    let targets: Vec<u32> = (0..n as u32).collect();
    let i2t = cross_entropy(&sim, &targets, None)?;
    let t2i = cross_entropy(&sim.t()?.contiguous()?, &targets, None)?;
    Ok(((i2t + t2i)? * 0.5)?)
}

/// Group id per text: the index of its first identical occurrence.
pub fn text_groups(texts: &[String]) -> Vec<usize> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| texts[..i].iter().position(|u| u == t).unwrap_or(i))
        .collect()
}

/// InfoNCE whose targets spread uniformly over every pair in the same group,
/// so identical captions in a batch are not pushed apart. With all groups
/// distinct this equals [`itc_loss`].
pub fn itc_loss_grouped(img_proj: &Tensor, txt_proj: &Tensor, temp: &Tensor, groups: &[usize]) -> Result<Tensor> {
    let n = img_proj.dim(0)?;
    if groups.len() != n {
        return Err(Error::Shape(format!("itc: {n} pairs vs {} group ids", groups.len())));
    }
    if groups.iter().enumerate().all(|(i, &g)| g == i) {
        return itc_loss(img_proj, txt_proj, temp);
    }
    if n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    let mut targets = vec![0f32; n * n];
    for i in 0..n {
        let size = groups.iter().filter(|&&g| g == groups[i]).count() as f32;
        for j in 0..n {
            if groups[j] == groups[i] {
                targets[i * n + j] = 1.0 / size;
            }
        }
    }
    let targets = Tensor::from_vec(targets, (n, n), img_proj.device())?;
    let sim = img_proj.matmul(&txt_proj.t()?)?.broadcast_div(temp)?;
    let soft_ce = |logits: &Tensor| -> Result<Tensor> {
        Ok((log_softmax_last(logits)? * &targets)?.sum(1)?.neg()?.mean_all()?)
    };
    let i2t = soft_ce(&sim)?;
    let t2i = soft_ce(&sim.t()?.contiguous()?)?;
    Ok(((i2t + t2i)? * 0.5)?)
}

/// Scalar-temperature convenience wrapper.
pub fn itc_loss_scalar(img_proj: &Tensor, txt_proj: &Tensor, temp: f64) -> Result<Tensor> {
    let t = Tensor::new(&[temp as f32], img_proj.device())?;
    itc_loss(img_proj, txt_proj, &t)
}

/// Pairing used for ITM negatives: image `i` with text `(i + 1) mod n`.
pub fn neighbor_negatives(n: usize) -> Vec<usize> {
    (0..n).map(|i| (i + 1) % n).collect()
}

/// Two-class cross-entropy over ITM logits (rows: positives then negatives).
pub fn itm_loss_from_logits(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    if logits.dim(D::Minus1)? != 2 {
        return Err(Error::Shape("itm logits must have 2 classes".into()));
    }
    cross_entropy(logits, labels, None)
}

/// ITM labels for `n` positives followed by `n` negatives.
pub fn itm_labels(n: usize) -> Vec<u32> {
    let mut l = vec![1u32; n];
    l.extend(std::iter::repeat(0).take(n));
    l
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar_f64;
    use candle_core::Device;

    fn t(rows: &[[f32; 2]]) -> Tensor {
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        Tensor::from_vec(flat, (rows.len(), 2), &Device::Cpu).unwrap()
    }

    #[test]
    fn itc_hand_values() {
        let eye = t(&[[1.0, 0.0], [0.0, 1.0]]);
        let l1 = scalar_f64(&itc_loss_scalar(&eye, &eye, 1.0).unwrap()).unwrap();
        assert!((l1 - (1.0 + (-1f64).exp()).ln()).abs() < 1e-6, "{l1}");
        let l2 = scalar_f64(&itc_loss_scalar(&eye, &eye, 0.5).unwrap()).unwrap();
        assert!((l2 - (1.0 + (-2f64).exp()).ln()).abs() < 1e-6, "{l2}");
        let same = t(&[[1.0, 0.0], [1.0, 0.0]]);
        let l3 = scalar_f64(&itc_loss_scalar(&same, &same, 1.0).unwrap()).unwrap();
        assert!((l3 - 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn grouped_matches_plain_when_distinct() {
        let a = t(&[[0.6, 0.8], [1.0, 0.0], [0.0, 1.0]]);
        let b = t(&[[0.8, 0.6], [0.0, 1.0], [1.0, 0.0]]);
        let temp = Tensor::new(&[0.5f32], &Device::Cpu).unwrap();
        let plain = scalar_f64(&itc_loss(&a, &b, &temp).unwrap()).unwrap();
        let grouped = scalar_f64(&itc_loss_grouped(&a, &b, &temp, &[0, 1, 2]).unwrap()).unwrap();
        assert!((plain - grouped).abs() < 1e-9);
    }

    #[test]
    fn grouped_duplicates() {
        // all logits equal, so the split target still costs log 2
        let same = t(&[[1.0, 0.0], [1.0, 0.0]]);
        let temp = Tensor::new(&[1.0f32], &Device::Cpu).unwrap();
        let l = scalar_f64(&itc_loss_grouped(&same, &same, &temp, &[0, 0]).unwrap()).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-6);
        assert_eq!(text_groups(&["a".into(), "b".into(), "a".into()]), vec![0, 1, 0]);
    }

    #[test]
    fn itc_needs_two() {
        let one = t(&[[1.0, 0.0]]);
        assert!(matches!(itc_loss_scalar(&one, &one, 1.0), Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn itm_uniform_and_separated() {
        let zeros = Tensor::zeros((4, 2), candle_core::DType::F32, &Device::Cpu).unwrap();
        let l = scalar_f64(&itm_loss_from_logits(&zeros, &itm_labels(2)).unwrap()).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-6);
        let sep = t(&[[-10.0, 10.0], [-10.0, 10.0], [10.0, -10.0], [10.0, -10.0]]);
        let l = scalar_f64(&itm_loss_from_logits(&sep, &itm_labels(2)).unwrap()).unwrap();
        // binary CE at margin 20: ln(1 + e^-20)
        assert!(l < 1e-3 && (l - (1.0 + (-20f64).exp()).ln()).abs() < 1e-7);
    }

    #[test]
    fn negatives_shift_by_one() {
        assert_eq!(neighbor_negatives(3), vec![1, 2, 0]);
    }
}
