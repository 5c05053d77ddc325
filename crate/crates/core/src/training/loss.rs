use super::TrainError;
use crate::model::dot;

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn cosine_checked(a: &[f64], b: &[f64]) -> Result<f64, TrainError> {
    if a.len() != b.len() {
        return Err(TrainError::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(TrainError::ZeroNorm);
    }
    Ok(dot(a, b) / (na * nb))
}

fn check_tau(tau: f64) -> Result<(), TrainError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Temperature(tau))
    }
}

/// exp(cos(e_t, e_i) / tau).
pub fn similarity(e_t: &[f64], e_i: &[f64], tau: f64) -> Result<f64, TrainError> {
    check_tau(tau)?;
    Ok((cosine_checked(e_t, e_i)? / tau).exp())
}

/// Entry (i, j) is S(T_i, I_j).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    entries: Vec<f64>,
    pub tau: f64,
}

impl SimilarityMatrix {
    pub fn from_entries(n: usize, entries: Vec<f64>, tau: f64) -> Result<Self, TrainError> {
        if entries.len() != n * n {
            return Err(TrainError::Dimension {
                expected: n * n,
                got: entries.len(),
            });
        }
        Ok(Self { n, entries, tau })
    }

    pub fn from_embeddings(texts: &[Vec<f64>], images: &[Vec<f64>], tau: f64) -> Result<Self, TrainError> {
        if texts.len() != images.len() {
            return Err(TrainError::Dimension {
                expected: texts.len(),
                got: images.len(),
            });
        }
        let mut entries = Vec::with_capacity(texts.len() * texts.len());
        for t in texts {
            for i in images {
                entries.push(similarity(t, i, tau)?);
            }
        }
        Self::from_entries(texts.len(), entries, tau)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

/// Symmetric cross-entropy: text-to-image over rows plus image-to-text over
/// columns, summed over the batch (not averaged).
pub fn contrastive_loss(sim: &SimilarityMatrix) -> Result<f64, TrainError> {
    let n = sim.n();
    if n == 0 {
        return Err(TrainError::EmptyBatch);
    }
    if let Some(&bad) = sim.entries().iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
        return Err(TrainError::NonPositive(bad));
    }
    let mut loss = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| sim.get(i, j)).sum();
        let col: f64 = (0..n).map(|k| sim.get(k, i)).sum();
        let diag = sim.get(i, i);
        loss -= (diag / row).ln() + (diag / col).ln();
    }
    Ok(loss)
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Loss and its gradients with respect to every raw embedding and tau.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    pub d_texts: Vec<Vec<f64>>,
    pub d_images: Vec<Vec<f64>>,
    pub d_tau: f64,
}

impl LossGradient {
    /// Gradient with respect to log(tau).
    pub fn d_log_tau(&self, tau: f64) -> f64 {
        self.d_tau * tau
    }
}

/// Analytic gradient of `contrastive_loss` composed with `similarity`.
///
/// With logits L = C / tau, P the row softmax and Q the column softmax of L,
/// dLoss/dL_ij = P_ij + Q_ij - 2[i = j]. Gradients flow through the cosine
/// normalization of every embedding.
pub fn loss_gradient(texts: &[Vec<f64>], images: &[Vec<f64>], tau: f64) -> Result<LossGradient, TrainError> {
    check_tau(tau)?;
    let n = texts.len();
    if n == 0 {
        return Err(TrainError::EmptyBatch);
    }
    if images.len() != n {
        return Err(TrainError::Dimension {
            expected: n,
            got: images.len(),
        });
    }
    let d = texts[0].len();
    let unit = |v: &Vec<f64>| -> Result<(Vec<f64>, f64), TrainError> {
        if v.len() != d {
            return Err(TrainError::Dimension { expected: d, got: v.len() });
        }
        let nv = norm(v);
        if nv == 0.0 || !nv.is_finite() {
            return Err(TrainError::ZeroNorm);
        }
        Ok((v.iter().map(|x| x / nv).collect(), nv))
    };
    let tu: Vec<(Vec<f64>, f64)> = texts.iter().map(unit).collect::<Result<_, _>>()?;
    let iu: Vec<(Vec<f64>, f64)> = images.iter().map(unit).collect::<Result<_, _>>()?;

    let c: Vec<f64> = (0..n * n).map(|k| dot(&tu[k / n].0, &iu[k % n].0)).collect();
    let l: Vec<f64> = c.iter().map(|x| x / tau).collect();
    let row_lse: Vec<f64> = (0..n).map(|i| log_sum_exp((0..n).map(|j| l[i * n + j]))).collect();
    let col_lse: Vec<f64> = (0..n).map(|j| log_sum_exp((0..n).map(|i| l[i * n + j]))).collect();

    let mut loss = 0.0;
    for i in 0..n {
        loss += row_lse[i] + col_lse[i] - 2.0 * l[i * n + i];
    }
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let p = (l[i * n + j] - row_lse[i]).exp();
            let q = (l[i * n + j] - col_lse[j]).exp();
            g[i * n + j] = p + q - if i == j { 2.0 } else { 0.0 };
        }
    }
    let d_tau = -(0..n * n).map(|k| g[k] * c[k]).sum::<f64>() / (tau * tau);

    let project = |u: &[f64], len: f64, grad_u: Vec<f64>| -> Vec<f64> {
        let along = dot(u, &grad_u);
        grad_u.iter().zip(u).map(|(gu, uu)| (gu - uu * along) / len).collect()
    };
    let d_texts = (0..n)
        .map(|i| {
            let mut gu = vec![0.0; d];
            for j in 0..n {
                let w = g[i * n + j] / tau;
                for (acc, v) in gu.iter_mut().zip(&iu[j].0) {
                    *acc += w * v;
                }
            }
            project(&tu[i].0, tu[i].1, gu)
        })
        .collect();
    let d_images = (0..n)
        .map(|j| {
            let mut gv = vec![0.0; d];
            for i in 0..n {
                let w = g[i * n + j] / tau;
                for (acc, u) in gv.iter_mut().zip(&tu[i].0) {
                    *acc += w * u;
                }
            }
            project(&iu[j].0, iu[j].1, gv)
        })
        .collect();
    Ok(LossGradient {
        loss,
        d_texts,
        d_images,
        d_tau,
    })
}

/// Loss only, evaluated stably in log space.
pub fn embedding_loss(texts: &[Vec<f64>], images: &[Vec<f64>], tau: f64) -> Result<f64, TrainError> {
    loss_gradient(texts, images, tau).map(|g| g.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{E, LN_2};

    #[test]
    fn similarity_examples() {
        assert!((similarity(&[1.0, 0.0], &[1.0, 0.0], 1.0).unwrap() - E).abs() < 1e-12);
        assert_eq!(similarity(&[3.0, 0.0], &[0.0, 0.2], 0.5).unwrap(), 1.0);
        assert!((similarity(&[0.0, 1.0], &[0.0, -1.0], 1.0).unwrap() - 1.0 / E).abs() < 1e-12);
        assert!(matches!(similarity(&[0.0, 0.0], &[1.0, 0.0], 1.0), Err(TrainError::ZeroNorm)));
        assert!(matches!(similarity(&[1.0], &[1.0], 0.0), Err(TrainError::Temperature(_))));
    }

    #[test]
    fn loss_examples() {
        let one = SimilarityMatrix::from_entries(1, vec![3.3], 1.0).unwrap();
        assert_eq!(contrastive_loss(&one).unwrap(), 0.0);
        let uniform = SimilarityMatrix::from_entries(2, vec![1.7; 4], 1.0).unwrap();
        assert!((contrastive_loss(&uniform).unwrap() - 4.0 * LN_2).abs() < 1e-12);
        let id = SimilarityMatrix::from_embeddings(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0)
            .unwrap();
        let expected = 4.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((contrastive_loss(&id).unwrap() - expected).abs() < 1e-12);
        let bad = SimilarityMatrix::from_entries(2, vec![1.0, 0.0, 1.0, 1.0], 1.0).unwrap();
        assert!(matches!(contrastive_loss(&bad), Err(TrainError::NonPositive(_))));
    }

    #[test]
    fn gradient_path_agrees_with_direct_loss() {
        let t = vec![vec![0.3, -1.0, 2.0], vec![1.0, 0.5, 0.1], vec![-0.2, 0.2, 0.9]];
        let i = vec![vec![0.1, 0.4, -0.3], vec![2.0, 0.1, 0.0], vec![0.5, -0.5, 0.5]];
        let direct = contrastive_loss(&SimilarityMatrix::from_embeddings(&t, &i, 0.7).unwrap()).unwrap();
        assert!((embedding_loss(&t, &i, 0.7).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn symmetric_configuration_has_equal_gradients() {
        let t = vec![vec![1.0, 2.0, 0.5]; 3];
        let i = vec![vec![-0.5, 1.0, 1.0]; 3];
        let g = loss_gradient(&t, &i, 0.8).unwrap();
        for k in 1..3 {
            for (a, b) in g.d_texts[0].iter().zip(&g.d_texts[k]) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in g.d_images[0].iter().zip(&g.d_images[k]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>, f64)> {
        (1usize..5, 1usize..6).prop_flat_map(|(n, d)| {
            let vecs = proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, d), n);
            (vecs.clone(), vecs, 0.3f64..2.0)
        })
    }

    proptest! {
        #[test]
        fn radial_derivative_vanishes((t, i, tau) in instance()) {
            prop_assume!(t.iter().chain(&i).all(|v| norm(v) > 1e-3));
            let g = loss_gradient(&t, &i, tau).unwrap();
            for (v, gv) in t.iter().zip(&g.d_texts).chain(i.iter().zip(&g.d_images)) {
                prop_assert!(dot(v, gv).abs() < 1e-9);
            }
        }

        #[test]
        fn relabeling_invariant((t, i, tau) in instance()) {
            prop_assume!(t.iter().chain(&i).all(|v| norm(v) > 1e-3));
            let a = embedding_loss(&t, &i, tau).unwrap();
            let rt: Vec<_> = t.iter().rev().cloned().collect();
            let ri: Vec<_> = i.iter().rev().cloned().collect();
            let b = embedding_loss(&rt, &ri, tau).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(a >= -1e-12);
        }
    }
}
