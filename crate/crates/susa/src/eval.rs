//! Confusion-matrix metrics (OA, AA, Cohen's kappa) and the Spearman
//! representational dissimilarity.

use ndarray::{Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::LabelMap;
use crate::error::{Error, Result};

/// C x C counts; rows = truth class, columns = predicted class. Pixels with
/// truth id 0 (unlabeled) are excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.dim().0
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }
}

/// Count agreement over labeled pixels only.
pub fn confusion(truth: &LabelMap, pred: &LabelMap) -> Result<ConfusionMatrix> {
    if truth.ids.dim() != pred.ids.dim() {
        return Err(Error::shape(
            "confusion",
            format!("{:?}", truth.ids.dim()),
            format!("{:?}", pred.ids.dim()),
        ));
    }
    let c = truth.classes().max(pred.classes());
    let mut counts = Array2::<u64>::zeros((c, c));
    for (&t, &p) in truth.ids.iter().zip(pred.ids.iter()) {
        if t == 0 {
            continue;
        }
        if p == 0 || p as usize > c {
            return Err(Error::InvalidArgument(format!(
                "prediction id {p} invalid at a labeled pixel (classes: {c})"
            )));
        }
        counts[[t as usize - 1, p as usize - 1]] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// Summary metrics. `kappa_degenerate` flags the p_e = 1 single-class case
/// where kappa is reported as 0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Metrics {
    pub overall_accuracy: f64,
    pub average_accuracy: f64,
    pub kappa: f64,
    pub kappa_degenerate: bool,
}

/// OA = trace/total; AA = mean recall over classes with truth support;
/// kappa = (OA - p_e) / (1 - p_e) with p_e from row/column marginals.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("empty confusion matrix".into()));
    }
    let c = cm.classes();
    let totalf = total as f64;
    let mut trace = 0u64;
    let mut recalls = Vec::new();
    let mut pe = 0.0f64;
    for i in 0..c {
        trace += cm.counts[[i, i]];
        let row: u64 = (0..c).map(|j| cm.counts[[i, j]]).sum();
        let col: u64 = (0..c).map(|j| cm.counts[[j, i]]).sum();
        pe += (row as f64) * (col as f64) / (totalf * totalf);
        if row > 0 {
            recalls.push(cm.counts[[i, i]] as f64 / row as f64);
        }
    }
    let oa = trace as f64 / totalf;
    let aa = recalls.iter().sum::<f64>() / recalls.len() as f64;
    let (kappa, degenerate) = if (1.0 - pe).abs() < 1e-15 {
        (0.0, true)
    } else {
        ((oa - pe) / (1.0 - pe), false)
    };
    Ok(Metrics {
        overall_accuracy: oa,
        average_accuracy: aa,
        kappa,
        kappa_degenerate: degenerate,
    })
}

impl Metrics {
    /// Line-oriented `key: value` record.
    pub fn to_text(&self) -> String {
        format!(
            "overall_accuracy: {:.6}\naverage_accuracy: {:.6}\nkappa: {:.6}\nkappa_degenerate: {}\n",
            self.overall_accuracy, self.average_accuracy, self.kappa, self.kappa_degenerate
        )
    }
}

// ---------------------------------------------------------------------------
// Spearman dissimilarity
// ---------------------------------------------------------------------------

/// Average ranks (1-based) with ties sharing the mean rank of their run.
fn average_ranks(values: &[f32]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Representational dissimilarity between two feature responses over the
/// same pixels: `d = 1 - mean_i max_j spearman(X_i, Y_j)`. Constant features
/// contribute correlation 0 (with a warning). Directional, not symmetric.
pub fn dissimilarity(x: &ArrayD<f32>, y: &ArrayD<f32>, subsample: Option<(usize, u64)>) -> Result<f64> {
    let cx = *x.shape().last().unwrap();
    let cy = *y.shape().last().unwrap();
    let px = x.len() / cx;
    let py = y.len() / cy;
    if px != py {
        return Err(Error::shape("dissimilarity pixels", format!("{px}"), format!("{py}")));
    }
    let xf = x.view().into_shape_with_order((px, cx)).unwrap();
    let yf = y.view().into_shape_with_order((py, cy)).unwrap();

    let pixels: Vec<usize> = match subsample {
        Some((cap, seed)) if cap < px => {
            let mut idx: Vec<usize> = (0..px).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            idx.shuffle(&mut rng);
            idx.truncate(cap);
            idx.sort_unstable();
            idx
        }
        _ => (0..px).collect(),
    };

    let column = |flat: &ndarray::ArrayView2<f32>, j: usize| -> Vec<f32> {
        pixels.iter().map(|&p| flat[[p, j]]).collect()
    };
    let x_ranks: Vec<Vec<f64>> = (0..cx).map(|j| average_ranks(&column(&xf, j))).collect();
    let y_ranks: Vec<Vec<f64>> = (0..cy).map(|j| average_ranks(&column(&yf, j))).collect();

    let mut warned = false;
    let mut sum_max = 0.0f64;
    for xi in &x_ranks {
        let mut best = f64::NEG_INFINITY;
        for yj in &y_ranks {
            let r = match pearson(xi, yj) {
                Some(r) => r,
                None => {
                    if !warned {
                        log::warn!("dissimilarity: constant feature, correlation set to 0");
                        warned = true;
                    }
                    0.0
                }
            };
            if r > best {
                best = r;
            }
        }
        sum_max += best;
    }
    Ok(1.0 - sum_max / cx as f64)
}
