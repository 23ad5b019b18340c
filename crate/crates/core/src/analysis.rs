//! Latent-space analysis: pooled descriptors, PCA, and a small MLP
//! classifier with cross-validated evaluation.
//!
//! Latents vary in token count per sample, so classification runs on a
//! fixed-length permutation-invariant descriptor: per-channel mean and max
//! of μ plus a coarse occupancy histogram of the token positions.

use crate::autodiff::{ParamStore, Tape};
use crate::error::{SvxError, SvxResult};
use crate::matrix::Matrix;
use crate::model::{LatentPosterior, LATENT_STRIDE};
use crate::optim::{adamw_step, AdamW, OptimState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Histogram grid edge for the descriptor's occupancy part.
pub const DESCRIPTOR_GRID: usize = 6;
/// Principal components kept by the default classification pipeline.
pub const PCA_COMPONENTS: usize = 15;

/// Fixed-length pooled descriptor: c channel means, c channel maxes, then a
/// g³ occupancy histogram (token counts normalized by total token count).
/// Pooling over tokens makes the result independent of token order.
pub fn latent_descriptor(post: &LatentPosterior, g: usize) -> SvxResult<Vec<f64>> {
    let n = post.coords.len();
    if n == 0 {
        return Err(SvxError::EmptyInput("latent posterior"));
    }
    if g == 0 {
        return Err(SvxError::BadConfig { detail: "descriptor grid must be positive".into() });
    }
    let c = post.mu.cols();
    let mut means = vec![0.0f64; c];
    let mut maxes = vec![f64::NEG_INFINITY; c];
    for r in 0..n {
        for (j, &v) in post.mu.row(r).iter().enumerate() {
            means[j] += v as f64 / n as f64;
            maxes[j] = maxes[j].max(v as f64);
        }
    }
    let (eh, ew, ed) = post.dims.extent_at(LATENT_STRIDE).as_tuple();
    let mut hist = vec![0.0f64; g * g * g];
    for coord in &post.coords {
        let bin = |v: u32, extent: u32| ((v as usize * g) / extent as usize).min(g - 1);
        let (bx, by, bz) = (bin(coord.x, eh), bin(coord.y, ew), bin(coord.z, ed));
        hist[(bx * g + by) * g + bz] += 1.0 / n as f64;
    }
    let mut out = means;
    out.extend(maxes);
    out.extend(hist);
    Ok(out)
}

// ---------------------------------------------------------------------------
// PCA

#[derive(Clone, Debug)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// k×len, orthonormal rows, descending eigenvalue order. Rows past
    /// `informative` are zero padding for rank-deficient data.
    pub components: Matrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub informative: usize,
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvector columns), unsorted.
fn jacobi_eigen(a: &Matrix<f64>) -> (Vec<f64>, Matrix<f64>) {
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::zeros(n, n);
    for i in 0..n {
        v.set(i, i, 1.0);
    }
    let scale = (0..n).map(|i| m.get(i, i).abs()).fold(1.0f64, f64::max);
    for _sweep in 0..60 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m.get(p, q) * m.get(p, q);
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let (app, aqq) = (m.get(p, p), m.get(q, q));
                m.set(p, p, app - t * apq);
                m.set(q, q, aqq + t * apq);
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
                for i in 0..n {
                    if i != p && i != q {
                        let (aip, aiq) = (m.get(i, p), m.get(i, q));
                        m.set(i, p, c * aip - s * aiq);
                        m.set(p, i, c * aip - s * aiq);
                        m.set(i, q, s * aip + c * aiq);
                        m.set(q, i, s * aip + c * aiq);
                    }
                    let (vip, viq) = (v.get(i, p), v.get(i, q));
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }
    ((0..n).map(|i| m.get(i, i)).collect(), v)
}

/// Fit a k-component PCA. For tall-and-thin data the covariance is
/// eigendecomposed directly; when samples are fewer than features the M×M
/// Gram matrix is decomposed instead and its eigenvectors mapped back
/// through the data, which shares the nonzero spectrum. Component signs are
/// fixed so each row's largest-magnitude entry is positive.
pub fn pca_fit(data: &Matrix<f64>, k: usize) -> SvxResult<PcaModel> {
    let (m, len) = data.shape();
    if m < 2 {
        return Err(SvxError::EmptyInput("pca data (need at least 2 rows)"));
    }
    let max_k = m.min(len);
    if k == 0 || k > max_k {
        return Err(SvxError::BadComponentCount { k, max: max_k });
    }
    let mut mean = vec![0.0f64; len];
    for r in 0..m {
        for (j, &x) in data.row(r).iter().enumerate() {
            mean[j] += x / m as f64;
        }
    }
    let mut centered = data.clone();
    for r in 0..m {
        for (j, x) in centered.row_mut(r).iter_mut().enumerate() {
            *x -= mean[j];
        }
    }

    // (eigenvalue, component row) pairs for the full spectrum we can see.
    let mut pairs: Vec<(f64, Vec<f64>)> = if m < len {
        let gram = centered.matmul(&centered.transpose())?;
        let (sigma, vecs) = jacobi_eigen(&gram);
        (0..m)
            .map(|j| {
                let lambda = (sigma[j] / (m - 1) as f64).max(0.0);
                let mut u = vec![0.0f64; len];
                for r in 0..m {
                    let w = vecs.get(r, j);
                    for (i, &x) in centered.row(r).iter().enumerate() {
                        u[i] += w * x;
                    }
                }
                let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    for x in &mut u {
                        *x /= norm;
                    }
                } else {
                    u.iter_mut().for_each(|x| *x = 0.0);
                }
                (lambda, u)
            })
            .collect()
    } else {
        let cov = centered.transpose().matmul(&centered)?.scale(1.0 / (m - 1) as f64);
        let (lambda, vecs) = jacobi_eigen(&cov);
        (0..len).map(|j| (lambda[j].max(0.0), (0..len).map(|i| vecs.get(i, j)).collect())).collect()
    };
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let tol = 1e-12 * pairs.first().map_or(1.0, |p| p.0.max(1.0));
    let mut eigenvalues = Vec::with_capacity(k);
    let mut rows = Vec::with_capacity(k);
    let mut informative = 0;
    for i in 0..k {
        let (lambda, mut u) = pairs[i].clone();
        let degenerate = lambda <= tol || u.iter().all(|&x| x == 0.0);
        if degenerate {
            eigenvalues.push(0.0);
            rows.push(vec![0.0; len]);
            continue;
        }
        informative += 1;
        let lead = (0..len).fold(0, |best, j| if u[j].abs() > u[best].abs() { j } else { best });
        if u[lead] < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
        }
        eigenvalues.push(lambda);
        rows.push(u);
    }
    Ok(PcaModel { mean, components: Matrix::from_rows(&rows)?, eigenvalues, informative })
}

pub fn pca_transform(model: &PcaModel, v: &[f64]) -> SvxResult<Vec<f64>> {
    if v.len() != model.mean.len() {
        return Err(SvxError::LengthMismatch { left: v.len(), right: model.mean.len() });
    }
    Ok((0..model.components.rows())
        .map(|r| {
            model
                .components
                .row(r)
                .iter()
                .zip(v.iter().zip(&model.mean))
                .map(|(&c, (&x, &mu))| c * (x - mu))
                .sum()
        })
        .collect())
}

fn pca_transform_rows(model: &PcaModel, data: &Matrix<f64>) -> SvxResult<Matrix<f64>> {
    let rows: Vec<Vec<f64>> =
        (0..data.rows()).map(|r| pca_transform(model, data.row(r))).collect::<SvxResult<_>>()?;
    Matrix::from_rows(&rows)
}

// ---------------------------------------------------------------------------
// MLP classifier

#[derive(Clone, Copy, Debug)]
pub struct MlpConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> MlpConfig {
        MlpConfig { hidden: 64, epochs: 200, lr: 3e-4, seed: 0 }
    }
}

/// Three affine layers with ReLU between, trained on z-scored features.
/// The z-score statistics come from the training split and ride along for
/// prediction.
#[derive(Clone, Debug)]
pub struct MlpClassifier {
    pub params: ParamStore<f64>,
    pub feat_mean: Vec<f64>,
    pub feat_std: Vec<f64>,
    pub classes: usize,
}

const LAYER_NAMES: [(&str, &str); 3] =
    [("mlp.l1.w", "mlp.l1.b"), ("mlp.l2.w", "mlp.l2.b"), ("mlp.l3.w", "mlp.l3.b")];

fn zscore_stats(data: &Matrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let (m, f) = data.shape();
    let mut mean = vec![0.0f64; f];
    for r in 0..m {
        for (j, &x) in data.row(r).iter().enumerate() {
            mean[j] += x / m as f64;
        }
    }
    let mut std = vec![0.0f64; f];
    for r in 0..m {
        for (j, &x) in data.row(r).iter().enumerate() {
            std[j] += (x - mean[j]) * (x - mean[j]) / m as f64;
        }
    }
    for s in &mut std {
        *s = s.sqrt().max(1e-8);
    }
    (mean, std)
}

fn apply_zscore(data: &Matrix<f64>, mean: &[f64], std: &[f64]) -> Matrix<f64> {
    let mut out = data.clone();
    for r in 0..out.rows() {
        for (j, x) in out.row_mut(r).iter_mut().enumerate() {
            *x = (*x - mean[j]) / std[j];
        }
    }
    out
}

/// Cross-entropy training, full batch, AdamW. Deterministic per seed.
pub fn mlp_train(data: &Matrix<f64>, labels: &[usize], cfg: &MlpConfig) -> SvxResult<MlpClassifier> {
    let (m, feat) = data.shape();
    if m != labels.len() {
        return Err(SvxError::LengthMismatch { left: m, right: labels.len() });
    }
    if m == 0 {
        return Err(SvxError::EmptyInput("training set"));
    }
    let classes = labels.iter().max().unwrap() + 1;
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(SvxError::SingleClass);
    }

    let (feat_mean, feat_std) = zscore_stats(data);
    let x = apply_zscore(data, &feat_mean, &feat_std);
    let mut one_hot = Matrix::zeros(m, classes);
    for (r, &l) in labels.iter().enumerate() {
        one_hot.set(r, l, 1.0);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params: ParamStore<f64> = ParamStore::new();
    let sizes = [(feat, cfg.hidden), (cfg.hidden, cfg.hidden), (cfg.hidden, classes)];
    for ((wname, bname), (rows, cols)) in LAYER_NAMES.iter().zip(sizes) {
        let bound = 1.0 / (rows as f64).sqrt();
        let w = Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
        )?;
        params.insert(wname, w)?;
        params.insert(bname, Matrix::zeros(1, cols))?;
    }

    let mut state = OptimState::new(&params);
    let hp = AdamW::new(cfg.lr);
    let ids: Vec<_> = params.ids().collect();
    for _ in 0..cfg.epochs {
        let mut tape: Tape<f64> = Tape::new();
        let mut h = tape.leaf(x.clone());
        for (i, (wname, bname)) in LAYER_NAMES.iter().enumerate() {
            let w = tape.param(&params, params.require(wname)?);
            let b = tape.param(&params, params.require(bname)?);
            h = tape.matmul(h, w)?;
            h = tape.row_add(h, b)?;
            if i + 1 < LAYER_NAMES.len() {
                h = tape.relu(h);
            }
        }
        let probs = tape.softmax_rows(h);
        let logp = tape.ln(probs);
        let mask = tape.leaf(one_hot.clone());
        let picked = tape.mul(logp, mask)?;
        let summed = tape.sum_all(picked);
        let loss = tape.scale(summed, -1.0 / m as f64);
        let grads_by_node = tape.backward(loss)?;
        let grads: Vec<Matrix<f64>> = ids
            .iter()
            .map(|&id| {
                let p = params.get(id);
                tape.param_node(id)
                    .and_then(|n| grads_by_node.get(n).cloned())
                    .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()))
            })
            .collect();
        adamw_step(&mut params, &grads, &mut state, &hp)?;
    }
    Ok(MlpClassifier { params, feat_mean, feat_std, classes })
}

/// Class probabilities for one descriptor. Ties break toward the lowest
/// class index.
pub fn mlp_predict(clf: &MlpClassifier, v: &[f64]) -> SvxResult<(usize, Vec<f64>)> {
    if v.len() != clf.feat_mean.len() {
        return Err(SvxError::LengthMismatch { left: v.len(), right: clf.feat_mean.len() });
    }
    let mut h = Matrix::from_vec(1, v.len(), v.to_vec())?;
    for (j, x) in h.row_mut(0).iter_mut().enumerate() {
        *x = (*x - clf.feat_mean[j]) / clf.feat_std[j];
    }
    for (i, (wname, bname)) in LAYER_NAMES.iter().enumerate() {
        let w = clf.params.get(clf.params.require(wname)?);
        let b = clf.params.get(clf.params.require(bname)?);
        h = h.matmul(w)?;
        for (x, &bv) in h.row_mut(0).iter_mut().zip(b.row(0)) {
            *x += bv;
        }
        if i + 1 < LAYER_NAMES.len() {
            h = h.map(|x| x.max(0.0));
        }
    }
    let mx = h.row(0).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = h.row(0).iter().map(|&x| (x - mx).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / denom).collect();
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Ok((best, probs))
}

// ---------------------------------------------------------------------------
// Evaluation

/// (balanced accuracy, macro-F1). Both average over the classes present in
/// `labels`; predicted-only classes don't contribute terms of their own but
/// do cost precision on the classes they were taken from.
pub fn evaluate_classifier(preds: &[usize], labels: &[usize]) -> SvxResult<(f64, f64)> {
    if preds.len() != labels.len() {
        return Err(SvxError::LengthMismatch { left: preds.len(), right: labels.len() });
    }
    if labels.is_empty() {
        return Err(SvxError::EmptyInput("labels"));
    }
    let max_class = labels.iter().chain(preds.iter()).max().unwrap() + 1;
    let mut tp = vec![0usize; max_class];
    let mut fp = vec![0usize; max_class];
    let mut fal_n = vec![0usize; max_class];
    let mut present = vec![false; max_class];
    for (&p, &l) in preds.iter().zip(labels) {
        present[l] = true;
        if p == l {
            tp[l] += 1;
        } else {
            fp[p] += 1;
            fal_n[l] += 1;
        }
    }
    let (mut recall_sum, mut f1_sum, mut count) = (0.0, 0.0, 0usize);
    for c in 0..max_class {
        if !present[c] {
            continue;
        }
        count += 1;
        recall_sum += tp[c] as f64 / (tp[c] + fal_n[c]) as f64;
        let denom = 2 * tp[c] + fp[c] + fal_n[c];
        f1_sum += if denom == 0 { 0.0 } else { 2.0 * tp[c] as f64 / denom as f64 };
    }
    Ok((recall_sum / count as f64, f1_sum / count as f64))
}

#[derive(Clone, Debug)]
pub struct FoldScore {
    pub fold: usize,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
}

/// k-fold cross-validation of the descriptor → PCA → MLP pipeline. Sample i
/// goes to test fold i mod folds; the PCA and z-score statistics are fit on
/// each fold's training split only. `pca_k = None` skips the projection.
pub fn cross_validate(
    data: &Matrix<f64>,
    labels: &[usize],
    folds: usize,
    pca_k: Option<usize>,
    cfg: &MlpConfig,
) -> SvxResult<Vec<FoldScore>> {
    let m = data.rows();
    if m != labels.len() {
        return Err(SvxError::LengthMismatch { left: m, right: labels.len() });
    }
    if folds < 2 || folds > m {
        return Err(SvxError::BadConfig { detail: format!("{folds} folds for {m} samples") });
    }
    let mut scores = Vec::with_capacity(folds);
    for fold in 0..folds {
        let (mut train_rows, mut train_labels, mut test_rows, mut test_labels) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..m {
            if i % folds == fold {
                test_rows.push(data.row(i).to_vec());
                test_labels.push(labels[i]);
            } else {
                train_rows.push(data.row(i).to_vec());
                train_labels.push(labels[i]);
            }
        }
        let train = Matrix::from_rows(&train_rows)?;
        let test = Matrix::from_rows(&test_rows)?;
        let (train, test) = match pca_k {
            Some(k) => {
                let pca = pca_fit(&train, k)?;
                (pca_transform_rows(&pca, &train)?, pca_transform_rows(&pca, &test)?)
            }
            None => (train, test),
        };
        let fold_cfg = MlpConfig { seed: cfg.seed.wrapping_add(fold as u64), ..*cfg };
        let clf = mlp_train(&train, &train_labels, &fold_cfg)?;
        let preds: Vec<usize> = (0..test.rows())
            .map(|r| mlp_predict(&clf, test.row(r)).map(|(c, _)| c))
            .collect::<SvxResult<_>>()?;
        let (bacc, f1) = evaluate_classifier(&preds, &test_labels)?;
        scores.push(FoldScore { fold, balanced_accuracy: bacc, macro_f1: f1 });
    }
    Ok(scores)
}

pub fn classification_report(scores: &[FoldScore]) -> String {
    let mut out = String::from("fold, balanced_accuracy, macro_f1\n");
    for s in scores {
        out.push_str(&format!("{}, {:.4}, {:.4}\n", s.fold, s.balanced_accuracy, s.macro_f1));
    }
    if !scores.is_empty() {
        let n = scores.len() as f64;
        let bacc = scores.iter().map(|s| s.balanced_accuracy).sum::<f64>() / n;
        let f1 = scores.iter().map(|s| s.macro_f1).sum::<f64>() / n;
        out.push_str(&format!("mean, {bacc:.4}, {f1:.4}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{Coordinate, Dims};

    fn posterior(coords: Vec<Coordinate>, mu_rows: &[Vec<f64>]) -> LatentPosterior {
        let mu32: Vec<Vec<f32>> =
            mu_rows.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
        let mu = Matrix::from_rows(&mu32).unwrap();
        let logvar = Matrix::zeros(mu.rows(), mu.cols());
        LatentPosterior { coords, mu, logvar, dims: Dims::new(48, 48, 48) }
    }

    #[test]
    fn descriptor_matches_direct_recomputation() {
        // 48³ at stride 8 → 6³ latent lattice, so with g = 6 each lattice
        // site is its own bin.
        let coords = vec![Coordinate::new(0, 0, 0), Coordinate::new(2, 3, 4), Coordinate::new(5, 5, 5)];
        let mu = vec![vec![1.0, -2.0], vec![3.0, 0.5], vec![-1.0, 0.5]];
        let post = posterior(coords, &mu);
        let d = latent_descriptor(&post, 6).unwrap();
        assert_eq!(d.len(), 2 * 2 + 216);
        assert!((d[0] - 1.0).abs() < 1e-9 && (d[1] + 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(&d[2..4], &[3.0, 0.5]);
        let hist = &d[4..];
        assert!((hist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((hist[0] - 1.0 / 3.0).abs() < 1e-9);
        assert!((hist[(2 * 6 + 3) * 6 + 4] - 1.0 / 3.0).abs() < 1e-9);
        assert!((hist[215] - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn descriptor_ignores_token_order() {
        let coords = vec![Coordinate::new(1, 1, 1), Coordinate::new(4, 2, 0)];
        let mu = vec![vec![0.25, 2.0], vec![-4.0, 0.125]];
        let a = latent_descriptor(&posterior(coords.clone(), &mu), 6).unwrap();
        let swapped = vec![coords[1], coords[0]];
        let b = latent_descriptor(&posterior(swapped, &[mu[1].clone(), mu[0].clone()]), 6).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let single = latent_descriptor(&posterior(vec![coords[0]], &mu[..1]), 6).unwrap();
        assert_eq!(&single[0..2], &[0.25, 2.0]);
        assert_eq!(&single[2..4], &[0.25, 2.0]);
        assert_eq!(single[4..].iter().filter(|&&h| h > 0.0).count(), 1);
    }

    #[test]
    fn pca_recovers_a_rank_one_line() {
        let data = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![-1.0, 0.0, 0.0],
            vec![2.0, 0.0, 0.0],
            vec![-2.0, 0.0, 0.0],
        ])
        .unwrap();
        let pca = pca_fit(&data, 2).unwrap();
        assert_eq!(pca.informative, 1);
        // Sign fixed toward +e1 even though −e1 spans the same line.
        assert!((pca.components.get(0, 0) - 1.0).abs() < 1e-9);
        assert!(pca.components.get(0, 1).abs() < 1e-9);
        let total: f64 = pca.eigenvalues.iter().sum();
        assert!((pca.eigenvalues[0] / total - 1.0).abs() < 1e-12);
        // Zero-padded second component.
        assert!(pca.components.row(1).iter().all(|&x| x == 0.0));
        assert_eq!(pca.eigenvalues[1], 0.0);
    }

    #[test]
    fn pca_transform_of_the_mean_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = Matrix::from_vec(12, 5, (0..60).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .unwrap();
        let pca = pca_fit(&data, 4).unwrap();
        let t = pca_transform(&pca, &pca.mean.clone()).unwrap();
        assert!(t.iter().all(|&x| x.abs() < 1e-12));
    }

    /// Eigenpair residuals against an independently assembled covariance,
    /// trace preservation, orthonormality, and k = len reconstruction.
    fn check_pca_against_covariance(data: &Matrix<f64>, k: usize) {
        let (m, len) = data.shape();
        let pca = pca_fit(data, k).unwrap();

        let mut mean = vec![0.0f64; len];
        for r in 0..m {
            for j in 0..len {
                mean[j] += data.get(r, j) / m as f64;
            }
        }
        let mut cov = vec![vec![0.0f64; len]; len];
        for r in 0..m {
            for i in 0..len {
                for j in 0..len {
                    cov[i][j] +=
                        (data.get(r, i) - mean[i]) * (data.get(r, j) - mean[j]) / (m - 1) as f64;
                }
            }
        }

        for r in 0..pca.informative {
            let u = pca.components.row(r);
            let lambda = pca.eigenvalues[r];
            for i in 0..len {
                let cu: f64 = (0..len).map(|j| cov[i][j] * u[j]).sum();
                assert!(
                    (cu - lambda * u[i]).abs() < 1e-8,
                    "eigenpair residual {} at row {r}",
                    cu - lambda * u[i]
                );
            }
        }
        let trace: f64 = (0..len).map(|i| cov[i][i]).sum();
        if k == m.min(len) && pca.informative == k {
            let sum: f64 = pca.eigenvalues.iter().sum();
            assert!((sum - trace).abs() < 1e-9, "trace {trace} vs eigenvalue sum {sum}");
        }
        for a in 0..k {
            for b in a..k {
                let dot: f64 =
                    pca.components.row(a).iter().zip(pca.components.row(b)).map(|(x, y)| x * y).sum();
                let want = if a == b && a < pca.informative { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-6, "rows {a},{b} dot {dot}");
            }
        }
        for r in 0..pca.eigenvalues.len().saturating_sub(1) {
            assert!(pca.eigenvalues[r] >= pca.eigenvalues[r + 1]);
        }
    }

    #[test]
    fn pca_direct_path_matches_covariance_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = Matrix::from_vec(20, 10, (0..200).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap();
        check_pca_against_covariance(&data, 10);

        // Full-rank component set reconstructs the data.
        let pca = pca_fit(&data, 10).unwrap();
        for r in 0..20 {
            let t = pca_transform(&pca, data.row(r)).unwrap();
            for i in 0..10 {
                let rebuilt: f64 = pca.mean[i]
                    + (0..10).map(|c| t[c] * pca.components.get(c, i)).sum::<f64>();
                assert!((rebuilt - data.get(r, i)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pca_gram_path_matches_covariance_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = Matrix::from_vec(8, 12, (0..96).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap();
        // Centering caps the rank at 7, so the last kept component must be
        // flagged off.
        check_pca_against_covariance(&data, 8);
        let pca = pca_fit(&data, 8).unwrap();
        assert_eq!(pca.informative, 7);
    }

    #[test]
    fn pca_rejects_unreachable_component_counts() {
        let data = Matrix::zeros(4, 3);
        assert!(matches!(
            pca_fit(&data, 4),
            Err(SvxError::BadComponentCount { k: 4, max: 3 })
        ));
        assert!(matches!(pca_fit(&data, 0), Err(SvxError::BadComponentCount { .. })));
        assert!(matches!(pca_fit(&Matrix::zeros(1, 3), 1), Err(SvxError::EmptyInput(_))));
    }

    fn two_blob_data(per_class: usize, seed: u64) -> (Matrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..per_class * 2 {
            let class = i % 2;
            let center = if class == 0 { [-2.0, -2.0, 1.0] } else { [2.0, 2.0, -1.0] };
            rows.push(vec![
                center[0] + rng.gen_range(-0.5..0.5),
                center[1] + rng.gen_range(-0.5..0.5),
                center[2] + rng.gen_range(-0.5..0.5),
            ]);
            labels.push(class);
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn mlp_separates_blobs_and_is_deterministic() {
        let (data, labels) = two_blob_data(20, 2);
        let cfg = MlpConfig { epochs: 400, lr: 1e-2, ..Default::default() };
        let clf = mlp_train(&data, &labels, &cfg).unwrap();
        let preds: Vec<usize> =
            (0..data.rows()).map(|r| mlp_predict(&clf, data.row(r)).unwrap().0).collect();
        assert_eq!(preds, labels, "separable toy set not fit exactly");

        let clf2 = mlp_train(&data, &labels, &cfg).unwrap();
        for id in clf.params.ids() {
            let id2 = clf2.params.require(clf.params.name(id)).unwrap();
            assert_eq!(clf.params.get(id), clf2.params.get(id2));
        }
    }

    #[test]
    fn mlp_prediction_breaks_ties_low() {
        // Zeroed network: every class gets the same score.
        let (data, labels) = two_blob_data(3, 4);
        let cfg = MlpConfig { epochs: 0, hidden: 4, ..Default::default() };
        let mut clf = mlp_train(&data, &labels, &cfg).unwrap();
        for id in clf.params.ids().collect::<Vec<_>>() {
            let zero = Matrix::zeros(clf.params.get(id).rows(), clf.params.get(id).cols());
            *clf.params.get_mut(id) = zero;
        }
        let (class, probs) = mlp_predict(&clf, data.row(0)).unwrap();
        assert_eq!(class, 0);
        assert!((probs[0] - 0.5).abs() < 1e-12 && (probs[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mlp_rejects_single_class_sets() {
        let data = Matrix::zeros(4, 2);
        let err = mlp_train(&data, &[1, 1, 1, 1], &MlpConfig::default());
        assert!(matches!(err, Err(SvxError::SingleClass)));
    }

    #[test]
    fn evaluation_matches_confusion_matrix_oracle() {
        assert_eq!(evaluate_classifier(&[0, 1, 2], &[0, 1, 2]).unwrap(), (1.0, 1.0));

        // Constant prediction on a balanced set: recalls 1 and 0.
        let (bacc, f1) = evaluate_classifier(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap();
        assert!((bacc - 0.5).abs() < 1e-12);
        // F1: class 0 → 2·2/(4+2+0) = 2/3; class 1 → 0.
        assert!((f1 - 1.0 / 3.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let labels: Vec<usize> = (0..60).map(|_| rng.gen_range(0..3)).collect();
        let preds: Vec<usize> = (0..60).map(|_| rng.gen_range(0..3)).collect();
        let (bacc, f1) = evaluate_classifier(&preds, &labels).unwrap();
        let mut recalls = Vec::new();
        let mut f1s = Vec::new();
        for c in 0..3 {
            let tp = labels.iter().zip(&preds).filter(|&(&l, &p)| l == c && p == c).count() as f64;
            let fn_ = labels.iter().zip(&preds).filter(|&(&l, &p)| l == c && p != c).count() as f64;
            let fp = labels.iter().zip(&preds).filter(|&(&l, &p)| l != c && p == c).count() as f64;
            recalls.push(tp / (tp + fn_));
            f1s.push(2.0 * tp / (2.0 * tp + fp + fn_));
        }
        assert!((bacc - recalls.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        assert!((f1 - f1s.iter().sum::<f64>() / 3.0).abs() < 1e-12);

        assert!(matches!(
            evaluate_classifier(&[0], &[0, 1]),
            Err(SvxError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn cross_validation_partitions_and_reports() {
        let (data, labels) = two_blob_data(9, 5);
        let cfg = MlpConfig { epochs: 300, lr: 1e-2, hidden: 16, ..Default::default() };
        let scores = cross_validate(&data, &labels, 3, Some(2), &cfg).unwrap();
        assert_eq!(scores.len(), 3);
        // i mod 3 assignment tiles the interleaved labels evenly, so every
        // test fold sees both classes; blobs this far apart classify clean.
        for s in &scores {
            assert!(s.balanced_accuracy > 0.9, "fold {} at {}", s.fold, s.balanced_accuracy);
        }
        let report = classification_report(&scores);
        let lines: Vec<&str> = report.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "fold, balanced_accuracy, macro_f1");
        assert!(lines[4].starts_with("mean, "));

        let err = cross_validate(&data, &labels, 1, None, &cfg);
        assert!(matches!(err, Err(SvxError::BadConfig { .. })));
    }
}
