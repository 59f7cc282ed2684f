//! Evaluation protocols: zero-shot segmentation by cosine-to-prototype
//! argmax, linear probing of encoder features, PCA false-color
//! visualization and instance retrieval under center perturbation.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector3};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::distill::model::DistillModel;
use crate::distill::optim::{Adam, OptimConfig};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::raster::Rasterizer;
use crate::scene::{Camera, GaussianScene, TeacherId};
use crate::synth::rng_for;

/// Row-normalized copy; zero rows stay zero.
pub fn normalize_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Mean cosine similarity between corresponding rows of `a` and `b` over
/// the rows selected by `mask`. Zero rows count as cosine 0.
pub fn mean_row_cosine(a: &DMatrix<f64>, b: &DMatrix<f64>, mask: &[bool]) -> Result<f64> {
    if a.shape() != b.shape() || mask.len() != a.nrows() {
        return Err(Error::shape(
            format!("{:?} rows with a mask of {}", a.shape(), mask.len()),
            b.nrows(),
        ));
    }
    let (an, bn) = (normalize_rows(a), normalize_rows(b));
    let rows: Vec<usize> = (0..a.nrows()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::Precondition(
            "no rows selected for the cosine comparison".into(),
        ));
    }
    Ok(rows.iter().map(|&i| an.row(i).dot(&bn.row(i))).sum::<f64>() / rows.len() as f64)
}

/// Per-row argmax of cosine similarity against the prototype rows. Ties go
/// to the lower class index.
pub fn classify_cosine(features: &DMatrix<f64>, prototypes: &DMatrix<f64>) -> Result<Vec<u32>> {
    if prototypes.nrows() == 0 {
        return Err(Error::Config(
            "zero-shot segmentation needs at least one prototype".into(),
        ));
    }
    if features.ncols() != prototypes.ncols() {
        return Err(Error::shape(
            format!("prototypes of dim {}", features.ncols()),
            prototypes.ncols(),
        ));
    }
    let scores = normalize_rows(features) * normalize_rows(prototypes).transpose();
    Ok(scores
        .row_iter()
        .map(|r| argmax(r.iter().copied()) as u32)
        .collect())
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// `counts[(truth, predicted)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub counts: DMatrix<u64>,
}

impl ConfusionMatrix {
    /// Accumulates the rows where `mask` is set (all rows when `None`).
    /// Labels at or beyond `num_classes` are data errors.
    pub fn new(
        truth: &[u32],
        predicted: &[u32],
        num_classes: usize,
        mask: Option<&[bool]>,
    ) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::shape(
                format!("{} predictions", truth.len()),
                predicted.len(),
            ));
        }
        if let Some(m) = mask {
            if m.len() != truth.len() {
                return Err(Error::shape(
                    format!("mask of length {}", truth.len()),
                    m.len(),
                ));
            }
        }
        let mut counts = DMatrix::zeros(num_classes, num_classes);
        for (i, (&t, &p)) in truth.iter().zip(predicted).enumerate() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            if t as usize >= num_classes || p as usize >= num_classes {
                return Err(Error::Data {
                    index: i,
                    message: format!("label {t} or prediction {p} outside {num_classes} classes"),
                });
            }
            counts[(t as usize, p as usize)] += 1;
        }
        Ok(Self { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    /// Classes with at least one ground-truth sample.
    pub fn present(&self) -> Vec<usize> {
        (0..self.num_classes())
            .filter(|&c| self.counts.row(c).sum() > 0)
            .collect()
    }

    pub fn iou(&self, c: usize) -> f64 {
        let tp = self.counts[(c, c)] as f64;
        let fn_ = self.counts.row(c).sum() as f64 - tp;
        let fp = self.counts.column(c).sum() as f64 - tp;
        let denom = tp + fn_ + fp;
        if denom == 0.0 {
            0.0
        } else {
            tp / denom
        }
    }

    pub fn accuracy(&self, c: usize) -> f64 {
        let n = self.counts.row(c).sum() as f64;
        if n == 0.0 {
            0.0
        } else {
            self.counts[(c, c)] as f64 / n
        }
    }

    pub fn overall_accuracy(&self) -> f64 {
        let total = self.counts.sum() as f64;
        if total == 0.0 {
            0.0
        } else {
            self.counts.diagonal().sum() as f64 / total
        }
    }

    /// Means over classes present in the ground truth; foreground variants
    /// additionally skip `background`.
    pub fn metrics(&self, background: &[u32]) -> Metrics {
        let present = self.present();
        let fg: Vec<usize> = present
            .iter()
            .copied()
            .filter(|&c| !background.contains(&(c as u32)))
            .collect();
        let mean = |cs: &[usize], f: &dyn Fn(usize) -> f64| {
            if cs.is_empty() {
                0.0
            } else {
                cs.iter().map(|&c| f(c)).sum::<f64>() / cs.len() as f64
            }
        };
        Metrics {
            miou: mean(&present, &|c| self.iou(c)),
            macc: mean(&present, &|c| self.accuracy(c)),
            f_miou: mean(&fg, &|c| self.iou(c)),
            f_macc: mean(&fg, &|c| self.accuracy(c)),
            overall_accuracy: self.overall_accuracy(),
            per_class_iou: (0..self.num_classes())
                .map(|c| present.contains(&c).then(|| self.iou(c)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub miou: f64,
    pub macc: f64,
    pub f_miou: f64,
    pub f_macc: f64,
    pub overall_accuracy: f64,
    /// `None` for classes absent from the ground truth.
    pub per_class_iou: Vec<Option<f64>>,
}

impl Metrics {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in [
            ("miou", self.miou),
            ("macc", self.macc),
            ("f_miou", self.f_miou),
            ("f_macc", self.f_macc),
            ("overall_accuracy", self.overall_accuracy),
        ] {
            s.push_str(&format!("{k},{v}\n"));
        }
        for (c, v) in self.per_class_iou.iter().enumerate() {
            if let Some(v) = v {
                s.push_str(&format!("iou_{c},{v}\n"));
            }
        }
        s
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>8}", "metric", "value")?;
        for (k, v) in [
            ("mIoU", self.miou),
            ("mAcc", self.macc),
            ("f-mIoU", self.f_miou),
            ("f-mAcc", self.f_macc),
            ("allAcc", self.overall_accuracy),
        ] {
            writeln!(f, "{k:<10} {:>8.2}", 100.0 * v)?;
        }
        for (c, v) in self.per_class_iou.iter().enumerate() {
            if let Some(v) = v {
                writeln!(f, "{:<10} {:>8.2}", format!("IoU[{c}]"), 100.0 * v)?;
            }
        }
        Ok(())
    }
}

fn semantic_labels(scene: &GaussianScene) -> Result<&[u32]> {
    scene
        .semantic_labels
        .as_deref()
        .ok_or_else(|| Error::Precondition("scene has no semantic labels".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub predictions: Vec<u32>,
    pub metrics: Metrics,
}

/// Classifies every Gaussian by the prototype nearest (in cosine) to its
/// language-head prediction in raw teacher space, and scores the rows in
/// `mask` against the scene's semantic labels.
pub fn zero_shot_segment(
    model: &DistillModel,
    scene: &GaussianScene,
    prototypes: &DMatrix<f64>,
    background: &[u32],
    mask: Option<&[bool]>,
) -> Result<Segmentation> {
    if prototypes.nrows() == 0 {
        return Err(Error::Config(
            "zero-shot segmentation needs at least one prototype".into(),
        ));
    }
    let truth = semantic_labels(scene)?;
    let features = model.predict_raw(scene, TeacherId::Lang)?;
    let predictions = classify_cosine(&features, prototypes)?;
    let classes = prototypes.nrows().max(scene.num_classes());
    let metrics = ConfusionMatrix::new(truth, &predictions, classes, mask)?.metrics(background);
    Ok(Segmentation {
        predictions,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub max_iters: usize,
    /// Stop once the full-batch loss improves by less than this in one step.
    pub tolerance: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            max_iters: 2000,
            tolerance: 1e-7,
            l2: 1e-4,
        }
    }
}

/// Multinomial logistic regression over standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub mean: DVector<f64>,
    pub inv_std: DVector<f64>,
    /// `d x C`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub iterations: usize,
    pub final_loss: f64,
}

impl LinearProbe {
    fn standardize(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.mean[j]);
            col *= self.inv_std[j];
        }
        out
    }

    pub fn logits(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut l = self.standardize(x) * &self.weights;
        for mut row in l.row_iter_mut() {
            row += self.bias.transpose();
        }
        l
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<u32> {
        self.logits(x)
            .row_iter()
            .map(|r| argmax(r.iter().copied()) as u32)
            .collect()
    }
}

fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = logits.clone();
    for mut row in p.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// Fits a linear probe by full-batch Adam on the cross-entropy until the
/// loss stalls. Rows of all `features` matrices are pooled with their labels.
pub fn linear_probe(
    features: &[&DMatrix<f64>],
    labels: &[&[u32]],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Config(
            "linear probing needs matching, non-empty feature and label sets".into(),
        ));
    }
    let d = features[0].ncols();
    let n: usize = features.iter().map(|f| f.nrows()).sum();
    let mut x = DMatrix::zeros(n, d);
    let mut y = Vec::with_capacity(n);
    let mut r = 0;
    for (f, l) in features.iter().zip(labels) {
        if f.ncols() != d || f.nrows() != l.len() {
            return Err(Error::shape(
                format!("{} rows of dim {d}", l.len()),
                format!("{}x{}", f.nrows(), f.ncols()),
            ));
        }
        x.rows_mut(r, f.nrows()).copy_from(f);
        y.extend_from_slice(l);
        r += f.nrows();
    }
    if let Some(&bad) = y.iter().find(|&&c| c as usize >= num_classes) {
        return Err(Error::Data {
            index: y.iter().position(|&c| c == bad).unwrap_or(0),
            message: format!("label {bad} outside {num_classes} classes"),
        });
    }
    let distinct: std::collections::BTreeSet<u32> = y.iter().copied().collect();
    if num_classes < 2 || distinct.len() < 2 {
        return Err(Error::Precondition(
            "linear probing needs at least two distinct classes".into(),
        ));
    }

    let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.mean()));
    let inv_std = DVector::from_iterator(
        d,
        x.column_iter().zip(mean.iter()).map(|(c, m)| {
            let var = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
            if var > 1e-24 {
                1.0 / var.sqrt()
            } else {
                0.0
            }
        }),
    );
    let mut probe = LinearProbe {
        mean,
        inv_std,
        weights: DMatrix::zeros(d, num_classes),
        bias: DVector::zeros(num_classes),
        iterations: 0,
        final_loss: f64::INFINITY,
    };
    let xs = probe.standardize(&x);
    let mut adam = Adam::new(
        &OptimConfig {
            lr: cfg.lr,
            ..OptimConfig::default()
        },
        d * num_classes + num_classes,
    );
    let mut prev = f64::INFINITY;
    for it in 0..cfg.max_iters {
        let mut logits = &xs * &probe.weights;
        for mut row in logits.row_iter_mut() {
            row += probe.bias.transpose();
        }
        let mut p = softmax_rows(&logits);
        let mut loss = 0.0;
        for (i, &c) in y.iter().enumerate() {
            loss -= p[(i, c as usize)].max(1e-300).ln();
            p[(i, c as usize)] -= 1.0;
        }
        loss = loss / n as f64 + 0.5 * cfg.l2 * probe.weights.norm_squared();
        p /= n as f64;
        let gw = xs.transpose() * &p + &probe.weights * cfg.l2;
        let gb = p.row_sum();
        probe.iterations = it + 1;
        probe.final_loss = loss;
        if (prev - loss).abs() < cfg.tolerance {
            break;
        }
        prev = loss;
        let mut params: Vec<f64> = probe
            .weights
            .iter()
            .chain(probe.bias.iter())
            .copied()
            .collect();
        let grad: Vec<f64> = gw.iter().chain(gb.iter()).copied().collect();
        adam.step(&mut params, &grad, cfg.lr);
        probe.weights.copy_from_slice(&params[..d * num_classes]);
        probe.bias.copy_from_slice(&params[d * num_classes..]);
    }
    Ok(probe)
}

/// Per-row RGB colors from the top three principal components, each min-max
/// normalized to [0, 1]. Constant components map to 0.5. Components are
/// sign-fixed so their largest-magnitude loading is positive. Returns the
/// colors and the numerical rank seen (fewer than 3 pads with gray).
pub fn pca_colors(features: &DMatrix<f64>) -> Result<(Vec<[f64; 3]>, usize)> {
    let (n, d) = features.shape();
    if n < 3 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let mean = features.row_mean();
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(*v));
    let tol = top.max(f64::MIN_POSITIVE) * 1e-10;
    let rank = order
        .iter()
        .filter(|&&k| eig.eigenvalues[k] > tol)
        .count()
        .min(3);

    let mut colors = vec![[0.5; 3]; n];
    for (ch, &k) in order.iter().take(rank).enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let lead = argmax(v.iter().map(|x| x.abs()));
        if v[lead] < 0.0 {
            v = -v;
        }
        let proj = &centered * v;
        let (lo, hi) = (proj.min(), proj.max());
        if hi - lo > 1e-12 * (1.0 + hi.abs().max(lo.abs())) {
            for (c, p) in colors.iter_mut().zip(proj.iter()) {
                c[ch] = (p - lo) / (hi - lo);
            }
        }
    }
    Ok((colors, rank))
}

/// Renders `scene` with every Gaussian recolored by `colors`.
pub fn render_colors(
    rasterizer: &Rasterizer,
    scene: &GaussianScene,
    camera: &Camera,
    colors: &[[f64; 3]],
) -> Result<RgbImage> {
    if colors.len() != scene.len() {
        return Err(Error::shape(
            format!("{} colors", scene.len()),
            colors.len(),
        ));
    }
    let mut recolored = scene.clone();
    for (g, c) in recolored.gaussians.iter_mut().zip(colors) {
        g.color = Vector3::from(*c);
    }
    Ok(rasterizer.render(&recolored, camera).color)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub instances: usize,
    pub recall_at_1: f64,
    /// Among misses, the fraction retrieving an instance of the same class;
    /// `None` without misses.
    pub same_class_at_incorrect: Option<f64>,
}

/// Per-instance mean rows of `features`; instance ids index the output.
fn instance_means(features: &DMatrix<f64>, instances: &[u32], ids: &[u32]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(ids.len(), features.ncols());
    let mut counts = vec![0usize; ids.len()];
    for (i, inst) in instances.iter().enumerate() {
        let k = ids
            .binary_search(inst)
            .expect("id list covers every instance");
        let mut row = out.row_mut(k);
        row += features.row(i);
        counts[k] += 1;
    }
    for (k, c) in counts.iter().enumerate() {
        let mut row = out.row_mut(k);
        row /= *c as f64;
    }
    out
}

/// Retrieval of perturbed instances among clean ones by cosine between
/// per-instance mean features.
pub fn retrieve_instances(
    clean: &DMatrix<f64>,
    perturbed: &DMatrix<f64>,
    instances: &[u32],
    semantic: &[u32],
) -> Result<RetrievalResult> {
    if clean.shape() != perturbed.shape()
        || clean.nrows() != instances.len()
        || semantic.len() != instances.len()
    {
        return Err(Error::shape(
            format!("{} rows for clean, perturbed and labels", instances.len()),
            format!(
                "{} / {} / {}",
                clean.nrows(),
                perturbed.nrows(),
                semantic.len()
            ),
        ));
    }
    let mut ids: Vec<u32> = instances.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 1,
            got: ids.len(),
        });
    }
    let mut class_of = vec![0u32; ids.len()];
    for (i, inst) in instances.iter().enumerate() {
        class_of[ids.binary_search(inst).expect("present")] = semantic[i];
    }
    let a = normalize_rows(&instance_means(perturbed, instances, &ids));
    let b = normalize_rows(&instance_means(clean, instances, &ids));
    let scores = a * b.transpose();
    let mut hits = 0;
    let (mut misses, mut same) = (0, 0);
    for (k, row) in scores.row_iter().enumerate() {
        let best = argmax(row.iter().copied());
        if best == k {
            hits += 1;
        } else {
            misses += 1;
            if class_of[best] == class_of[k] {
                same += 1;
            }
        }
    }
    Ok(RetrievalResult {
        instances: ids.len(),
        recall_at_1: hits as f64 / ids.len() as f64,
        same_class_at_incorrect: (misses > 0).then(|| same as f64 / misses as f64),
    })
}

/// Adds isotropic Gaussian noise of standard deviation `sigma` to every center.
pub fn perturb_centers(scene: &GaussianScene, sigma: f64, seed: u64) -> Result<GaussianScene> {
    let normal =
        Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise sigma {sigma}: {e}")))?;
    let mut rng = rng_for(seed, 0x7e);
    let mut out = scene.clone();
    for g in &mut out.gaussians {
        g.center += Vector3::from_fn(|_, _| normal.sample(&mut rng));
    }
    out.recompute_bounds();
    Ok(out)
}

/// Instance retrieval from clean to center-perturbed inputs using encoder features.
pub fn instance_retrieval(
    model: &DistillModel,
    scene: &GaussianScene,
    noise_sigma: f64,
    seed: u64,
) -> Result<RetrievalResult> {
    let instances = scene
        .instance_labels
        .as_deref()
        .ok_or_else(|| Error::Precondition("scene has no instance labels".into()))?;
    let semantic = semantic_labels(scene)?;
    let clean = model.encode(scene)?;
    let noisy = if noise_sigma == 0.0 {
        clean.clone()
    } else {
        model.encode(&perturb_centers(scene, noise_sigma, seed)?)?
    };
    retrieve_instances(&clean, &noisy, instances, semantic)
}
